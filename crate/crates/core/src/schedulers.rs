//! Confidence-threshold schedules for pseudo-labeling.
//!
//! The sinusoidal decay schedule lowers the acceptance threshold linearly
//! from `t_f` to `t_f·(1 − alpha)` over the run and superimposes a bounded
//! sine fluctuation:
//!
//! ```text
//! T_s(i) = clamp₀¹( t_f·(i_max − i·alpha)/i_max + beta·sin(omega·i) )
//! ```
//!
//! Three comparison schedules share the interface: a fixed threshold, the
//! same linear decay without fluctuation, and a self-adaptive ascending
//! threshold (EMA of the batch's mean max-confidence).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_T_F: f64 = 0.95;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_OMEGA: f64 = 1.0;
pub const DEFAULT_ADAPTIVE_MOMENTUM: f64 = 0.999;

/// Position within a run: iteration `i` of `i_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationClock {
    i: usize,
    i_max: usize,
}

impl IterationClock {
    pub fn new(i: usize, i_max: usize) -> Result<Self> {
        if i_max == 0 {
            return Err(Error::Contract("i_max must be positive".into()));
        }
        if i > i_max {
            return Err(Error::Contract(format!("iteration {i} beyond i_max {i_max}")));
        }
        Ok(Self { i, i_max })
    }

    pub fn i(&self) -> usize {
        self.i
    }

    pub fn i_max(&self) -> usize {
        self.i_max
    }

    /// Fraction of the run elapsed, exactly 0 at the start and 1 at the end.
    pub fn progress(&self) -> f64 {
        self.i as f64 / self.i_max as f64
    }
}

/// Global self-adaptive threshold: `tau ← m·tau + (1 − m)·mean(max_prob)`,
/// starting from `1/C`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveThreshold {
    pub momentum: f64,
    pub tau: f64,
    pub num_classes: usize,
}

impl AdaptiveThreshold {
    pub fn new(momentum: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("adaptive momentum {momentum} outside [0, 1)")));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes = {num_classes} < 2")));
        }
        Ok(Self {
            momentum,
            tau: 1.0 / num_classes as f64,
            num_classes,
        })
    }

    pub fn update(&mut self, batch_max_probs: &[f64]) -> Result<f64> {
        if batch_max_probs.is_empty() {
            return Err(Error::Contract("adaptive update on an empty batch".into()));
        }
        if let Some(p) = batch_max_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("confidence {p} outside [0, 1]")));
        }
        let mean = batch_max_probs.iter().sum::<f64>() / batch_max_probs.len() as f64;
        self.tau = self.momentum * self.tau + (1.0 - self.momentum) * mean;
        Ok(self.tau)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdSchedule {
    Fixed {
        t_f: f64,
    },
    LinearDecay {
        t_f: f64,
        alpha: f64,
    },
    SinusoidalDecay {
        t_f: f64,
        alpha: f64,
        beta: f64,
        omega: f64,
    },
    AdaptiveAscent(AdaptiveThreshold),
}

impl ThresholdSchedule {
    /// Sinusoidal decay with the default `t_f`, `alpha`, `beta`, `omega`.
    pub fn sinusoidal() -> Self {
        ThresholdSchedule::SinusoidalDecay {
            t_f: DEFAULT_T_F,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            omega: DEFAULT_OMEGA,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ThresholdSchedule::Fixed { .. } => "fixed",
            ThresholdSchedule::LinearDecay { .. } => "linear_decay",
            ThresholdSchedule::SinusoidalDecay { .. } => "sinusoidal_decay",
            ThresholdSchedule::AdaptiveAscent(_) => "adaptive_ascent",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside (0, 1]")))
            }
        };
        match *self {
            ThresholdSchedule::Fixed { t_f } => unit("t_f", t_f),
            ThresholdSchedule::LinearDecay { t_f, alpha } => {
                unit("t_f", t_f)?;
                unit("alpha", alpha)
            }
            ThresholdSchedule::SinusoidalDecay {
                t_f,
                alpha,
                beta,
                omega,
            } => {
                unit("t_f", t_f)?;
                unit("alpha", alpha)?;
                if !(beta >= 0.0 && beta.is_finite()) {
                    return Err(Error::Config(format!("beta = {beta} must be >= 0")));
                }
                if !(omega > 0.0 && omega.is_finite()) {
                    return Err(Error::Config(format!("omega = {omega} must be > 0")));
                }
                Ok(())
            }
            ThresholdSchedule::AdaptiveAscent(ref a) => {
                AdaptiveThreshold::new(a.momentum, a.num_classes).map(|_| ())
            }
        }
    }

    /// The decaying part `t_f·(1 − alpha·i/i_max)` (equal to `t_f` for the
    /// fixed schedule).
    pub fn linear_component(&self, clock: IterationClock) -> Result<f64> {
        match *self {
            ThresholdSchedule::Fixed { t_f } => Ok(t_f),
            ThresholdSchedule::LinearDecay { t_f, alpha }
            | ThresholdSchedule::SinusoidalDecay { t_f, alpha, .. } => {
                Ok(t_f * (1.0 - alpha * clock.progress()))
            }
            ThresholdSchedule::AdaptiveAscent(_) => Err(stateful()),
        }
    }

    /// Threshold of a stateless schedule at `clock`, clamped to `[0, 1]`.
    pub fn threshold_at(&self, clock: IterationClock) -> Result<f64> {
        let linear = self.linear_component(clock)?;
        let wave = match *self {
            ThresholdSchedule::SinusoidalDecay { beta, omega, .. } => {
                beta * (omega * clock.i() as f64).sin()
            }
            _ => 0.0,
        };
        Ok((linear + wave).clamp(0.0, 1.0))
    }

    /// Unclamped band `(linear − beta, linear + beta)` that always contains
    /// [`threshold_at`](Self::threshold_at).
    pub fn envelope(&self, clock: IterationClock) -> Result<(f64, f64)> {
        let linear = self.linear_component(clock)?;
        let beta = match *self {
            ThresholdSchedule::SinusoidalDecay { beta, .. } => beta,
            _ => 0.0,
        };
        Ok((linear - beta, linear + beta))
    }

    /// Threshold to gate the current batch. Stateless schedules read the
    /// clock; the adaptive schedule first absorbs the batch's confidences.
    pub fn threshold_for_batch(&mut self, clock: IterationClock, batch_max_probs: &[f64]) -> Result<f64> {
        match self {
            ThresholdSchedule::AdaptiveAscent(a) => a.update(batch_max_probs),
            _ => self.threshold_at(clock),
        }
    }

    /// Threshold the schedule would report without consuming a batch.
    pub fn current(&self, clock: IterationClock) -> Result<f64> {
        match self {
            ThresholdSchedule::AdaptiveAscent(a) => Ok(a.tau),
            _ => self.threshold_at(clock),
        }
    }
}

fn stateful() -> Error {
    Error::Contract("adaptive_ascent is stateful; use adaptive_update / threshold_for_batch".into())
}

fn d_t_f() -> f64 {
    DEFAULT_T_F
}
fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn d_beta() -> f64 {
    DEFAULT_BETA
}
fn d_omega() -> f64 {
    DEFAULT_OMEGA
}
fn d_momentum() -> f64 {
    DEFAULT_ADAPTIVE_MOMENTUM
}

/// JSON form: `{"kind": "...", "t_f", "alpha", "beta", "omega", "momentum"}`.
/// Keys a variant does not use are ignored; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Fixed {
        #[serde(default = "d_t_f")]
        t_f: f64,
    },
    LinearDecay {
        #[serde(default = "d_t_f")]
        t_f: f64,
        #[serde(default = "d_alpha")]
        alpha: f64,
    },
    SinusoidalDecay {
        #[serde(default = "d_t_f")]
        t_f: f64,
        #[serde(default = "d_alpha")]
        alpha: f64,
        #[serde(default = "d_beta")]
        beta: f64,
        #[serde(default = "d_omega")]
        omega: f64,
    },
    AdaptiveAscent {
        #[serde(default = "d_momentum")]
        momentum: f64,
    },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::SinusoidalDecay {
            t_f: DEFAULT_T_F,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            omega: DEFAULT_OMEGA,
        }
    }
}

impl ScheduleConfig {
    pub fn fixed() -> Self {
        ScheduleConfig::Fixed { t_f: DEFAULT_T_F }
    }

    pub fn linear_decay() -> Self {
        ScheduleConfig::LinearDecay {
            t_f: DEFAULT_T_F,
            alpha: DEFAULT_ALPHA,
        }
    }

    pub fn adaptive_ascent() -> Self {
        ScheduleConfig::AdaptiveAscent {
            momentum: DEFAULT_ADAPTIVE_MOMENTUM,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ScheduleConfig::Fixed { .. } => "fixed",
            ScheduleConfig::LinearDecay { .. } => "linear_decay",
            ScheduleConfig::SinusoidalDecay { .. } => "sinusoidal_decay",
            ScheduleConfig::AdaptiveAscent { .. } => "adaptive_ascent",
        }
    }

    /// Fresh runtime schedule (adaptive state starts at `1/num_classes`).
    pub fn build(&self, num_classes: usize) -> Result<ThresholdSchedule> {
        let s = match *self {
            ScheduleConfig::Fixed { t_f } => ThresholdSchedule::Fixed { t_f },
            ScheduleConfig::LinearDecay { t_f, alpha } => ThresholdSchedule::LinearDecay { t_f, alpha },
            ScheduleConfig::SinusoidalDecay {
                t_f,
                alpha,
                beta,
                omega,
            } => ThresholdSchedule::SinusoidalDecay {
                t_f,
                alpha,
                beta,
                omega,
            },
            ScheduleConfig::AdaptiveAscent { momentum } => {
                ThresholdSchedule::AdaptiveAscent(AdaptiveThreshold::new(momentum, num_classes)?)
            }
        };
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn clock(i: usize) -> IterationClock {
        IterationClock::new(i, 1000).unwrap()
    }

    #[test]
    fn sinusoidal_examples() {
        let s = ThresholdSchedule::sinusoidal();
        assert_eq!(s.threshold_at(clock(0)).unwrap(), 0.95);
        // high-precision evaluations of the closed form
        assert!((s.threshold_at(clock(1000)).unwrap() - 0.516_343_977_026_600_1).abs() < 1e-12);
        assert!((s.threshold_at(clock(500)).unwrap() - 0.689_111_409_733_876_2).abs() < 1e-12);
        assert_eq!(s.linear_component(clock(1000)).unwrap(), 0.95 * (1.0 - 0.5));
    }

    #[test]
    fn fixed_is_constant() {
        let s = ThresholdSchedule::Fixed { t_f: 0.95 };
        for i in [0, 1, 377, 1000] {
            assert_eq!(s.threshold_at(clock(i)).unwrap(), 0.95);
        }
    }

    #[test]
    fn adaptive_rejected_by_stateless_entry_points() {
        let s = ScheduleConfig::adaptive_ascent().build(3).unwrap();
        assert!(matches!(s.threshold_at(clock(3)), Err(Error::Contract(_))));
        assert!(s.envelope(clock(3)).is_err());
    }

    #[test]
    fn adaptive_examples() {
        let mut a = AdaptiveThreshold::new(0.9, 3).unwrap();
        assert_eq!(a.tau, 1.0 / 3.0);
        for _ in 0..100 {
            a.update(&[0.9, 0.9]).unwrap();
        }
        // |tau − c| = 0.9^100·|1/3 − 0.9|
        assert!((a.tau - 0.9).abs() < 1e-3);
        assert!((a.tau - 0.9).abs() < 0.9f64.powi(100) * (0.9 - 1.0 / 3.0) + 1e-12);

        let mut b = AdaptiveThreshold::new(0.0, 3).unwrap();
        assert_eq!(b.update(&[0.5, 0.7]).unwrap(), 0.6);
        assert!(b.update(&[]).is_err());
        assert!(b.update(&[1.2]).is_err());
    }

    #[test]
    fn envelope_examples() {
        let s = ThresholdSchedule::sinusoidal();
        let (lo, hi) = s.envelope(clock(0)).unwrap();
        assert!((lo - 0.90).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
        let flat = ThresholdSchedule::SinusoidalDecay {
            t_f: 0.95,
            alpha: 0.5,
            beta: 0.0,
            omega: 1.0,
        };
        for i in [0, 10, 999] {
            let (lo, hi) = flat.envelope(clock(i)).unwrap();
            assert_eq!(lo, hi);
            assert_eq!(lo, flat.threshold_at(clock(i)).unwrap());
        }
    }

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c: ScheduleConfig = serde_json::from_str(r#"{"kind":"sinusoidal_decay"}"#).unwrap();
        assert_eq!(c, ScheduleConfig::default());
        let c: ScheduleConfig =
            serde_json::from_str(r#"{"kind":"fixed","t_f":0.9,"alpha":0.3,"momentum":0.5}"#).unwrap();
        assert_eq!(c, ScheduleConfig::Fixed { t_f: 0.9 });
        let c: ScheduleConfig = serde_json::from_str(r#"{"kind":"adaptive_ascent"}"#).unwrap();
        assert_eq!(c, ScheduleConfig::adaptive_ascent());
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"kind":"cosine"}"#).is_err());
        assert!(ScheduleConfig::Fixed { t_f: 1.5 }.build(3).is_err());
        assert!(ScheduleConfig::AdaptiveAscent { momentum: 1.0 }.build(3).is_err());
    }

    #[test]
    fn clock_bounds() {
        assert!(IterationClock::new(0, 0).is_err());
        assert!(IterationClock::new(11, 10).is_err());
        assert_eq!(IterationClock::new(10, 10).unwrap().progress(), 1.0);
    }

    proptest! {
        #[test]
        fn decay_invariants(
            t_f in 0.05f64..=1.0,
            alpha in 0.01f64..=1.0,
            beta in 0.0f64..0.2,
            omega in 0.01f64..3.0,
            i_max in 1usize..5000,
            frac in 0.0f64..1.0,
        ) {
            let i = ((i_max as f64) * frac) as usize;
            let c = IterationClock::new(i, i_max).unwrap();
            let sin = ThresholdSchedule::SinusoidalDecay { t_f, alpha, beta, omega };
            let lin = ThresholdSchedule::LinearDecay { t_f, alpha };
            let fixed = ThresholdSchedule::Fixed { t_f };
            let ts = sin.threshold_at(c).unwrap();
            prop_assert!((0.0..=1.0).contains(&ts));
            prop_assert!((ts - lin.threshold_at(c).unwrap()).abs() <= beta + 1e-15);
            let (lo, hi) = sin.envelope(c).unwrap();
            prop_assert!(lo <= ts && ts <= hi);
            if i < i_max {
                let next = IterationClock::new(i + 1, i_max).unwrap();
                prop_assert!(sin.linear_component(next).unwrap() <= sin.linear_component(c).unwrap());
            }
            let zero = IterationClock::new(0, i_max).unwrap();
            for s in [&sin, &lin, &fixed] {
                prop_assert_eq!(s.threshold_at(zero).unwrap(), t_f.min(1.0));
            }
            let end = IterationClock::new(i_max, i_max).unwrap();
            prop_assert_eq!(sin.linear_component(end).unwrap(), t_f * (1.0 - alpha));
        }

        #[test]
        fn adaptive_monotone_in_batch_mean(
            momentum in 0.0f64..0.999,
            tau0 in 0.0f64..1.0,
            lo in 0.0f64..1.0,
            delta in 0.0f64..1.0,
        ) {
            let hi = (lo + delta).min(1.0);
            let mut a = AdaptiveThreshold { momentum, tau: tau0, num_classes: 3 };
            let mut b = a.clone();
            prop_assert!(a.update(&[lo]).unwrap() <= b.update(&[hi]).unwrap());
        }
    }
}
