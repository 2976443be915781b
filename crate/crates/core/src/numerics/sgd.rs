use std::collections::BTreeMap;

use super::Tensor;
use crate::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {learning_rate} must be finite and >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter and zeroes its gradient.
    ///
    /// All gradients are checked before any parameter is touched, so a
    /// missing gradient leaves the parameters unchanged.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter `{name}` has no gradient")));
        }
        for (name, p) in params {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; p.numel()]);
            if v.len() != p.numel() {
                return Err(Error::dim("sgd_step", p.shape(), &[v.len()]));
            }
            let g = p.grad().expect("checked above").to_vec();
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.learning_rate;
            p.data_mut().iter_mut().zip(v.iter()).for_each(|(pi, vi)| *pi -= lr * vi);
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut p = Tensor::full([1], value).with_grad();
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 2.0);
        let mut sgd = SgdState::new(0.1, 0.0).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = param(1.5, 3.0);
        SgdState::new(0.0, 0.9).unwrap().step([("p", &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = param(0.0, 1.0);
        let mut sgd = SgdState::new(1.0, 0.9).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        assert!((p.data()[0] + 1.0).abs() < 1e-15);
        p.accumulate_grad(&[1.0]).unwrap();
        sgd.step([("p", &mut p)]).unwrap();
        assert!((p.data()[0] + 2.9).abs() < 1e-12);
        assert_eq!(sgd.velocity("p").unwrap().len(), 1);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = Tensor::full([1], 1.0);
        let err = SgdState::new(0.1, 0.0).unwrap().step([("w", &mut p)]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(p.data(), &[1.0]);
    }
}
