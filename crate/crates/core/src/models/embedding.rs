use crate::numerics::Tensor;
use crate::{Error, Result};

/// Sinusoidal embedding: component `2k` is `sin(t·ωₖ)`, `2k+1` is
/// `cos(t·ωₖ)`, with `ωₖ = 10000^(−2k/dim)`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Contract(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let mut data = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let omega = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        data.push((t * omega).sin());
        data.push((t * omega).cos());
    }
    Tensor::new([dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_step_alternates() {
        let e = time_embedding(0.0, 8).unwrap();
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn dim_four_at_one() {
        let e = time_embedding(1.0, 4).unwrap();
        let expect = [0.841_470_984_807_896_5, 0.540_302_305_868_139_8, 0.009_999_833_334_166_666, 0.999_950_000_416_665_3];
        for (a, b) in e.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn bounded_and_rejects_odd() {
        for t in [1.0, 17.0, 399.0, 1e4] {
            assert!(time_embedding(t, 64).unwrap().data().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(matches!(time_embedding(1.0, 5), Err(Error::Contract(_))));
    }
}
