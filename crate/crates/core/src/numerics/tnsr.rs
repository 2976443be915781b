//! `.tnsr` files: one JSON header line followed by a little-endian `f32`
//! payload in row-major order.
//!
//! ```text
//! {"shape":[2,3],"dtype":"f32","order":"row-major"}\n<24 bytes>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

/// Serializes `t`, narrowing to `f32`. Values that are not finite or do not
/// fit in `f32` are rejected.
pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let header = Header {
        shape: t.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(4 * t.numel());
    for (i, &v) in t.data().iter().enumerate() {
        let narrow = v as f32;
        if !v.is_finite() || !narrow.is_finite() {
            return Err(Error::Format {
                what: "tensor payload",
                detail: format!("element {i} = {v} is not representable as f32"),
            });
        }
        out.extend_from_slice(&narrow.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: String| Error::Format {
        what: ".tnsr file",
        detail,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(bad(format!(
            "unsupported dtype/order {}/{}",
            header.dtype, header.order
        )));
    }
    let numel: usize = header.shape.iter().product();
    let payload = &bytes[nl + 1..];
    if payload.len() != 4 * numel {
        return Err(bad(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            4 * numel
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunk of 4"));
        if !v.is_finite() {
            return Err(bad(format!("element {i} is not finite")));
        }
        data.push(v as f64);
    }
    Tensor::new(header.shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let t = Tensor::new([2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = to_bytes(&t).unwrap();
        let expected = b"{\"shape\":[2,1],\"dtype\":\"f32\",\"order\":\"row-major\"}\n";
        assert_eq!(&bytes[..expected.len()], expected);
        assert_eq!(&bytes[expected.len()..expected.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), expected.len() + 8);
    }

    #[test]
    fn rejects_out_of_range_and_truncated() {
        let big = Tensor::new([1], vec![1e300]).unwrap();
        assert!(to_bytes(&big).is_err());
        let nan = Tensor::new([1], vec![f64::NAN]).unwrap();
        assert!(to_bytes(&nan).is_err());
        let mut bytes = to_bytes(&Tensor::zeros([3])).unwrap();
        bytes.pop();
        assert!(from_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless_at_f32(values in prop::collection::vec(-1e6f32..1e6f32, 0..64)) {
            let t = Tensor::new([values.len()], values.iter().map(|&v| v as f64).collect()).unwrap();
            let back = from_bytes(&to_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
