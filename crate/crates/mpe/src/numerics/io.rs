//! Tensor serialization: a one-line header `MPET v1 dims=<d0,d1,...>`
//! followed by the values as little-endian 64-bit floats.

use std::io::{BufRead, Write};

use crate::error::NumericError;
use crate::numerics::tensor::Tensor;

/// Refuse to allocate tensors beyond this many elements when reading.
const MAX_TENSOR_ELEMS: usize = 1 << 24;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<(), NumericError> {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "MPET v1 dims={}", dims.join(","))?;
    for v in t.data() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Parse the dims list of a header such as `MPET v1 dims=3,4`.
fn parse_dims(header: &str) -> Result<Vec<usize>, NumericError> {
    let rest = header
        .strip_prefix("MPET v1 dims=")
        .ok_or_else(|| NumericError::Format(format!("bad header `{header}`")))?;
    let rest = rest.trim_end();
    if rest.is_empty() {
        return Ok(vec![]);
    }
    rest.split(',')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| NumericError::Format(format!("bad dimension `{d}`")))
        })
        .collect()
}

pub fn read_tensor<R: BufRead>(r: &mut R) -> Result<Tensor, NumericError> {
    let mut header = String::new();
    let n = r.read_line(&mut header)?;
    if n == 0 {
        return Err(NumericError::Format("empty input".into()));
    }
    let dims = parse_dims(header.trim_end_matches('\n'))?;
    let mut count: usize = 1;
    for d in &dims {
        count = count
            .checked_mul(*d)
            .ok_or_else(|| NumericError::Format("dimension overflow".into()))?;
    }
    if count > MAX_TENSOR_ELEMS {
        return Err(NumericError::Format(format!(
            "tensor of {count} elements exceeds the {MAX_TENSOR_ELEMS} limit"
        )));
    }
    let mut data = Vec::with_capacity(count.min(1 << 16));
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)
            .map_err(|_| NumericError::Format("truncated tensor payload".into()))?;
        let v = f64::from_bits(u64::from_le_bytes(buf));
        if !v.is_finite() {
            return Err(NumericError::Format("non-finite value in tensor".into()));
        }
        data.push(v);
    }
    Tensor::new(dims, data)
}

/// Parse a tensor from an in-memory buffer (the fuzzing entry point).
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor, NumericError> {
    let mut cursor = std::io::Cursor::new(bytes);
    read_tensor(&mut cursor)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("in-memory write");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_matrix() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 42.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert!(bytes.starts_with(b"MPET v1 dims=2,3\n"));
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn round_trip_scalar() {
        let t = Tensor::scalar(-7.25);
        let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let mut bytes = tensor_to_bytes(&t);
        bytes.truncate(bytes.len() - 4);
        assert!(tensor_from_bytes(&bytes).is_err());
    }

    #[test]
    fn huge_dims_are_rejected() {
        let bytes = b"MPET v1 dims=999999999,999999999\n";
        assert!(tensor_from_bytes(bytes).is_err());
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let mut bytes = b"MPET v1 dims=1\n".to_vec();
        bytes.extend_from_slice(&f64::NAN.to_bits().to_le_bytes());
        assert!(tensor_from_bytes(&bytes).is_err());
    }
}
