//! Precomputed-embedding files: fixed contextual embeddings produced by
//! an external encoder, served by instance key.
//!
//! Layout: a header line `MPEEMB v1 dim=<d> count=<n>`, then `n` blocks
//! of `<key-len u32> <key bytes> <rows u32>` followed by `rows * d`
//! little-endian 64-bit floats. Keys are [`instance_key`] values: the
//! FNV-1a 64-bit hash (hex) of the sentence tokens joined by `\x1f`.

use std::io::{BufRead, Write};

use crate::error::DataError;
use crate::numerics::Tensor;

pub const EMBEDDING_MAGIC: &str = "MPEEMB v1";

const MAX_ROWS: u32 = 1 << 16;
const MAX_KEY_LEN: u32 = 1 << 12;

/// Stable content key for a sentence: hash of its tokens only, so the
/// same sentence shares one embedding matrix regardless of annotation.
pub fn instance_key(tokens: &[String]) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 {
            hash ^= 0x1f;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        for b in tok.as_bytes() {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    format!("{hash:016x}")
}

/// Fixed (non-trainable) per-sentence embedding matrices.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    by_key: std::collections::HashMap<String, Tensor>,
}

impl EmbeddingStore {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn get(&self, key: &str) -> Result<&Tensor, DataError> {
        self.by_key
            .get(key)
            .ok_or_else(|| DataError::validation("embedding store", format!("no embedding for id `{key}`")))
    }

    /// Enforce that the file width matches the model width.
    pub fn check_dim(&self, expected: usize) -> Result<(), DataError> {
        if self.dim != expected {
            return Err(DataError::validation(
                "embedding store",
                format!("file width {} but configured width {expected}", self.dim),
            ));
        }
        Ok(())
    }
}

pub fn write_embeddings<W: Write>(
    w: &mut W,
    dim: usize,
    entries: &[(String, Tensor)],
) -> Result<(), DataError> {
    writeln!(w, "{EMBEDDING_MAGIC} dim={dim} count={}", entries.len())?;
    for (key, tensor) in entries {
        if tensor.rank() != 2 || tensor.cols() != dim {
            return Err(DataError::Invalid(format!(
                "embedding for `{key}` has shape {:?}, expected (rows, {dim})",
                tensor.shape()
            )));
        }
        let key_bytes = key.as_bytes();
        w.write_all(&(key_bytes.len() as u32).to_le_bytes())?;
        w.write_all(key_bytes)?;
        w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
        for v in tensor.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_embeddings<R: BufRead>(r: &mut R) -> Result<EmbeddingStore, DataError> {
    let mut header = String::new();
    if r.read_line(&mut header)? == 0 {
        return Err(DataError::parse("embedding file", "empty input"));
    }
    let header = header.trim_end_matches('\n');
    let rest = header
        .strip_prefix(EMBEDDING_MAGIC)
        .ok_or_else(|| DataError::parse("embedding file", format!("bad header `{header}`")))?;
    let mut dim: Option<usize> = None;
    let mut count: Option<usize> = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("dim=") {
            dim = Some(v.parse().map_err(|_| {
                DataError::parse("embedding file", format!("bad dim `{v}`"))
            })?);
        } else if let Some(v) = part.strip_prefix("count=") {
            count = Some(v.parse().map_err(|_| {
                DataError::parse("embedding file", format!("bad count `{v}`"))
            })?);
        } else {
            return Err(DataError::parse(
                "embedding file",
                format!("unexpected header field `{part}`"),
            ));
        }
    }
    let dim = dim.ok_or_else(|| DataError::parse("embedding file", "missing dim"))?;
    let count = count.ok_or_else(|| DataError::parse("embedding file", "missing count"))?;
    if dim == 0 || dim > 1 << 14 {
        return Err(DataError::parse("embedding file", format!("bad dim {dim}")));
    }

    let mut by_key = std::collections::HashMap::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let locator = format!("embedding block {i}");
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)
            .map_err(|_| DataError::parse(&locator, "truncated key length"))?;
        let key_len = u32::from_le_bytes(len4);
        if key_len == 0 || key_len > MAX_KEY_LEN {
            return Err(DataError::parse(&locator, format!("bad key length {key_len}")));
        }
        let mut key_bytes = vec![0u8; key_len as usize];
        r.read_exact(&mut key_bytes)
            .map_err(|_| DataError::parse(&locator, "truncated key"))?;
        let key = String::from_utf8(key_bytes)
            .map_err(|_| DataError::parse(&locator, "key is not utf-8"))?;
        r.read_exact(&mut len4)
            .map_err(|_| DataError::parse(&locator, "truncated row count"))?;
        let rows = u32::from_le_bytes(len4);
        if rows == 0 || rows > MAX_ROWS {
            return Err(DataError::parse(&locator, format!("bad row count {rows}")));
        }
        let n = rows as usize * dim;
        let mut data = Vec::with_capacity(n.min(1 << 20));
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| DataError::parse(&locator, "truncated payload"))?;
            let v = f64::from_bits(u64::from_le_bytes(buf));
            if !v.is_finite() {
                return Err(DataError::parse(&locator, "non-finite value"));
            }
            data.push(v);
        }
        let tensor = Tensor::new(vec![rows as usize, dim], data)
            .map_err(|e| DataError::parse(&locator, e.to_string()))?;
        if by_key.insert(key.clone(), tensor).is_some() {
            return Err(DataError::parse(&locator, format!("duplicate key `{key}`")));
        }
    }
    Ok(EmbeddingStore { dim, by_key })
}

/// Fuzzing entry point for the embedding file format.
pub fn parse_embeddings(bytes: &[u8]) -> Result<EmbeddingStore, DataError> {
    read_embeddings(&mut std::io::Cursor::new(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> Vec<(String, Tensor)> {
        (0..3)
            .map(|i| {
                let tokens = vec![format!("tok{i}"), "x".to_string()];
                let key = instance_key(&tokens);
                let t = Tensor::new(
                    vec![4, 2],
                    (0..8).map(|j| (i * 10 + j) as f64).collect(),
                )
                .unwrap();
                (key, t)
            })
            .collect()
    }

    #[test]
    fn round_trip() {
        let entries = toy_store();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &entries).unwrap();
        let store = parse_embeddings(&buf).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.dim(), 2);
        for (key, tensor) in &entries {
            assert_eq!(store.get(key).unwrap(), tensor);
        }
    }

    #[test]
    fn absent_id_is_an_error_naming_the_id() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &toy_store()).unwrap();
        let store = parse_embeddings(&buf).unwrap();
        let err = store.get("deadbeefdeadbeef").unwrap_err();
        assert!(err.to_string().contains("deadbeefdeadbeef"), "{err}");
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &toy_store()).unwrap();
        let store = parse_embeddings(&buf).unwrap();
        assert!(store.check_dim(2).is_ok());
        assert!(store.check_dim(32).is_err());
    }

    #[test]
    fn truncated_block_is_an_error() {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, 2, &toy_store()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(parse_embeddings(&buf).is_err());
    }

    #[test]
    fn instance_key_depends_on_token_boundaries() {
        let a = instance_key(&["ab".into(), "c".into()]);
        let b = instance_key(&["a".into(), "bc".into()]);
        assert_ne!(a, b);
    }
}
