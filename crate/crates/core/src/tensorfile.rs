//! Flat named-tensor container.
//!
//! The on-disk model format shared by the audio front-end, the phoneme
//! extractor and the threshold predictor: a version header followed by
//! (name, shape, row-major float32 payload) records. Model pushes identify
//! payloads by the FNV-1a hash of the serialized bytes.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::rng::fnv1a64;

const MAGIC: &[u8; 4] = b"NTNS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("truncated container")]
    Truncated,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// An ordered bundle of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: BTreeMap<String, NamedTensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not cover data"
        );
        self.tensors
            .insert(name.to_string(), NamedTensor { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor, TensorFileError> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorFileError::Missing(name.to_string()))
    }

    /// Fetch a tensor and verify its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f32], TensorFileError> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(TensorFileError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(&t.data)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorFileError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], TensorFileError> {
            if *pos + n > bytes.len() {
                return Err(TensorFileError::Truncated);
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(TensorFileError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(TensorFileError::BadVersion(version));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| TensorFileError::Truncated)?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors
                .insert(name.clone(), NamedTensor { shape, data })
                .is_some()
            {
                return Err(TensorFileError::Duplicate(name));
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorFileError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TensorFileError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of the serialized container, as a hex string.
    pub fn content_hash(&self) -> String {
        format!("{:016x}", fnv1a64(&self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_tensors() {
        let mut c = TensorContainer::new();
        c.insert("w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        c.insert("b", vec![3], vec![-0.5, 0.0, 0.5]);
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.content_hash(), back.content_hash());
    }

    #[test]
    fn hash_changes_with_contents() {
        let mut a = TensorContainer::new();
        a.insert("w", vec![1], vec![1.0]);
        let mut b = TensorContainer::new();
        b.insert("w", vec![1], vec![1.5]);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn truncated_container_is_rejected() {
        let mut c = TensorContainer::new();
        c.insert("w", vec![4], vec![0.0; 4]);
        let bytes = c.to_bytes();
        let err = TensorContainer::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, TensorFileError::Truncated));
    }
}
