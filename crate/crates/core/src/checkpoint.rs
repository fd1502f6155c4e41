//! Binary container for parameters, datasets, and adversarial archives.
//!
//! Layout: 8-byte magic `ATNLAB01`, a little-endian u32 header length, a
//! JSON header (format version, arch descriptor, tensor directory with
//! names/shapes/byte offsets, training metadata), then raw little-endian
//! f32 blobs in directory order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATNLAB01";
pub const FORMAT_VERSION: u32 = 1;

/// What the container holds and how to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchDescriptor {
    Classifier {
        arch: String,
        num_classes: usize,
        input_shape: Vec<usize>,
    },
    Generator {
        epsilon_train: f32,
        input_shape: Vec<usize>,
    },
    Filter {
        input_shape: Vec<usize>,
    },
    Dataset {
        num_classes: usize,
        shape: Vec<usize>,
    },
    /// Adversarial image archive: clean images, adversarial images, and
    /// the per-image budget actually used.
    AdvArchive {
        attack: String,
        targets: Vec<String>,
        shape: Vec<usize>,
    },
}

impl ArchDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            ArchDescriptor::Classifier { .. } => "classifier",
            ArchDescriptor::Generator { .. } => "generator",
            ArchDescriptor::Filter { .. } => "filter",
            ArchDescriptor::Dataset { .. } => "dataset",
            ArchDescriptor::AdvArchive { .. } => "adv_archive",
        }
    }
}

/// Provenance carried alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    descriptor: ArchDescriptor,
    directory: Vec<DirEntry>,
    metadata: TrainMeta,
}

/// A parsed container: descriptor, named tensors in directory order,
/// and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub descriptor: ArchDescriptor,
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: TrainMeta,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut directory = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let byte_len = t.len() * 4;
            directory.push(DirEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                byte_len,
            });
            offset += byte_len;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            descriptor: self.descriptor.clone(),
            directory,
            metadata: self.metadata.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(8 + 4 + header_json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
        if bytes.len() < 12 {
            return Err(Error::CorruptHeader(format!(
                "{origin}: file too short ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptHeader(format!(
                "{origin}: bad magic {:?}",
                &bytes[..8]
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(Error::CorruptHeader(format!(
                "{origin}: header length {header_len} exceeds file size"
            )));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| Error::Json {
                context: format!("{origin} header"),
                source: e,
            })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let blob = &bytes[12 + header_len..];
        let mut tensors = Vec::with_capacity(header.directory.len());
        for entry in &header.directory {
            let end = entry.offset.checked_add(entry.byte_len).ok_or_else(|| {
                Error::CorruptHeader(format!("{origin}: directory offset overflow"))
            })?;
            if end > blob.len() {
                return Err(Error::TruncatedBlob {
                    name: entry.name.clone(),
                    needed: end,
                    available: blob.len(),
                });
            }
            let expect: usize = entry.shape.iter().product::<usize>() * 4;
            if expect != entry.byte_len {
                return Err(Error::CorruptHeader(format!(
                    "{origin}: tensor '{}' shape {:?} disagrees with byte length {}",
                    entry.name, entry.shape, entry.byte_len
                )));
            }
            let data: Vec<f32> = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        }
        Ok(Checkpoint {
            descriptor: header.descriptor,
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            descriptor: ArchDescriptor::Filter {
                input_shape: vec![1, 8, 8],
            },
            tensors: vec![
                (
                    "a.weight".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
                ),
                ("a.bias".into(), Tensor::new(vec![2], vec![0.5, -0.5]).unwrap()),
            ],
            metadata: TrainMeta {
                seed: Some(7),
                epochs: Some(3),
                dataset_id: Some("abc".into()),
            },
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.descriptor, ckpt.descriptor);
        assert_eq!(back.metadata, ckpt.metadata);
        for ((n1, t1), (n2, t2)) in ckpt.tensors.iter().zip(back.tensors.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let raw1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let raw2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(raw1, raw2);
        }
        // re-serialization reproduces identical bytes
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn wrong_magic_is_corrupt_header() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, "mem").unwrap_err();
        assert!(matches!(err, Error::CorruptHeader(_)), "{err:?}");
    }

    #[test]
    fn version_mismatch_is_detected() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut text = String::from_utf8(bytes[12..12 + header_len].to_vec()).unwrap();
        text = text.replace("\"format_version\":1", "\"format_version\":9");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&bytes[12 + header_len..]);
        let err = Checkpoint::from_bytes(&out, "mem").unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 9, .. }), "{err:?}");
    }

    #[test]
    fn truncated_blob_is_detected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 2], "mem").unwrap_err();
        assert!(matches!(err, Error::TruncatedBlob { .. }), "{err:?}");
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }
}
