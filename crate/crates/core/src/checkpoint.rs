//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, a little-endian u32 header length, a JSON header
//! (format version, dimensions, vocab hash, architecture, free-form metadata,
//! and a name-indexed tensor table with offsets), then the raw parameter
//! blobs as little-endian IEEE-754 float32. Save/load round-trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{real, ParamGroup, Real};
use crate::teacher::{TeacherArch, TeacherModel, Tokenizer};

const MAGIC: &[u8; 8] = b"DIPTCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob section.
    pub offset: u64,
    /// Element count.
    pub len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub d_t: usize,
    pub d_e: usize,
    pub vocab_hash: String,
    pub arch: Value,
    pub meta: Map<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

/// A parsed checkpoint: header plus named f32 tensors in table order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(
        kind: &str,
        d_t: usize,
        d_e: usize,
        vocab_hash: String,
        arch: Value,
        meta: Map<String, Value>,
        tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    ) -> Self {
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                    len: data.len() as u64,
                };
                offset += (data.len() * 4) as u64;
                e
            })
            .collect();
        Checkpoint {
            header: Header {
                format_version: FORMAT_VERSION,
                kind: kind.to_string(),
                d_t,
                d_e,
                vocab_hash,
                arch,
                meta,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut bytes = Vec::with_capacity(header.len() + 64);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, _, data) in &self.tensors {
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint {
                field: "magic".into(),
                reason: format!("{} is not a checkpoint file", path.display()),
            });
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + header_len {
            return Err(Error::Checkpoint {
                field: "header".into(),
                reason: "file truncated inside header".into(),
            });
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..12 + header_len]).map_err(|e| Error::Checkpoint {
                field: "header".into(),
                reason: e.to_string(),
            })?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                field: "format_version".into(),
                reason: format!(
                    "found version {}, expected {FORMAT_VERSION}",
                    header.format_version
                ),
            });
        }
        let blob = &bytes[12 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let start = entry.offset as usize;
            let end = start + entry.len as usize * 4;
            if end > blob.len() {
                return Err(Error::Checkpoint {
                    field: entry.name.clone(),
                    reason: "file truncated inside parameter blob".into(),
                });
            }
            let expected: usize = entry.shape.iter().product();
            if expected != entry.len as usize {
                return Err(Error::Checkpoint {
                    field: entry.name.clone(),
                    reason: format!(
                        "shape {:?} does not match element count {}",
                        entry.shape, entry.len
                    ),
                });
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((entry.name.clone(), entry.shape.clone(), data));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// SHA-256 over the parameter blobs (the model fingerprint).
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (_, _, data) in &self.tensors {
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Collect a model's tensors as f32 in visit order.
pub fn collect_tensors<F: Real, M: ParamGroup<F>>(model: &M) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    model.visit(&mut |name, p| {
        out.push((
            name.to_string(),
            p.shape().to_vec(),
            p.iter().map(|v| v.to_f32().unwrap()).collect(),
        ));
    });
    out
}

/// Load tensors back into a model by name, verifying shapes.
pub fn assign_tensors<F: Real, M: ParamGroup<F>>(
    model: &mut M,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    let zeros = model.zeros_like();
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    model.visit_mut(&zeros, &mut |name, mut p, _| {
        if failure.is_some() {
            return;
        }
        let Some((tname, shape, data)) = tensors.get(idx) else {
            failure = Some(Error::Checkpoint {
                field: name.to_string(),
                reason: "missing from checkpoint".into(),
            });
            return;
        };
        if tname != name || shape.as_slice() != p.shape() {
            failure = Some(Error::Checkpoint {
                field: name.to_string(),
                reason: format!(
                    "expected tensor \"{name}\" of shape {:?}, found \"{tname}\" of shape {shape:?}",
                    p.shape()
                ),
            });
            return;
        }
        for (dst, src) in p.iter_mut().zip(data.iter()) {
            *dst = real::<F>(*src as f64);
        }
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != tensors.len() {
        return Err(Error::Checkpoint {
            field: tensors[idx].0.clone(),
            reason: "checkpoint carries extra tensors".into(),
        });
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TeacherArchHeader {
    #[serde(flatten)]
    arch: TeacherArch,
    vocab: Vec<String>,
}

/// Serialize a teacher (parameters, architecture, vocabulary) to one file.
pub fn save_teacher<F: Real>(
    teacher: &TeacherModel<F>,
    path: &Path,
    meta: Map<String, Value>,
) -> Result<()> {
    let mut tensors = Vec::new();
    teacher.text.visit(&mut |n, p| {
        tensors.push((
            format!("text.{n}"),
            p.shape().to_vec(),
            p.iter().map(|v| v.to_f32().unwrap()).collect(),
        ));
    });
    teacher.image.visit(&mut |n, p| {
        tensors.push((
            format!("image.{n}"),
            p.shape().to_vec(),
            p.iter().map(|v| v.to_f32().unwrap()).collect(),
        ));
    });
    let arch = serde_json::to_value(TeacherArchHeader {
        arch: teacher.arch.clone(),
        vocab: teacher.tokenizer.words().to_vec(),
    })
    .expect("arch serializes");
    let ckpt = Checkpoint::new(
        "teacher",
        teacher.arch.token_dim,
        teacher.arch.embed_dim,
        teacher.tokenizer.vocab_hash(),
        arch,
        meta,
        tensors,
    );
    ckpt.save(path)
}

/// Load a teacher; verifies kind, vocab hash, and dimension consistency.
pub fn load_teacher(path: &Path) -> Result<(TeacherModel<f32>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.header.kind != "teacher" {
        return Err(Error::Checkpoint {
            field: "kind".into(),
            reason: format!("expected \"teacher\", found \"{}\"", ckpt.header.kind),
        });
    }
    let arch_header: TeacherArchHeader =
        serde_json::from_value(ckpt.header.arch.clone()).map_err(|e| Error::Checkpoint {
            field: "arch".into(),
            reason: e.to_string(),
        })?;
    let tokenizer = Tokenizer::from_words(arch_header.vocab, arch_header.arch.max_length);
    if tokenizer.vocab_hash() != ckpt.header.vocab_hash {
        return Err(Error::Compatibility(format!(
            "vocab_hash {} recorded in {} does not match the stored vocabulary",
            ckpt.header.vocab_hash,
            path.display()
        )));
    }
    if arch_header.arch.token_dim != ckpt.header.d_t || arch_header.arch.embed_dim != ckpt.header.d_e
    {
        return Err(Error::Compatibility(
            "header d_t/d_e disagree with the stored architecture".into(),
        ));
    }
    let mut teacher = TeacherModel::<f32>::new(tokenizer, arch_header.arch, 0)?;
    let split: Vec<_> = ckpt
        .tensors
        .iter()
        .map(|(n, s, d)| (n.clone(), s.clone(), d.clone()))
        .collect();
    let text_tensors: Vec<_> = split
        .iter()
        .filter(|(n, _, _)| n.starts_with("text."))
        .map(|(n, s, d)| (n["text.".len()..].to_string(), s.clone(), d.clone()))
        .collect();
    let image_tensors: Vec<_> = split
        .iter()
        .filter(|(n, _, _)| n.starts_with("image."))
        .map(|(n, s, d)| (n["image.".len()..].to_string(), s.clone(), d.clone()))
        .collect();
    assign_tensors(&mut teacher.text, &text_tensors)?;
    assign_tensors(&mut teacher.image, &image_tensors)?;
    Ok((teacher, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let tensors = vec![
            ("x".to_string(), vec![2, 2], vec![1.0f32, -2.5, 3.25, 0.1]),
            ("y".to_string(), vec![3], vec![0.5f32, 0.5, -0.5]),
        ];
        let ckpt = Checkpoint::new(
            "test",
            4,
            4,
            "none".into(),
            Value::Null,
            Map::new(),
            tensors,
        );
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.tensors, ckpt.tensors);
        assert_eq!(loaded.param_hash(), ckpt.param_hash());
        // Saving the loaded checkpoint reproduces the file byte for byte.
        let path2 = dir.path().join("b.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_checkpoint_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let ckpt = Checkpoint::new(
            "test",
            4,
            4,
            "none".into(),
            Value::Null,
            Map::new(),
            vec![("x".to_string(), vec![4], vec![1.0f32; 4])],
        );
        ckpt.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
