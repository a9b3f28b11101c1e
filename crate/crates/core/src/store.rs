//! Named, provenance-carrying class-embedding matrices.
//!
//! Stores are write-once: stage 2 refuses to distill unless the store's
//! recorded teacher hash matches the teacher it is handed. The file format is
//! JSON with floats at ≥9 significant digits (float32 round-trip safe) plus a
//! content hash inside the provenance block so tampering surfaces as a load
//! warning.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{real, Real};
use crate::prompts::{AggregatedEmbeddings, DomainClassEmbeddings};

pub const STORE_FORMAT_VERSION: u32 = 1;

/// The three store roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StoreName {
    /// Aggregated template embeddings (also the zero-shot classifier).
    AggTemplate,
    /// One domain's tuned class embeddings.
    Domain(usize),
    /// The domain-invariant mean over source domains.
    Invariant,
}

impl StoreName {
    pub fn as_string(&self) -> String {
        match self {
            StoreName::AggTemplate => "agg_template".into(),
            StoreName::Domain(d) => format!("domain:{d}"),
            StoreName::Invariant => "invariant".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "agg_template" {
            Ok(StoreName::AggTemplate)
        } else if s == "invariant" {
            Ok(StoreName::Invariant)
        } else if let Some(d) = s.strip_prefix("domain:") {
            d.parse()
                .map(StoreName::Domain)
                .map_err(|_| Error::Schema(format!("bad store name \"{s}\"")))
        } else {
            Err(Error::Schema(format!("unknown store name \"{s}\"")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_hash: String,
    pub config_hash: String,
    pub source_domains: Vec<usize>,
    /// Hash over the store body; verified on load.
    #[serde(default)]
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub name: StoreName,
    pub dim: usize,
    pub class_names: Vec<String>,
    /// `[N_c, d_e]` rows aligned with `class_names`.
    pub matrix: Array2<f32>,
    pub provenance: Provenance,
}

impl EmbeddingStore {
    pub fn from_aggregated(
        agg: &AggregatedEmbeddings<f32>,
        config_hash: impl Into<String>,
    ) -> Self {
        let mut store = EmbeddingStore {
            name: StoreName::AggTemplate,
            dim: agg.dim(),
            class_names: agg.class_names.clone(),
            matrix: agg.matrix.clone(),
            provenance: Provenance {
                teacher_hash: agg.teacher_hash.clone(),
                config_hash: config_hash.into(),
                source_domains: Vec::new(),
                content_hash: String::new(),
            },
        };
        store.provenance.content_hash = store.content_hash();
        store
    }

    pub fn from_domain(emb: &DomainClassEmbeddings<f32>, config_hash: impl Into<String>) -> Self {
        let mut store = EmbeddingStore {
            name: StoreName::Domain(emb.domain_id),
            dim: emb.matrix.ncols(),
            class_names: emb.class_names.clone(),
            matrix: emb.matrix.clone(),
            provenance: Provenance {
                teacher_hash: emb.teacher_hash.clone(),
                config_hash: config_hash.into(),
                source_domains: vec![emb.domain_id],
                content_hash: String::new(),
            },
        };
        store.provenance.content_hash = store.content_hash();
        store
    }

    /// The matrix converted to the active scalar type.
    pub fn matrix_as<F: Real>(&self) -> Array2<F> {
        self.matrix.mapv(|v| real::<F>(v as f64))
    }

    /// Hash over name, shape, class names, embeddings, and the provenance
    /// fields that identify the inputs.
    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.name.as_string().as_bytes());
        hasher.update(self.dim.to_le_bytes());
        for n in &self.class_names {
            hasher.update(n.as_bytes());
            hasher.update([0u8]);
        }
        for v in self.matrix.iter() {
            hasher.update(v.to_le_bytes());
        }
        hasher.update(self.provenance.teacher_hash.as_bytes());
        hasher.update(self.provenance.config_hash.as_bytes());
        for d in &self.provenance.source_domains {
            hasher.update(d.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Eq. of the mean over domains: row i of the result is the elementwise mean
/// of row i across the inputs (f64 accumulation, so any input order yields
/// the same store at working precision).
pub fn aggregate_class_embeddings(
    domain_embeddings: &[DomainClassEmbeddings<f32>],
    config_hash: impl Into<String>,
) -> Result<EmbeddingStore> {
    if domain_embeddings.is_empty() {
        return Err(Error::Empty("no domain embeddings to aggregate".into()));
    }
    let first = &domain_embeddings[0];
    let (n_c, d_e) = first.matrix.dim();
    let mut source_domains = Vec::with_capacity(domain_embeddings.len());
    for emb in domain_embeddings {
        if emb.class_names != first.class_names {
            return Err(Error::Aggregation(format!(
                "domain {} class names {:?} differ from domain {} class names {:?}",
                emb.domain_id, emb.class_names, first.domain_id, first.class_names
            )));
        }
        if emb.matrix.dim() != (n_c, d_e) {
            return Err(Error::Aggregation(format!(
                "domain {} matrix shape {:?} differs from {:?}",
                emb.domain_id,
                emb.matrix.dim(),
                (n_c, d_e)
            )));
        }
        if emb.teacher_hash != first.teacher_hash {
            return Err(Error::Aggregation(format!(
                "domain {} teacher hash {} differs from domain {} teacher hash {}",
                emb.domain_id, emb.teacher_hash, first.domain_id, first.teacher_hash
            )));
        }
        if source_domains.contains(&emb.domain_id) {
            return Err(Error::Aggregation(format!(
                "domain {} appears twice in the aggregation input",
                emb.domain_id
            )));
        }
        source_domains.push(emb.domain_id);
    }
    source_domains.sort_unstable();

    let inv = 1.0 / domain_embeddings.len() as f64;
    let mut matrix = Array2::zeros((n_c, d_e));
    for i in 0..n_c {
        for j in 0..d_e {
            let mut acc = 0f64;
            for emb in domain_embeddings {
                acc += emb.matrix[(i, j)] as f64;
            }
            matrix[(i, j)] = (acc * inv) as f32;
        }
    }

    let mut store = EmbeddingStore {
        name: StoreName::Invariant,
        dim: d_e,
        class_names: first.class_names.clone(),
        matrix,
        provenance: Provenance {
            teacher_hash: first.teacher_hash.clone(),
            config_hash: config_hash.into(),
            source_domains,
            content_hash: String::new(),
        },
    };
    store.provenance.content_hash = store.content_hash();
    Ok(store)
}

fn store_json(store: &EmbeddingStore) -> String {
    // serde_json preserves insertion order; embeddings keyed by class name in
    // class order. Default float formatting round-trips f32 exactly.
    let mut embeddings = serde_json::Map::new();
    for (name, row) in store.class_names.iter().zip(store.matrix.rows()) {
        embeddings.insert(name.clone(), json!(row.to_vec()));
    }
    let doc = json!({
        "format_version": STORE_FORMAT_VERSION,
        "name": store.name.as_string(),
        "dim": store.dim,
        "class_names": store.class_names,
        "embeddings": embeddings,
        "provenance": store.provenance,
    });
    serde_json::to_string_pretty(&doc).expect("store serializes")
}

/// Write a store. Stores are write-once: an existing file with identical
/// content is accepted (idempotent), different content is an error.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let body = store_json(store);
    if path.exists() {
        let existing = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if existing == body {
            return Ok(());
        }
        return Err(Error::Compatibility(format!(
            "store {} already exists with different content; stores are write-once",
            path.display()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Load a store. Returns warnings (currently: provenance content-hash
/// mismatches) rather than failing, so callers decide how to react.
pub fn load_store(path: &Path) -> Result<(EmbeddingStore, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("store file: {e}")))?;
    let version = doc["format_version"].as_u64().unwrap_or(0);
    if version != STORE_FORMAT_VERSION as u64 {
        return Err(Error::Checkpoint {
            field: "format_version".into(),
            reason: format!("store version {version}, expected {STORE_FORMAT_VERSION}"),
        });
    }
    let name = StoreName::parse(doc["name"].as_str().unwrap_or(""))?;
    let dim = doc["dim"].as_u64().ok_or_else(|| Error::Schema("store missing dim".into()))? as usize;
    let class_names: Vec<String> = serde_json::from_value(doc["class_names"].clone())
        .map_err(|e| Error::Schema(format!("store class_names: {e}")))?;
    let mut matrix = Array2::zeros((class_names.len(), dim));
    for (i, cname) in class_names.iter().enumerate() {
        let row: Vec<f32> = serde_json::from_value(doc["embeddings"][cname].clone())
            .map_err(|e| Error::Schema(format!("store embeddings for \"{cname}\": {e}")))?;
        if row.len() != dim {
            return Err(Error::Schema(format!(
                "embedding row for \"{cname}\" has {} entries, dim is {dim}",
                row.len()
            )));
        }
        for (j, v) in row.into_iter().enumerate() {
            matrix[(i, j)] = v;
        }
    }
    let provenance: Provenance = serde_json::from_value(doc["provenance"].clone())
        .map_err(|e| Error::Schema(format!("store provenance: {e}")))?;
    let store = EmbeddingStore {
        name,
        dim,
        class_names,
        matrix,
        provenance,
    };
    let mut warnings = Vec::new();
    let expected = store.content_hash();
    if store.provenance.content_hash != expected {
        warnings.push(format!(
            "provenance content_hash mismatch in {}: recorded {}, recomputed {expected}",
            path.display(),
            store.provenance.content_hash
        ));
    }
    Ok((store, warnings))
}

/// Load and insist on an exact class-name order and dimension; reordered or
/// missing classes are an explicit compatibility error, never silently
/// permuted.
pub fn load_store_expecting(
    path: &Path,
    class_names: &[String],
    dim: usize,
) -> Result<(EmbeddingStore, Vec<String>)> {
    let (store, warnings) = load_store(path)?;
    if store.dim != dim {
        return Err(Error::Compatibility(format!(
            "store {} has dim {}, expected {dim}",
            path.display(),
            store.dim
        )));
    }
    if store.class_names != class_names {
        return Err(Error::Compatibility(format!(
            "store {} class order {:?} does not match requested {:?}",
            path.display(),
            store.class_names,
            class_names
        )));
    }
    Ok((store, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain_emb(domain_id: usize, rows: Vec<Vec<f32>>) -> DomainClassEmbeddings<f32> {
        let n = rows.len();
        let d = rows[0].len();
        let matrix = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
        DomainClassEmbeddings {
            domain_id,
            class_names: (0..n).map(|i| format!("c{i}")).collect(),
            matrix,
            teacher_hash: "t".into(),
        }
    }

    #[test]
    fn single_domain_aggregation_is_identity() {
        let e = domain_emb(0, vec![vec![0.3, -0.7, 0.1], vec![0.9, 0.0, 0.2]]);
        let store = aggregate_class_embeddings(&[e.clone()], "cfg").unwrap();
        assert_eq!(store.matrix, e.matrix);
        assert_eq!(store.provenance.source_domains, vec![0]);
    }

    #[test]
    fn two_domain_mean_is_exact() {
        let a = domain_emb(0, vec![vec![1.0, 0.0, 0.0]]);
        let b = domain_emb(1, vec![vec![0.0, 1.0, 0.0]]);
        let store = aggregate_class_embeddings(&[a, b], "cfg").unwrap();
        assert_eq!(store.matrix.row(0).to_vec(), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn mismatched_teacher_hash_is_named() {
        let a = domain_emb(0, vec![vec![1.0, 0.0]]);
        let mut b = domain_emb(1, vec![vec![0.0, 1.0]]);
        b.teacher_hash = "other".into();
        match aggregate_class_embeddings(&[a, b], "cfg") {
            Err(Error::Aggregation(msg)) => assert!(msg.contains("teacher hash")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn store_round_trip_and_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let e = domain_emb(2, vec![vec![0.25f32, -1.5e-7, 3.0], vec![1.0, 2.0, 3.0]]);
        let store = aggregate_class_embeddings(&[e], "cfg").unwrap();
        save_store(&store, &path).unwrap();
        // Idempotent rewrite.
        save_store(&store, &path).unwrap();
        let (loaded, warnings) = load_store(&path).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(loaded.matrix, store.matrix);
        assert_eq!(loaded.provenance, store.provenance);
        assert_eq!(loaded.name, StoreName::Invariant);
        // Write-once: different content at the same path is refused.
        let other = aggregate_class_embeddings(
            &[domain_emb(3, vec![vec![9.0f32, 9.0, 9.0], vec![1.0, 2.0, 3.0]])],
            "cfg",
        )
        .unwrap();
        assert!(save_store(&other, &path).is_err());
    }

    #[test]
    fn tampered_store_surfaces_a_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let store =
            aggregate_class_embeddings(&[domain_emb(0, vec![vec![1.0f32, 2.0]])], "cfg").unwrap();
        save_store(&store, &path).unwrap();
        let tampered = fs::read_to_string(&path)
            .unwrap()
            .replace("\"cfg\"", "\"evil\"");
        fs::write(&path, tampered).unwrap();
        let (_, warnings) = load_store(&path).unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("content_hash mismatch"));
    }

    #[test]
    fn reordered_class_request_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let store = aggregate_class_embeddings(
            &[domain_emb(0, vec![vec![1.0f32, 0.0], vec![0.0, 1.0]])],
            "cfg",
        )
        .unwrap();
        save_store(&store, &path).unwrap();
        let reordered = vec!["c1".to_string(), "c0".to_string()];
        assert!(matches!(
            load_store_expecting(&path, &reordered, 2),
            Err(Error::Compatibility(_))
        ));
        assert!(load_store_expecting(&path, &store.class_names, 2).is_ok());
    }
}
