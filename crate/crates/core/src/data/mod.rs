//! Synthetic multi-domain datasets, manifest I/O, and rotation plans.

mod render;
mod source;

pub use render::{default_class_names, render_image, DomainTransform, Image};
pub use source::{
    load_png, save_png, AuditEvent, AuditLog, FsImageSource, ImageSource, RecordingImageSource,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a synthetic dataset. Identical specs produce byte-identical
/// datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Total domain count, including the reserved validation domain.
    pub num_domains: usize,
    pub num_classes: usize,
    pub samples_per_class_per_domain: usize,
    /// Square image edge in pixels.
    pub image_size: usize,
    /// Scales inter-domain color divergence; `0.0` removes the domain signal.
    pub shift_strength: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::validation("num_domains", "must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::validation("num_classes", "must be at least 2"));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(Error::validation(
                "samples_per_class_per_domain",
                "must be positive",
            ));
        }
        if self.image_size < 16 {
            return Err(Error::validation("image_size", "must be at least 16"));
        }
        if !(0.0..=1.0).contains(&self.shift_strength) {
            return Err(Error::validation("shift_strength", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for DatasetSpec {
    /// Five domains with a binary task, mirroring Camelyon17's five centers.
    fn default() -> Self {
        DatasetSpec {
            num_domains: 5,
            num_classes: 2,
            samples_per_class_per_domain: 200,
            image_size: 64,
            shift_strength: 0.6,
            seed: 0,
        }
    }
}

/// A three-domain, nine-class preset mirroring Kather19's shape.
pub fn kather_like_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_domains: 3,
        num_classes: 9,
        samples_per_class_per_domain: 60,
        image_size: 64,
        shift_strength: 0.6,
        seed,
    }
}

/// One labeled image. `path` is resolved (joinable to the filesystem); the
/// manifest on disk stores it relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub path: PathBuf,
    pub class_id: usize,
    pub class_name: String,
    pub domain_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    path: String,
    class_id: usize,
    class_name: String,
    domain_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    class_names: Vec<String>,
    domain_ids: Vec<usize>,
    spec: Option<DatasetSpec>,
}

/// An in-memory dataset: records plus the class/domain index.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub records: Vec<DatasetRecord>,
    pub class_names: Vec<String>,
    pub domain_ids: Vec<usize>,
}

impl DomainDataset {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Records belonging to any of `domains`, in manifest order.
    pub fn filter_domains(&self, domains: &[usize]) -> Vec<&DatasetRecord> {
        self.records
            .iter()
            .filter(|r| domains.contains(&r.domain_id))
            .collect()
    }

    /// Per-(domain, class) record counts.
    pub fn counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry((r.domain_id, r.class_id)).or_insert(0) += 1;
        }
        counts
    }

    fn check_invariants(&self) -> Result<()> {
        let mut by_id: BTreeMap<usize, &str> = BTreeMap::new();
        let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &self.records {
            if r.class_id >= self.class_names.len() {
                return Err(Error::Schema(format!(
                    "class_id {} out of range for {} classes",
                    r.class_id,
                    self.class_names.len()
                )));
            }
            if let Some(prev) = by_id.insert(r.class_id, &r.class_name) {
                if prev != r.class_name {
                    return Err(Error::Schema(format!(
                        "class_id {} bound to both \"{}\" and \"{}\"",
                        r.class_id, prev, r.class_name
                    )));
                }
            }
            if let Some(prev) = by_name.insert(&r.class_name, r.class_id) {
                if prev != r.class_id {
                    return Err(Error::Schema(format!(
                        "class name \"{}\" bound to both id {} and {}",
                        r.class_name, prev, r.class_id
                    )));
                }
            }
            if self.class_names[r.class_id] != r.class_name {
                return Err(Error::Schema(format!(
                    "record class \"{}\" does not match class_names[{}] = \"{}\"",
                    r.class_name, r.class_id, self.class_names[r.class_id]
                )));
            }
            if !r.path.exists() {
                return Err(Error::MissingFile {
                    path: r.path.clone(),
                });
            }
        }
        Ok(())
    }
}

fn manifest_rel_path(domain_id: usize, class_id: usize, index: usize) -> String {
    format!("images/d{domain_id}_c{class_id}_{index:04}.png")
}

/// Generate a seeded multi-domain dataset under `output_dir` and write its
/// manifest (`manifest.jsonl`) and sidecar (`dataset.json`).
pub fn generate_dataset(spec: &DatasetSpec, output_dir: &Path) -> Result<DomainDataset> {
    spec.validate()?;
    let images_dir = output_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let class_names = default_class_names(spec.num_classes);
    let transforms: Vec<DomainTransform> = (0..spec.num_domains)
        .map(|d| DomainTransform::from_seed(spec.seed, d))
        .collect();

    let mut records = Vec::new();
    let mut manifest = Vec::new();
    for domain_id in 0..spec.num_domains {
        for class_id in 0..spec.num_classes {
            for index in 0..spec.samples_per_class_per_domain {
                let rel = manifest_rel_path(domain_id, class_id, index);
                let abs = output_dir.join(&rel);
                let img = render_image(
                    spec.seed,
                    spec.shift_strength,
                    &transforms[domain_id],
                    domain_id,
                    class_id,
                    index,
                    spec.image_size,
                );
                save_png(&abs, &img)?;
                manifest.push(ManifestLine {
                    path: rel,
                    class_id,
                    class_name: class_names[class_id].clone(),
                    domain_id,
                });
                records.push(DatasetRecord {
                    path: abs,
                    class_id,
                    class_name: class_names[class_id].clone(),
                    domain_id,
                });
            }
        }
    }

    let manifest_path = output_dir.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for line in &manifest {
        let json = serde_json::to_string(line).expect("manifest line serializes");
        writeln!(f, "{json}").map_err(|e| Error::io(&manifest_path, e))?;
    }

    let sidecar = Sidecar {
        class_names: class_names.clone(),
        domain_ids: (0..spec.num_domains).collect(),
        spec: Some(spec.clone()),
    };
    let sidecar_path = output_dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, json).map_err(|e| Error::io(&sidecar_path, e))?;

    let dataset = DomainDataset {
        records,
        class_names,
        domain_ids: (0..spec.num_domains).collect(),
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

/// Load a dataset from a JSONL manifest; relative paths resolve against the
/// manifest's directory. This is also the ingestion point for real data.
pub fn load_manifest(path: &Path) -> Result<DomainDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| Error::Schema(format!("line {}: {e}", lineno + 1)))?;
        let rel = PathBuf::from(&parsed.path);
        let abs = if rel.is_absolute() { rel } else { base.join(rel) };
        records.push(DatasetRecord {
            path: abs,
            class_id: parsed.class_id,
            class_name: parsed.class_name,
            domain_id: parsed.domain_id,
        });
    }
    if records.is_empty() {
        return Err(Error::Empty("manifest contains no records".into()));
    }

    let sidecar_path = base.join("dataset.json");
    let (class_names, domain_ids) = if sidecar_path.exists() {
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sc: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("dataset.json: {e}")))?;
        (sc.class_names, sc.domain_ids)
    } else {
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        for r in &records {
            names.entry(r.class_id).or_insert_with(|| r.class_name.clone());
        }
        let n = names.keys().max().map_or(0, |m| m + 1);
        let class_names = (0..n)
            .map(|i| {
                names
                    .get(&i)
                    .cloned()
                    .ok_or_else(|| Error::Schema(format!("class_id {i} has no records")))
            })
            .collect::<Result<Vec<_>>>()?;
        let domains: BTreeSet<usize> = records.iter().map(|r| r.domain_id).collect();
        (class_names, domains.into_iter().collect())
    };

    let dataset = DomainDataset {
        records,
        class_names,
        domain_ids,
    };
    dataset.check_invariants()?;
    Ok(dataset)
}

/// One leave-one-domain-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rotation {
    pub train_domains: Vec<usize>,
    pub test_domain: usize,
}

/// The full rotation schedule: the validation domain is reserved and each
/// remaining domain serves as the test domain exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationPlan {
    pub validation_domain: usize,
    pub rotations: Vec<Rotation>,
}

pub fn make_rotation_plan(dataset: &DomainDataset, validation_domain: usize) -> Result<RotationPlan> {
    if !dataset.domain_ids.contains(&validation_domain) {
        return Err(Error::validation(
            "validation_domain",
            format!("domain {validation_domain} not present in dataset"),
        ));
    }
    let mut remaining: Vec<usize> = dataset
        .domain_ids
        .iter()
        .copied()
        .filter(|&d| d != validation_domain)
        .collect();
    remaining.sort_unstable();
    if remaining.len() < 2 {
        return Err(Error::validation(
            "validation_domain",
            "fewer than 2 domains remain; no train/test split possible",
        ));
    }
    let rotations = remaining
        .iter()
        .map(|&test| Rotation {
            train_domains: remaining.iter().copied().filter(|&d| d != test).collect(),
            test_domain: test,
        })
        .collect();
    Ok(RotationPlan {
        validation_domain,
        rotations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            num_domains: 2,
            num_classes: 2,
            samples_per_class_per_domain: 1,
            image_size: 16,
            shift_strength: 0.0,
            seed: 7,
        }
    }

    #[test]
    fn tiny_dataset_counts_and_balance() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_spec(), dir.path()).unwrap();
        assert_eq!(ds.records.len(), 4);
        for (_, count) in ds.counts() {
            assert_eq!(count, 1);
        }
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = tiny_spec();
        s.num_domains = 1;
        match generate_dataset(&s, Path::new("/nonexistent")).unwrap_err() {
            Error::Validation { field, .. } => assert_eq!(field, "num_domains"),
            other => panic!("unexpected error {other:?}"),
        }
        let mut s = tiny_spec();
        s.shift_strength = 1.5;
        assert!(matches!(
            generate_dataset(&s, Path::new("/nonexistent")),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn generation_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        generate_dataset(&spec, d1.path()).unwrap();
        generate_dataset(&spec, d2.path()).unwrap();
        for entry in ["manifest.jsonl", "dataset.json", "images/d0_c0_0000.png"] {
            let a = fs::read(d1.path().join(entry)).unwrap();
            let b = fs::read(d2.path().join(entry)).unwrap();
            assert_eq!(a, b, "{entry} differs between runs");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_spec(), dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn single_record_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_spec(), dir.path()).unwrap();
        let one = dir.path().join("one.jsonl");
        fs::write(
            &one,
            r#"{"path":"images/d0_c0_0000.png","class_id":0,"class_name":"a","domain_id":0}"#,
        )
        .unwrap();
        // No sidecar consulted for foreign manifests in the same dir? The
        // sidecar belongs to manifest.jsonl, so move this one elsewhere.
        let sub = dir.path().join("sub");
        fs::create_dir(&sub).unwrap();
        let one = sub.join("one.jsonl");
        fs::write(
            &one,
            format!(
                r#"{{"path":"{}","class_id":0,"class_name":"a","domain_id":0}}"#,
                dir.path().join("images/d0_c0_0000.png").display()
            ),
        )
        .unwrap();
        let ds = load_manifest(&one).unwrap();
        assert_eq!(ds.records.len(), 1);
        assert_eq!(ds.class_names, vec!["a".to_string()]);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_spec(), dir.path()).unwrap();
        let victim = &ds.records[0].path;
        fs::remove_file(victim).unwrap();
        match load_manifest(&dir.path().join("manifest.jsonl")).unwrap_err() {
            Error::MissingFile { path } => assert_eq!(&path, victim),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn conflicting_class_binding_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_spec(), dir.path()).unwrap();
        let sub = dir.path().join("conflict");
        fs::create_dir(&sub).unwrap();
        let p = dir.path().join("images/d0_c0_0000.png");
        let manifest = sub.join("m.jsonl");
        fs::write(
            &manifest,
            format!(
                "{}\n{}\n",
                format_args!(
                    r#"{{"path":"{}","class_id":0,"class_name":"a","domain_id":0}}"#,
                    p.display()
                ),
                format_args!(
                    r#"{{"path":"{}","class_id":0,"class_name":"b","domain_id":0}}"#,
                    p.display()
                ),
            ),
        )
        .unwrap();
        assert!(matches!(load_manifest(&manifest), Err(Error::Schema(_))));
    }

    #[test]
    fn rotation_plan_matches_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.num_domains = 5;
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        // Domains {0..4}, validation 1 (stands in for centers {1..5}, validation 2).
        let plan = make_rotation_plan(&ds, 1).unwrap();
        assert_eq!(plan.rotations.len(), 4);
        let last = plan.rotations.last().unwrap();
        assert_eq!(last.test_domain, 4);
        assert_eq!(last.train_domains, vec![0, 2, 3]);
        // Partition property per rotation.
        for rot in &plan.rotations {
            let mut all: Vec<usize> = rot.train_domains.clone();
            all.push(rot.test_domain);
            all.push(plan.validation_domain);
            all.sort_unstable();
            assert_eq!(all, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn three_domain_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.num_domains = 3;
        let ds = generate_dataset(&spec, dir.path()).unwrap();
        let plan = make_rotation_plan(&ds, 0).unwrap();
        assert_eq!(plan.rotations.len(), 2);
        assert_eq!(plan.rotations[0].train_domains, vec![2]);
        assert_eq!(plan.rotations[0].test_domain, 1);
        assert_eq!(plan.rotations[1].train_domains, vec![1]);
        assert_eq!(plan.rotations[1].test_domain, 2);
    }

    #[test]
    fn two_domain_plan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_spec(), dir.path()).unwrap();
        assert!(make_rotation_plan(&ds, 0).is_err());
        assert!(make_rotation_plan(&ds, 9).is_err());
    }
}
