//! Per-class prompt template banks and aggregated template embeddings.
//!
//! The aggregated embedding of class `i` is the plain arithmetic mean of the
//! M encoded templates, stored without renormalization (its cosine consumers
//! are scale-invariant, and the mean of unit vectors has norm at most 1).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nn::{real, Real};
use crate::teacher::{TeacherModel, TextInput};

/// Template patterns instantiated per class name; M = 8 by default.
pub const DEFAULT_TEMPLATE_PATTERNS: [&str; 8] = [
    "a patch of {}",
    "an image of {} tissue",
    "a histopathology image of {}",
    "a microscopy image of {}",
    "an h and e stained slide of {}",
    "a tissue patch showing {}",
    "a high magnification view of {}",
    "a pathology scan of {}",
];

/// M templates per class, aligned with a dataset's class names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateBank {
    pub class_names: Vec<String>,
    templates: Vec<Vec<String>>,
}

impl PromptTemplateBank {
    pub fn from_patterns(class_names: &[String], patterns: &[&str]) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Empty("class name list is empty".into()));
        }
        let unique: BTreeSet<&String> = class_names.iter().collect();
        if unique.len() != class_names.len() {
            return Err(Error::validation(
                "class_names",
                "duplicate class names in bank",
            ));
        }
        if patterns.is_empty() {
            return Err(Error::Empty("template pattern list is empty".into()));
        }
        let templates = class_names
            .iter()
            .map(|name| {
                patterns
                    .iter()
                    .map(|p| p.replace("{}", name))
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(PromptTemplateBank {
            class_names: class_names.to_vec(),
            templates,
        })
    }

    /// Templates per class.
    pub fn m(&self) -> usize {
        self.templates[0].len()
    }

    pub fn templates_for(&self, class_id: usize) -> &[String] {
        &self.templates[class_id]
    }

    /// A one-template bank holding each class's first template — the "single
    /// generic prompt" embedding source.
    pub fn first_template_only(&self) -> PromptTemplateBank {
        PromptTemplateBank {
            class_names: self.class_names.clone(),
            templates: self
                .templates
                .iter()
                .map(|t| vec![t[0].clone()])
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut templates = serde_json::Map::new();
        for (name, temps) in self.class_names.iter().zip(&self.templates) {
            templates.insert(name.clone(), json!(temps));
        }
        let doc = json!({ "class_names": self.class_names, "templates": templates });
        fs::write(path, serde_json::to_string_pretty(&doc).unwrap())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::Schema(format!("bank file: {e}")))?;
        let class_names: Vec<String> = serde_json::from_value(doc["class_names"].clone())
            .map_err(|e| Error::Schema(format!("bank class_names: {e}")))?;
        let mut templates = Vec::new();
        for name in &class_names {
            let t: Vec<String> = serde_json::from_value(doc["templates"][name].clone())
                .map_err(|e| Error::Schema(format!("bank templates for \"{name}\": {e}")))?;
            templates.push(t);
        }
        let bank = PromptTemplateBank {
            class_names,
            templates,
        };
        bank.check()?;
        Ok(bank)
    }

    fn check(&self) -> Result<()> {
        let m = self.m();
        if m == 0 {
            return Err(Error::Empty("bank has zero templates per class".into()));
        }
        for (name, temps) in self.class_names.iter().zip(&self.templates) {
            if temps.len() != m {
                return Err(Error::validation(
                    "templates",
                    format!("class \"{name}\" has {} templates, expected {m}", temps.len()),
                ));
            }
            if temps.iter().any(|t| t.trim().is_empty()) {
                return Err(Error::validation(
                    "templates",
                    format!("class \"{name}\" has an empty template"),
                ));
            }
        }
        Ok(())
    }
}

/// The default eight-template bank.
pub fn default_bank(class_names: &[String]) -> Result<PromptTemplateBank> {
    PromptTemplateBank::from_patterns(class_names, &DEFAULT_TEMPLATE_PATTERNS)
}

/// Row `i` is the mean of class `i`'s encoded templates; norms lie in (0, 1].
#[derive(Debug, Clone)]
pub struct AggregatedEmbeddings<F> {
    pub class_names: Vec<String>,
    pub matrix: Array2<F>,
    pub teacher_hash: String,
}

impl<F: Real> AggregatedEmbeddings<F> {
    pub fn n_classes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Encode every template and average per class (f64 accumulation, so the
/// result is independent of template order at working precision).
pub fn compute_aggregated_embeddings<F: Real>(
    teacher: &TeacherModel<F>,
    bank: &PromptTemplateBank,
) -> Result<AggregatedEmbeddings<F>> {
    let d_e = teacher.arch.embed_dim;
    let mut matrix = Array2::zeros((bank.class_names.len(), d_e));
    for (i, _) in bank.class_names.iter().enumerate() {
        let mut acc = vec![0f64; d_e];
        for template in bank.templates_for(i) {
            let seq = teacher.tokenizer.tokenize_strict(template).map_err(|e| {
                Error::Length(format!("template \"{template}\": {e}"))
            })?;
            let emb = teacher.encode_text(TextInput::Tokens(&seq))?;
            for (a, v) in acc.iter_mut().zip(emb.iter()) {
                *a += v.to_f64().unwrap();
            }
        }
        let m = bank.m() as f64;
        for (j, a) in acc.iter().enumerate() {
            matrix[(i, j)] = real::<F>(a / m);
        }
    }
    Ok(AggregatedEmbeddings {
        class_names: bank.class_names.clone(),
        matrix,
        teacher_hash: teacher.param_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_example_template_is_present() {
        let bank = default_bank(&["normal lymph node".to_string()]).unwrap();
        assert!(bank
            .templates_for(0)
            .contains(&"a patch of normal lymph node".to_string()));
    }

    #[test]
    fn template_count_is_classes_times_m() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let bank = default_bank(&names).unwrap();
        let total: usize = (0..3).map(|i| bank.templates_for(i).len()).sum();
        assert_eq!(total, 3 * bank.m());
        assert_eq!(bank.m(), 8);
    }

    #[test]
    fn duplicate_class_names_are_rejected() {
        let names = vec!["same".to_string(), "same".to_string()];
        assert!(default_bank(&names).is_err());
    }

    #[test]
    fn empty_class_list_is_rejected() {
        assert!(default_bank(&[]).is_err());
    }

    #[test]
    fn bank_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.json");
        let names = vec!["normal lymph node".to_string(), "tumor epithelium".to_string()];
        let bank = default_bank(&names).unwrap();
        bank.save(&path).unwrap();
        assert_eq!(PromptTemplateBank::load(&path).unwrap(), bank);
    }
}
