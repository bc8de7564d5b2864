//! Class catalog, labeled image embeddings and the on-disk store.

mod format;
mod synth;

pub use format::{encoded_len, load_store, save_store, MAGIC, VERSION};
pub use synth::{make_synthetic, SynthSpec};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{RapfError, Result};

/// Allowed deviation of a text embedding's L2 norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub(crate) fn norm_f32(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub text: Vec<f32>,
}

/// Ordered class names and their unit-norm text embeddings. The class id is
/// the position in the catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    dim: usize,
    entries: Vec<ClassEntry>,
}

impl ClassCatalog {
    pub fn new(dim: usize, entries: Vec<ClassEntry>) -> Result<Self> {
        if dim < 2 {
            return Err(RapfError::Format(format!("embedding dimension {dim} < 2")));
        }
        for (id, e) in entries.iter().enumerate() {
            let fail = |detail: String| RapfError::Integrity {
                class_id: id as u32,
                name: e.name.clone(),
                detail,
            };
            if e.text.len() != dim {
                return Err(fail(format!(
                    "text embedding has dimension {}, expected {dim}",
                    e.text.len()
                )));
            }
            if e.text.iter().any(|x| !x.is_finite()) {
                return Err(fail("text embedding is not finite".into()));
            }
            let n = norm_f32(&e.text);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(fail(format!("text embedding norm {n} is not 1")));
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn name(&self, class_id: u32) -> &str {
        &self.entries[class_id as usize].name
    }

    pub fn text(&self, class_id: u32) -> &[f32] {
        &self.entries[class_id as usize].text
    }

    /// Text embedding upcast to 64-bit.
    pub fn text_f64(&self, class_id: u32) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.text(class_id).iter().map(|&x| f64::from(x)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train = 0,
    Test = 1,
}

impl Split {
    pub fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub class_id: u32,
    pub split: Split,
    pub vector: Vec<f32>,
}

/// Read access to per-class embeddings, upcast to 64-bit.
///
/// The driver only touches image data through this trait, which lets tests
/// audit which classes are read and when.
pub trait EmbeddingSource: Sync {
    fn catalog(&self) -> &ClassCatalog;
    fn train_vectors(&self, class_id: u32) -> Vec<DVector<f64>>;
    fn test_vectors(&self, class_id: u32) -> Vec<DVector<f64>>;
}

#[derive(Clone, Debug)]
pub struct EmbeddingStore {
    catalog: ClassCatalog,
    records: Vec<LabeledEmbedding>,
    // record indices per class: [train, test]
    index: Vec<[Vec<usize>; 2]>,
}

impl PartialEq for EmbeddingStore {
    fn eq(&self, other: &Self) -> bool {
        self.catalog == other.catalog && self.records == other.records
    }
}

impl EmbeddingStore {
    pub fn new(catalog: ClassCatalog, records: Vec<LabeledEmbedding>) -> Result<Self> {
        let mut index = vec![[Vec::new(), Vec::new()]; catalog.len()];
        for (i, r) in records.iter().enumerate() {
            let Some(slot) = index.get_mut(r.class_id as usize) else {
                return Err(RapfError::Data(format!(
                    "record {i} references unknown class {}",
                    r.class_id
                )));
            };
            if r.vector.len() != catalog.dim() {
                return Err(RapfError::Data(format!(
                    "record {i} has dimension {}, expected {}",
                    r.vector.len(),
                    catalog.dim()
                )));
            }
            if r.vector.iter().any(|x| !x.is_finite()) {
                return Err(RapfError::Integrity {
                    class_id: r.class_id,
                    name: catalog.name(r.class_id).to_owned(),
                    detail: format!("record {i} is not finite"),
                });
            }
            slot[r.split as usize].push(i);
        }
        Ok(Self {
            catalog,
            records,
            index,
        })
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    pub fn records(&self) -> &[LabeledEmbedding] {
        &self.records
    }

    pub fn count(&self, class_id: u32, split: Split) -> usize {
        self.index[class_id as usize][split as usize].len()
    }

    /// Classes lacking the 2 train / 1 test records a run needs.
    pub fn partial_classes(&self) -> Vec<u32> {
        (0..self.catalog.len() as u32)
            .filter(|&c| self.count(c, Split::Train) < 2 || self.count(c, Split::Test) < 1)
            .collect()
    }

    pub fn is_partial(&self) -> bool {
        !self.partial_classes().is_empty()
    }

    fn vectors(&self, class_id: u32, split: Split) -> Vec<DVector<f64>> {
        self.index[class_id as usize][split as usize]
            .iter()
            .map(|&i| {
                let v = &self.records[i].vector;
                DVector::from_iterator(v.len(), v.iter().map(|&x| f64::from(x)))
            })
            .collect()
    }
}

impl EmbeddingSource for EmbeddingStore {
    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn train_vectors(&self, class_id: u32) -> Vec<DVector<f64>> {
        self.vectors(class_id, Split::Train)
    }

    fn test_vectors(&self, class_id: u32) -> Vec<DVector<f64>> {
        self.vectors(class_id, Split::Test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn catalog_rejects_non_unit_text() {
        let entries = vec![
            ClassEntry {
                name: "a".into(),
                text: vec![0.5, 0.0, 0.0, 0.0],
            },
            ClassEntry {
                name: "b".into(),
                text: unit(4, 1),
            },
        ];
        match ClassCatalog::new(4, entries) {
            Err(RapfError::Integrity {
                class_id: 0, name, ..
            }) => assert_eq!(name, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn catalog_rejects_tiny_dim() {
        assert!(ClassCatalog::new(1, vec![]).is_err());
    }

    #[test]
    fn store_indexes_and_flags_partial() {
        let cat = ClassCatalog::new(
            4,
            vec![
                ClassEntry {
                    name: "a".into(),
                    text: unit(4, 0),
                },
                ClassEntry {
                    name: "b".into(),
                    text: unit(4, 1),
                },
            ],
        )
        .unwrap();
        let rec = |c, s| LabeledEmbedding {
            class_id: c,
            split: s,
            vector: vec![1.0; 4],
        };
        let store = EmbeddingStore::new(
            cat.clone(),
            vec![
                rec(0, Split::Train),
                rec(0, Split::Train),
                rec(0, Split::Test),
                rec(1, Split::Train),
            ],
        )
        .unwrap();
        assert_eq!(store.count(0, Split::Train), 2);
        assert_eq!(store.partial_classes(), vec![1]);
        assert_eq!(store.train_vectors(0).len(), 2);

        let bad = EmbeddingStore::new(cat.clone(), vec![rec(5, Split::Train)]);
        assert!(matches!(bad, Err(RapfError::Data(_))));
        let nan = LabeledEmbedding {
            class_id: 1,
            split: Split::Test,
            vector: vec![f32::NAN; 4],
        };
        assert!(matches!(
            EmbeddingStore::new(cat, vec![nan]),
            Err(RapfError::Integrity { .. })
        ));
    }
}
