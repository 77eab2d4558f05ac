//! Data model and persistence for everything the engine consumes and
//! produces: token feature matrices, image records, curated supervision
//! (triplets and captions), and evaluation cases.

mod cirf;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::mat::Mat;

pub use cirf::{load_features, save_features};
pub use synth::{synth_corpus, AttributeFamily, AttributeSchema, SynthConfig};

/// Minimum Euclidean norm a feature row may have and still be
/// cosine-normalizable.
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: file has {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CorpusError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CorpusError::Invalid(msg.into())
    }
}

/// A `rows x dim` matrix of token feature vectors, the universal currency
/// of the engine. Rows are validated finite and cosine-normalizable at
/// construction; storage is `f32` to match the on-disk format bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if rows == 0 || dim == 0 {
            return Err(CorpusError::invalid("feature matrix must be at least 1x1"));
        }
        if data.len() != rows * dim {
            return Err(CorpusError::invalid(format!(
                "feature data length {} does not match {}x{}",
                data.len(),
                rows,
                dim
            )));
        }
        let fm = Self { rows, dim, data };
        fm.validate()?;
        Ok(fm)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        for (i, row) in self.data.chunks(self.dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CorpusError::invalid(format!(
                    "feature row {i} contains a non-finite value"
                )));
            }
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm < MIN_ROW_NORM {
                return Err(CorpusError::invalid(format!(
                    "feature row {i} has near-zero norm {norm:e}"
                )));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Widens to an `f64` matrix for computation.
    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.rows, self.dim, self.data.iter().map(|&v| v as f64).collect())
    }

    /// Rounds an `f64` matrix to `f32` storage, revalidating invariants.
    pub fn from_mat(m: &Mat) -> Result<Self, CorpusError> {
        Self::new(m.rows(), m.cols(), m.as_slice().iter().map(|&v| v as f32).collect())
    }
}

/// An image as the engine sees it: an id, precomputed frozen-encoder token
/// features, and optional string metadata (synthetic attribute labels).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub tokens: FeatureMatrix,
    pub meta: BTreeMap<String, String>,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        tokens: FeatureMatrix,
        meta: BTreeMap<String, String>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        if id.is_empty() {
            return Err(CorpusError::invalid("image id must be nonempty"));
        }
        Ok(Self { id, tokens, meta })
    }
}

/// Builds an id -> record map, rejecting duplicate ids.
pub fn id_map(records: &[ImageRecord]) -> Result<HashMap<&str, &ImageRecord>, CorpusError> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if map.insert(r.id.as_str(), r).is_some() {
            return Err(CorpusError::invalid(format!("duplicate image id {:?}", r.id)));
        }
    }
    Ok(map)
}

/// Curated supervision for the target-text retrieval task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub ref_id: String,
    pub modification: String,
    pub target_text: String,
}

/// Curated supervision for the text-to-image retrieval task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// One benchmark item: a composed query, its gold target ids, and an
/// optional candidate subset for subset recall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub ref_id: String,
    pub modification: String,
    pub gold_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl EvalCase {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.gold_ids.is_empty() {
            return Err(CorpusError::invalid("eval case has empty gold_ids"));
        }
        if let Some(subset) = &self.subset_ids {
            if !self.gold_ids.is_subset(subset) {
                return Err(CorpusError::invalid("gold_ids not contained in subset_ids"));
            }
        }
        Ok(())
    }
}

/// Writes records as JSON Lines, one object per line.
pub fn save_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| CorpusError::invalid(format!("serialize failed: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON Lines, skipping blank lines.
pub fn load_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, CorpusError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            line: i + 1,
            source,
        })?;
        items.push(item);
    }
    Ok(items)
}
