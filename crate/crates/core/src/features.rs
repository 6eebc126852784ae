//! Full feature vector `[area, perimeter | semantic embedding | composition]`
//! and train-fold-only standardization.

use crate::buildings::{CompositionVector, COMPOSITION_DIM};
use crate::geometry::IsolineRecord;
use crate::semantics::{SemanticEmbedding, EMBEDDING_DIM};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GIS_DIM: usize = 2;
pub const FEATURE_DIM: usize = GIS_DIM + EMBEDDING_DIM + COMPOSITION_DIM;
pub const SEMANTIC_RANGE: std::ops::Range<usize> = GIS_DIM..GIS_DIM + EMBEDDING_DIM;
pub const COMPOSITION_RANGE: std::ops::Range<usize> = GIS_DIM + EMBEDDING_DIM..FEATURE_DIM;
pub const SCHEMA_VERSION: &str = "x_full/v1";

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cannot assemble features for {id}: missing {part}")]
    MissingPart { id: String, part: &'static str },
    #[error("feature assembly for {id}: {message}")]
    Invalid { id: String, message: String },
    #[error("standardizer needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("row has {got} columns, expected {expected}")]
    Width { expected: usize, got: usize },
}

/// Which blocks contribute; a disabled block is zero-filled, keeping the width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    pub semantic: bool,
    pub composition: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            semantic: true,
            composition: true,
        }
    }
}

impl AblationFlags {
    /// Schema tag such as `x_full/v1+gis+sem+comp`.
    pub fn schema_tag(&self) -> String {
        let mut tag = format!("{SCHEMA_VERSION}+gis");
        if self.semantic {
            tag.push_str("+sem");
        }
        if self.composition {
            tag.push_str("+comp");
        }
        tag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    pub values: Vec<f64>,
    pub schema_version: String,
}

pub fn assemble(
    record: &IsolineRecord,
    embedding: Option<&SemanticEmbedding>,
    composition: Option<&CompositionVector>,
    flags: AblationFlags,
) -> Result<FeatureVector, FeatureError> {
    assemble_parts(&record.id, record.area_m2, record.perimeter_m, embedding, composition, flags)
}

/// [`assemble`] from the scalar polygon metadata alone.
pub fn assemble_parts(
    id: &str,
    area_m2: f64,
    perimeter_m: f64,
    embedding: Option<&SemanticEmbedding>,
    composition: Option<&CompositionVector>,
    flags: AblationFlags,
) -> Result<FeatureVector, FeatureError> {
    let missing = |part| FeatureError::MissingPart { id: id.to_owned(), part };
    let mut values = Vec::with_capacity(FEATURE_DIM);
    values.push(area_m2);
    values.push(perimeter_m);
    if flags.semantic {
        let emb = embedding.ok_or_else(|| missing("semantic embedding"))?;
        emb.validate().map_err(|e| FeatureError::Invalid {
            id: id.to_owned(),
            message: e.to_string(),
        })?;
        values.extend_from_slice(&emb.values);
    } else {
        values.extend(std::iter::repeat(0.0).take(EMBEDDING_DIM));
    }
    if flags.composition {
        let comp = composition.ok_or_else(|| missing("composition vector"))?;
        values.extend_from_slice(&comp.to_array());
    } else {
        values.extend(std::iter::repeat(0.0).take(COMPOSITION_DIM));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FeatureError::Invalid {
            id: id.to_owned(),
            message: format!("feature {i} is not finite"),
        });
    }
    Ok(FeatureVector {
        id: id.to_owned(),
        values,
        schema_version: flags.schema_tag(),
    })
}

/// One line of the persisted feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub id: String,
    pub y: f64,
    pub values: Vec<f64>,
    pub schema_version: String,
}

/// Per-column z-scoring with population (1/N) variance; zero-variance
/// columns keep sd = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, FeatureError> {
        if rows.len() < 2 {
            return Err(FeatureError::TooFewRows(rows.len()));
        }
        let width = rows[0].as_ref().len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(FeatureError::Width {
                    expected: width,
                    got: r.len(),
                });
            }
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((acc, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let sd = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, sd })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn transform_all<R: AsRef<[f64]>>(&self, rows: &[R]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r.as_ref())).collect()
    }
}

/// Scalar standardizer for targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub sd: f64,
}

impl TargetScaler {
    pub fn fit(y: &[f64]) -> Result<Self, FeatureError> {
        let rows: Vec<[f64; 1]> = y.iter().map(|&v| [v]).collect();
        let s = Standardizer::fit(&rows)?;
        Ok(Self {
            mean: s.mean[0],
            sd: s.sd[0],
        })
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.mean) / self.sd
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.sd + self.mean
    }
}
