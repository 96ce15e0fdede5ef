//! Frozen-embedding evaluation: expression probing, cross-modal retrieval,
//! the component ablation grid and embedding export.

mod ablation;
mod export;
mod probe;
mod retrieval;

use serde::Serialize;

pub use ablation::{ablation_variants, run_ablation_suite, write_ablation_csv, AblationRow};
pub use export::{export_embeddings, write_embeddings, ExportLevel, Modality};
pub use probe::{linear_probe_gex, probe_arrays, ridge_fit, GeneScore, Pca, ProbeConfig, ProbeReport, Ridge};
pub use retrieval::{recall_at_percent, retrieval, retrieval_from_embeddings, RetrievalReport, DEFAULT_PERCENTS};

use crate::datagen::{Dataset, Split};
use crate::error::Result;
use crate::training::{Model, TileEmbedding};

/// Pearson correlation, or `None` when either side has (numerically) zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // A constant column still leaves rounding residue of order eps * |mean|.
    let flat = |s: f64, m: f64| s <= 1e-24 * n * m.abs().max(1.0).powi(2);
    if flat(saa, ma) || flat(sbb, mb) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Infer-mode embeddings of every usable tile in `split`.
pub fn embed_split(model: &Model, ds: &Dataset, split: Split) -> Result<Vec<TileEmbedding>> {
    model.embed(&model.prepare_split(ds, split)?)
}
