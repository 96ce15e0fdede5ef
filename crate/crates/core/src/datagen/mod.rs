//! Paired tile datasets: types, splits, preprocessing, synthetic generation and IO.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::mix_seed;

pub use io::{load_dataset, read_image_bin, read_patch_features_bin, save_dataset, MANIFEST_VERSION};
pub use synth::{generate_dataset, generate_with_latents, GenConfig, ImageKind, SectionLatents};

/// Micro patches per tile (4 x 4 grid).
pub const MICRO_PATCHES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub cell_id: String,
    pub x: f64,
    pub y: f64,
    pub expression: Vec<f64>,
}

/// `rows x cols x channels` pixels, row-major with interleaved channels, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PixelGrid {
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f32 {
        self.data[(r * self.cols + c) * self.channels + ch]
    }
}

/// Precomputed micro-patch vectors in row-major 4x4 order. `None` marks an empty patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub dim: usize,
    pub patches: Vec<Option<Vec<f32>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TileImage {
    Pixels(PixelGrid),
    Features(PatchFeatures),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePair {
    pub tile_id: String,
    pub m: usize,
    pub image: Option<TileImage>,
    pub cells: Vec<Cell>,
}

impl TilePair {
    /// Per-gene mean over cells of `log1p(expression)`; `None` for a tile without cells.
    pub fn mean_log1p(&self) -> Option<Vec<f64>> {
        let first = self.cells.first()?;
        let mut acc = vec![0.0; first.expression.len()];
        for c in &self.cells {
            for (a, v) in acc.iter_mut().zip(&c.expression) {
                *a += v.ln_1p();
            }
        }
        let n = self.cells.len() as f64;
        Some(acc.into_iter().map(|a| a / n).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tiles: Vec<TilePair>,
    pub gene_names: Vec<String>,
    pub split: BTreeMap<String, Split>,
    pub height: usize,
    pub width: usize,
    pub m: usize,
}

impl Dataset {
    pub fn num_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn split_of(&self, tile_id: &str) -> Option<Split> {
        self.split.get(tile_id).copied()
    }

    /// Indices into `tiles` belonging to `split`, in dataset order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.tiles
            .iter()
            .enumerate()
            .filter(|(_, t)| self.split_of(&t.tile_id) == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let g = self.num_genes();
        for t in &self.tiles {
            if !self.split.contains_key(&t.tile_id) {
                return Err(Error::tile(&t.tile_id, "no split label"));
            }
            for c in &t.cells {
                if c.expression.len() != g {
                    return Err(Error::tile(
                        &t.tile_id,
                        format!(
                            "cell {} has {} expression values, expected {g}",
                            c.cell_id,
                            c.expression.len()
                        ),
                    ));
                }
                let m = t.m as f64;
                if !(0.0..m).contains(&c.x) || !(0.0..m).contains(&c.y) {
                    return Err(Error::tile(
                        &t.tile_id,
                        format!("cell {} at ({}, {}) outside tile of side {m}", c.cell_id, c.x, c.y),
                    ));
                }
                if c.expression.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::tile(
                        &t.tile_id,
                        format!("cell {} has negative or NaN expression", c.cell_id),
                    ));
                }
            }
            match &t.image {
                Some(TileImage::Pixels(p)) if p.rows != t.m || p.cols != t.m => {
                    return Err(Error::tile(
                        &t.tile_id,
                        format!("image is {}x{}, expected {}x{}", p.rows, p.cols, t.m, t.m),
                    ));
                }
                Some(TileImage::Features(f)) if f.patches.len() != MICRO_PATCHES => {
                    return Err(Error::tile(
                        &t.tile_id,
                        format!("{} patch feature vectors, expected {MICRO_PATCHES}", f.patches.len()),
                    ));
                }
                _ => {}
            }
        }
        if self.split.len() != self.tiles.len() {
            return Err(Error::Dataset(format!(
                "{} split labels for {} tiles",
                self.split.len(),
                self.tiles.len()
            )));
        }
        Ok(())
    }

    /// Digest of the tile-to-split assignment.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        for (id, s) in &self.split {
            h.update(id.as_bytes());
            h.update([0u8]);
            h.update(s.to_string().as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Split ratios for train / val / test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Split label as a pure function of `(tile_id, seed, ratios)`.
pub fn assign_split(tile_id: &str, seed: u64, ratios: SplitRatios) -> Split {
    let digest = Sha256::digest(tile_id.as_bytes());
    let key = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let u = (mix_seed(seed, &[key, 0x5350_4c49_54]) >> 11) as f64 / (1u64 << 53) as f64;
    let total = ratios.train + ratios.val + ratios.test;
    if u < ratios.train / total {
        Split::Train
    } else if u < (ratios.train + ratios.val) / total {
        Split::Val
    } else {
        Split::Test
    }
}

/// Indices of the `k` genes with the largest variance of tile-mean `log1p`
/// expression over the training split. Ties go to the lower index.
pub fn hvg_select(ds: &Dataset, k: usize) -> Result<Vec<usize>> {
    let g = ds.num_genes();
    if k > g {
        return Err(Error::invalid(format!("k = {k} exceeds gene count {g}")));
    }
    let means: Vec<Vec<f64>> = ds
        .indices(Split::Train)
        .into_iter()
        .filter_map(|i| ds.tiles[i].mean_log1p())
        .collect();
    if means.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let var = column_variance(&means, g);
    Ok(top_k_by_variance(&var, k))
}

pub(crate) fn column_variance(rows: &[Vec<f64>], g: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    (0..g)
        .map(|j| {
            let mu = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            rows.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / n
        })
        .collect()
}

fn top_k_by_variance(var: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..var.len()).collect();
    idx.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-gene standardisation of `log1p` expression using training-split cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ExpressionNorm {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let g = ds.num_genes();
        let mut sum = vec![0.0; g];
        let mut sq = vec![0.0; g];
        let mut n = 0usize;
        for i in ds.indices(Split::Train) {
            for c in &ds.tiles[i].cells {
                for (j, v) in c.expression.iter().enumerate() {
                    let l = v.ln_1p();
                    sum[j] += l;
                    sq[j] += l * l;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Dataset("no training cells to fit normalisation".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| (q / nf - mu * mu).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(g: usize) -> Self {
        Self {
            mean: vec![0.0; g],
            std: vec![1.0; g],
        }
    }

    pub fn apply(&self, expression: &[f64]) -> Vec<f64> {
        expression
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (mu, sd))| (v.ln_1p() - mu) / sd)
            .collect()
    }
}
