//! Synthetic sections with a planted cross-modal correspondence.
//!
//! Every micro region of the section owns a latent vector. Latents are
//! smoothed over neighboring regions, then rendered twice: once into the
//! image (colour and oriented texture amplitudes, plus a per-tile stain
//! shift that carries no signal) and once into per-cell expression
//! (log-rate linear-plus-tanh in the latent, scaled by a deterministic
//! per-cell size factor).

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;

use super::{assign_split, Cell, Dataset, PatchFeatures, PixelGrid, SplitRatios, TileImage, TilePair};
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Rng};

/// Oriented texture patterns rendered into each micro region.
const TEXTURES: usize = 8;
const COLOR_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Pixels,
    Features,
}

impl ImageKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pixels" => Ok(Self::Pixels),
            "features" => Ok(Self::Features),
            _ => Err(Error::Config(format!("unknown image kind {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pixels => "pixels",
            Self::Features => "features",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub m: usize,
    pub genes: usize,
    pub cells_min: usize,
    pub cells_max: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub image_kind: ImageKind,
    /// Vector length in `Features` mode.
    pub feature_dim: usize,
    /// Weight of the 4-neighbour sum when smoothing latents.
    pub smoothing: f64,
    /// Standard deviation of the per-tile stain shift.
    pub stain_sd: f64,
    pub split: SplitRatios,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            m: 64,
            genes: 60,
            cells_min: 40,
            cells_max: 120,
            latent_dim: 8,
            noise: 0.1,
            image_kind: ImageKind::Pixels,
            feature_dim: 32,
            smoothing: 0.5,
            stain_sd: 0.5,
            split: SplitRatios::default(),
        }
    }
}

impl GenConfig {
    /// Set the section extent so it holds exactly `n` tiles on a near-square grid.
    pub fn with_tiles(mut self, n: usize) -> Self {
        let mut rows = (n as f64).sqrt().floor() as usize;
        while rows > 1 && n % rows != 0 {
            rows -= 1;
        }
        let rows = rows.max(1);
        let cols = n.div_ceil(rows);
        self.height = rows * self.m;
        self.width = cols * self.m;
        self
    }

    pub fn num_tiles(&self) -> usize {
        (self.height / self.m) * (self.width / self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m % 4 != 0 {
            return Err(Error::invalid(format!(
                "tile side m = {} must be a positive multiple of 4",
                self.m
            )));
        }
        if self.cells_min > self.cells_max {
            return Err(Error::invalid("cells_min exceeds cells_max"));
        }
        if self.latent_dim == 0 || self.genes == 0 {
            return Err(Error::invalid("latent_dim and genes must be positive"));
        }
        if self.image_kind == ImageKind::Features && self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if self.genes < 50 {
            log::warn!("only {} genes; gene-expression probing uses the top 50", self.genes);
        }
        Ok(())
    }
}

/// Planted quantities behind a generated section, indexed by micro region
/// `(row, col)` in row-major order.
#[derive(Clone, Debug)]
pub struct SectionLatents {
    pub region_rows: usize,
    pub region_cols: usize,
    pub z: Vec<Vec<f64>>,
    /// Image-side feature vector each region is rendered from.
    pub image_features: Vec<Vec<f64>>,
    /// Noise-free per-gene log-rate (before the per-cell size factor).
    pub log_rates: Vec<Vec<f64>>,
}

impl SectionLatents {
    pub fn region(&self, row: usize, col: usize) -> usize {
        row * self.region_cols + col
    }
}

/// Deterministic per-cell scale applied to every gene of a cell.
pub fn size_factor(x: f64, y: f64) -> f64 {
    (0.25 * (0.37 * x + 0.23 * y).sin()).exp()
}

struct Map {
    expr_mu: Vec<f64>,
    expr_lin: Vec<Vec<f64>>,
    expr_nl: Vec<Vec<f64>>,
    img_lin: Vec<Vec<f64>>,
    img_nl: Vec<Vec<f64>>,
    texture_mix: Vec<[f64; COLOR_CHANNELS]>,
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, sd: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| sd * rng.normal()).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Map {
    fn draw(cfg: &GenConfig, rng: &mut Rng) -> Self {
        let l = cfg.latent_dim;
        let sd = 1.0 / (l as f64).sqrt();
        let img_dim = match cfg.image_kind {
            ImageKind::Pixels => COLOR_CHANNELS + TEXTURES,
            ImageKind::Features => cfg.feature_dim,
        };
        Self {
            expr_mu: (0..cfg.genes).map(|_| rng.uniform_range(0.5, 2.0)).collect(),
            expr_lin: gaussian_matrix(rng, cfg.genes, l, sd),
            expr_nl: gaussian_matrix(rng, cfg.genes, l, sd),
            img_lin: gaussian_matrix(rng, img_dim, l, sd),
            img_nl: gaussian_matrix(rng, img_dim, l, sd),
            texture_mix: (0..TEXTURES)
                .map(|_| {
                    let mut w = [0.0; COLOR_CHANNELS];
                    for x in &mut w {
                        *x = rng.normal();
                    }
                    w
                })
                .collect(),
        }
    }

    fn log_rate(&self, z: &[f64]) -> Vec<f64> {
        self.expr_mu
            .iter()
            .zip(self.expr_lin.iter().zip(&self.expr_nl))
            .map(|(mu, (b, c))| mu + 0.8 * dot(b, z) + 0.4 * dot(c, z).tanh())
            .collect()
    }

    fn image_features(&self, z: &[f64]) -> Vec<f64> {
        self.img_lin
            .iter()
            .zip(&self.img_nl)
            .map(|(a, d)| dot(a, z) + 0.3 * dot(d, z).tanh())
            .collect()
    }
}

fn smooth_latents(z: &mut [Vec<f64>], rows: usize, cols: usize, weight: f64) {
    if z.is_empty() {
        return;
    }
    let l = z[0].len();
    let src = z.to_vec();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let nbrs = [
                (r > 0).then(|| i - cols),
                (r + 1 < rows).then(|| i + cols),
                (c > 0).then(|| i - 1),
                (c + 1 < cols).then(|| i + 1),
            ];
            for j in nbrs.into_iter().flatten() {
                for k in 0..l {
                    z[i][k] += weight * src[j][k];
                }
            }
        }
    }
    let n = z.len() as f64;
    for k in 0..l {
        let mu = z.iter().map(|v| v[k]).sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v[k] - mu).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for v in z.iter_mut() {
            v[k] = (v[k] - mu) / sd;
        }
    }
}

fn texture(p: usize, row: f64, col: f64, q: f64) -> f64 {
    let w = 2.0 * PI / q;
    match p {
        0 => (w * col).cos(),
        1 => (w * col).sin(),
        2 => (w * row).cos(),
        3 => (w * row).sin(),
        4 => (w * (row + col)).cos(),
        5 => (w * (row + col)).sin(),
        6 => (w * (row - col)).cos(),
        _ => (w * (row - col)).sin(),
    }
}

pub fn generate_dataset(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    generate_with_latents(cfg, seed).map(|(ds, _)| ds)
}

pub fn generate_with_latents(cfg: &GenConfig, seed: u64) -> Result<(Dataset, SectionLatents)> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let map = Map::draw(cfg, &mut rng);
    let (tile_rows, tile_cols) = (cfg.height / cfg.m, cfg.width / cfg.m);
    let (region_rows, region_cols) = (tile_rows * 4, tile_cols * 4);
    let mut z: Vec<Vec<f64>> = (0..region_rows * region_cols)
        .map(|_| (0..cfg.latent_dim).map(|_| rng.normal()).collect())
        .collect();
    smooth_latents(&mut z, region_rows, region_cols, cfg.smoothing);
    let latents = SectionLatents {
        region_rows,
        region_cols,
        image_features: z.iter().map(|v| map.image_features(v)).collect(),
        log_rates: z.iter().map(|v| map.log_rate(v)).collect(),
        z,
    };

    let tiles: Vec<TilePair> = (0..tile_rows * tile_cols)
        .into_par_iter()
        .map(|t| {
            let mut trng = rng.derive(&[t as u64]);
            render_tile(cfg, &map, &latents, t / tile_cols, t % tile_cols, &mut trng)
        })
        .collect();

    let split = tiles
        .iter()
        .map(|t| (t.tile_id.clone(), assign_split(&t.tile_id, seed, cfg.split)))
        .collect::<BTreeMap<_, _>>();
    let ds = Dataset {
        tiles,
        gene_names: (0..cfg.genes).map(|g| format!("gene_{g:03}")).collect(),
        split,
        height: cfg.height,
        width: cfg.width,
        m: cfg.m,
    };
    Ok((ds, latents))
}

fn render_tile(cfg: &GenConfig, map: &Map, lat: &SectionLatents, ty: usize, tx: usize, rng: &mut Rng) -> TilePair {
    let m = cfg.m;
    let q = m / 4;
    let region_of = |by: usize, bx: usize| lat.region(ty * 4 + by, tx * 4 + bx);

    let image = match cfg.image_kind {
        ImageKind::Pixels => {
            let stain: Vec<f64> = (0..COLOR_CHANNELS).map(|_| cfg.stain_sd * rng.normal()).collect();
            let mut data = Vec::with_capacity(m * m * COLOR_CHANNELS);
            for r in 0..m {
                for c in 0..m {
                    let f = &lat.image_features[region_of(r / q, c / q)];
                    for (ch, s) in stain.iter().enumerate() {
                        let mut logit = f[ch] + s;
                        for p in 0..TEXTURES {
                            logit += f[COLOR_CHANNELS + p]
                                * map.texture_mix[p][ch]
                                * texture(p, r as f64, c as f64, q as f64);
                        }
                        let v = sigmoid(logit) + cfg.noise * rng.normal();
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            TileImage::Pixels(PixelGrid {
                rows: m,
                cols: m,
                channels: COLOR_CHANNELS,
                data,
            })
        }
        ImageKind::Features => {
            let stain: Vec<f64> = (0..cfg.feature_dim).map(|_| cfg.stain_sd * rng.normal()).collect();
            let patches = (0..16)
                .map(|j| {
                    let f = &lat.image_features[region_of(j / 4, j % 4)];
                    Some(
                        f.iter()
                            .zip(&stain)
                            .map(|(v, s)| (v + s + cfg.noise * rng.normal()) as f32)
                            .collect(),
                    )
                })
                .collect();
            TileImage::Features(PatchFeatures {
                dim: cfg.feature_dim,
                patches,
            })
        }
    };

    let n = rng.int_range(cfg.cells_min, cfg.cells_max);
    let mf = m as f64;
    let cells = (0..n)
        .map(|i| {
            let x = rng.uniform_range(0.0, mf);
            let y = rng.uniform_range(0.0, mf);
            let bx = ((x / q as f64) as usize).min(3);
            let by = ((y / q as f64) as usize).min(3);
            let s = size_factor(x, y);
            let expression = lat.log_rates[region_of(by, bx)]
                .iter()
                .map(|lr| s * (lr + cfg.noise * rng.normal()).exp())
                .collect();
            Cell {
                cell_id: format!("c{i:04}"),
                x,
                y,
                expression,
            }
        })
        .collect();

    TilePair {
        tile_id: format!("r{ty:02}c{tx:02}"),
        m,
        image: Some(image),
        cells,
    }
}
