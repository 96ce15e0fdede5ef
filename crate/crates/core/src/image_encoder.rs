//! Multi-crop image branch.
//!
//! A tile is cut into a 4x4, 2x2 and 1x1 grid of patches. Every patch is
//! resized to a common side `r` and sent through one shared backbone; each
//! scale's embedding is the mean over its non-empty patch vectors.

use crate::cell_graph::Scale;
use crate::datagen::{PatchFeatures, PixelGrid, TileImage, MICRO_PATCHES};
use crate::error::{Error, Result};
use crate::numcore::{glorot, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Patches over all three scales, micro first: 16 + 4 + 1.
pub const TOTAL_PATCHES: usize = 21;

const CONV1_OUT: usize = 16;
const CONV2_OUT: usize = 32;
const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    ToyConv,
    Passthrough,
}

impl Backbone {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy_conv" => Ok(Self::ToyConv),
            "passthrough" => Ok(Self::Passthrough),
            _ => Err(Error::Config(format!("unknown backbone {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::ToyConv => "toy_conv",
            Self::Passthrough => "passthrough",
        }
    }
}

/// Row range of a scale's patches within the 21 stacked patches.
pub fn patch_range(scale: Scale) -> std::ops::Range<usize> {
    match scale {
        Scale::Micro => 0..16,
        Scale::Meso => 16..20,
        Scale::Macro => 20..21,
    }
}

/// Equal, non-overlapping patches of one scale in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub scale: Scale,
    pub side: usize,
    pub patches: Vec<PixelGrid>,
}

pub fn partition_tile(image: &PixelGrid, scale: Scale) -> Result<PatchGrid> {
    let m = image.rows;
    if image.cols != m {
        return Err(Error::invalid(format!(
            "tile is {}x{}, not square",
            image.rows, image.cols
        )));
    }
    if m == 0 || m % 4 != 0 {
        return Err(Error::invalid(format!("tile side {m} is not divisible by 4")));
    }
    let b = scale.subdivisions();
    let side = m / b;
    let ch = image.channels;
    let mut patches = Vec::with_capacity(b * b);
    for by in 0..b {
        for bx in 0..b {
            let mut data = Vec::with_capacity(side * side * ch);
            for r in by * side..(by + 1) * side {
                let start = (r * m + bx * side) * ch;
                data.extend_from_slice(&image.data[start..start + side * ch]);
            }
            patches.push(PixelGrid {
                rows: side,
                cols: side,
                channels: ch,
                data,
            });
        }
    }
    Ok(PatchGrid { scale, side, patches })
}

/// Bilinear resize to `r x r` with corner-aligned sampling, so the four
/// corner pixels are reproduced exactly. Output is `[r, r, channels]` in f64.
pub fn bilinear_resize(p: &PixelGrid, r: usize) -> Vec<f64> {
    let ch = p.channels;
    let coord = |i: usize, n_in: usize| -> (usize, usize, f64) {
        if r == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let s = i as f64 * (n_in - 1) as f64 / (r - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(r * r * ch);
    for i in 0..r {
        let (r0, r1, fr) = coord(i, p.rows);
        for j in 0..r {
            let (c0, c1, fc) = coord(j, p.cols);
            for k in 0..ch {
                let v00 = p.at(r0, c0, k) as f64;
                let v01 = p.at(r0, c1, k) as f64;
                let v10 = p.at(r1, c0, k) as f64;
                let v11 = p.at(r1, c1, k) as f64;
                let top = v00 + fc * (v01 - v00);
                let bot = v10 + fc * (v11 - v10);
                out.push(top + fr * (bot - top));
            }
        }
    }
    out
}

/// Mean of the given vectors.
pub fn pool_mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("pooling over zero patches"))?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != acc.len() {
            return Err(Error::shape("pool_mean", &[acc.len()], &[v.len()]));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// A tile's image side, ready for repeated forward passes.
#[derive(Clone, Debug)]
pub enum PreparedImage {
    /// im2col rows of the first convolution, `[21 * (r/4)^2, 3 * 16]`.
    Pixels { cols: Tensor },
    /// One row per patch over the three scales; `None` marks an empty patch.
    Features { rows: Vec<Option<Vec<f64>>>, dim: usize },
}

impl PreparedImage {
    pub fn present(&self) -> Vec<bool> {
        match self {
            Self::Pixels { .. } => vec![true; TOTAL_PATCHES],
            Self::Features { rows, .. } => rows.iter().map(Option::is_some).collect(),
        }
    }
}

/// Micro features plus their mean-composed meso and macro rows.
pub fn compose_features(f: &PatchFeatures) -> Result<Vec<Option<Vec<f64>>>> {
    if f.patches.len() != MICRO_PATCHES {
        return Err(Error::invalid(format!(
            "passthrough needs {MICRO_PATCHES} micro feature vectors, got {}",
            f.patches.len()
        )));
    }
    let micro: Vec<Option<Vec<f64>>> = f
        .patches
        .iter()
        .map(|p| p.as_ref().map(|v| v.iter().map(|&x| x as f64).collect()))
        .collect();
    let group = |members: Vec<usize>| -> Result<Option<Vec<f64>>> {
        let vs: Vec<Vec<f64>> = members.iter().filter_map(|&j| micro[j].clone()).collect();
        if vs.is_empty() {
            Ok(None)
        } else {
            pool_mean(&vs).map(Some)
        }
    };
    let mut rows = micro.clone();
    for my in 0..2 {
        for mx in 0..2 {
            let members = (0..16).filter(|j| (j / 4) / 2 == my && (j % 4) / 2 == mx).collect();
            rows.push(group(members)?);
        }
    }
    rows.push(group((0..16).collect())?);
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderConfig {
    pub backbone: Backbone,
    /// Unified patch side after resizing.
    pub r: usize,
    /// Output embedding dimension.
    pub d: usize,
    /// Input vector length for the passthrough backbone.
    pub feature_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ToyConv,
            r: 32,
            d: 64,
            feature_dim: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    conv: Option<ConvParams>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
struct ConvParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    /// Flat gather indices laying conv1 output out as conv2 im2col rows.
    gather2: Vec<usize>,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        if cfg.d == 0 {
            return Err(Error::Config("image embedding dim must be positive".into()));
        }
        let (conv, head_in) = match cfg.backbone {
            Backbone::ToyConv => {
                if cfg.r == 0 || cfg.r % 8 != 0 {
                    return Err(Error::Config(format!(
                        "patch side r = {} must be a multiple of 8",
                        cfg.r
                    )));
                }
                let k1 = CHANNELS * 16;
                let k2 = CONV1_OUT * 4;
                let conv = ConvParams {
                    w1: store.add("img.conv1.w", glorot(rng, k1, CONV1_OUT))?,
                    b1: store.add("img.conv1.b", Tensor::zeros(&[CONV1_OUT]))?,
                    w2: store.add("img.conv2.w", glorot(rng, k2, CONV2_OUT))?,
                    b2: store.add("img.conv2.b", Tensor::zeros(&[CONV2_OUT]))?,
                    gather2: conv2_gather(cfg.r),
                };
                (Some(conv), CONV2_OUT)
            }
            Backbone::Passthrough => {
                if cfg.feature_dim == 0 {
                    return Err(Error::Config("passthrough feature_dim must be positive".into()));
                }
                (None, cfg.feature_dim)
            }
        };
        let head_w = store.add("img.head.w", glorot(rng, head_in, cfg.d))?;
        let head_b = store.add("img.head.b", Tensor::zeros(&[cfg.d]))?;
        Ok(Self {
            cfg,
            conv,
            head_w,
            head_b,
        })
    }

    /// Resize and lay out a tile's image once, for use in every later pass.
    pub fn prepare(&self, tile_id: &str, image: Option<&TileImage>) -> Result<PreparedImage> {
        match (self.cfg.backbone, image) {
            (_, None) => Err(Error::tile(tile_id, "no image")),
            (Backbone::ToyConv, Some(TileImage::Pixels(p))) => Ok(PreparedImage::Pixels {
                cols: conv1_im2col(p, self.cfg.r).map_err(|e| Error::tile(tile_id, e.to_string()))?,
            }),
            (Backbone::Passthrough, Some(TileImage::Features(f))) => {
                if f.dim != self.cfg.feature_dim {
                    return Err(Error::tile(
                        tile_id,
                        format!("feature dim {} but encoder expects {}", f.dim, self.cfg.feature_dim),
                    ));
                }
                let rows = compose_features(f).map_err(|e| Error::tile(tile_id, e.to_string()))?;
                if rows[patch_range(Scale::Macro).start].is_none() {
                    return Err(Error::tile(tile_id, "every image patch is empty"));
                }
                Ok(PreparedImage::Features { rows, dim: f.dim })
            }
            (Backbone::ToyConv, Some(TileImage::Features(_))) => Err(Error::tile(
                tile_id,
                "toy_conv backbone needs pixels; use passthrough for patch features",
            )),
            (Backbone::Passthrough, Some(TileImage::Pixels(_))) => Err(Error::tile(
                tile_id,
                "passthrough backbone needs precomputed micro patch features",
            )),
        }
    }

    /// Embeddings of all 21 patches, `[21, d]`. Rows of empty patches are
    /// meaningless and must be skipped by the caller.
    pub fn encode_patches(&self, tape: &mut Tape, store: &ParamStore, img: &PreparedImage) -> Result<Var> {
        let feats = match (img, &self.conv) {
            (PreparedImage::Pixels { cols }, Some(c)) => {
                let x = tape.constant(cols.clone());
                let w1 = tape.param(store, c.w1);
                let b1 = tape.param(store, c.b1);
                let h1 = tape.matmul(x, w1)?;
                let h1 = tape.add_bias(h1, b1)?;
                let h1 = tape.relu(h1);
                let p2 = (self.cfg.r / 8) * (self.cfg.r / 8);
                let x2 = tape.gather(h1, c.gather2.clone(), &[TOTAL_PATCHES * p2, CONV1_OUT * 4])?;
                let w2 = tape.param(store, c.w2);
                let b2 = tape.param(store, c.b2);
                let h2 = tape.matmul(x2, w2)?;
                let h2 = tape.add_bias(h2, b2)?;
                let h2 = tape.relu(h2);
                tape.group_mean_rows(h2, p2)?
            }
            (PreparedImage::Features { rows, dim }, None) => {
                let data = rows
                    .iter()
                    .flat_map(|r| r.clone().unwrap_or_else(|| vec![0.0; *dim]))
                    .collect();
                tape.constant(Tensor::matrix(TOTAL_PATCHES, *dim, data)?)
            }
            _ => return Err(Error::invalid("prepared image does not match the backbone")),
        };
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let out = tape.matmul(feats, w)?;
        tape.add_bias(out, b)
    }

    /// Mean over a scale's non-empty patch rows, `[1, d]`.
    pub fn pool_scale(&self, tape: &mut Tape, patches: Var, present: &[bool], scale: Scale) -> Result<Var> {
        let rows: Vec<usize> = patch_range(scale).filter(|&j| present[j]).collect();
        if rows.is_empty() {
            return Err(Error::invalid(format!("all {scale} patches are empty")));
        }
        let sel = tape.gather_rows(patches, rows)?;
        tape.mean_rows(sel)
    }

    /// Un-normalized `[1, d]` embeddings for micro, meso and macro.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: &PreparedImage) -> Result<[Var; 3]> {
        let patches = self.encode_patches(tape, store, img)?;
        let present = img.present();
        Ok([
            self.pool_scale(tape, patches, &present, Scale::Micro)?,
            self.pool_scale(tape, patches, &present, Scale::Meso)?,
            self.pool_scale(tape, patches, &present, Scale::Macro)?,
        ])
    }
}

/// im2col for a 4x4 stride-4 convolution over every resized patch of a tile.
/// Pixels are centred at 0.5.
pub fn conv1_im2col(image: &PixelGrid, r: usize) -> Result<Tensor> {
    if image.channels != CHANNELS {
        return Err(Error::invalid(format!(
            "expected {CHANNELS} channels, got {}",
            image.channels
        )));
    }
    let s1 = r / 4;
    let k1 = CHANNELS * 16;
    let mut data = Vec::with_capacity(TOTAL_PATCHES * s1 * s1 * k1);
    for scale in Scale::ALL {
        for patch in partition_tile(image, scale)?.patches {
            let px = bilinear_resize(&patch, r);
            for i in 0..s1 {
                for j in 0..s1 {
                    for ch in 0..CHANNELS {
                        for ki in 0..4 {
                            for kj in 0..4 {
                                let (y, x) = (4 * i + ki, 4 * j + kj);
                                data.push(px[(y * r + x) * CHANNELS + ch] - 0.5);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(TOTAL_PATCHES * s1 * s1, k1, data)
}

fn conv2_gather(r: usize) -> Vec<usize> {
    let (s1, s2) = (r / 4, r / 8);
    let mut idx = Vec::with_capacity(TOTAL_PATCHES * s2 * s2 * 4 * CONV1_OUT);
    for p in 0..TOTAL_PATCHES {
        for a in 0..s2 {
            for b in 0..s2 {
                for ki in 0..2 {
                    for kj in 0..2 {
                        let src = p * s1 * s1 + (2 * a + ki) * s1 + (2 * b + kj);
                        idx.extend((0..CONV1_OUT).map(|c| src * CONV1_OUT + c));
                    }
                }
            }
        }
    }
    idx
}
