//! Joint optimisation of both encoders under the multi-scale contrastive objective.
//!
//! Each tile gets its own tape for the encoder forward pass. The batch loss
//! is built on a separate tape whose inputs are the stacked tile embeddings;
//! its gradients are pushed back into every tile tape and the resulting
//! parameter gradients are summed in a fixed tile order, so results do not
//! depend on how many threads evaluate the tiles.

mod checkpoint;
mod config;
mod optim;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{TrainConfig, TRAIN_KEYS};
pub use optim::{clip_grad_norm, Adam};

use crate::alignment::{total_loss, Temperature};
use crate::datagen::{Dataset, ExpressionNorm, Split, TileImage};
use crate::error::{Error, Result};
use crate::image_encoder::{Backbone, ImageEncoder, ImageEncoderConfig, PreparedImage};
use crate::numcore::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::st_encoder::{Mode, NoGraphEncoder, PreparedCells, StEncoder, StEncoderConfig};

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5348;
const GUMBEL_STREAM: u64 = 0x6755;

/// The cell-graph side: the hierarchical encoder or its set-encoder ablation.
#[derive(Clone, Debug)]
pub enum StBranch {
    Graph(StEncoder),
    NoGraph(NoGraphEncoder),
}

/// Both encoders, their parameters and the expression normalisation they were trained with.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub st: StBranch,
    pub tau: Temperature,
    pub norm: ExpressionNorm,
}

/// One tile ready for repeated forward passes.
#[derive(Clone, Debug)]
pub struct PreparedTile {
    /// Index into the dataset's tile list.
    pub index: usize,
    pub image: PreparedImage,
    pub cells: PreparedCells,
}

/// A tile's forward pass, kept alive for the backward pass.
pub struct TileForward {
    pub tape: Tape,
    pub image: [Var; 3],
    pub st: [Var; 3],
    /// Stage-final per-cell embeddings.
    pub cells: [Var; 3],
}

/// Infer-mode embeddings of one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TileEmbedding {
    pub index: usize,
    pub image: [Vec<f64>; 3],
    pub st: [Vec<f64>; 3],
}

impl Model {
    pub fn new(cfg: TrainConfig, norm: ExpressionNorm) -> Result<Self> {
        cfg.validate()?;
        let genes = norm.mean.len();
        let mut rng = Rng::new(cfg.seed).derive(&[INIT_STREAM]);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(
            ImageEncoderConfig {
                backbone: cfg.backbone,
                r: cfg.r,
                d: cfg.d,
                feature_dim: cfg.feature_dim,
            },
            &mut store,
            &mut rng,
        )?;
        let st = if cfg.no_graph {
            StBranch::NoGraph(NoGraphEncoder::new(genes, cfg.d_h, cfg.d, &mut store, &mut rng)?)
        } else {
            StBranch::Graph(StEncoder::new(
                StEncoderConfig {
                    genes,
                    d_h: cfg.d_h,
                    d: cfg.d,
                    depths: cfg.depths(),
                    scorer_hidden: cfg.scorer_hidden,
                    no_sparsification: cfg.no_sparsification,
                },
                &mut store,
                &mut rng,
            )?)
        };
        let tau = if cfg.learn_tau_c {
            Temperature::learned(&mut store, cfg.tau_c)?
        } else {
            Temperature::Fixed(cfg.tau_c)
        };
        Ok(Self {
            cfg,
            store,
            image,
            st,
            tau,
            norm,
        })
    }

    /// Model with normalisation statistics fitted on the dataset's train split.
    /// For the passthrough backbone the feature length is taken from the data.
    pub fn for_dataset(mut cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        if cfg.backbone == Backbone::Passthrough {
            if let Some(TileImage::Features(f)) = ds.tiles.iter().find_map(|t| t.image.as_ref()) {
                cfg.feature_dim = f.dim;
            }
        }
        Self::new(cfg, ExpressionNorm::fit(ds)?)
    }

    pub fn genes(&self) -> usize {
        self.norm.mean.len()
    }

    /// Prepare the tiles at `indices`. Tiles without cells or image are skipped with a warning.
    pub fn prepare(&self, ds: &Dataset, indices: &[usize]) -> Result<Vec<PreparedTile>> {
        if ds.num_genes() != self.genes() {
            return Err(Error::Dataset(format!(
                "dataset has {} genes, model expects {}",
                ds.num_genes(),
                self.genes()
            )));
        }
        let prepared: Vec<Option<PreparedTile>> = indices
            .par_iter()
            .map(|&i| {
                let tile = &ds.tiles[i];
                if tile.cells.is_empty() || tile.image.is_none() {
                    log::warn!("skipping tile {}: no cells or no image", tile.tile_id);
                    return Ok(None);
                }
                Ok(Some(PreparedTile {
                    index: i,
                    image: self.image.prepare(&tile.tile_id, tile.image.as_ref())?,
                    cells: PreparedCells::new(tile, &self.norm, self.cfg.knn_k, self.cfg.c_max())?,
                }))
            })
            .collect::<Result<_>>()?;
        Ok(prepared.into_iter().flatten().collect())
    }

    pub fn prepare_split(&self, ds: &Dataset, split: Split) -> Result<Vec<PreparedTile>> {
        self.prepare(ds, &ds.indices(split))
    }

    pub fn forward_tile(&self, tile: &PreparedTile, tau_g: f64, mode: Mode, rng: &mut Rng) -> Result<TileForward> {
        let mut tape = Tape::new();
        let image = self.image.forward(&mut tape, &self.store, &tile.image)?;
        let (st, cells) = match &self.st {
            StBranch::Graph(enc) => {
                let out = enc.forward(&mut tape, &self.store, &tile.cells, tau_g, mode, rng)?;
                (out.z, out.h)
            }
            StBranch::NoGraph(enc) => {
                let (cells, z) = enc.forward(&mut tape, &self.store, &tile.cells.x)?;
                ([z; 3], [cells; 3])
            }
        };
        Ok(TileForward { tape, image, st, cells })
    }

    /// Un-normalized infer-mode embeddings for every tile, in input order.
    pub fn embed(&self, tiles: &[PreparedTile]) -> Result<Vec<TileEmbedding>> {
        tiles
            .par_iter()
            .map(|t| {
                let f = self.forward_tile(t, self.cfg.tau_g_end, Mode::Infer, &mut Rng::new(0))?;
                Ok(TileEmbedding {
                    index: t.index,
                    image: f.image.map(|v| f.tape.value(v).to_vec()),
                    st: f.st.map(|v| f.tape.value(v).to_vec()),
                })
            })
            .collect()
    }

    /// Batch loss and its gradient, accumulated into the store.
    ///
    /// Returns per-scale losses and the objective value.
    pub fn accumulate_batch_grad(
        &mut self,
        tiles: &[&PreparedTile],
        tau_g: f64,
        rng_for: impl Fn(usize) -> Rng + Sync,
    ) -> Result<([f64; 3], f64)> {
        let forwards: Vec<TileForward> = tiles
            .par_iter()
            .map(|t| self.forward_tile(t, tau_g, Mode::Train, &mut rng_for(t.index)))
            .collect::<Result<_>>()?;

        let n = tiles.len();
        let mut lt = Tape::new();
        let mut leaves = Vec::with_capacity(3);
        for s in 0..3 {
            let stack = |pick: &dyn Fn(&TileForward) -> Var| -> Result<Tensor> {
                let d = forwards[0].tape.value(pick(&forwards[0])).len();
                let data = forwards.iter().flat_map(|f| f.tape.value(pick(f)).to_vec()).collect();
                Ok(Tensor::matrix(n, d, data)?.with_grad())
            };
            let zi = lt.leaf(stack(&|f| f.image[s])?);
            let zs = lt.leaf(stack(&|f| f.st[s])?);
            leaves.push((zi, zs));
        }
        let pairs = [leaves[0], leaves[1], leaves[2]];
        let losses = total_loss(&mut lt, &self.store, pairs, self.tau, self.cfg.single_scale)?;
        let per = losses.per_scale.map(|v| lt.scalar_value(v));
        let total = lt.scalar_value(losses.total);
        if !total.is_finite() {
            return Ok((per, total));
        }
        let g = lt.backward(losses.total)?;
        lt.accumulate_into(&g, &mut self.store);

        let row = |v: Var, i: usize| -> Option<Vec<f64>> {
            g.get(v).map(|all| {
                let d = all.len() / n;
                all[i * d..(i + 1) * d].to_vec()
            })
        };
        let tile_grads: Vec<Vec<(ParamId, Vec<f64>)>> = forwards
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let mut seeds = Vec::new();
                for (s, (zi, zs)) in pairs.iter().enumerate() {
                    if let Some(gi) = row(*zi, i) {
                        seeds.push((f.image[s], gi));
                    }
                    if let Some(gs) = row(*zs, i) {
                        seeds.push((f.st[s], gs));
                    }
                }
                let grads = f.tape.backward_seeded(&seeds)?;
                Ok(f.tape.param_grads(&grads))
            })
            .collect::<Result<_>>()?;
        for grads in tile_grads {
            for (id, gv) in grads {
                self.store.accumulate(id, &gv);
            }
        }
        Ok((per, total))
    }
}

/// Mean losses over one epoch's batches.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    pub per_scale: [f64; 3],
    pub total: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,L_micro,L_meso,L_macro,L_total,wall_seconds";

pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[EpochMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{:.3}",
            m.epoch, m.per_scale[0], m.per_scale[1], m.per_scale[2], m.total, m.wall_seconds
        )?;
    }
    Ok(())
}

/// Optimiser and sampling state carried between epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Epochs completed so far.
    pub epoch: usize,
    pub adam: Adam,
    /// Stream that shuffles the batch order.
    pub rng: Rng,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        let c = &model.cfg;
        Self {
            epoch: 0,
            adam: Adam::new(&model.store, c.beta1, c.beta2, c.adam_eps),
            rng: Rng::new(c.seed).derive(&[SHUFFLE_STREAM]),
        }
    }
}

/// Drives epochs over a fixed set of prepared training tiles.
pub struct Trainer {
    pub model: Model,
    pub state: TrainState,
    pub tiles: Vec<PreparedTile>,
    pub metrics: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(model: Model, state: TrainState, tiles: Vec<PreparedTile>) -> Result<Self> {
        if tiles.len() < 2 {
            return Err(Error::Dataset(format!(
                "need at least 2 usable training tiles, found {}",
                tiles.len()
            )));
        }
        Ok(Self {
            model,
            state,
            tiles,
            metrics: Vec::new(),
        })
    }

    /// Fresh model and state on the dataset's training split.
    pub fn from_dataset(cfg: TrainConfig, ds: &Dataset) -> Result<Self> {
        if ds.indices(Split::Train).is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let model = Model::for_dataset(cfg, ds)?;
        let tiles = model.prepare_split(ds, Split::Train)?;
        let state = TrainState::fresh(&model);
        Self::new(model, state, tiles)
    }

    /// Continue from a checkpoint on the dataset's training split.
    pub fn resume(ckpt: Checkpoint, ds: &Dataset) -> Result<Self> {
        let tiles = ckpt.model.prepare_split(ds, Split::Train)?;
        Self::new(ckpt.model, ckpt.state, tiles)
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.model.cfg.epochs
    }

    /// One pass over the training tiles. On a non-finite loss the model and
    /// state are rolled back to the start of the epoch.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let start = Instant::now();
        let snapshot = (self.model.store.clone(), self.state.clone());
        let epoch = self.state.epoch;
        let cfg = self.model.cfg.clone();
        let tau_g = cfg.tau_g(epoch);
        let mut order: Vec<usize> = (0..self.tiles.len()).collect();
        self.state.rng.shuffle(&mut order);

        let mut sums = [0.0; 3];
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::debug!("epoch {}: dropping a trailing batch of one tile", epoch + 1);
                continue;
            }
            let batch: Vec<&PreparedTile> = chunk.iter().map(|&i| &self.tiles[i]).collect();
            self.model.store.zero_grad();
            let seed = cfg.seed;
            let (per, t) = self.model.accumulate_batch_grad(&batch, tau_g, |tile| {
                Rng::new(seed).derive(&[GUMBEL_STREAM, epoch as u64, b as u64, tile as u64])
            })?;
            if !t.is_finite() {
                self.model.store = snapshot.0;
                self.state = snapshot.1;
                return Err(Error::Diverged { epoch: epoch + 1 });
            }
            clip_grad_norm(&mut self.model.store, cfg.clip_norm);
            self.state.adam.update(&mut self.model.store, cfg.lr);
            for (s, p) in sums.iter_mut().zip(per) {
                *s += p;
            }
            total += t;
            batches += 1;
        }
        self.model.store.zero_grad();
        self.state.epoch += 1;
        let nb = batches.max(1) as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            per_scale: sums.map(|s| s / nb),
            total: total / nb,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} L_micro {:.4} L_meso {:.4} L_macro {:.4} L_total {:.4}",
            m.epoch,
            m.per_scale[0],
            m.per_scale[1],
            m.per_scale[2],
            m.total
        );
        self.metrics.push(m.clone());
        Ok(m)
    }

    /// Run epochs until `epoch` have completed (capped at the configured count).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.state.epoch < epoch.min(self.model.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.model.cfg.epochs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            state: self.state.clone(),
        }
    }
}

/// Train on `ds` and return the finished trainer.
pub fn train(ds: &Dataset, cfg: TrainConfig) -> Result<Trainer> {
    let mut t = Trainer::from_dataset(cfg, ds)?;
    t.run()?;
    Ok(t)
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Train and write `config.txt`, `metrics.csv` and `checkpoint.bin` into `out`.
/// On divergence the last good checkpoint is still written before the error is returned.
pub fn train_to_dir(ds: &Dataset, cfg: TrainConfig, out: &Path) -> Result<Trainer> {
    std::fs::create_dir_all(out)?;
    let mut t = Trainer::from_dataset(cfg, ds)?;
    std::fs::write(
        out.join(CONFIG_FILE),
        format!("# resolved training config\n{}", t.model.cfg.to_kv().to_text()),
    )?;
    let result = t.run();
    write_metrics_csv(std::fs::File::create(out.join(METRICS_FILE))?, &t.metrics)?;
    save_checkpoint(&t.checkpoint(), &out.join(CHECKPOINT_FILE))?;
    result.map(|_| t)
}
