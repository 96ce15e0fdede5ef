use sha2::{Digest, Sha256};

use crate::config::KvFile;
use crate::error::{Error, Result};
use crate::image_encoder::Backbone;

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub tau_c: f64,
    pub learn_tau_c: bool,
    /// Gumbel temperature, annealed linearly from start to end over the run.
    pub tau_g_start: f64,
    pub tau_g_end: f64,
    pub seed: u64,
    pub no_graph: bool,
    pub single_scale: bool,
    pub no_sparsification: bool,
    pub depth_micro: usize,
    pub depth_meso: usize,
    pub depth_macro: usize,
    pub d_h: usize,
    pub d: usize,
    pub scorer_hidden: usize,
    pub backbone: Backbone,
    pub r: usize,
    pub feature_dim: usize,
    pub knn_k: usize,
    /// Candidate pairs kept per node; 0 keeps all.
    pub c_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            tau_c: 0.07,
            learn_tau_c: false,
            tau_g_start: 0.5,
            tau_g_end: 0.1,
            seed: 0,
            no_graph: false,
            single_scale: false,
            no_sparsification: false,
            depth_micro: 2,
            depth_meso: 1,
            depth_macro: 1,
            d_h: 64,
            d: 64,
            scorer_hidden: 32,
            backbone: Backbone::ToyConv,
            r: 32,
            feature_dim: 32,
            knn_k: 6,
            c_max: 8,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "tau_c",
    "learn_tau_c",
    "tau_g_start",
    "tau_g_end",
    "seed",
    "no_graph",
    "single_scale",
    "no_sparsification",
    "depth_micro",
    "depth_meso",
    "depth_macro",
    "d_h",
    "d",
    "scorer_hidden",
    "backbone",
    "r",
    "feature_dim",
    "knn_k",
    "c_max",
];

impl TrainConfig {
    /// The Table-3 style variant: all three components off.
    pub fn baseline(self) -> Self {
        Self {
            no_graph: true,
            single_scale: true,
            no_sparsification: true,
            ..self
        }
    }

    pub fn depths(&self) -> [usize; 3] {
        [self.depth_micro, self.depth_meso, self.depth_macro]
    }

    pub fn c_max(&self) -> Option<usize> {
        (self.c_max > 0).then_some(self.c_max)
    }

    /// Gumbel temperature used during `epoch` (0-based).
    pub fn tau_g(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_g_start;
        }
        let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
        self.tau_g_start + t * (self.tau_g_end - self.tau_g_start)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and adam_eps > 0");
        }
        if !(self.tau_c > 0.0) || !(self.tau_g_start > 0.0) || !(self.tau_g_end > 0.0) {
            return bad("temperatures must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if self.d == 0 || self.d_h == 0 || self.scorer_hidden == 0 || self.knn_k == 0 {
            return bad("d, d_h, scorer_hidden and knn_k must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_eps", self.adam_eps);
        kv.set("clip_norm", self.clip_norm);
        kv.set("tau_c", self.tau_c);
        kv.set("learn_tau_c", self.learn_tau_c);
        kv.set("tau_g_start", self.tau_g_start);
        kv.set("tau_g_end", self.tau_g_end);
        kv.set("seed", self.seed);
        kv.set("no_graph", self.no_graph);
        kv.set("single_scale", self.single_scale);
        kv.set("no_sparsification", self.no_sparsification);
        kv.set("depth_micro", self.depth_micro);
        kv.set("depth_meso", self.depth_meso);
        kv.set("depth_macro", self.depth_macro);
        kv.set("d_h", self.d_h);
        kv.set("d", self.d);
        kv.set("scorer_hidden", self.scorer_hidden);
        kv.set("backbone", self.backbone.name());
        kv.set("r", self.r);
        kv.set("feature_dim", self.feature_dim);
        kv.set("knn_k", self.knn_k);
        kv.set("c_max", self.c_max);
        kv
    }

    /// Defaults overridden by any training keys present in `kv`.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = kv.get(stringify!($field))? { c.$field = v; })*
            };
        }
        take!(
            epochs,
            batch_size,
            lr,
            beta1,
            beta2,
            adam_eps,
            clip_norm,
            tau_c,
            learn_tau_c,
            tau_g_start,
            tau_g_end,
            seed,
            no_graph,
            single_scale,
            no_sparsification,
            depth_micro,
            depth_meso,
            depth_macro,
            d_h,
            d,
            scorer_hidden,
            r,
            feature_dim,
            knn_k,
            c_max
        );
        if let Some(b) = kv.get_str("backbone") {
            c.backbone = Backbone::parse(b)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// First eight bytes of the SHA-256 of the canonical config text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_kv().to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
