//! The `sigmma` command line.
//!
//! Settings resolve in three layers: built-in defaults, then a flat
//! `--config` file, then flags. Every subcommand that writes files also
//! writes the resolved settings next to them, so a run can be repeated from
//! its own output directory.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::cell_graph::Scale;
use crate::config::KvFile;
use crate::datagen::{generate_dataset, load_dataset, save_dataset, Dataset, GenConfig, ImageKind, Split};
use crate::error::{Error, Result};
use crate::eval::{
    embed_split, export_embeddings, linear_probe_gex, retrieval_from_embeddings, run_ablation_suite,
    write_ablation_csv, ExportLevel, Modality, ProbeConfig, ProbeReport, RetrievalReport, DEFAULT_PERCENTS,
};
use crate::selfcheck;
use crate::training::{
    load_checkpoint, save_checkpoint, write_metrics_csv, Model, TrainConfig, Trainer, CHECKPOINT_FILE, CONFIG_FILE,
    METRICS_FILE, TRAIN_KEYS,
};

/// Exit status for bad input: unknown flags, invalid values, unreadable inputs.
pub const EXIT_INVALID: i32 = 1;
/// Exit status for failures while running, including a failed selfcheck.
pub const EXIT_FAILURE: i32 = 2;

/// Records which dataset a training run used, so later subcommands need only `--run`.
pub const RUN_FILE: &str = "run.txt";

// Report output ignores write errors so piping into `head` does not panic.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout(), $($t)*);
    }};
}

pub const GEN_KEYS: &[&str] = &[
    "seed",
    "tiles",
    "m",
    "genes",
    "cells_min",
    "cells_max",
    "latent_dim",
    "noise",
    "stain_sd",
    "smoothing",
    "image_kind",
    "feature_dim",
];

pub const EVAL_KEYS: &[&str] = &["k_genes", "pca_dims", "lambda", "per_tile", "scale", "percents"];

#[derive(Debug, Parser)]
#[command(
    name = "sigmma",
    version,
    about = "Multi-scale contrastive alignment of histology tiles and cell graphs"
)]
pub struct Cli {
    /// Seed for data generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: u16,
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Train both encoders on a dataset.
    Train(TrainArgs),
    /// Linear-probe expression prediction and retrieval on the test split.
    Eval(EvalArgs),
    /// Bidirectional retrieval on the test split.
    Retrieve(RetrieveArgs),
    /// Train and evaluate the four-row component grid.
    Ablate(AblateArgs),
    /// Write embeddings to CSV.
    Export(ExportArgs),
    /// Run the gradient and invariant checks.
    Selfcheck,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tiles: Option<usize>,
    /// Tile side in pixels.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub genes: Option<usize>,
    #[arg(long)]
    pub cells_min: Option<usize>,
    #[arg(long)]
    pub cells_max: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub stain_sd: Option<f64>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// `pixels` or `features`.
    #[arg(long)]
    pub image_kind: Option<String>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Training epochs [default: 200].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Tiles per contrastive batch [default: 16].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Global gradient-norm clip [default: 5].
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Contrastive temperature [default: 0.07].
    #[arg(long)]
    pub tau_c: Option<f64>,
    /// Learn the contrastive temperature instead of fixing it.
    #[arg(long)]
    pub learn_tau_c: bool,
    /// Gumbel temperature at the first epoch [default: 0.5].
    #[arg(long)]
    pub tau_g_start: Option<f64>,
    /// Gumbel temperature at the last epoch [default: 0.1].
    #[arg(long)]
    pub tau_g_end: Option<f64>,
    /// Ablation: replace the cell graph with a gene-set encoder.
    #[arg(long)]
    pub no_graph: bool,
    /// Ablation: train on the macro loss only.
    #[arg(long)]
    pub single_scale: bool,
    /// Ablation: add every candidate edge instead of sampling.
    #[arg(long)]
    pub no_sparsification: bool,
    #[arg(long)]
    pub depth_micro: Option<usize>,
    #[arg(long)]
    pub depth_meso: Option<usize>,
    #[arg(long)]
    pub depth_macro: Option<usize>,
    /// Hidden width of the cell-graph encoder [default: 64].
    #[arg(long)]
    pub d_h: Option<usize>,
    /// Shared embedding width [default: 64].
    #[arg(long)]
    pub d: Option<usize>,
    /// Hidden width of the edge scorer [default: 32].
    #[arg(long)]
    pub scorer_hidden: Option<usize>,
    /// `toy_conv` or `passthrough`.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Side each patch is resized to before the conv backbone.
    #[arg(long)]
    pub r: Option<usize>,
    /// Input length for feature-vector tiles.
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Neighbours per cell in the micro graph [default: 6].
    #[arg(long)]
    pub knn_k: Option<usize>,
    /// Candidate pairs kept per node; 0 keeps all.
    #[arg(long)]
    pub c_max: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory; optional with `--resume`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory for the checkpoint, metrics and resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop and checkpoint once this many epochs have completed.
    #[arg(long, value_name = "EPOCH")]
    pub stop_after: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Default)]
pub struct EvalFlags {
    /// Genes probed, by variance on the training split [default: 50].
    #[arg(long)]
    pub k_genes: Option<usize>,
    /// Principal components kept before the ridge probe [default: 256].
    #[arg(long)]
    pub pca_dims: Option<usize>,
    /// Ridge penalty [default: 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Also report PCC across genes within each tile.
    #[arg(long)]
    pub per_tile: bool,
    /// Retrieval scale: micro, meso or macro.
    #[arg(long)]
    pub scale: Option<String>,
    /// Comma-separated retrieval percentages.
    #[arg(long, value_delimiter = ',')]
    pub percents: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory; defaults to the one recorded by `train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory; defaults to `<run>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory; defaults to `<run>/retrieval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scale: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub percents: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
    /// `tile` or `cell`.
    #[arg(long, default_value = "tile")]
    pub level: String,
    /// `he` or `st`; cell level needs `st`.
    #[arg(long, default_value = "he")]
    pub modality: String,
}

fn set_opt<T: Display>(kv: &mut KvFile, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        kv.set(key, v);
    }
}

fn set_flag(kv: &mut KvFile, key: &str, on: bool) {
    if on {
        kv.set(key, true);
    }
}

impl TrainFlags {
    fn apply(&self, kv: &mut KvFile) {
        set_opt(kv, "epochs", &self.epochs);
        set_opt(kv, "batch_size", &self.batch_size);
        set_opt(kv, "lr", &self.lr);
        set_opt(kv, "clip_norm", &self.clip_norm);
        set_opt(kv, "tau_c", &self.tau_c);
        set_flag(kv, "learn_tau_c", self.learn_tau_c);
        set_opt(kv, "tau_g_start", &self.tau_g_start);
        set_opt(kv, "tau_g_end", &self.tau_g_end);
        set_flag(kv, "no_graph", self.no_graph);
        set_flag(kv, "single_scale", self.single_scale);
        set_flag(kv, "no_sparsification", self.no_sparsification);
        set_opt(kv, "depth_micro", &self.depth_micro);
        set_opt(kv, "depth_meso", &self.depth_meso);
        set_opt(kv, "depth_macro", &self.depth_macro);
        set_opt(kv, "d_h", &self.d_h);
        set_opt(kv, "d", &self.d);
        set_opt(kv, "scorer_hidden", &self.scorer_hidden);
        set_opt(kv, "backbone", &self.backbone);
        set_opt(kv, "r", &self.r);
        set_opt(kv, "feature_dim", &self.feature_dim);
        set_opt(kv, "knn_k", &self.knn_k);
        set_opt(kv, "c_max", &self.c_max);
    }
}

impl EvalFlags {
    fn apply(&self, kv: &mut KvFile) {
        set_opt(kv, "k_genes", &self.k_genes);
        set_opt(kv, "pca_dims", &self.pca_dims);
        set_opt(kv, "lambda", &self.lambda);
        set_flag(kv, "per_tile", self.per_tile);
        set_opt(kv, "scale", &self.scale);
        set_percents(kv, &self.percents);
    }
}

fn set_percents(kv: &mut KvFile, percents: &Option<Vec<usize>>) {
    if let Some(p) = percents {
        kv.set("percents", p.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    }
}

impl GenerateArgs {
    fn apply(&self, kv: &mut KvFile) {
        set_opt(kv, "tiles", &self.tiles);
        set_opt(kv, "m", &self.m);
        set_opt(kv, "genes", &self.genes);
        set_opt(kv, "cells_min", &self.cells_min);
        set_opt(kv, "cells_max", &self.cells_max);
        set_opt(kv, "latent_dim", &self.latent_dim);
        set_opt(kv, "noise", &self.noise);
        set_opt(kv, "stain_sd", &self.stain_sd);
        set_opt(kv, "smoothing", &self.smoothing);
        set_opt(kv, "image_kind", &self.image_kind);
        set_opt(kv, "feature_dim", &self.feature_dim);
    }
}

/// Generator settings and seed from `kv`; tile count defaults to 64.
pub fn gen_config_from_kv(kv: &KvFile) -> Result<(GenConfig, u64)> {
    let mut c = GenConfig::default();
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = kv.get(stringify!($field))? { c.$field = v; })*
        };
    }
    take!(
        m,
        genes,
        cells_min,
        cells_max,
        latent_dim,
        noise,
        stain_sd,
        smoothing,
        feature_dim
    );
    if let Some(k) = kv.get_str("image_kind") {
        c.image_kind = ImageKind::parse(k)?;
    }
    let tiles: usize = kv.get("tiles")?.unwrap_or(64);
    if tiles == 0 {
        return Err(Error::Config("tiles must be positive".into()));
    }
    let c = c.with_tiles(tiles);
    c.validate()?;
    Ok((c, kv.get("seed")?.unwrap_or(0)))
}

pub fn gen_config_to_kv(c: &GenConfig, seed: u64) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("seed", seed);
    kv.set("tiles", c.num_tiles());
    kv.set("m", c.m);
    kv.set("genes", c.genes);
    kv.set("cells_min", c.cells_min);
    kv.set("cells_max", c.cells_max);
    kv.set("latent_dim", c.latent_dim);
    kv.set("noise", c.noise);
    kv.set("stain_sd", c.stain_sd);
    kv.set("smoothing", c.smoothing);
    kv.set("image_kind", c.image_kind.name());
    kv.set("feature_dim", c.feature_dim);
    kv
}

/// Probe settings, retrieval scale and percentages from `kv`.
pub fn eval_config_from_kv(kv: &KvFile) -> Result<(ProbeConfig, Scale, Vec<usize>)> {
    let mut p = ProbeConfig::default();
    macro_rules! take {
        ($($field:ident),*) => {
            $(if let Some(v) = kv.get(stringify!($field))? { p.$field = v; })*
        };
    }
    take!(k_genes, pca_dims, lambda, per_tile);
    if !(p.lambda >= 0.0) || p.k_genes == 0 || p.pca_dims == 0 {
        return Err(Error::Config(
            "probe needs lambda >= 0 and positive k_genes, pca_dims".into(),
        ));
    }
    let scale = kv
        .get_str("scale")
        .map(Scale::parse)
        .transpose()?
        .unwrap_or(Scale::Macro);
    let percents = match kv.get_str("percents") {
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|p| (1..=100).contains(p))
                    .ok_or_else(|| Error::Config(format!("percents: {t:?} is not an integer in 1..=100")))
            })
            .collect::<Result<Vec<_>>>()?,
        None => DEFAULT_PERCENTS.to_vec(),
    };
    Ok((p, scale, percents))
}

fn eval_config_to_kv(p: &ProbeConfig, scale: Scale, percents: &[usize]) -> KvFile {
    let mut kv = KvFile::new();
    kv.set("k_genes", p.k_genes);
    kv.set("pca_dims", p.pca_dims);
    kv.set("lambda", p.lambda);
    kv.set("per_tile", p.per_tile);
    kv.set("scale", scale);
    set_percents(&mut kv, &Some(percents.to_vec()));
    kv
}

/// The `--config` file (if any) with its keys checked against every known setting.
fn base_kv(cli: &Cli) -> Result<KvFile> {
    let Some(path) = &cli.config else {
        return Ok(KvFile::new());
    };
    let kv = KvFile::load(path)?;
    let known: Vec<&str> = TRAIN_KEYS.iter().chain(GEN_KEYS).chain(EVAL_KEYS).copied().collect();
    kv.check_keys(&known).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(kv)
}

fn write_resolved(path: &Path, what: &str, kv: &KvFile) -> Result<()> {
    fs::write(path, format!("# resolved {what} config\n{}", kv.to_text()))?;
    Ok(())
}

fn existing_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} directory {} does not exist",
            path.display()
        )))
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    existing_dir(path, "dataset")?;
    load_dataset(path)
}

/// `--data` if given, else the dataset recorded in the run directory.
fn run_data_path(run: &Path, data: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(d) = data {
        return Ok(d.clone());
    }
    let file = run.join(RUN_FILE);
    if !file.exists() {
        return Err(Error::invalid(format!(
            "{} not found; pass --data to name the dataset",
            file.display()
        )));
    }
    KvFile::load(&file)?
        .get_str("data")
        .map(PathBuf::from)
        .ok_or_else(|| Error::format(&file, "missing key data"))
}

fn load_run(run: &Path, data: &Option<PathBuf>) -> Result<(Model, Dataset)> {
    existing_dir(run, "run")?;
    let ckpt = run.join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Error::invalid(format!("no checkpoint at {}", ckpt.display())));
    }
    let model = load_checkpoint(&ckpt)?.model;
    let ds = open_dataset(&run_data_path(run, data)?)?;
    if ds.num_genes() != model.genes() {
        return Err(Error::Dataset(format!(
            "checkpoint expects {} genes, dataset has {}",
            model.genes(),
            ds.num_genes()
        )));
    }
    Ok((model, ds))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    say!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Fixed-width table; the first column is left-aligned, the rest right-aligned.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[&str]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                s.push_str(&format!("{c:<w$}"));
            } else {
                s.push_str(&format!("  {c:>w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    let mut out = line(header);
    out.push_str(&line(&rule.iter().map(String::as_str).collect::<Vec<_>>()));
    for r in rows {
        out.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    out
}

fn retrieval_rows(r: &RetrievalReport) -> Vec<Vec<String>> {
    r.percents
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                format!("{p}%"),
                format!("{:.4}", r.he_to_st[i]),
                format!("{:.4}", r.st_to_he[i]),
            ]
        })
        .collect()
}

fn write_retrieval_csv(path: &Path, r: &RetrievalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scale", "percent", "n", "he_to_st", "st_to_he"])?;
    for (i, p) in r.percents.iter().enumerate() {
        w.write_record([
            r.scale.to_string(),
            p.to_string(),
            r.n.to_string(),
            r.he_to_st[i].to_string(),
            r.st_to_he[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_probe_csv(path: &Path, p: &ProbeReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for g in &p.genes {
        w.serialize(g)?;
    }
    w.flush()?;
    Ok(())
}

fn test_retrieval(model: &Model, ds: &Dataset, scale: Scale, percents: &[usize]) -> Result<RetrievalReport> {
    let emb = embed_split(model, ds, Split::Test)?;
    let s = scale.index();
    let image: Vec<Vec<f64>> = emb.iter().map(|e| e.image[s].clone()).collect();
    let st: Vec<Vec<f64>> = emb.iter().map(|e| e.st[s].clone()).collect();
    retrieval_from_embeddings(&image, &st, scale, percents)
}

fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let mut kv = base_kv(cli)?;
    a.apply(&mut kv);
    set_opt(&mut kv, "seed", &cli.seed);
    let (cfg, seed) = gen_config_from_kv(&kv)?;
    let ds = generate_dataset(&cfg, seed)?;
    save_dataset(&ds, &a.out)?;
    write_resolved(&a.out.join(CONFIG_FILE), "generation", &gen_config_to_kv(&cfg, seed))?;
    let count = |s: Split| ds.indices(s).len();
    let (train, val, test) = (count(Split::Train), count(Split::Val), count(Split::Test));
    if cli.json {
        print_json(&json!({
            "out": a.out,
            "tiles": ds.tiles.len(),
            "genes": ds.num_genes(),
            "train": train, "val": val, "test": test,
            "split_hash": ds.split_hash(),
        }))
    } else {
        say!(
            "wrote {} tiles ({train} train / {val} val / {test} test), {} genes to {}",
            ds.tiles.len(),
            ds.num_genes(),
            a.out.display()
        );
        Ok(())
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let (mut trainer, data) = if a.resume {
        if !ckpt_path.exists() {
            return Err(Error::invalid(format!(
                "--resume: no checkpoint at {}",
                ckpt_path.display()
            )));
        }
        let data = run_data_path(&a.out, &a.data)?;
        let ckpt = load_checkpoint(&ckpt_path)?;
        log::info!(
            "resuming after epoch {}; settings come from the checkpoint",
            ckpt.state.epoch
        );
        (Trainer::resume(ckpt, &open_dataset(&data)?)?, data)
    } else {
        let data = a
            .data
            .clone()
            .ok_or_else(|| Error::invalid("train needs --data (or --resume)"))?;
        let mut kv = base_kv(cli)?;
        a.train.apply(&mut kv);
        set_opt(&mut kv, "seed", &cli.seed);
        let cfg = TrainConfig::from_kv(&kv)?;
        (Trainer::from_dataset(cfg, &open_dataset(&data)?)?, data)
    };
    write_resolved(&a.out.join(CONFIG_FILE), "training", &trainer.model.cfg.to_kv())?;
    let mut run = KvFile::new();
    run.set("data", fs::canonicalize(&data).unwrap_or(data).display());
    run.set("threads", cli.threads);
    write_resolved(&a.out.join(RUN_FILE), "run", &run)?;

    let first_epoch = trainer.state.epoch;
    let result = trainer.run_until(a.stop_after.unwrap_or(usize::MAX));
    // Metrics from earlier segments of a resumed run stay in place.
    let metrics_path = a.out.join(METRICS_FILE);
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &trainer.metrics)?;
    if a.resume && first_epoch > 0 && metrics_path.exists() {
        let body: String = String::from_utf8_lossy(&buf)
            .lines()
            .skip(1)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)?
            .write_all(body.as_bytes())?;
    } else {
        fs::write(&metrics_path, buf)?;
    }
    save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    result?;

    let last = trainer.metrics.last();
    if cli.json {
        print_json(&json!({
            "out": a.out,
            "epochs_completed": trainer.state.epoch,
            "epochs": trainer.model.cfg.epochs,
            "final": last.map(|m| json!({
                "L_micro": m.per_scale[0], "L_meso": m.per_scale[1], "L_macro": m.per_scale[2], "L_total": m.total,
            })),
        }))
    } else {
        match last {
            Some(m) => say!(
                "epoch {}/{}: L_total {:.4} (micro {:.4}, meso {:.4}, macro {:.4}); checkpoint in {}",
                m.epoch,
                trainer.model.cfg.epochs,
                m.total,
                m.per_scale[0],
                m.per_scale[1],
                m.per_scale[2],
                a.out.display()
            ),
            None => say!("nothing to do: {} epochs already completed", trainer.state.epoch),
        }
        Ok(())
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mut kv = base_kv(cli)?;
    a.eval.apply(&mut kv);
    let (probe_cfg, scale, percents) = eval_config_from_kv(&kv)?;
    let (model, ds) = load_run(&a.run, &a.data)?;
    let probe = linear_probe_gex(&model, &ds, &probe_cfg)?;
    let retr = test_retrieval(&model, &ds, scale, &percents)?;

    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    fs::create_dir_all(&out)?;
    write_resolved(
        &out.join(CONFIG_FILE),
        "evaluation",
        &eval_config_to_kv(&probe_cfg, scale, &percents),
    )?;
    write_probe_csv(&out.join("probe_genes.csv"), &probe)?;
    write_retrieval_csv(&out.join("retrieval.csv"), &retr)?;

    if cli.json {
        return print_json(&json!({ "probe": probe, "retrieval": retr }));
    }
    say!(
        "expression probe ({} genes, {} train / {} test tiles, lambda {}):",
        probe.genes.len(),
        probe.n_train,
        probe.n_test,
        probe.lambda
    );
    let mut rows = vec![
        vec![
            "PCC".to_string(),
            format!("{:.4}", probe.pcc.mean),
            format!("{:.4}", probe.pcc.std),
        ],
        vec![
            "MSE".to_string(),
            format!("{:.4}", probe.mse.mean),
            format!("{:.4}", probe.mse.std),
        ],
    ];
    if let Some(t) = probe.per_tile_pcc {
        rows.push(vec![
            "PCC per tile".into(),
            format!("{:.4}", t.mean),
            format!("{:.4}", t.std),
        ]);
    }
    say_raw!("{}", table(&["metric", "mean", "std"], &rows));
    say!("\nretrieval at {scale} scale over {} test tiles:", retr.n);
    say_raw!("{}", table(&["recall@", "HE->ST", "ST->HE"], &retrieval_rows(&retr)));
    Ok(())
}

fn cmd_retrieve(cli: &Cli, a: &RetrieveArgs) -> Result<()> {
    let mut kv = base_kv(cli)?;
    set_opt(&mut kv, "scale", &a.scale);
    set_percents(&mut kv, &a.percents);
    let (probe_cfg, scale, percents) = eval_config_from_kv(&kv)?;
    let (model, ds) = load_run(&a.run, &a.data)?;
    let retr = test_retrieval(&model, &ds, scale, &percents)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("retrieval"));
    fs::create_dir_all(&out)?;
    write_resolved(
        &out.join(CONFIG_FILE),
        "retrieval",
        &eval_config_to_kv(&probe_cfg, scale, &percents),
    )?;
    write_retrieval_csv(&out.join("retrieval.csv"), &retr)?;
    if cli.json {
        return print_json(&retr);
    }
    say!("retrieval at {scale} scale over {} test tiles:", retr.n);
    say_raw!("{}", table(&["recall@", "HE->ST", "ST->HE"], &retrieval_rows(&retr)));
    Ok(())
}

fn cmd_ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let mut kv = base_kv(cli)?;
    a.train.apply(&mut kv);
    a.eval.apply(&mut kv);
    set_opt(&mut kv, "seed", &cli.seed);
    let base = TrainConfig::from_kv(&kv)?;
    let (probe_cfg, scale, percents) = eval_config_from_kv(&kv)?;
    if scale != Scale::Macro || percents != DEFAULT_PERCENTS {
        return Err(Error::invalid(
            "ablate reports macro-scale recall at 5, 10 and 15 percent only",
        ));
    }
    let ds = open_dataset(&a.data)?;
    let rows = run_ablation_suite(&ds, &base, &probe_cfg)?;
    fs::create_dir_all(&a.out)?;
    let mut resolved = base.to_kv();
    resolved.merge(&eval_config_to_kv(&probe_cfg, scale, &percents));
    write_resolved(&a.out.join(CONFIG_FILE), "ablation", &resolved)?;
    write_ablation_csv(fs::File::create(a.out.join("ablation.csv"))?, &rows)?;
    if cli.json {
        return print_json(&rows);
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let tick = |b: bool| if b { "x" } else { "" }.to_string();
            vec![
                r.variant.clone(),
                tick(r.graph),
                tick(r.multi_scale),
                tick(r.sparsification),
                format!("{:.4}", r.pcc_mean),
                format!("{:.4}", r.he_to_st_r10),
                format!("{:.4}", r.st_to_he_r10),
            ]
        })
        .collect();
    say_raw!(
        "{}",
        table(
            &[
                "variant",
                "graph",
                "multi-scale",
                "sparsification",
                "PCC",
                "HE->ST R@10",
                "ST->HE R@10"
            ],
            &body
        )
    );
    Ok(())
}

fn cmd_export(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let level = ExportLevel::parse(&a.level)?;
    let modality = Modality::parse(&a.modality)?;
    if level == ExportLevel::Cell && modality == Modality::He {
        return Err(Error::invalid("cell-level export needs --modality st"));
    }
    let (model, ds) = load_run(&a.run, &a.data)?;
    let rows = export_embeddings(&model, &ds, &a.out, level, modality)?;
    let mut kv = KvFile::new();
    kv.set("run", a.run.display());
    kv.set("level", &a.level);
    kv.set("modality", &a.modality);
    let stem = a
        .out
        .file_stem()
        .map_or("export".into(), |s| s.to_string_lossy().into_owned());
    write_resolved(&a.out.with_file_name(format!("{stem}.config.txt")), "export", &kv)?;
    if cli.json {
        print_json(&json!({ "out": a.out, "rows": rows, "level": a.level, "modality": a.modality }))
    } else {
        say!("wrote {rows} rows to {}", a.out.display());
        Ok(())
    }
}

/// Returns whether every check passed.
fn cmd_selfcheck(cli: &Cli) -> Result<bool> {
    let checks = selfcheck::run_all();
    let ok = checks.iter().all(|c| c.passed);
    if cli.json {
        print_json(&json!({ "passed": ok, "checks": checks }))?;
    } else {
        for c in &checks {
            say!("{} {:<22} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(cli, a)?,
        Command::Train(a) => cmd_train(cli, a)?,
        Command::Eval(a) => cmd_eval(cli, a)?,
        Command::Retrieve(a) => cmd_retrieve(cli, a)?,
        Command::Ablate(a) => cmd_ablate(cli, a)?,
        Command::Export(a) => cmd_export(cli, a)?,
        Command::Selfcheck => return Ok(if cmd_selfcheck(cli)? { 0 } else { EXIT_FAILURE }),
    }
    Ok(0)
}

/// Parse `args` (program name first), run the subcommand and return the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_INVALID,
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.into()).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {} threads: {e}", cli.threads);
            return EXIT_FAILURE;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_INVALID
            } else {
                EXIT_FAILURE
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_values() {
        let mut kv = KvFile::parse("epochs = 5\nlr = 0.5\ntiles = 16").unwrap();
        let flags = TrainFlags {
            epochs: Some(9),
            no_graph: true,
            ..TrainFlags::default()
        };
        flags.apply(&mut kv);
        let cfg = TrainConfig::from_kv(&kv).unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.no_graph), (9, 0.5, true));
        let (gen, seed) = gen_config_from_kv(&kv).unwrap();
        assert_eq!((gen.num_tiles(), seed), (16, 0));
    }

    #[test]
    fn gen_config_round_trips() {
        let kv = KvFile::parse("tiles = 12\nstain_sd = 0.25\nimage_kind = features\nseed = 4").unwrap();
        let (c, seed) = gen_config_from_kv(&kv).unwrap();
        let (back, seed2) = gen_config_from_kv(&gen_config_to_kv(&c, seed)).unwrap();
        assert_eq!((back, seed2), (c, 4));
    }

    #[test]
    fn eval_settings_parse_and_reject_bad_values() {
        let (p, scale, percents) =
            eval_config_from_kv(&KvFile::parse("scale = meso\npercents = 1, 20\nlambda = 2").unwrap()).unwrap();
        assert_eq!((scale, percents, p.lambda), (Scale::Meso, vec![1, 20], 2.0));
        for bad in ["percents = 0", "percents = 5,x", "scale = giant", "lambda = -1"] {
            assert!(eval_config_from_kv(&KvFile::parse(bad).unwrap()).is_err(), "{bad}");
        }
    }

    #[test]
    fn table_aligns_columns() {
        let t = table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }
}
