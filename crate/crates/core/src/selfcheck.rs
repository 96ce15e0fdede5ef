//! Fast runtime versions of the gradient and invariant suites, for `sigmma selfcheck`.

use serde::Serialize;

use crate::alignment::total_loss;
use crate::cell_graph::Scale;
use crate::datagen::{generate_dataset, GenConfig, Split};
use crate::error::Result;
use crate::eval::{probe_arrays, retrieval_from_embeddings, ProbeConfig};
use crate::numcore::gradcheck::block_rel_err;
use crate::numcore::{Rng, Tape, Tensor};
use crate::st_encoder::{gumbel_edge_select, neighbor_sets, relaxed_bernoulli, Mode, StEncoder, StEncoderConfig};
use crate::training::{train, Model, PreparedTile, StBranch, TrainConfig};

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        d_h: 8,
        d: 8,
        scorer_hidden: 4,
        r: 8,
        lr: 1e-2,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn small_data(seed: u64) -> Result<crate::datagen::Dataset> {
    let gen = GenConfig {
        m: 32,
        genes: 12,
        cells_min: 8,
        cells_max: 20,
        ..GenConfig::default()
    }
    .with_tiles(16);
    generate_dataset(&gen, seed)
}

fn gradient() -> Result<(bool, String)> {
    let ds = small_data(3)?;
    let mut model = Model::for_dataset(small_config(), &ds)?;
    let tiles = model.prepare_split(&ds, Split::Train)?;
    let batch: Vec<&PreparedTile> = tiles.iter().take(4).collect();
    let rng_for = |i: usize| Rng::new(17).derive(&[i as u64]);
    model.store.zero_grad();
    model.accumulate_batch_grad(&batch, 0.5, rng_for)?;
    let loss_at = |m: &Model| -> Result<f64> { Ok(m.clone().accumulate_batch_grad(&batch, 0.5, rng_for)?.1) };
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for id in model.store.ids().collect::<Vec<_>>() {
        let analytic = model.store.grad(id).to_vec();
        let coords: Vec<usize> = (0..analytic.len()).step_by(7).take(4).collect();
        let mut fd = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut m = model.clone();
            let orig = m.store.get(id).data()[c];
            m.store.value_mut(id)[c] = orig + h;
            let fp = loss_at(&m)?;
            m.store.value_mut(id)[c] = orig - h;
            let fm = loss_at(&m)?;
            fd.push((fp - fm) / (2.0 * h));
        }
        let a: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        let e = block_rel_err(&a, &fd, 1e-7);
        if e > worst.0 {
            worst = (e, model.store.name(id).to_string());
        }
    }
    Ok((
        worst.0 < 1e-3,
        format!("max block relative error {:.2e} ({})", worst.0, worst.1),
    ))
}

fn infonce_uniform() -> Result<(bool, String)> {
    let mut tape = Tape::new();
    let row = [0.6, -0.8, 0.0];
    let rows: Vec<Vec<f64>> = vec![row.to_vec(); 4];
    let mut pairs = Vec::new();
    for _ in 0..3 {
        let zi = tape.constant(Tensor::from_rows(&rows)?);
        let zs = tape.constant(Tensor::from_rows(&rows)?);
        pairs.push((zi, zs));
    }
    let store = crate::numcore::ParamStore::new();
    let tau = crate::alignment::Temperature::Fixed(0.07);
    let l = total_loss(&mut tape, &store, [pairs[0], pairs[1], pairs[2]], tau, false)?;
    let total = tape.scalar_value(l.total);
    let err = (total - 3.0 * 4f64.ln()).abs();
    Ok((err < 1e-9, format!("L_total - 3 ln 4 = {err:.1e}")))
}

fn constraints() -> Result<(bool, String)> {
    let mut rng = Rng::new(23);
    let mut store = crate::numcore::ParamStore::new();
    let enc = StEncoder::new(
        StEncoderConfig {
            genes: 6,
            d_h: 6,
            d: 4,
            depths: [1, 1, 1],
            scorer_hidden: 4,
            no_sparsification: false,
        },
        &mut store,
        &mut rng,
    )?;
    let gen = GenConfig {
        m: 32,
        genes: 6,
        cells_min: 2,
        cells_max: 30,
        ..GenConfig::default()
    }
    .with_tiles(60);
    let ds = generate_dataset(&gen, 29)?;
    let norm = crate::datagen::ExpressionNorm::identity(6);
    let mut violations = 0usize;
    for (t, tile) in ds.tiles.iter().enumerate() {
        let cells = crate::st_encoder::PreparedCells::new(tile, &norm, 3, None)?;
        let mode = if t % 2 == 0 { Mode::Train } else { Mode::Infer };
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &store, &cells, 0.5, mode, &mut rng)?;
        let n = cells.num_nodes();
        for s in Scale::ALL {
            violations += out.edges[s.index()]
                .iter()
                .filter(|(e, _)| !cells.graph.same_block(e.u, e.v, s))
                .count();
        }
        let sets: Vec<_> = out.edges.iter().map(|e| neighbor_sets(n, e)).collect();
        for v in 0..n {
            if !sets[0][v].is_subset(&sets[1][v]) || !sets[1][v].is_subset(&sets[2][v]) {
                violations += 1;
            }
        }
    }
    Ok((
        violations == 0,
        format!("{violations} violations over {} tiles", ds.tiles.len()),
    ))
}

fn gumbel() -> Result<(bool, String)> {
    // Draws within 1e-3 of {0,1} at low temperature, against the closed form:
    // p̂ > 1 - δ  iff  logit(s) + L > τ·logit(1 - δ), with L = g1 - g0 logistic.
    let (s, tau, delta) = (0.7f64, 0.05, 1e-3);
    let n = 50_000;
    let mut rng = Rng::new(31);
    let mut near = 0usize;
    for _ in 0..n {
        let p = gumbel_edge_select(s, tau, &mut rng, Mode::Train)?;
        if p.min(1.0 - p) < delta {
            near += 1;
        }
    }
    let frac = near as f64 / n as f64;
    let logistic = |x: f64| 1.0 / (1.0 + (-x).exp());
    let l = (s / (1.0 - s)).ln();
    let c = tau * ((1.0 - delta) / delta).ln();
    let expected = 1.0 - (logistic(-l + c) - logistic(-l - c));

    let mut a = Rng::new(37);
    let mut b = Rng::new(41);
    let mean_a = (0..n)
        .map(|_| gumbel_edge_select(s, 1.0, &mut a, Mode::Train))
        .sum::<Result<f64>>()?
        / n as f64;
    let mean_b = (0..n)
        .map(|_| relaxed_bernoulli(s, b.gumbel(), b.gumbel(), 1.0))
        .sum::<f64>()
        / n as f64;
    let gap = (mean_a - mean_b).abs();
    Ok((
        (frac - expected).abs() < 0.01 && gap < 0.01,
        format!(
            "{:.2}% near {{0,1}} at tau 0.05 (closed form {:.2}%); mean gap {gap:.4} at tau 1",
            100.0 * frac,
            100.0 * expected
        ),
    ))
}

fn retrieval_chance() -> Result<(bool, String)> {
    let mut rng = Rng::new(43);
    let (n, trials) = (200, 20);
    let mut sum = 0.0;
    for _ in 0..trials {
        let mut draw = || -> Vec<Vec<f64>> { (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect() };
        let (a, b) = (draw(), draw());
        sum += retrieval_from_embeddings(&a, &b, Scale::Macro, &[10])?.he_to_st[0];
    }
    let mean = 100.0 * sum / trials as f64;
    Ok(((7.0..=13.0).contains(&mean), format!("mean Recall@10% = {mean:.2}%")))
}

fn determinism() -> Result<(bool, String)> {
    let ds = small_data(47)?;
    let a = train(&ds, small_config())?;
    let b = train(&ds, small_config())?;
    let strip = |t: &crate::training::Trainer| t.metrics.iter().map(|m| (m.per_scale, m.total)).collect::<Vec<_>>();
    let same = strip(&a) == strip(&b);
    let graph = matches!(a.model.st, StBranch::Graph(_));
    Ok((
        same && graph,
        format!("{} epochs, logs identical: {same}", a.metrics.len()),
    ))
}

fn ridge_oracle() -> Result<(bool, String)> {
    // With lambda ~ 0 and exactly linear targets the probe must be perfect.
    let mut rng = Rng::new(53);
    let x: Vec<Vec<f64>> = (0..40).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
    let y: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] - 2.0 * r[3] + 1.0]).collect();
    let cfg = ProbeConfig {
        lambda: 1e-12,
        ..ProbeConfig::default()
    };
    let rep = probe_arrays(&x[..30], &y[..30], &x[30..], &y[30..], &["g".to_string()], &cfg)?;
    let g = &rep.genes[0];
    Ok((
        (g.pcc - 1.0).abs() < 1e-9 && g.mse < 1e-12,
        format!("pcc {:.12}, mse {:.1e}", g.pcc, g.mse),
    ))
}

/// Run every check; each one is independent of the others.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        outcome("gradient", gradient()),
        outcome("infonce-closed-form", infonce_uniform()),
        outcome("constraint-soundness", constraints()),
        outcome("gumbel", gumbel()),
        outcome("retrieval-chance", retrieval_chance()),
        outcome("determinism", determinism()),
        outcome("ridge-probe", ridge_oracle()),
    ]
}
