//! How the relaxed Bernoulli edge weight sharpens as the Gumbel temperature
//! falls, compared with the exact probability of landing near 0 or 1.

use sigmma::numcore::Rng;
use sigmma::st_encoder::{gumbel_edge_select, Mode};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn main() -> sigmma::Result<()> {
    let s = 0.7f64;
    let delta = 1e-3;
    let n = 100_000;
    let logit = (s / (1.0 - s)).ln();
    println!("score s = {s}, {n} draws per temperature");
    println!("{:>6}  {:>8}  {:>12}  {:>12}", "tau", "mean", "near {0,1}", "exact");
    for tau in [2.0, 1.0, 0.5, 0.1, 0.05, 0.01, 0.001] {
        let mut rng = Rng::new(9);
        let mut sum = 0.0;
        let mut near = 0usize;
        for _ in 0..n {
            let p = gumbel_edge_select(s, tau, &mut rng, Mode::Train)?;
            sum += p;
            near += usize::from(p.min(1.0 - p) < delta);
        }
        let c = tau * ((1.0 - delta) / delta).ln();
        let exact = 1.0 - (sigmoid(-logit + c) - sigmoid(-logit - c));
        println!(
            "{tau:>6}  {:>8.4}  {:>11.2}%  {:>11.2}%",
            sum / n as f64,
            100.0 * near as f64 / n as f64,
            100.0 * exact
        );
    }
    println!(
        "infer mode: s = {s} -> {}",
        gumbel_edge_select(s, 1.0, &mut Rng::new(0), Mode::Infer)?
    );
    Ok(())
}
