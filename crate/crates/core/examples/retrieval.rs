//! Bidirectional HE/ST retrieval on the held-out tiles at every scale.

use sigmma::cell_graph::Scale;
use sigmma::datagen::{generate_dataset, GenConfig};
use sigmma::eval::retrieval;
use sigmma::training::{train, TrainConfig};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(64), 7)?;
    let trainer = train(
        &ds,
        TrainConfig {
            epochs: 60,
            seed: 3,
            ..TrainConfig::default()
        },
    )?;
    println!("final loss {:.4}", trainer.metrics.last().map_or(f64::NAN, |m| m.total));
    for s in Scale::ALL {
        let r = retrieval(&trainer.model, &ds, s)?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" / ");
        println!(
            "{s:>5}: HE->ST {}  ST->HE {}  (R@{:?}%, {} tiles)",
            fmt(&r.he_to_st),
            fmt(&r.st_to_he),
            r.percents,
            r.n
        );
    }
    Ok(())
}
