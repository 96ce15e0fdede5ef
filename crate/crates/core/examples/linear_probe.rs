//! Predict highly variable gene expression from frozen image embeddings,
//! before and after contrastive training.

use sigmma::datagen::{generate_dataset, GenConfig};
use sigmma::eval::{linear_probe_gex, ProbeConfig};
use sigmma::training::{train, Model, TrainConfig};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(48), 7)?;
    let cfg = TrainConfig {
        epochs: 40,
        seed: 2,
        ..TrainConfig::default()
    };
    let probe = ProbeConfig::default();

    let untrained = linear_probe_gex(&Model::for_dataset(cfg.clone(), &ds)?, &ds, &probe)?;
    let trained = linear_probe_gex(&train(&ds, cfg)?.model, &ds, &probe)?;
    for (name, r) in [("untrained", &untrained), ("trained", &trained)] {
        println!(
            "{name:>9}: PCC {:.3} +/- {:.3}, MSE {:.3} over {} genes ({} train / {} test tiles)",
            r.pcc.mean,
            r.pcc.std,
            r.mse.mean,
            r.genes.len(),
            r.n_train,
            r.n_test
        );
    }
    let mut best = trained.genes.clone();
    best.sort_by(|a, b| b.pcc.total_cmp(&a.pcc));
    for g in best.iter().take(3) {
        println!("  {} PCC {:.3}", g.gene, g.pcc);
    }
    Ok(())
}
