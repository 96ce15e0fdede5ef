//! Train the four-row component grid (set encoder, + graph, + multi-scale,
//! + learned sparsification) on one dataset and print it as CSV.

use sigmma::datagen::{generate_dataset, GenConfig};
use sigmma::eval::{run_ablation_suite, write_ablation_csv, ProbeConfig};
use sigmma::training::TrainConfig;

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(32), 7)?;
    let base = TrainConfig {
        epochs: 10,
        d_h: 32,
        d: 32,
        seed: 4,
        ..TrainConfig::default()
    };
    let rows = run_ablation_suite(&ds, &base, &ProbeConfig::default())?;
    write_ablation_csv(std::io::stdout(), &rows)?;
    Ok(())
}
