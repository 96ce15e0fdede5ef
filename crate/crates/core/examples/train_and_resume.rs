//! Train for a few epochs, stop halfway through a second run, save a
//! checkpoint, resume it and confirm both runs log the same losses.

use sigmma::datagen::{generate_dataset, GenConfig};
use sigmma::training::{load_checkpoint, save_checkpoint, train, TrainConfig, Trainer};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(16), 7)?;
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        d_h: 16,
        d: 16,
        lr: 3e-3,
        seed: 1,
        ..TrainConfig::default()
    };

    let full = train(&ds, cfg.clone())?;
    for m in &full.metrics {
        println!("epoch {} L_total {:.5}", m.epoch, m.total);
    }

    let mut first = Trainer::from_dataset(cfg, &ds)?;
    first.run_until(3)?;
    let path = std::env::temp_dir().join("sigmma-example-checkpoint.bin");
    save_checkpoint(&first.checkpoint(), &path)?;
    let mut second = Trainer::resume(load_checkpoint(&path)?, &ds)?;
    second.run()?;

    let resumed: Vec<f64> = first.metrics.iter().chain(&second.metrics).map(|m| m.total).collect();
    let straight: Vec<f64> = full.metrics.iter().map(|m| m.total).collect();
    println!("resumed run matches bit for bit: {}", resumed == straight);
    Ok(())
}
