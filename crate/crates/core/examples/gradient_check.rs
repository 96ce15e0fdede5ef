//! Compare the tape's parameter gradients with central differences on a
//! small training batch, one row per parameter block.

use sigmma::datagen::{generate_dataset, GenConfig, Split};
use sigmma::numcore::gradcheck::block_rel_err;
use sigmma::numcore::Rng;
use sigmma::training::{Model, PreparedTile, TrainConfig};

fn main() -> sigmma::Result<()> {
    let gen = GenConfig {
        cells_min: 10,
        cells_max: 25,
        genes: 20,
        m: 32,
        ..GenConfig::default()
    }
    .with_tiles(12);
    let ds = generate_dataset(&gen, 1)?;
    let cfg = TrainConfig {
        d_h: 8,
        d: 8,
        scorer_hidden: 6,
        r: 8,
        ..TrainConfig::default()
    };
    let mut model = Model::for_dataset(cfg, &ds)?;
    let tiles = model.prepare_split(&ds, Split::Train)?;
    let batch: Vec<&PreparedTile> = tiles.iter().take(4).collect();
    // Fixed per-tile streams freeze the Gumbel draws across evaluations.
    let rng_for = |i: usize| Rng::new(3).derive(&[i as u64]);

    model.store.zero_grad();
    let (_, loss) = model.accumulate_batch_grad(&batch, 0.5, rng_for)?;
    println!("batch loss {loss:.6}");
    let h = 1e-5;
    for id in model.store.ids().collect::<Vec<_>>() {
        let analytic = model.store.grad(id).to_vec();
        let coords: Vec<usize> = (0..analytic.len()).step_by(5).take(6).collect();
        let mut fd = Vec::new();
        for &c in &coords {
            let mut m = model.clone();
            let x = m.store.get(id).data()[c];
            m.store.value_mut(id)[c] = x + h;
            let up = m.clone().accumulate_batch_grad(&batch, 0.5, rng_for)?.1;
            m.store.value_mut(id)[c] = x - h;
            let down = m.accumulate_batch_grad(&batch, 0.5, rng_for)?.1;
            fd.push((up - down) / (2.0 * h));
        }
        let a: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
        println!(
            "{:<22} rel err {:.2e}",
            model.store.name(id),
            block_rel_err(&a, &fd, 1e-7)
        );
    }
    Ok(())
}
