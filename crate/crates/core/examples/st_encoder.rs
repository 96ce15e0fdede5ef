//! Run the hierarchical cell-graph encoder on one tile in both modes and
//! count the edges realized at each scale.

use sigmma::cell_graph::Scale;
use sigmma::datagen::{generate_dataset, ExpressionNorm, GenConfig};
use sigmma::numcore::{ParamStore, Rng, Tape};
use sigmma::st_encoder::{Mode, PreparedCells, StEncoder, StEncoderConfig};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(4), 5)?;
    let norm = ExpressionNorm::fit(&ds)?;
    let cells = PreparedCells::new(&ds.tiles[0], &norm, 6, Some(8))?;

    let mut store = ParamStore::new();
    let cfg = StEncoderConfig {
        genes: ds.num_genes(),
        d_h: 32,
        d: 16,
        depths: [2, 1, 1],
        scorer_hidden: 16,
        no_sparsification: false,
    };
    let enc = StEncoder::new(cfg, &mut store, &mut Rng::new(1))?;
    println!(
        "{} cells, {} meso and {} macro candidates",
        cells.num_nodes(),
        cells.candidates[0].len(),
        cells.candidates[1].len()
    );

    for (mode, tau) in [(Mode::Train, 0.5), (Mode::Infer, 0.1)] {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &store, &cells, tau, mode, &mut Rng::new(2))?;
        let counts: Vec<String> = Scale::ALL
            .iter()
            .map(|s| {
                let e = &out.edges[s.index()];
                let mass: f64 = e.iter().map(|(_, w)| w).sum();
                format!("{s} {} edges (weight {mass:.1})", e.len())
            })
            .collect();
        println!("{mode:?}: {}", counts.join(", "));
    }
    Ok(())
}
