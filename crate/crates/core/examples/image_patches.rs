//! Split a tile into its 16 + 4 + 1 patches and encode them with the toy
//! conv backbone.

use sigmma::cell_graph::Scale;
use sigmma::datagen::{generate_dataset, GenConfig, TileImage};
use sigmma::image_encoder::{partition_tile, ImageEncoder, ImageEncoderConfig};
use sigmma::numcore::{ParamStore, Rng, Tape};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(1), 11)?;
    let tile = &ds.tiles[0];
    let Some(TileImage::Pixels(img)) = &tile.image else {
        unreachable!("default generator renders pixels")
    };
    for s in Scale::ALL {
        let grid = partition_tile(img, s)?;
        println!("{s}: {} patches of {}x{} px", grid.patches.len(), grid.side, grid.side);
    }

    let mut store = ParamStore::new();
    let enc = ImageEncoder::new(
        ImageEncoderConfig {
            d: 16,
            ..Default::default()
        },
        &mut store,
        &mut Rng::new(0),
    )?;
    let prepared = enc.prepare(&tile.tile_id, tile.image.as_ref())?;
    let mut tape = Tape::new();
    let z = enc.forward(&mut tape, &store, &prepared)?;
    for (s, v) in Scale::ALL.iter().zip(z) {
        let e = tape.value(v);
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("{s} embedding: dim {}, norm {norm:.3}", e.len());
    }
    println!("{} image-encoder parameters", store.num_scalars());
    Ok(())
}
