//! Build the micro kNN graph of one tile and list the candidate pairs that
//! the meso and macro stages may add.

use std::collections::BTreeSet;

use sigmma::cell_graph::{build_micro_graph, candidate_pairs, write_edges_csv, Scale};
use sigmma::datagen::{generate_dataset, GenConfig};

fn main() -> sigmma::Result<()> {
    let gen = GenConfig {
        cells_min: 20,
        cells_max: 30,
        ..GenConfig::default()
    }
    .with_tiles(1);
    let ds = generate_dataset(&gen, 3)?;
    let tile = &ds.tiles[0];
    let coords: Vec<(f64, f64)> = tile.cells.iter().map(|c| (c.x, c.y)).collect();

    let g = build_micro_graph(&coords, tile.m as f64, 3)?;
    let micro: BTreeSet<_> = g.edges_micro.iter().copied().collect();
    let meso = candidate_pairs(&g, Scale::Meso, &micro, None)?;
    let macro_ = candidate_pairs(&g, Scale::Macro, &micro, None)?;
    let capped = candidate_pairs(&g, Scale::Macro, &micro, Some(2))?;

    println!("{} cells in tile {}", g.num_nodes(), tile.tile_id);
    println!(
        "micro edges {}, meso candidates {}, macro candidates {} ({} with c_max = 2)",
        micro.len(),
        meso.len(),
        macro_.len(),
        capped.len()
    );
    for s in Scale::ALL {
        let occupied = g.block_members(s).iter().filter(|b| !b.is_empty()).count();
        println!("{s}: {occupied}/{} blocks occupied", s.num_blocks());
    }

    println!("\nfirst rows of the edge list:");
    let mut csv = Vec::new();
    write_edges_csv(&mut csv, &[(Scale::Micro, g.edges_micro.clone()), (Scale::Meso, meso)])?;
    for line in String::from_utf8_lossy(&csv).lines().take(6) {
        println!("  {line}");
    }
    Ok(())
}
