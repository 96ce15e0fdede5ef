//! Generate a small synthetic section, save it, and load it back.
//!
//! cargo run --example generate_dataset -- [out_dir]

use std::path::PathBuf;

use sigmma::datagen::{generate_dataset, load_dataset, save_dataset, GenConfig, Split};

fn main() -> sigmma::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sigmma-example-data"));
    let cfg = GenConfig::default().with_tiles(16);
    let ds = generate_dataset(&cfg, 7)?;

    for s in [Split::Train, Split::Val, Split::Test] {
        println!("{s:?}: {} tiles", ds.indices(s).len());
    }
    let cells: Vec<usize> = ds.tiles.iter().map(|t| t.cells.len()).collect();
    println!(
        "{} genes, {}..{} cells per tile, split hash {}",
        ds.num_genes(),
        cells.iter().min().unwrap_or(&0),
        cells.iter().max().unwrap_or(&0),
        &ds.split_hash()[..12]
    );

    save_dataset(&ds, &out)?;
    let back = load_dataset(&out)?;
    assert_eq!(back.split_hash(), ds.split_hash());
    println!("saved and reloaded {} tiles at {}", back.tiles.len(), out.display());
    Ok(())
}
