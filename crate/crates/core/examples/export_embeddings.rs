//! Export tile-level and cell-level embeddings of an (untrained) model.

use sigmma::datagen::{generate_dataset, GenConfig};
use sigmma::eval::{export_embeddings, ExportLevel, Modality};
use sigmma::training::{Model, TrainConfig};

fn main() -> sigmma::Result<()> {
    let ds = generate_dataset(&GenConfig::default().with_tiles(8), 7)?;
    let model = Model::for_dataset(
        TrainConfig {
            d: 16,
            d_h: 16,
            ..TrainConfig::default()
        },
        &ds,
    )?;
    let dir = std::env::temp_dir().join("sigmma-example-export");
    for (file, level, modality) in [
        ("tiles_he.csv", ExportLevel::Tile, Modality::He),
        ("tiles_st.csv", ExportLevel::Tile, Modality::St),
        ("cells_st.csv", ExportLevel::Cell, Modality::St),
    ] {
        let path = dir.join(file);
        let rows = export_embeddings(&model, &ds, &path, level, modality)?;
        println!("{rows:>6} rows -> {}", path.display());
    }
    Ok(())
}
