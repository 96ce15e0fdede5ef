//! CSV export of infer-mode embeddings at tile or cell level.

use std::io::Write;
use std::path::Path;

use crate::cell_graph::Scale;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::st_encoder::Mode;
use crate::training::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportLevel {
    Tile,
    Cell,
}

impl ExportLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tile" => Ok(Self::Tile),
            "cell" => Ok(Self::Cell),
            _ => Err(Error::invalid(format!(
                "unknown export level {s:?} (expected tile or cell)"
            ))),
        }
    }
}

/// Which encoder's tile embeddings to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    He,
    St,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "he" => Ok(Self::He),
            "st" => Ok(Self::St),
            _ => Err(Error::invalid(format!("unknown modality {s:?} (expected he or st)"))),
        }
    }
}

fn header(w: &mut csv::Writer<impl Write>, lead: &[&str], dim: usize) -> Result<()> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    h.extend((0..dim).map(|k| format!("e{k}")));
    w.write_record(&h)?;
    Ok(())
}

fn record(lead: &[&str], values: &[f64]) -> Vec<String> {
    lead.iter()
        .map(|s| s.to_string())
        .chain(values.iter().map(|v| v.to_string()))
        .collect()
}

/// Write embeddings for every usable tile of `ds`, in dataset order.
///
/// Tile level emits `id,scale,e0..` with three rows per tile. Cell level
/// emits `tile_id,id,scale,e0..` with the stage-final node embedding of every
/// cell at every scale; it is only defined for the cell-graph side.
/// Returns the number of data rows.
pub fn write_embeddings<W: Write>(
    model: &Model,
    ds: &Dataset,
    out: W,
    level: ExportLevel,
    modality: Modality,
) -> Result<usize> {
    let tiles = model.prepare(ds, &(0..ds.tiles.len()).collect::<Vec<_>>())?;
    let mut w = csv::Writer::from_writer(out);
    let mut rows = 0;
    match level {
        ExportLevel::Tile => {
            let emb = model.embed(&tiles)?;
            let dim = model.cfg.d;
            header(&mut w, &["id", "scale"], dim)?;
            for e in &emb {
                let id = &ds.tiles[e.index].tile_id;
                let side = match modality {
                    Modality::He => &e.image,
                    Modality::St => &e.st,
                };
                for s in Scale::ALL {
                    w.write_record(record(&[id, s.name()], &side[s.index()]))?;
                    rows += 1;
                }
            }
        }
        ExportLevel::Cell => {
            if modality == Modality::He {
                return Err(Error::invalid(
                    "cell-level export is only available for the st modality",
                ));
            }
            header(&mut w, &["tile_id", "id", "scale"], model.cfg.d_h)?;
            for t in &tiles {
                let f = model.forward_tile(t, model.cfg.tau_g_end, Mode::Infer, &mut Rng::new(0))?;
                let tile = &ds.tiles[t.index];
                let n = tile.cells.len();
                for s in Scale::ALL {
                    let h = f.tape.value(f.cells[s.index()]);
                    let dim = h.len() / n;
                    for (c, cell) in tile.cells.iter().enumerate() {
                        w.write_record(record(
                            &[&tile.tile_id, &cell.cell_id, s.name()],
                            &h[c * dim..(c + 1) * dim],
                        ))?;
                        rows += 1;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(rows)
}

pub fn export_embeddings(
    model: &Model,
    ds: &Dataset,
    path: &Path,
    level: ExportLevel,
    modality: Modality,
) -> Result<usize> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(model, ds, file, level, modality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig};
    use crate::training::TrainConfig;

    fn setup() -> (Model, Dataset) {
        let gen = GenConfig {
            m: 32,
            genes: 10,
            cells_min: 4,
            cells_max: 12,
            ..GenConfig::default()
        }
        .with_tiles(8);
        let ds = generate_dataset(&gen, 2).unwrap();
        let cfg = TrainConfig {
            d_h: 6,
            d: 5,
            scorer_hidden: 4,
            r: 8,
            ..TrainConfig::default()
        };
        (Model::for_dataset(cfg, &ds).unwrap(), ds)
    }

    #[test]
    fn tile_rows_and_determinism() {
        let (model, ds) = setup();
        let mut a = Vec::new();
        let n = write_embeddings(&model, &ds, &mut a, ExportLevel::Tile, Modality::He).unwrap();
        assert_eq!(n, 3 * ds.tiles.len());
        let text = String::from_utf8(a.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "id,scale,e0,e1,e2,e3,e4");
        let mut b = Vec::new();
        write_embeddings(&model, &ds, &mut b, ExportLevel::Tile, Modality::He).unwrap();
        assert_eq!(a, b);
        let mut st = Vec::new();
        write_embeddings(&model, &ds, &mut st, ExportLevel::Tile, Modality::St).unwrap();
        assert_ne!(a, st);
    }

    #[test]
    fn cell_rows_follow_cell_counts() {
        let (model, ds) = setup();
        let mut buf = Vec::new();
        let n = write_embeddings(&model, &ds, &mut buf, ExportLevel::Cell, Modality::St).unwrap();
        let cells: usize = ds.tiles.iter().map(|t| t.cells.len()).sum();
        assert_eq!(n, 3 * cells);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), n + 1);
        let first = &ds.tiles[0];
        let rows_for_first = text
            .lines()
            .filter(|l| l.starts_with(&format!("{},", first.tile_id)))
            .count();
        assert_eq!(rows_for_first, 3 * first.cells.len());
        assert!(write_embeddings(&model, &ds, Vec::new(), ExportLevel::Cell, Modality::He).is_err());
    }
}
