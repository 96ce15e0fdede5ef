//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/tiles/<tile_id>/cells.csv            cell_id,x,y,<gene_1>,...,<gene_G>
//! <dir>/tiles/<tile_id>/image.bin            "SIGI" u32 rows cols channels, f32 LE
//! <dir>/tiles/<tile_id>/patch_features.bin   "SIGF" u32 n_patches dim, f32 LE
//! ```
//!
//! An empty micro patch is stored as a row of NaNs in `patch_features.bin`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cell, Dataset, PatchFeatures, PixelGrid, Split, TileImage, TilePair, MICRO_PATCHES};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_MAGIC: &[u8; 4] = b"SIGI";
const FEATURE_MAGIC: &[u8; 4] = b"SIGF";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    m: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    gene_names: Vec<String>,
    tiles: Vec<ManifestTile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestTile {
    tile_id: String,
    split: Split,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir.join("tiles"))?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        m: ds.m,
        height: ds.height,
        width: ds.width,
        gene_names: ds.gene_names.clone(),
        tiles: ds
            .tiles
            .iter()
            .map(|t| ManifestTile {
                tile_id: t.tile_id.clone(),
                split: ds.split[&t.tile_id],
            })
            .collect(),
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    f.flush()?;

    for t in &ds.tiles {
        let tdir = dir.join("tiles").join(&t.tile_id);
        fs::create_dir_all(&tdir)?;
        write_cells(&tdir.join("cells.csv"), &ds.gene_names, &t.cells)?;
        let (stale, path) = match &t.image {
            Some(TileImage::Pixels(p)) => {
                write_image_bin(&tdir.join("image.bin"), p)?;
                (Some("patch_features.bin"), None)
            }
            Some(TileImage::Features(pf)) => {
                write_patch_features_bin(&tdir.join("patch_features.bin"), pf)?;
                (Some("image.bin"), None)
            }
            None => (None, Some(["image.bin", "patch_features.bin"])),
        };
        for name in stale.into_iter().chain(path.into_iter().flatten()) {
            let p = tdir.join(name);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::format(&mpath, "missing manifest"));
    }
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(&mpath)?))
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            &mpath,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let mut tiles = Vec::with_capacity(manifest.tiles.len());
    let mut split = BTreeMap::new();
    for mt in &manifest.tiles {
        let tdir = dir.join("tiles").join(&mt.tile_id);
        let cells = read_cells(&tdir.join("cells.csv"), &mt.tile_id, &manifest.gene_names)?;
        let img = tdir.join("image.bin");
        let feat = tdir.join("patch_features.bin");
        let image = if img.exists() {
            Some(TileImage::Pixels(read_image_bin(&img)?))
        } else if feat.exists() {
            Some(TileImage::Features(read_patch_features_bin(&feat)?))
        } else {
            None
        };
        if split.insert(mt.tile_id.clone(), mt.split).is_some() {
            return Err(Error::tile(&mt.tile_id, "duplicate tile id in manifest"));
        }
        tiles.push(TilePair {
            tile_id: mt.tile_id.clone(),
            m: manifest.m,
            image,
            cells,
        });
    }
    let ds = Dataset {
        tiles,
        gene_names: manifest.gene_names,
        split,
        height: manifest.height,
        width: manifest.width,
        m: manifest.m,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_cells(path: &Path, genes: &[String], cells: &[Cell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["cell_id".to_string(), "x".into(), "y".into()];
    header.extend(genes.iter().cloned());
    w.write_record(&header)?;
    for c in cells {
        let mut rec = Vec::with_capacity(3 + c.expression.len());
        rec.push(c.cell_id.clone());
        rec.push(c.x.to_string());
        rec.push(c.y.to_string());
        rec.extend(c.expression.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_cells(path: &Path, tile_id: &str, genes: &[String]) -> Result<Vec<Cell>> {
    if !path.exists() {
        return Err(Error::tile(tile_id, format!("missing {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "cell_id" || &header[1] != "x" || &header[2] != "y" {
        return Err(Error::tile(tile_id, "cells.csv header must start with cell_id,x,y"));
    }
    if header.len() - 3 != genes.len() {
        return Err(Error::tile(
            tile_id,
            format!(
                "cells.csv has {} gene columns but the manifest lists {} genes",
                header.len() - 3,
                genes.len()
            ),
        ));
    }
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::tile(tile_id, format!("bad {what} value {s:?}")))
    };
    let mut cells = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::tile(tile_id, "ragged row in cells.csv"));
        }
        let expression = rec
            .iter()
            .skip(3)
            .map(|v| parse(v, "expression"))
            .collect::<Result<Vec<_>>>()?;
        cells.push(Cell {
            cell_id: rec[0].to_string(),
            x: parse(&rec[1], "x")?,
            y: parse(&rec[2], "y")?,
            expression,
        });
    }
    Ok(cells)
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: &[u32]) -> Result<()> {
    w.write_all(magic)?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: impl Iterator<Item = f32>) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_all(path: &Path, magic: &[u8; 4], ndims: usize) -> Result<(Vec<u32>, Vec<f32>)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let head = 4 + 4 * ndims;
    if bytes.len() < head || &bytes[..4] != magic {
        return Err(Error::format(path, "bad magic or truncated header"));
    }
    let dims: Vec<u32> = bytes[4..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let body = &bytes[head..];
    let expected: usize = dims.iter().map(|&d| d as usize).product::<usize>() * 4;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {expected}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

fn write_image_bin(path: &Path, p: &PixelGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, IMAGE_MAGIC, &[p.rows as u32, p.cols as u32, p.channels as u32])?;
    write_f32s(&mut w, p.data.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_image_bin(path: &Path) -> Result<PixelGrid> {
    let (dims, data) = read_all(path, IMAGE_MAGIC, 3)?;
    Ok(PixelGrid {
        rows: dims[0] as usize,
        cols: dims[1] as usize,
        channels: dims[2] as usize,
        data,
    })
}

fn write_patch_features_bin(path: &Path, pf: &PatchFeatures) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, FEATURE_MAGIC, &[pf.patches.len() as u32, pf.dim as u32])?;
    for p in &pf.patches {
        match p {
            Some(v) => write_f32s(&mut w, v.iter().copied())?,
            None => write_f32s(&mut w, std::iter::repeat_n(f32::NAN, pf.dim))?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_features_bin(path: &Path) -> Result<PatchFeatures> {
    let (dims, data) = read_all(path, FEATURE_MAGIC, 2)?;
    let (n, dim) = (dims[0] as usize, dims[1] as usize);
    if n != MICRO_PATCHES {
        return Err(Error::format(path, format!("{n} patches, expected {MICRO_PATCHES}")));
    }
    let patches = data
        .chunks(dim.max(1))
        .take(n)
        .map(|c| (!c.iter().all(|v| v.is_nan())).then(|| c.to_vec()))
        .collect();
    Ok(PatchFeatures { dim, patches })
}
