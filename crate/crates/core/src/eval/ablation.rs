//! The four-row component grid: set encoder at one scale, then graph,
//! then multi-scale, then learned sparsification.

use std::io::Write;

use serde::Serialize;

use super::{linear_probe_gex, retrieval, ProbeConfig};
use crate::cell_graph::Scale;
use crate::datagen::Dataset;
use crate::error::Result;
use crate::training::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub graph: bool,
    pub multi_scale: bool,
    pub sparsification: bool,
    pub split_hash: String,
    pub pcc_mean: f64,
    pub pcc_std: f64,
    pub mse_mean: f64,
    pub he_to_st_r5: f64,
    pub he_to_st_r10: f64,
    pub he_to_st_r15: f64,
    pub st_to_he_r5: f64,
    pub st_to_he_r10: f64,
    pub st_to_he_r15: f64,
    pub final_loss: f64,
}

/// The grid's configurations, each adding one component to the previous row.
/// Everything except the three component flags is taken from `base`.
pub fn ablation_variants(base: &TrainConfig) -> [(&'static str, TrainConfig); 4] {
    let none = TrainConfig {
        no_graph: true,
        single_scale: true,
        no_sparsification: true,
        ..base.clone()
    };
    let graph = TrainConfig {
        no_graph: false,
        ..none.clone()
    };
    let multi = TrainConfig {
        single_scale: false,
        ..graph.clone()
    };
    let full = TrainConfig {
        no_sparsification: false,
        ..multi.clone()
    };
    [
        ("none", none),
        ("+graph", graph),
        ("+multi-scale", multi),
        ("full", full),
    ]
}

/// Train and evaluate every variant on `ds` with the same seed and split.
pub fn run_ablation_suite(ds: &Dataset, base: &TrainConfig, probe: &ProbeConfig) -> Result<Vec<AblationRow>> {
    let split_hash = ds.split_hash();
    ablation_variants(base)
        .into_iter()
        .map(|(name, cfg)| {
            log::info!("ablation variant {name}");
            let trainer = train(ds, cfg.clone())?;
            let model = &trainer.model;
            let p = linear_probe_gex(model, ds, probe)?;
            let r = retrieval(model, ds, Scale::Macro)?;
            Ok(AblationRow {
                variant: name.to_string(),
                graph: !cfg.no_graph,
                multi_scale: !cfg.single_scale,
                sparsification: !cfg.no_sparsification,
                split_hash: split_hash.clone(),
                pcc_mean: p.pcc.mean,
                pcc_std: p.pcc.std,
                mse_mean: p.mse.mean,
                he_to_st_r5: r.he_to_st[0],
                he_to_st_r10: r.he_to_st[1],
                he_to_st_r15: r.he_to_st[2],
                st_to_he_r5: r.st_to_he[0],
                st_to_he_r10: r.st_to_he[1],
                st_to_he_r15: r.st_to_he[2],
                final_loss: trainer.metrics.last().map_or(f64::NAN, |m| m.total),
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_adds_one_component_per_row() {
        let base = TrainConfig {
            seed: 42,
            ..TrainConfig::default()
        };
        let v = ablation_variants(&base);
        let flags: Vec<_> = v
            .iter()
            .map(|(_, c)| (!c.no_graph, !c.single_scale, !c.no_sparsification))
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false),
                (true, false, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        assert!(v.iter().all(|(_, c)| c.seed == 42 && c.epochs == base.epochs));
        let full = &v[3].1;
        assert_eq!(
            full,
            &TrainConfig {
                seed: 42,
                ..TrainConfig::default()
            }
        );
    }

    #[test]
    fn csv_has_header_and_rows() {
        let row = AblationRow {
            variant: "full".into(),
            graph: true,
            multi_scale: true,
            sparsification: true,
            split_hash: "ab".into(),
            pcc_mean: 0.5,
            pcc_std: 0.1,
            mse_mean: 1.0,
            he_to_st_r5: 0.1,
            he_to_st_r10: 0.2,
            he_to_st_r15: 0.3,
            st_to_he_r5: 0.1,
            st_to_he_r10: 0.2,
            st_to_he_r15: 0.3,
            final_loss: 2.0,
        };
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &[row.clone(), row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("variant,graph,multi_scale,sparsification,split_hash,"));
    }
}
