//! Gene-expression linear probe on frozen macro image embeddings.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::{embed_split, pearson, Summary};
use crate::cell_graph::Scale;
use crate::datagen::{hvg_select, Dataset, Split};
use crate::error::{Error, Result};
use crate::training::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Number of highly variable genes to predict.
    pub k_genes: usize,
    /// Upper bound on PCA components; the embedding width caps it further.
    pub pca_dims: usize,
    pub lambda: f64,
    pub intercept: bool,
    /// Also report PCC across genes within each test tile.
    pub per_tile: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k_genes: 50,
            pca_dims: 256,
            lambda: 1.0,
            intercept: true,
            per_tile: false,
        }
    }
}

/// Principal axes fitted on a row matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `[k, d]`, rows sorted by decreasing explained variance.
    pub components: DMatrix<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if n == 0 || d == 0 {
            return Err(Error::invalid("PCA on an empty matrix"));
        }
        let k = k.min(d);
        let mean: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let xc = center(x, &mean);
        let cov = xc.transpose() * &xc / (n.max(2) - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = DMatrix::zeros(k, d);
        let mut variances = Vec::with_capacity(k);
        for (row, &j) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(j);
            // Fix the sign so the largest-magnitude loading is positive.
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for c in 0..d {
                components[(row, c)] = sign * v[c];
            }
            variances.push(eig.eigenvalues[j]);
        }
        Ok(Self {
            mean,
            components,
            variances,
        })
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        center(x, &self.mean) * self.components.transpose()
    }
}

fn center(x: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mu) in mean.iter().enumerate() {
        out.column_mut(j).add_scalar_mut(-mu);
    }
    out
}

/// Multi-output ridge regression `Y ≈ X W + b`.
#[derive(Clone, Debug)]
pub struct Ridge {
    pub weights: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Ridge {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weights;
        for (j, b) in self.bias.iter().enumerate() {
            y.column_mut(j).add_scalar_mut(*b);
        }
        y
    }
}

/// Closed-form ridge: `W = (XᵀX + λI)⁻¹ XᵀY`. With `intercept` the columns of
/// `X` and `Y` are centred first so the bias is not penalised.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, intercept: bool) -> Result<Ridge> {
    if x.nrows() != y.nrows() {
        return Err(Error::shape(
            "ridge_fit",
            &[x.nrows(), x.ncols()],
            &[y.nrows(), y.ncols()],
        ));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    let (xm, ym) = if intercept {
        (
            (0..x.ncols()).map(|j| x.column(j).mean()).collect(),
            (0..y.ncols()).map(|j| y.column(j).mean()).collect(),
        )
    } else {
        (vec![0.0; x.ncols()], vec![0.0; y.ncols()])
    };
    let xc = center(x, &xm);
    let yc = center(y, &ym);
    let p = x.ncols();
    let gram = xc.transpose() * &xc + DMatrix::identity(p, p) * lambda;
    let rhs = xc.transpose() * &yc;
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::invalid("ridge system is singular; use lambda > 0"))?,
    };
    let bias = (0..y.ncols())
        .map(|j| ym[j] - (0..p).map(|i| xm[i] * weights[(i, j)]).sum::<f64>())
        .collect();
    Ok(Ridge { weights, bias })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeneScore {
    pub gene: String,
    pub pcc: f64,
    pub mse: f64,
    /// PCC was undefined (constant target or prediction) and is reported as 0.
    pub zero_variance: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub scale: Scale,
    pub genes: Vec<GeneScore>,
    pub pcc: Summary,
    pub mse: Summary,
    pub per_tile_pcc: Option<Summary>,
    pub k_genes: usize,
    pub pca_dims: usize,
    pub lambda: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged rows"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

/// PCA + ridge fit on train rows, scored per target column on test rows.
/// Targets are standardised with train statistics before fitting.
pub fn probe_arrays(
    train_x: &[Vec<f64>],
    train_y: &[Vec<f64>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<f64>],
    gene_names: &[String],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::invalid("probe: embedding and target row counts differ"));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Dataset("probe needs non-empty train and test splits".into()));
    }
    let xtr = to_matrix(train_x)?;
    let xte = to_matrix(test_x)?;
    let mut ytr = to_matrix(train_y)?;
    let mut yte = to_matrix(test_y)?;
    let g = ytr.ncols();
    if gene_names.len() != g || yte.ncols() != g {
        return Err(Error::invalid("probe: gene name count does not match targets"));
    }
    for j in 0..g {
        let mu = ytr.column(j).mean();
        let sd = ytr.column(j).variance().sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for y in [&mut ytr, &mut yte] {
            y.column_mut(j).apply(|v| *v = (*v - mu) / sd);
        }
    }

    let pca = Pca::fit(&xtr, cfg.pca_dims)?;
    let ridge = ridge_fit(&pca.transform(&xtr), &ytr, cfg.lambda, cfg.intercept)?;
    let pred = ridge.predict(&pca.transform(&xte));

    let n_test = yte.nrows();
    let genes: Vec<GeneScore> = (0..g)
        .map(|j| {
            let truth: Vec<f64> = yte.column(j).iter().copied().collect();
            let guess: Vec<f64> = pred.column(j).iter().copied().collect();
            let mse = truth.iter().zip(&guess).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n_test as f64;
            let pcc = pearson(&guess, &truth);
            GeneScore {
                gene: gene_names[j].clone(),
                pcc: pcc.unwrap_or(0.0),
                mse,
                zero_variance: pcc.is_none(),
            }
        })
        .collect();
    let per_tile_pcc = cfg.per_tile.then(|| {
        let per: Vec<f64> = (0..n_test)
            .map(|i| {
                let truth: Vec<f64> = yte.row(i).iter().copied().collect();
                let guess: Vec<f64> = pred.row(i).iter().copied().collect();
                pearson(&guess, &truth).unwrap_or(0.0)
            })
            .collect();
        Summary::of(&per)
    });
    let pccs: Vec<f64> = genes.iter().map(|s| s.pcc).collect();
    let mses: Vec<f64> = genes.iter().map(|s| s.mse).collect();
    Ok(ProbeReport {
        scale: Scale::Macro,
        pcc: Summary::of(&pccs),
        mse: Summary::of(&mses),
        genes,
        per_tile_pcc,
        k_genes: g,
        pca_dims: pca.components.nrows(),
        lambda: cfg.lambda,
        n_train: train_x.len(),
        n_test,
    })
}

/// Predict tile-mean `log1p` expression of the top HVGs from macro image embeddings.
pub fn linear_probe_gex(model: &Model, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let g = ds.num_genes();
    let k = if cfg.k_genes > g {
        log::warn!(
            "only {g} genes available, probing all of them instead of {}",
            cfg.k_genes
        );
        g
    } else {
        cfg.k_genes
    };
    let hvg = hvg_select(ds, k)?;
    let names: Vec<String> = hvg.iter().map(|&j| ds.gene_names[j].clone()).collect();
    let collect = |split: Split| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let emb = embed_split(model, ds, split)?;
        let mut xs = Vec::with_capacity(emb.len());
        let mut ys = Vec::with_capacity(emb.len());
        for e in emb {
            let mean = ds.tiles[e.index].mean_log1p().expect("embedded tiles have cells");
            ys.push(hvg.iter().map(|&j| mean[j]).collect());
            xs.push(e.image[Scale::Macro.index()].clone());
        }
        Ok((xs, ys))
    };
    let (train_x, train_y) = collect(Split::Train)?;
    let (test_x, test_y) = collect(Split::Test)?;
    probe_arrays(&train_x, &train_y, &test_x, &test_y, &names, cfg)
}
