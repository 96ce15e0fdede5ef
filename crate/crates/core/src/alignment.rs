//! Symmetric InfoNCE between image and cell-graph embeddings, per scale and summed.

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_TAU_C: f64 = 0.07;
/// Range a learnable temperature is clamped to.
pub const TAU_C_RANGE: (f64, f64) = (0.01, 1.0);

/// Cosine similarities of already-normalized rows, `ZI · ZSᵀ`.
pub fn similarity_matrix(zi: &Tensor, zs: &Tensor) -> Result<Tensor> {
    if zi.shape().len() != 2 || zs.shape().len() != 2 || zi.cols() != zs.cols() {
        return Err(Error::shape("similarity_matrix", zi.shape(), zs.shape()));
    }
    let (n, m, d) = (zi.rows(), zs.rows(), zi.cols());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let a = zi.row_slice(i);
        for j in 0..m {
            let b = zs.row_slice(j);
            out.push((0..d).map(|k| a[k] * b[k]).sum());
        }
    }
    Tensor::matrix(n, m, out)
}

/// Rows divided by their L2 norm.
pub fn normalize_rows(z: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = tape.l2_normalize_rows(v)?;
    Ok(tape.tensor(out))
}

/// Temperature of the contrastive softmax, fixed or learned in log space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Temperature {
    Fixed(f64),
    Learned(ParamId),
}

impl Temperature {
    pub fn learned(store: &mut ParamStore, init: f64) -> Result<Self> {
        check_tau(init)?;
        let id = store.add("align.log_tau", Tensor::scalar(init.ln()))?;
        Ok(Self::Learned(id))
    }

    pub fn value(&self, store: &ParamStore) -> f64 {
        match *self {
            Self::Fixed(t) => t,
            Self::Learned(id) => store.get(id).item().clamp(TAU_C_RANGE.0.ln(), TAU_C_RANGE.1.ln()).exp(),
        }
    }

    /// `1 / τ` as a tape variable.
    fn inverse(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        Ok(match *self {
            Self::Fixed(t) => {
                check_tau(t)?;
                tape.constant(Tensor::scalar(1.0 / t))
            }
            Self::Learned(id) => {
                let log_tau = tape.param(store, id);
                let c = tape.clamp(log_tau, TAU_C_RANGE.0.ln(), TAU_C_RANGE.1.ln());
                let neg = tape.scale(c, -1.0);
                tape.exp(neg)
            }
        })
    }
}

fn check_tau(t: f64) -> Result<()> {
    if t > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("InfoNCE temperature must be positive, got {t}")))
    }
}

/// `½ (L_I→S + L_S→I)` for one scale, with rows L2-normalized here.
///
/// A batch of one returns zero with a warning.
pub fn infonce_symmetric(tape: &mut Tape, zi: Var, zs: Var, inv_tau: Var) -> Result<Var> {
    let (si, ss) = (tape.shape(zi).to_vec(), tape.shape(zs).to_vec());
    if si.len() != 2 || si != ss {
        return Err(Error::shape("infonce_symmetric", &si, &ss));
    }
    let n = si[0];
    if n < 2 {
        log::warn!("contrastive batch of {n} tile(s); loss is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let a = tape.l2_normalize_rows(zi)?;
    let b = tape.l2_normalize_rows(zs)?;
    let bt = tape.transpose(b)?;
    let sim = tape.matmul(a, bt)?;
    let logits = tape.scale_by(sim, inv_tau)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let rows = tape.log_softmax_rows(logits);
    let row_diag = tape.gather(rows, diag.clone(), &[n])?;
    let logits_t = tape.transpose(logits)?;
    let cols = tape.log_softmax_rows(logits_t);
    let col_diag = tape.gather(cols, diag, &[n])?;
    let both = tape.add(row_diag, col_diag)?;
    let m = tape.mean(both);
    Ok(tape.scale(m, -0.5))
}

/// Per-scale losses and the objective built from them.
pub struct ScaleLosses {
    pub per_scale: [Var; 3],
    pub total: Var,
}

/// Sum of the three scale losses, or the macro loss alone when `single_scale`.
pub fn total_loss(
    tape: &mut Tape,
    store: &ParamStore,
    pairs: [(Var, Var); 3],
    tau: Temperature,
    single_scale: bool,
) -> Result<ScaleLosses> {
    let inv_tau = tau.inverse(tape, store)?;
    let mut per = Vec::with_capacity(3);
    for (zi, zs) in pairs {
        per.push(infonce_symmetric(tape, zi, zs, inv_tau)?);
    }
    let total = if single_scale {
        per[2]
    } else {
        let s = tape.add(per[0], per[1])?;
        tape.add(s, per[2])?
    };
    Ok(ScaleLosses {
        per_scale: [per[0], per[1], per[2]],
        total,
    })
}

/// Loss value of one scale for plain matrices.
pub fn infonce_value(zi: &Tensor, zs: &Tensor, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let a = tape.constant(zi.clone());
    let b = tape.constant(zs.clone());
    let inv = tape.constant(Tensor::scalar(1.0 / tau));
    let l = infonce_symmetric(&mut tape, a, b, inv)?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::check_tensor;
    use crate::numcore::{uniform_tensor, Rng};
    use proptest::{prop_assert, proptest};

    fn rand_matrix(rng: &mut Rng, n: usize, d: usize) -> Tensor {
        uniform_tensor(rng, &[n, d], 1.0)
    }

    /// A batch where every image row matches every cell-graph row equally well.
    fn equal_similarity(n: usize) -> Tensor {
        Tensor::from_rows(&vec![vec![0.6, -0.8, 0.0]; n]).unwrap()
    }

    #[test]
    fn orthonormal_rows_give_identity() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let s = similarity_matrix(&eye, &eye).unwrap();
        assert_eq!(s.data(), eye.data());
    }

    #[test]
    fn self_similarity_is_symmetric_with_unit_diagonal() {
        let z = normalize_rows(&rand_matrix(&mut Rng::new(1), 5, 3)).unwrap();
        let s = similarity_matrix(&z, &z).unwrap();
        for i in 0..5 {
            assert!((s.row_slice(i)[i] - 1.0).abs() < 1e-12);
            for j in 0..5 {
                assert_eq!(s.row_slice(i)[j], s.row_slice(j)[i]);
            }
        }
    }

    #[test]
    fn similarity_matches_direct_dot_products() {
        let mut rng = Rng::new(2);
        let (a, b) = (rand_matrix(&mut rng, 3, 4), rand_matrix(&mut rng, 3, 4));
        let s = similarity_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..4).map(|k| a.row_slice(i)[k] * b.row_slice(j)[k]).sum();
                assert!((s.row_slice(i)[j] - want).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&a, &rand_matrix(&mut rng, 3, 5)).is_err());
    }

    #[test]
    fn uniform_similarities_give_ln_n() {
        let z = equal_similarity(4);
        let l = infonce_value(&z, &z, 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-9, "{l}");
    }

    #[test]
    fn orthonormal_batch_closed_form() {
        let eye = Tensor::from_rows(
            &(0..4)
                .map(|i| (0..4).map(|j| f64::from(i == j)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let l = infonce_value(&eye, &eye, 0.07).unwrap();
        let want = (3.0 * (-1.0f64 / 0.07).exp()).ln_1p();
        assert!((l - want).abs() < 1e-15, "{l} vs {want}");
        assert!((l - 1.9e-6).abs() < 0.05e-6);
    }

    #[test]
    fn swapping_modalities_keeps_the_value() {
        let mut rng = Rng::new(3);
        let (a, b) = (rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 6, 4));
        let (x, y) = (infonce_value(&a, &b, 0.1).unwrap(), infonce_value(&b, &a, 0.1).unwrap());
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn total_of_uniform_scales_is_three_ln_n() {
        let z = equal_similarity(4);
        let mut tape = Tape::new();
        let store = ParamStore::new();
        let vars: Vec<Var> = (0..6).map(|_| tape.constant(z.clone())).collect();
        let pairs = [(vars[0], vars[1]), (vars[2], vars[3]), (vars[4], vars[5])];
        let l = total_loss(&mut tape, &store, pairs, Temperature::Fixed(0.07), false).unwrap();
        assert!((tape.scalar_value(l.total) - 3.0 * 4f64.ln()).abs() < 1e-9);
        let single = total_loss(&mut tape, &store, pairs, Temperature::Fixed(0.07), true).unwrap();
        assert_eq!(tape.scalar_value(single.total), tape.scalar_value(single.per_scale[2]));
    }

    #[test]
    fn zero_rows_are_an_error() {
        let z = Tensor::zeros(&[3, 2]);
        assert!(infonce_value(&z, &z, 0.07).is_err());
        let ok = rand_matrix(&mut Rng::new(4), 3, 2);
        assert!(infonce_value(&ok, &ok, 0.0).is_err());
    }

    #[test]
    fn batch_of_one_is_zero() {
        let z = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(infonce_value(&z, &z, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let zs = rand_matrix(&mut rng, 5, 3);
        let zi = rand_matrix(&mut rng, 5, 3).with_grad();
        let mut tape = Tape::new();
        let a = tape.leaf(zi.clone());
        let b = tape.constant(zs.clone());
        let inv = tape.constant(Tensor::scalar(1.0 / 0.2));
        let l = infonce_symmetric(&mut tape, a, b, inv).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(a).unwrap().to_vec();
        let coords: Vec<usize> = (0..15).collect();
        let check = check_tensor(&zi, &analytic, &coords, 1e-5, 1e-8, |x| infonce_value(x, &zs, 0.2)).unwrap();
        assert!(check.max_rel_err < 1e-4, "{}", check.max_rel_err);
    }

    #[test]
    fn learned_temperature_is_clamped_and_differentiable() {
        let mut store = ParamStore::new();
        let tau = Temperature::learned(&mut store, 0.07).unwrap();
        assert!((tau.value(&store) - 0.07).abs() < 1e-12);
        let Temperature::Learned(id) = tau else { unreachable!() };
        store.value_mut(id)[0] = 5.0;
        assert_eq!(tau.value(&store), 1.0);
        store.value_mut(id)[0] = 0.2f64.ln();
        let mut rng = Rng::new(6);
        let (zi, zs) = (rand_matrix(&mut rng, 4, 3), rand_matrix(&mut rng, 4, 3));
        let mut tape = Tape::new();
        let a = tape.constant(zi.clone());
        let b = tape.constant(zs.clone());
        let l = total_loss(&mut tape, &store, [(a, b); 3], tau, false).unwrap();
        let g = tape.backward(l.total).unwrap();
        tape.accumulate_into(&g, &mut store);
        let h = 1e-6;
        let f = |t: f64| 3.0 * infonce_value(&zi, &zs, t).unwrap();
        let fd = (f((0.2f64.ln() + h).exp()) - f((0.2f64.ln() - h).exp())) / (2.0 * h);
        assert!((store.grad(id)[0] - fd).abs() < 1e-6 * fd.abs().max(1.0));
    }

    #[test]
    fn dominant_diagonal_beats_ln_n_and_cooler_is_lower() {
        // Diagonal cosine c, off-diagonal 0: loss = ln(1 + (N-1) e^{-c/τ}).
        let closed = |c: f64, n: f64, tau: f64| ((n - 1.0) * (-c / tau).exp()).ln_1p();
        let mut last = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.07] {
            let v = closed(1.0, 4.0, tau);
            assert!(v < 4f64.ln());
            assert!(v < last);
            last = v;
        }
        let eye = Tensor::from_rows(
            &(0..4)
                .map(|i| (0..4).map(|j| f64::from(i == j)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((infonce_value(&eye, &eye, 0.5).unwrap() - closed(1.0, 4.0, 0.5)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let (a, b) = (rand_matrix(&mut rng, 6, 3), rand_matrix(&mut rng, 6, 3));
            let l = infonce_value(&a, &b, 0.1).unwrap();
            prop_assert!(l >= 0.0);
            let mut perm: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut perm);
            let pa = Tensor::from_rows(&perm.iter().map(|&i| a.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let pb = Tensor::from_rows(&perm.iter().map(|&i| b.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let lp = infonce_value(&pa, &pb, 0.1).unwrap();
            prop_assert!((l - lp).abs() < 1e-12);
        }
    }
}
