//! Central finite-difference checks against tape gradients.

use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

/// Largest relative error `|a - f| / max(|a|, |f|, floor)` over checked entries.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

/// Central differences of `f` at `x` for the given flat coordinates.
pub fn finite_diff(
    x: &Tensor,
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut xp = x.clone();
    for &i in coords {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp)?;
        xp.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Compare an analytic gradient with central differences on one input tensor.
pub fn check_tensor(
    x: &Tensor,
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    floor: f64,
    f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradCheck> {
    let fd = finite_diff(x, coords, h, f)?;
    let max_rel_err = coords
        .iter()
        .zip(&fd)
        .map(|(&i, &f)| rel_err(analytic[i], f, floor))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_err,
        checked: coords.len(),
    })
}

/// Relative error of a whole gradient block, `||a - f|| / max(||a||, ||f||, floor)`.
pub fn block_rel_err(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f) * (a - f))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nf).max(floor)
}

/// Central differences of a scalar function of the whole parameter store,
/// perturbing one parameter entry at a time.
pub fn param_finite_diff(
    store: &mut ParamStore,
    id: ParamId,
    coords: &[usize],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = store.get(id).data()[i];
        store.value_mut(id)[i] = orig + h;
        let fp = f(store)?;
        store.value_mut(id)[i] = orig - h;
        let fm = f(store)?;
        store.value_mut(id)[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}
