//! Central finite-difference gradient checking.

use super::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::Result;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so exact zeros compare as zero error.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamGradError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares the analytic gradient of every trainable parameter with central
/// differences of step `h`. `forward` builds the scalar loss on a fresh
/// graph; each evaluation uses the same `mode` and `seed`, so dropout masks
/// are identical across perturbations.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    mode: Mode,
    seed: u64,
    h: f64,
    mut forward: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new(mode, seed);
    let loss = forward(&mut g, store)?;
    let grads = g.backward(loss)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(mode, seed);
        let loss = forward(&mut g, store)?;
        Ok(g.value(loss).item())
    };

    let ids: Vec<ParamId> = store.ids().filter(|&id| store.get(id).requires_grad).collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.numel();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..n {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            max_rel = max_rel.max(relative_error(analytic[i], numeric));
            max_abs = max_abs.max((analytic[i] - numeric).abs());
        }
        params.push(ParamGradError {
            name: store.get(id).name.clone(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { params })
}
