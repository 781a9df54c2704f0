//! Central finite-difference checks of reverse-mode gradients.

use rand::Rng;

use crate::error::{AutodiffError, Result};
use crate::params::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Number of randomly chosen scalar coordinates to probe.
    pub coords: usize,
    pub step: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Differences below this are accepted regardless of relative error.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { coords: 10, step: 1e-5, tol: 1e-4, abs_floor: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compares `analytic` with central differences of `loss` at random
/// coordinates of trainable parameters. Fails on the first probe over tolerance.
pub fn check<R: Rng>(
    params: &ParamStore<f64>,
    analytic: &Gradients<f64>,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let candidates: Vec<ParamId> = params.trainable_ids().collect();
    let total: usize = candidates.iter().map(|&id| params.get(id).len()).sum();
    if total == 0 {
        return Ok(GradCheckReport { probes: Vec::new() });
    }
    let mut probes = Vec::with_capacity(cfg.coords);
    let mut work = params.clone();
    for _ in 0..cfg.coords {
        let mut flat = rng.gen_range(0..total);
        let mut id = candidates[0];
        for &c in &candidates {
            let n = params.get(c).len();
            if flat < n {
                id = c;
                break;
            }
            flat -= n;
        }
        let index = flat;
        let orig = params.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = orig + cfg.step;
        let plus = loss(&work)?;
        work.get_mut(id).data_mut()[index] = orig - cfg.step;
        let minus = loss(&work)?;
        work.get_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic.get(id).map_or(0.0, |g| g.data()[index]);
        if !numeric.is_finite() || !a.is_finite() {
            return Err(AutodiffError::NonFinite("gradient check"));
        }
        let rel_err = if (a - numeric).abs() < cfg.abs_floor { 0.0 } else { relative_error(a, numeric) };
        let probe = Probe { name: params.name(id).to_string(), index, analytic: a, numeric, rel_err };
        if rel_err > cfg.tol {
            return Err(AutodiffError::ToleranceExceeded {
                name: probe.name,
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
        probes.push(probe);
    }
    Ok(GradCheckReport { probes })
}
