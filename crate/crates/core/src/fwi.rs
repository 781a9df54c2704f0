//! Least-squares waveform misfit, its adjoint-state gradient and the
//! centralized gradient-descent reference loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GradientField, SamplingOperator, SourceTerm, VelocityModel};
use crate::solver::Solver;

/// Observed traces indexed `[source][receiver][step]`.
pub type Observations = Vec<Vec<Vec<f64>>>;

/// Shots shared by all agents plus one receiver per agent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Survey {
    pub solver: Solver,
    pub sources: Vec<SourceTerm>,
    pub receivers: SamplingOperator,
}

impl Survey {
    pub fn n_receivers(&self) -> usize {
        self.receivers.len()
    }

    /// Records every source at every receiver.
    pub fn observe(&self, m: &VelocityModel) -> Result<Observations> {
        self.sources
            .iter()
            .enumerate()
            .map(|(s, src)| {
                Ok(self.solver.forward_traces(m, src, &self.receivers, s)?.into_iter().map(|r| r.trace).collect())
            })
            .collect()
    }

    fn check_obs(&self, obs: &Observations) -> Result<()> {
        if obs.len() != self.sources.len() || obs.iter().any(|o| o.len() != self.receivers.len()) {
            return Err(Error::ShapeMismatch("observations do not cover every source and receiver".into()));
        }
        Ok(())
    }

    /// Cost and gradient over the receivers in `which` (all shots).
    fn cost_gradient_subset(&self, m: &VelocityModel, obs: &Observations, which: &[usize]) -> Result<(f64, GradientField)> {
        self.check_obs(obs)?;
        let positions: Vec<_> = which.iter().map(|&r| self.receivers.positions()[r]).collect();
        let s = SamplingOperator::new(positions, &self.solver.grid)?;
        let mut cost = 0.0;
        let mut grad = Field::zeros(m.nx, m.nz);
        for (si, src) in self.sources.iter().enumerate() {
            let o: Vec<Vec<f64>> = which.iter().map(|&r| obs[si][r].clone()).collect();
            let (c, g) = self.solver.cost_and_gradient(m, src, &s, &o)?;
            cost += c;
            grad.axpy(1.0, &g.gradient)?;
        }
        Ok((cost, grad))
    }

    /// `1/2 sum_s sum_t (d_syn - d_obs)^2 dt` for receiver `r`.
    pub fn local_cost(&self, m: &VelocityModel, obs: &Observations, r: usize) -> Result<f64> {
        self.check_obs(obs)?;
        let s = self.receivers.single(r);
        let mut cost = 0.0;
        for (si, src) in self.sources.iter().enumerate() {
            let syn = self.solver.forward_traces(m, src, &s, si)?;
            cost += 0.5 * self.solver.grid.dt * syn[0].trace.iter().zip(&obs[si][r]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        Ok(cost)
    }

    /// Local cost of receiver `r` and its gradient with respect to velocity.
    pub fn local_gradient(&self, m: &VelocityModel, obs: &Observations, r: usize) -> Result<(f64, GradientField)> {
        if r >= self.receivers.len() {
            return Err(Error::OutOfGrid(r, 0));
        }
        self.cost_gradient_subset(m, obs, &[r])
    }

    /// Sum of all local costs and gradients, computed with one adjoint per shot.
    pub fn global_gradient(&self, m: &VelocityModel, obs: &Observations) -> Result<(f64, GradientField)> {
        let all: Vec<usize> = (0..self.receivers.len()).collect();
        self.cost_gradient_subset(m, obs, &all)
    }

    pub fn global_cost(&self, m: &VelocityModel, obs: &Observations) -> Result<f64> {
        (0..self.receivers.len()).map(|r| self.local_cost(m, obs, r)).sum()
    }
}

/// `alpha_k = alpha0 * decay^k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub alpha0: f64,
    pub decay: f64,
}

impl StepSchedule {
    pub fn new(alpha0: f64, decay: f64) -> Result<Self> {
        if !(alpha0 >= 0.0 && alpha0.is_finite()) || !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("step schedule alpha0 = {alpha0}, decay = {decay}")));
        }
        Ok(Self { alpha0, decay })
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 * self.decay.powi(k as i32)
    }
}

#[derive(Clone, Debug)]
pub struct FwiResult {
    pub model: VelocityModel,
    /// Global cost at `m[0] .. m[K-1]`.
    pub costs: Vec<f64>,
    pub models: Vec<VelocityModel>,
}

/// `m[k+1] = m[k] - alpha_k * sum_r dm_r[k]` for `k < iterations`.
pub fn centralized_fwi(
    survey: &Survey,
    m0: &VelocityModel,
    obs: &Observations,
    schedule: StepSchedule,
    iterations: usize,
) -> Result<FwiResult> {
    if iterations == 0 {
        return Err(Error::Config("iterations must be at least 1".into()));
    }
    let mut m = m0.clone();
    let mut costs = Vec::with_capacity(iterations);
    let mut models = vec![m.clone()];
    for k in 0..iterations {
        let (cost, grad) = survey.global_gradient(&m, obs)?;
        if !cost.is_finite() {
            return Err(Error::Diverged(format!("cost {cost} at iteration {k}")));
        }
        costs.push(cost);
        m.axpy(-schedule.alpha(k), &grad)?;
        if !m.is_finite() {
            return Err(Error::Diverged(format!("model at iteration {k}")));
        }
        models.push(m.clone());
    }
    Ok(FwiResult { model: m, costs, models })
}

/// Smallest step `alpha0` (within a factor `1 + tol`) at which one centralized
/// step from `m0` fails to decrease the global cost or breaks the solver,
/// searched by bisection on a log scale between `lo` and `hi`.
pub fn divergence_threshold(survey: &Survey, m0: &VelocityModel, obs: &Observations, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (c0, g) = survey.global_gradient(m0, obs)?;
    let fails = |alpha: f64| -> bool {
        let mut m = m0.clone();
        if m.axpy(-alpha, &g).is_err() {
            return true;
        }
        match survey.global_cost(&m, obs) {
            Ok(c) => !(c < c0),
            Err(_) => true,
        }
    };
    let (mut lo, mut hi) = (lo, hi);
    if fails(lo) {
        return Ok(lo);
    }
    if !fails(hi) {
        return Ok(hi);
    }
    while hi / lo > 1.0 + tol {
        let mid = (lo * hi).sqrt();
        if fails(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

impl Survey {
    /// `n_sources` equidistant shots and the given receiver columns, all at
    /// depth index `depth`, each shot a Ricker wavelet with peak `f0`.
    pub fn surface_line(solver: Solver, n_sources: usize, receiver_columns: &[usize], depth: usize, f0: f64) -> Result<Self> {
        let g = &solver.grid;
        if n_sources == 0 {
            return Err(Error::InvalidSize("at least one source is required".into()));
        }
        let wavelet = crate::grid::ricker_wavelet(f0, 1.5 / f0, g);
        let sources = (0..n_sources)
            .map(|i| {
                let ix = (((i as f64 + 0.5) * g.nx as f64 / n_sources as f64) as usize).min(g.nx - 1);
                SourceTerm { position: (ix, depth), wavelet: wavelet.clone() }
            })
            .collect();
        let receivers = SamplingOperator::new(receiver_columns.iter().map(|&ix| (ix, depth)).collect(), g)?;
        Ok(Self { solver, sources, receivers })
    }
}
