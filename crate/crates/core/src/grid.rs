//! Grid geometry, velocity models, sources and receivers.
//!
//! All 2D arrays are stored x-major: the value at `(ix, iz)` lives at
//! `ix * nz + iz`, with `iz = 0` at the surface.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stability constant of the 4th-order Laplacian with leapfrog time stepping:
/// `dt <= dx / (v_max * sqrt(2) * C_FD)`.
pub const C_FD: f64 = 1.154_700_538_379_251_7; // sqrt(4/3)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub nz: usize,
    /// Spacing in meters.
    pub dx: f64,
    /// Time step in seconds.
    pub dt: f64,
    pub nt: usize,
}

impl GridSpec {
    pub fn new(nx: usize, nz: usize, dx: f64, dt: f64, nt: usize) -> Result<Self> {
        if nx < 2 || nz < 2 || nt < 2 {
            return Err(Error::InvalidSize(format!("grid {nx}x{nz} with {nt} steps")));
        }
        if !(dx > 0.0 && dt > 0.0) {
            return Err(Error::InvalidSize(format!("dx = {dx}, dt = {dt}")));
        }
        Ok(Self { nx, nz, dx, dt, nt })
    }

    /// Grid with `dt = fraction * cfl_limit(v_max)` and enough steps to cover `tau` seconds.
    pub fn with_cfl(nx: usize, nz: usize, dx: f64, v_max: f64, tau: f64, fraction: f64) -> Result<Self> {
        let dt = fraction * cfl_limit(dx, v_max);
        let nt = (tau / dt).ceil() as usize;
        Self::new(nx, nz, dx, dt, nt)
    }

    pub fn tau(&self) -> f64 {
        self.nt as f64 * self.dt
    }

    pub fn cells(&self) -> usize {
        self.nx * self.nz
    }

    pub fn contains(&self, (ix, iz): (usize, usize)) -> bool {
        ix < self.nx && iz < self.nz
    }

    pub fn check_cfl(&self, v_max: f64) -> Result<()> {
        let limit = cfl_limit(self.dx, v_max);
        if self.dt > limit {
            return Err(Error::CflViolation { dt: self.dt, limit, v_max });
        }
        Ok(())
    }
}

pub fn cfl_limit(dx: f64, v_max: f64) -> f64 {
    dx / (v_max * 2f64.sqrt() * C_FD)
}

/// A real `nx x nz` array: velocity models, gradients and snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub nx: usize,
    pub nz: usize,
    pub values: Vec<f64>,
}

/// P-wave velocity in m/s.
pub type VelocityModel = Field;
/// Derivative of a cost with respect to velocity.
pub type GradientField = Field;

impl Field {
    pub fn zeros(nx: usize, nz: usize) -> Self {
        Self::constant(nx, nz, 0.0)
    }

    pub fn constant(nx: usize, nz: usize, v: f64) -> Self {
        Self { nx, nz, values: vec![v; nx * nz] }
    }

    pub fn from_values(nx: usize, nz: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * nz {
            return Err(Error::ShapeMismatch(format!("{} values for a {nx}x{nz} field", values.len())));
        }
        Ok(Self { nx, nz, values })
    }

    #[inline]
    pub fn idx(&self, ix: usize, iz: usize) -> usize {
        ix * self.nz + iz
    }

    #[inline]
    pub fn at(&self, ix: usize, iz: usize) -> f64 {
        self.values[ix * self.nz + iz]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iz: usize, v: f64) {
        self.values[ix * self.nz + iz] = v;
    }

    pub fn same_shape(&self, other: &Field) -> Result<()> {
        if self.nx != other.nx || self.nz != other.nz {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.nx, self.nz, other.nx, other.nz
            )));
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Field) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Field {
        Field { nx: self.nx, nz: self.nz, values: self.values.iter().map(|v| alpha * v).collect() }
    }

    pub fn dot(&self, other: &Field) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rejects non-finite or non-positive velocities.
    pub fn validate_velocity(&self) -> Result<()> {
        match self.values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            Some(v) => Err(Error::InvalidModel(format!("velocity {v} is not positive and finite"))),
            None => Ok(()),
        }
    }

    /// `sum_i w_i * f_i` over fields of equal shape.
    pub fn weighted_sum(weights: &[f64], fields: &[&Field]) -> Result<Field> {
        let first = fields.first().ok_or_else(|| Error::ShapeMismatch("empty weighted sum".into()))?;
        if weights.len() != fields.len() {
            return Err(Error::ShapeMismatch(format!("{} weights for {} fields", weights.len(), fields.len())));
        }
        let mut out = Field::zeros(first.nx, first.nz);
        for (w, f) in weights.iter().zip(fields) {
            out.axpy(*w, f)?;
        }
        Ok(out)
    }
}

/// `(1 - 2 pi^2 f0^2 (t - delay)^2) exp(-pi^2 f0^2 (t - delay)^2)` at `t = n dt`.
pub fn ricker_wavelet(f0: f64, delay: f64, grid: &GridSpec) -> Vec<f64> {
    assert!(f0 > 0.0 && delay >= 0.0, "ricker needs f0 > 0 and delay >= 0");
    (0..grid.nt)
        .map(|n| {
            let a = (PI * f0 * (n as f64 * grid.dt - delay)).powi(2);
            (1.0 - 2.0 * a) * (-a).exp()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTerm {
    pub position: (usize, usize),
    pub wavelet: Vec<f64>,
}

/// Receiver positions, one per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingOperator {
    positions: Vec<(usize, usize)>,
}

impl SamplingOperator {
    pub fn new(positions: Vec<(usize, usize)>, grid: &GridSpec) -> Result<Self> {
        for (i, &p) in positions.iter().enumerate() {
            if !grid.contains(p) {
                return Err(Error::OutOfGrid(p.0, p.1));
            }
            if positions[..i].contains(&p) {
                return Err(Error::DuplicateReceiver(p.0, p.1));
            }
        }
        Ok(Self { positions })
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Operator restricted to one receiver.
    pub fn single(&self, r: usize) -> SamplingOperator {
        SamplingOperator { positions: vec![self.positions[r]] }
    }
}

/// Pressure snapshots `u^0 .. u^{nt-1}` on the physical grid, `data[n * nx * nz + ix * nz + iz]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Wavefield {
    pub nx: usize,
    pub nz: usize,
    pub nt: usize,
    pub data: Vec<f64>,
}

impl Wavefield {
    pub fn zeros(nx: usize, nz: usize, nt: usize) -> Self {
        Self { nx, nz, nt, data: vec![0.0; nx * nz * nt] }
    }

    #[inline]
    pub fn at(&self, n: usize, ix: usize, iz: usize) -> f64 {
        self.data[(n * self.nx + ix) * self.nz + iz]
    }

    pub fn snapshot(&self, n: usize) -> Field {
        let len = self.nx * self.nz;
        Field { nx: self.nx, nz: self.nz, values: self.data[n * len..(n + 1) * len].to_vec() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub source: usize,
    pub receiver: usize,
    pub trace: Vec<f64>,
}

/// Point evaluation of `u` at every receiver for every step.
pub fn sample_receivers(u: &Wavefield, s: &SamplingOperator, source: usize) -> Result<Vec<ShotRecord>> {
    s.positions()
        .iter()
        .enumerate()
        .map(|(r, &(ix, iz))| {
            if ix >= u.nx || iz >= u.nz {
                return Err(Error::OutOfGrid(ix, iz));
            }
            Ok(ShotRecord { source, receiver: r, trace: (0..u.nt).map(|n| u.at(n, ix, iz)).collect() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::new(20, 10, 10.0, 1e-3, 400).unwrap()
    }

    #[test]
    fn ricker_peaks_at_delay_and_is_even() {
        let g = grid();
        let w = ricker_wavelet(10.0, 0.1, &g);
        assert!((w[100] - 1.0).abs() < 1e-15);
        assert!(w.iter().all(|&v| v <= 1.0));
        for k in 1..100 {
            assert!((w[100 + k] - w[100 - k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ricker_has_zero_mean() {
        // The continuous wavelet integrates to zero; the sampled sum must be
        // within 1e-3 of the peak once the delay leaves the leading tail intact.
        for f0 in [5.0, 10.0, 15.0, 25.0] {
            let mut g = grid();
            g.nt = 2000;
            let w = ricker_wavelet(f0, 1.5 / f0, &g);
            let sum: f64 = w.iter().sum();
            assert!(sum.abs() < 1e-3, "f0 {f0}: {sum}");
        }
    }

    #[test]
    fn cfl_limit_matches_constant() {
        let l = cfl_limit(6.25, 3500.0);
        assert!((l - 0.6123724356957945 * 6.25 / 3500.0).abs() < 1e-15);
        let g = GridSpec::new(4, 4, 6.25, 1.1 * l, 10).unwrap();
        assert!(matches!(g.check_cfl(3500.0), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn sampling_rejects_duplicates_and_outside() {
        let g = grid();
        assert!(matches!(SamplingOperator::new(vec![(1, 1), (1, 1)], &g), Err(Error::DuplicateReceiver(1, 1))));
        assert!(matches!(SamplingOperator::new(vec![(20, 1)], &g), Err(Error::OutOfGrid(20, 1))));
    }

    #[test]
    fn sampling_is_point_evaluation() {
        let g = grid();
        let mut u = Wavefield::zeros(g.nx, g.nz, 30);
        let s = SamplingOperator::new(vec![(3, 4), (7, 0)], &g).unwrap();
        assert!(sample_receivers(&u, &s, 0).unwrap().iter().all(|r| r.trace.iter().all(|&v| v == 0.0)));
        u.data[(12 * g.nx + 3) * g.nz + 4] = 2.5;
        let rec = sample_receivers(&u, &s, 0).unwrap();
        let nz: Vec<usize> = (0..30).filter(|&n| rec[0].trace[n] != 0.0).collect();
        assert_eq!(nz, vec![12]);
        assert!(rec[1].trace.iter().all(|&v| v == 0.0));
    }
}
