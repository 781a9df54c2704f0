//! Leapfrog finite-difference propagator for the 2D constant-density acoustic
//! wave equation `(1/m^2) u_tt - lap(u) = f`, with an exact discrete adjoint.
//!
//! The physical grid is surrounded by a damping sponge of `width` cells whose
//! velocity is the edge extension of the model. With damping `eta` the update is
//!
//! ```text
//! u[n+1] = (2 u[n] - (1 - a) u[n-1] + dt^2 m^2 (L u[n] + f[n])) / (1 + a),   a = eta dt / 2
//! ```
//!
//! for `n = 0 .. nt-2` with `u[-1] = u[0] = 0`. `L` is the 4th-order Laplacian
//! with zero values outside the padded grid. Every spatial operator involved is
//! symmetric, so the adjoint of the whole recursion is the same recursion run
//! with time-reversed sources.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec, SamplingOperator, ShotRecord, SourceTerm, VelocityModel, Wavefield};

const GHOST: usize = 2;
const C0: f64 = -5.0 / 2.0;
const C1: f64 = 4.0 / 3.0;
const C2: f64 = -1.0 / 12.0;

/// Absorbing padding around the physical grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sponge {
    pub width: usize,
    /// Target amplitude reflection coefficient of the layer.
    pub reflection: f64,
}

impl Default for Sponge {
    fn default() -> Self {
        Self { width: 20, reflection: 1e-3 }
    }
}

impl Sponge {
    /// Damping rate in 1/s at depth `d` cells into a layer of `width` cells.
    ///
    /// `v_ref` must not depend on the model, otherwise the damping would
    /// carry a hidden model dependence that the adjoint ignores.
    fn profile(&self, d: usize, v_ref: f64, dx: f64) -> f64 {
        if self.width == 0 || d == 0 {
            return 0.0;
        }
        let thickness = self.width as f64 * dx;
        let eta_max = 1.5 * v_ref / thickness * (1.0 / self.reflection).ln();
        // exponential taper from 0 at the interface to eta_max at the outer edge
        const K: f64 = 3.0;
        let r = d as f64 / self.width as f64;
        eta_max * ((K * r).exp() - 1.0) / (K.exp() - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Solver {
    pub grid: GridSpec,
    pub sponge: Sponge,
}

/// Model-dependent coefficients on the padded grid, including ghost cells.
struct Propagator {
    px: usize,
    pz: usize,
    /// Row stride of the ghosted arrays.
    sz: usize,
    len: usize,
    /// `dt^2 m^2`, zero on ghosts.
    c: Vec<f64>,
    /// `dt^2 m^2 / dx^2`.
    cl: Vec<f64>,
    inv: Vec<f64>,
    back: Vec<f64>,
    eta: Vec<f64>,
    vel: Vec<f64>,
}

/// Injected source: ghosted cell index plus per-step amplitude `f[n]`.
struct Injection<'a> {
    cell: usize,
    amp: &'a [f64],
}

impl Solver {
    pub fn new(grid: GridSpec, sponge: Sponge) -> Self {
        Self { grid, sponge }
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.grid.nx + 2 * self.sponge.width, self.grid.nz + 2 * self.sponge.width)
    }

    fn propagator(&self, m: &VelocityModel) -> Result<Propagator> {
        let g = &self.grid;
        if m.nx != g.nx || m.nz != g.nz {
            return Err(Error::ShapeMismatch(format!("model {}x{} on grid {}x{}", m.nx, m.nz, g.nx, g.nz)));
        }
        m.validate_velocity()?;
        g.check_cfl(m.max())?;
        // fastest velocity the time step supports
        let v_ref = g.dx / (g.dt * 2f64.sqrt() * crate::grid::C_FD);
        let w = self.sponge.width;
        let (px, pz) = self.padded_dims();
        let sz = pz + 2 * GHOST;
        let len = (px + 2 * GHOST) * sz;
        let mut p = Propagator {
            px,
            pz,
            sz,
            len,
            c: vec![0.0; len],
            cl: vec![0.0; len],
            inv: vec![0.0; len],
            back: vec![0.0; len],
            eta: vec![0.0; len],
            vel: vec![0.0; len],
        };
        let dist = |i: usize, n: usize| if i < w { w - i } else if i >= n + w { i + 1 - n - w } else { 0 };
        for ix in 0..px {
            let mx = ix.saturating_sub(w).min(g.nx - 1);
            for iz in 0..pz {
                let mz = iz.saturating_sub(w).min(g.nz - 1);
                let v = m.at(mx, mz);
                let eta = self.sponge.profile(dist(ix, g.nx), v_ref, g.dx) + self.sponge.profile(dist(iz, g.nz), v_ref, g.dx);
                let k = (ix + GHOST) * sz + iz + GHOST;
                let a = 0.5 * eta * g.dt;
                p.c[k] = g.dt * g.dt * v * v;
                p.cl[k] = p.c[k] / (g.dx * g.dx);
                p.inv[k] = 1.0 / (1.0 + a);
                p.back[k] = 1.0 - a;
                p.eta[k] = eta;
                p.vel[k] = v;
            }
        }
        Ok(p)
    }

    /// Ghosted index of a physical grid point.
    fn cell(&self, p: &Propagator, (ix, iz): (usize, usize)) -> usize {
        (ix + self.sponge.width + GHOST) * p.sz + iz + self.sponge.width + GHOST
    }

    /// Runs the recursion. `on_step(n, u[n+1])` is called after each update.
    fn run(&self, p: &Propagator, sources: &[Injection], mut on_step: impl FnMut(usize, &[f64])) -> Result<()> {
        let nt = self.grid.nt;
        let mut prev = vec![0.0; p.len];
        let mut cur = vec![0.0; p.len];
        let mut next = vec![0.0; p.len];
        let sz = p.sz;
        for n in 0..nt - 1 {
            for ix in GHOST..p.px + GHOST {
                let row = ix * sz;
                for k in row + GHOST..row + p.pz + GHOST {
                    let lap = 2.0 * C0 * cur[k]
                        + C1 * (cur[k - 1] + cur[k + 1] + cur[k - sz] + cur[k + sz])
                        + C2 * (cur[k - 2] + cur[k + 2] + cur[k - 2 * sz] + cur[k + 2 * sz]);
                    next[k] = p.inv[k] * (2.0 * cur[k] - p.back[k] * prev[k] + p.cl[k] * lap);
                }
            }
            for s in sources {
                next[s.cell] += p.inv[s.cell] * p.c[s.cell] * s.amp[n];
            }
            if n % 64 == 63 && !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("wavefield at step {}", n + 1)));
            }
            on_step(n, &next);
            std::mem::swap(&mut prev, &mut cur);
            std::mem::swap(&mut cur, &mut next);
        }
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("wavefield".into()));
        }
        Ok(())
    }

    fn extract(&self, p: &Propagator, ghosted: &[f64], out: &mut [f64]) {
        let (nx, nz, w) = (self.grid.nx, self.grid.nz, self.sponge.width);
        for ix in 0..nx {
            let src = (ix + w + GHOST) * p.sz + w + GHOST;
            out[ix * nz..(ix + 1) * nz].copy_from_slice(&ghosted[src..src + nz]);
        }
    }

    fn check_source(&self, src: &SourceTerm) -> Result<()> {
        if !self.grid.contains(src.position) {
            return Err(Error::OutOfGrid(src.position.0, src.position.1));
        }
        if src.wavelet.len() < self.grid.nt {
            return Err(Error::ShapeMismatch(format!("wavelet of {} samples for {} steps", src.wavelet.len(), self.grid.nt)));
        }
        if !src.wavelet.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("source wavelet".into()));
        }
        Ok(())
    }

    /// Full wavefield on the physical grid.
    pub fn solve_forward(&self, m: &VelocityModel, src: &SourceTerm) -> Result<Wavefield> {
        self.check_source(src)?;
        let p = self.propagator(m)?;
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let mut u = Wavefield::zeros(nx, nz, self.grid.nt);
        let inj = [Injection { cell: self.cell(&p, src.position), amp: &src.wavelet }];
        let cells = nx * nz;
        self.run(&p, &inj, |n, next| {
            let out = &mut u.data[(n + 1) * cells..(n + 2) * cells];
            self.extract(&p, next, out);
        })?;
        Ok(u)
    }

    /// Receiver traces only, without storing the wavefield.
    pub fn forward_traces(&self, m: &VelocityModel, src: &SourceTerm, s: &SamplingOperator, source: usize) -> Result<Vec<ShotRecord>> {
        self.check_source(src)?;
        let p = self.propagator(m)?;
        let cells = self.receiver_cells(&p, s)?;
        let mut traces = vec![vec![0.0; self.grid.nt]; cells.len()];
        let inj = [Injection { cell: self.cell(&p, src.position), amp: &src.wavelet }];
        self.run(&p, &inj, |n, next| {
            for (t, &c) in traces.iter_mut().zip(&cells) {
                t[n + 1] = next[c];
            }
        })?;
        Ok(traces.into_iter().enumerate().map(|(r, trace)| ShotRecord { source, receiver: r, trace }).collect())
    }

    fn receiver_cells(&self, p: &Propagator, s: &SamplingOperator) -> Result<Vec<usize>> {
        s.positions()
            .iter()
            .map(|&pos| if self.grid.contains(pos) { Ok(self.cell(p, pos)) } else { Err(Error::OutOfGrid(pos.0, pos.1)) })
            .collect()
    }

    fn adjoint_sources(&self, residuals: &[ShotRecord], s: &SamplingOperator) -> Result<Vec<Vec<f64>>> {
        let nt = self.grid.nt;
        residuals
            .iter()
            .map(|r| {
                if r.receiver >= s.len() {
                    return Err(Error::OutOfGrid(r.receiver, 0));
                }
                if r.trace.len() != nt {
                    return Err(Error::ShapeMismatch(format!("residual of {} samples for {nt} steps", r.trace.len())));
                }
                Ok(r.trace.iter().rev().copied().collect())
            })
            .collect()
    }

    /// Adjoint field driven by time-reversed residuals injected at the receivers.
    ///
    /// Returned in reversed time: snapshot `i` of the result is the adjoint
    /// state paired with forward step `nt - 1 - i`, so `q(x, tau - t)` of the
    /// continuous formula is `result.at(n, ..)` at forward index `n`.
    pub fn solve_adjoint(&self, m: &VelocityModel, residuals: &[ShotRecord], s: &SamplingOperator) -> Result<Wavefield> {
        let p = self.propagator(m)?;
        let reversed = self.adjoint_sources(residuals, s)?;
        let inj: Vec<Injection> = residuals
            .iter()
            .zip(&reversed)
            .map(|(r, amp)| Injection { cell: self.cell(&p, s.positions()[r.receiver]), amp })
            .collect();
        let (nx, nz) = (self.grid.nx, self.grid.nz);
        let cells = nx * nz;
        let mut q = Wavefield::zeros(nx, nz, self.grid.nt);
        self.run(&p, &inj, |n, next| {
            self.extract(&p, next, &mut q.data[(n + 1) * cells..(n + 2) * cells]);
        })?;
        Ok(q)
    }

    /// Traces and cost `1/2 sum (syn - obs)^2 dt` plus its exact gradient with
    /// respect to velocity, for one source and the receivers of `s`.
    ///
    /// `obs[r]` is the observed trace of receiver `r`.
    pub fn cost_and_gradient(
        &self,
        m: &VelocityModel,
        src: &SourceTerm,
        s: &SamplingOperator,
        obs: &[Vec<f64>],
    ) -> Result<(f64, ShotGradient)> {
        self.check_source(src)?;
        if obs.len() != s.len() {
            return Err(Error::ShapeMismatch(format!("{} observed traces for {} receivers", obs.len(), s.len())));
        }
        let p = self.propagator(m)?;
        let nt = self.grid.nt;
        let dt = self.grid.dt;
        let rc = self.receiver_cells(&p, s)?;
        // forward pass, storing padded snapshots u[0..nt) (u[0] = 0)
        let plen = p.len;
        let mut snaps = vec![0.0; nt * plen];
        let inj = [Injection { cell: self.cell(&p, src.position), amp: &src.wavelet }];
        self.run(&p, &inj, |n, next| snaps[(n + 1) * plen..(n + 2) * plen].copy_from_slice(next))?;
        let mut cost = 0.0;
        let mut reversed = Vec::with_capacity(rc.len());
        for (&c, o) in rc.iter().zip(obs) {
            if o.len() != nt {
                return Err(Error::ShapeMismatch(format!("observed trace of {} samples for {nt} steps", o.len())));
            }
            let res: Vec<f64> = (0..nt).map(|n| snaps[n * plen + c] - o[n]).collect();
            cost += 0.5 * dt * res.iter().map(|r| r * r).sum::<f64>();
            reversed.push(res.into_iter().rev().collect::<Vec<f64>>());
        }
        let adj: Vec<Injection> = rc.iter().zip(&reversed).map(|(&cell, amp)| Injection { cell, amp }).collect();
        // dJ/dm = (2/m^3) sum_{n=0}^{nt-2} lambda[n] (D2 u[n] + eta D1 u[n]),  lambda[n] = dt * w[nt-1-n]
        let mut acc = vec![0.0; plen];
        let inv_dt2 = 1.0 / (dt * dt);
        let half_inv_dt = 0.5 / dt;
        let zeros = vec![0.0; plen];
        self.run(&p, &adj, |i, w| {
            let k = i + 1;
            let n = nt - 1 - k;
            let un1 = &snaps[(n + 1) * plen..(n + 2) * plen];
            let un = &snaps[n * plen..(n + 1) * plen];
            let um1 = if n == 0 { &zeros[..] } else { &snaps[(n - 1) * plen..n * plen] };
            for j in 0..plen {
                if w[j] != 0.0 {
                    let d2 = (un1[j] - 2.0 * un[j] + um1[j]) * inv_dt2;
                    let d1 = (un1[j] - um1[j]) * half_inv_dt;
                    acc[j] += w[j] * (d2 + p.eta[j] * d1);
                }
            }
        })?;
        let (nx, nz, wd) = (self.grid.nx, self.grid.nz, self.sponge.width);
        let mut grad = Field::zeros(nx, nz);
        for ix in 0..p.px {
            let mx = ix.saturating_sub(wd).min(nx - 1);
            for iz in 0..p.pz {
                let mz = iz.saturating_sub(wd).min(nz - 1);
                let k = (ix + GHOST) * p.sz + iz + GHOST;
                let v = p.vel[k];
                grad.values[mx * nz + mz] += 2.0 / (v * v * v) * acc[k] * dt;
            }
        }
        if !grad.is_finite() || !cost.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let traces = (0..rc.len()).map(|r| (0..nt).map(|n| snaps[n * plen + rc[r]]).collect()).collect();
        Ok((cost, ShotGradient { gradient: grad, traces }))
    }
}

/// Gradient of one shot together with the synthetic traces it was computed from.
#[derive(Clone, Debug)]
pub struct ShotGradient {
    pub gradient: Field,
    pub traces: Vec<Vec<f64>>,
}
