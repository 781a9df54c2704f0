//! Exact conditional mutual information and its variational lower bound on
//! small discrete joints `p(z, y, s0)`, by enumeration.

use rand::Rng;

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-12;

/// Dense table indexed `(z, y, s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Table3 {
    pub nz: usize,
    pub ny: usize,
    pub ns: usize,
    pub p: Vec<f64>,
}

impl Table3 {
    pub fn new(nz: usize, ny: usize, ns: usize, p: Vec<f64>) -> Result<Self> {
        if nz * ny * ns == 0 || p.len() != nz * ny * ns {
            return Err(Error::ShapeMismatch(format!("{} entries for a {nz}x{ny}x{ns} table", p.len())));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::NonFinite("probability table".into()));
        }
        Ok(Self { nz, ny, ns, p })
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, s: usize) -> f64 {
        self.p[(z * self.ny + y) * self.ns + s]
    }

    fn check_joint(&self) -> Result<()> {
        let total: f64 = self.p.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::NotNormalized(total));
        }
        Ok(())
    }

    fn p_ys(&self, y: usize, s: usize) -> f64 {
        (0..self.nz).map(|z| self.at(z, y, s)).sum()
    }

    fn p_zs(&self, z: usize, s: usize) -> f64 {
        (0..self.ny).map(|y| self.at(z, y, s)).sum()
    }

    fn p_s(&self, s: usize) -> f64 {
        (0..self.nz).flat_map(|z| (0..self.ny).map(move |y| (z, y))).map(|(z, y)| self.at(z, y, s)).sum()
    }

    /// Random joint with strictly positive entries, optionally sparsified.
    pub fn random<R: Rng>(nz: usize, ny: usize, ns: usize, zero_fraction: f64, rng: &mut R) -> Self {
        let mut p: Vec<f64> = (0..nz * ny * ns)
            .map(|_| if rng.gen::<f64>() < zero_fraction { 0.0 } else { rng.gen::<f64>() + 1e-3 })
            .collect();
        if p.iter().all(|&v| v == 0.0) {
            p[0] = 1.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        Self { nz, ny, ns, p }
    }

    /// The true posterior `p(z | y, s)`; uniform where `p(y, s) = 0`.
    pub fn posterior(&self) -> Table3 {
        let mut q = vec![0.0; self.p.len()];
        for y in 0..self.ny {
            for s in 0..self.ns {
                let pys = self.p_ys(y, s);
                for z in 0..self.nz {
                    q[(z * self.ny + y) * self.ns + s] =
                        if pys > 0.0 { self.at(z, y, s) / pys } else { 1.0 / self.nz as f64 };
                }
            }
        }
        Table3 { nz: self.nz, ny: self.ny, ns: self.ns, p: q }
    }

    /// Random decoder table `q(z | y, s)` that is positive everywhere.
    pub fn random_decoder<R: Rng>(nz: usize, ny: usize, ns: usize, rng: &mut R) -> Self {
        let mut q = vec![0.0; nz * ny * ns];
        for y in 0..ny {
            for s in 0..ns {
                let w: Vec<f64> = (0..nz).map(|_| rng.gen::<f64>() + 1e-2).collect();
                let t: f64 = w.iter().sum();
                for z in 0..nz {
                    q[(z * ny + y) * ns + s] = w[z] / t;
                }
            }
        }
        Table3 { nz, ny, ns, p: q }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// `I(z; y | s0) = sum p(z,y,s) ln [p(z,y,s) p(s) / (p(z,s) p(y,s))]` in nats.
pub fn conditional_mi_discrete(joint: &Table3) -> Result<f64> {
    joint.check_joint()?;
    let mut mi = 0.0;
    for s in 0..joint.ns {
        let ps = joint.p_s(s);
        for z in 0..joint.nz {
            let pzs = joint.p_zs(z, s);
            for y in 0..joint.ny {
                let p = joint.at(z, y, s);
                if p > 0.0 {
                    mi += p * (p * ps / (pzs * joint.p_ys(y, s))).ln();
                }
            }
        }
    }
    Ok(mi)
}

fn check_decoder(joint: &Table3, q: &Table3) -> Result<()> {
    if (q.nz, q.ny, q.ns) != (joint.nz, joint.ny, joint.ns) {
        return Err(Error::ShapeMismatch("decoder table does not match the joint".into()));
    }
    for y in 0..q.ny {
        for s in 0..q.ns {
            let row: f64 = (0..q.nz).map(|z| q.at(z, y, s)).sum();
            if (row - 1.0).abs() > 1e-9 {
                return Err(Error::NotNormalized(row));
            }
            for z in 0..q.nz {
                if joint.at(z, y, s) > 0.0 && q.at(z, y, s) <= 0.0 {
                    return Err(Error::SupportViolation(format!("(z={z}, y={y}, s0={s})")));
                }
            }
        }
    }
    Ok(())
}

/// `E[ln q(z | y, s0)] + H(z | s0)`: negative expected cross-entropy plus the
/// conditional entropy of `z` given the side information.
pub fn mi_lower_bound_discrete(joint: &Table3, q: &Table3) -> Result<f64> {
    joint.check_joint()?;
    check_decoder(joint, q)?;
    let mut cross = 0.0;
    for (p, qv) in joint.p.iter().zip(&q.p) {
        cross += xlogy(*p, *qv);
    }
    let mut h_z_s = 0.0;
    for s in 0..joint.ns {
        let ps = joint.p_s(s);
        for z in 0..joint.nz {
            let pzs = joint.p_zs(z, s);
            if pzs > 0.0 {
                h_z_s -= pzs * (pzs / ps).ln();
            }
        }
    }
    Ok(cross + h_z_s)
}

/// `sum_{y,s} p(y,s) KL(p(.|y,s) || q(.|y,s))`.
pub fn expected_kl(joint: &Table3, q: &Table3) -> Result<f64> {
    joint.check_joint()?;
    check_decoder(joint, q)?;
    let mut kl = 0.0;
    for y in 0..joint.ny {
        for s in 0..joint.ns {
            let pys = joint.p_ys(y, s);
            if pys == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for z in 0..joint.nz {
                let post = joint.at(z, y, s) / pys;
                if post > 0.0 {
                    row += post * (post / q.at(z, y, s)).ln();
                }
            }
            kl += pys * row;
        }
    }
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_given_side_info_is_zero() {
        // p(z,y,s) = p(s) p(z|s) p(y|s)
        let ps = [0.3, 0.7];
        let pz = [[0.2, 0.8], [0.6, 0.4]];
        let py = [[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]];
        let mut p = vec![0.0; 2 * 3 * 2];
        for z in 0..2 {
            for y in 0..3 {
                for s in 0..2 {
                    p[(z * 3 + y) * 2 + s] = ps[s] * pz[s][z] * py[s][y];
                }
            }
        }
        let t = Table3::new(2, 3, 2, p).unwrap();
        assert!(conditional_mi_discrete(&t).unwrap().abs() < 1e-15);
    }

    #[test]
    fn copy_channel_carries_one_bit() {
        let t = Table3::new(2, 2, 1, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        assert!((conditional_mi_discrete(&t).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_and_unsupported_tables_are_rejected() {
        let t = Table3::new(2, 1, 1, vec![0.5, 0.4]).unwrap();
        assert!(matches!(conditional_mi_discrete(&t), Err(Error::NotNormalized(_))));
        let joint = Table3::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
        let q = Table3::new(2, 1, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(mi_lower_bound_discrete(&joint, &q), Err(Error::SupportViolation(_))));
    }
}
