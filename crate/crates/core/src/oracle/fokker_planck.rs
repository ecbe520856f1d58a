//! Crank–Nicolson solve of `∂_t p = −∂_x(b p) + ½∂_xx(σ² p)` on a uniform 1D mesh.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::SdeModel;
use crate::path::fmt_f64;

/// Allowed drift of `Σ_j p_j Δx` away from 1.
pub const MASS_TOLERANCE: f64 = 1e-3;

/// Number of time steps replaced by two implicit-Euler half steps each.
const DAMPING_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mesh {
    pub lo: f64,
    pub hi: f64,
    /// Number of cells; nodes are `x_j = lo + jΔx`, `j = 0..=cells`.
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FokkerPlanckSolution {
    pub x: Vec<f64>,
    pub times: Vec<f64>,
    /// `density[n * x.len() + j] = p(t_n, x_j)`.
    density: Vec<f64>,
}

impl FokkerPlanckSolution {
    pub fn dx(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    pub fn density(&self, n: usize) -> &[f64] {
        let k = self.x.len();
        &self.density[n * k..(n + 1) * k]
    }

    pub fn mass(&self, n: usize) -> f64 {
        self.density(n).iter().sum::<f64>() * self.dx()
    }

    /// `∂_x log p` by central differences; NaN at the ends and wherever `p ≤ 0`.
    pub fn score(&self, n: usize) -> Vec<f64> {
        let p = self.density(n);
        let k = p.len();
        let h = self.dx();
        (0..k)
            .map(|j| {
                if j == 0 || j + 1 == k || !(p[j - 1] > 0.0 && p[j + 1] > 0.0) {
                    f64::NAN
                } else {
                    (p[j + 1].ln() - p[j - 1].ln()) / (2.0 * h)
                }
            })
            .collect()
    }

    fn interpolate(&self, values: &[f64], y: f64) -> f64 {
        let h = self.dx();
        let u = (y - self.x[0]) / h;
        if !(u >= 0.0) || u > (self.x.len() - 1) as f64 {
            return f64::NAN;
        }
        let j = (u.floor() as usize).min(self.x.len() - 2);
        let f = u - j as f64;
        values[j] * (1.0 - f) + values[j + 1] * f
    }

    pub fn density_at(&self, n: usize, y: f64) -> f64 {
        self.interpolate(self.density(n), y)
    }

    pub fn score_at(&self, n: usize, y: f64) -> f64 {
        self.interpolate(&self.score(n), y)
    }

    /// `t,x,p,score` rows for the listed time indices.
    pub fn write_csv<W: Write>(&self, out: &mut W, time_indices: &[usize]) -> Result<()> {
        writeln!(out, "t,x,p,score")?;
        for &n in time_indices {
            let score = self.score(n);
            for (j, x) in self.x.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_f64(self.times[n]),
                    fmt_f64(*x),
                    fmt_f64(self.density(n)[j]),
                    fmt_f64(score[j])
                )?;
            }
        }
        Ok(())
    }
}

/// Tridiagonal system `sub·p_{j−1} + diag·p_j + sup·p_{j+1} = rhs` (Thomas algorithm, in place).
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = diag.len();
    scratch[0] = sup[0] / diag[0];
    rhs[0] /= diag[0];
    for j in 1..n {
        let denom = diag[j] - sub[j] * scratch[j - 1];
        scratch[j] = sup[j] / denom;
        rhs[j] = (rhs[j] - sub[j] * rhs[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        rhs[j] -= scratch[j] * rhs[j + 1];
    }
}

/// Density of a 1D model started from (a one-cell-wide Gaussian around) `x0`.
///
/// The first steps are split into implicit-Euler half steps to damp the Crank–Nicolson
/// oscillation from the sharp initial bump. Aborts if the mass leaves `1 ± 1e−3`.
pub fn fokker_planck_1d(
    model: &dyn SdeModel,
    x0: f64,
    horizon: f64,
    mesh: Mesh,
    n_time: usize,
) -> Result<FokkerPlanckSolution> {
    if model.state_dim() != 1 {
        return Err(Error::UnsupportedModel(format!(
            "Fokker–Planck oracle is 1D; {} has dimension {}",
            model.name(),
            model.state_dim()
        )));
    }
    if !(mesh.hi > mesh.lo) || mesh.cells < 4 || n_time == 0 || !(horizon > 0.0) {
        return Err(Error::InvalidGrid(format!("{mesh:?}, {n_time} steps, T = {horizon}")));
    }
    if !(x0 > mesh.lo && x0 < mesh.hi) {
        return Err(Error::Contract(format!("x0 = {x0} outside the mesh")));
    }
    let d = model.noise_dim();
    let k = mesh.cells + 1;
    let h = (mesh.hi - mesh.lo) / mesh.cells as f64;
    let x: Vec<f64> = (0..k).map(|j| mesh.lo + j as f64 * h).collect();
    let dt = horizon / n_time as f64;

    let mut p: Vec<f64> = x.iter().map(|xj| (-0.5 * ((xj - x0) / h).powi(2)).exp()).collect();
    p[0] = 0.0;
    p[k - 1] = 0.0;
    let mass0: f64 = p.iter().sum::<f64>() * h;
    p.iter_mut().for_each(|v| *v /= mass0);

    let mut density = Vec::with_capacity((n_time + 1) * k);
    density.extend_from_slice(&p);
    let mut times = vec![0.0];

    let interior = k - 2;
    let (mut lsub, mut ldiag, mut lsup) = (vec![0.0; interior], vec![0.0; interior], vec![0.0; interior]);
    let (mut asub, mut adiag, mut asup) = (vec![0.0; interior], vec![0.0; interior], vec![0.0; interior]);
    let mut rhs = vec![0.0; interior];
    let mut scratch = vec![0.0; interior];
    let mut b = vec![0.0; k];
    let mut a = vec![0.0; k];
    let (mut bj, mut sj) = (vec![0.0; 1], vec![0.0; d]);

    let mut build = |t: f64, lsub: &mut [f64], ldiag: &mut [f64], lsup: &mut [f64]| {
        for j in 0..k {
            model.drift(t, &x[j..j + 1], &mut bj);
            model.diffusion(t, &x[j..j + 1], &mut sj);
            b[j] = bj[0];
            a[j] = sj.iter().map(|s| s * s).sum();
        }
        for r in 0..interior {
            let j = r + 1;
            lsub[r] = b[j - 1] / (2.0 * h) + a[j - 1] / (2.0 * h * h);
            ldiag[r] = -a[j] / (h * h);
            lsup[r] = -b[j + 1] / (2.0 * h) + a[j + 1] / (2.0 * h * h);
        }
    };

    // (I − θτL) p⁺ = (I + (1−θ)τL) p
    let mut step = |p: &mut Vec<f64>, theta: f64, tau: f64, t_coef: f64| {
        build(t_coef, &mut lsub, &mut ldiag, &mut lsup);
        let explicit = (1.0 - theta) * tau;
        for r in 0..interior {
            let j = r + 1;
            rhs[r] = p[j] + explicit * (lsub[r] * p[j - 1] + ldiag[r] * p[j] + lsup[r] * p[j + 1]);
            asub[r] = -theta * tau * lsub[r];
            adiag[r] = 1.0 - theta * tau * ldiag[r];
            asup[r] = -theta * tau * lsup[r];
        }
        thomas(&asub, &adiag, &asup, &mut rhs, &mut scratch);
        p[1..k - 1].copy_from_slice(&rhs);
    };

    for n in 0..n_time {
        let t0 = n as f64 * dt;
        if n < DAMPING_STEPS {
            step(&mut p, 1.0, dt / 2.0, t0 + dt / 2.0);
            step(&mut p, 1.0, dt / 2.0, t0 + dt);
        } else {
            step(&mut p, 0.5, dt, t0 + dt / 2.0);
        }
        for v in p.iter_mut() {
            if *v < 0.0 && *v >= -1e-12 {
                *v = 0.0;
            }
        }
        let mass = p.iter().sum::<f64>() * h;
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Oracle(format!(
                "Fokker–Planck mass {mass:.6} at t = {:.4} (step {}); widen the mesh",
                t0 + dt,
                n + 1
            )));
        }
        density.extend_from_slice(&p);
        times.push((n + 1) as f64 * dt);
    }
    Ok(FokkerPlanckSolution { x, times, density })
}
