//! Independent checks for the Malliavin layer and the score estimator: finite-difference
//! bumps of the Brownian path, a kernel density gradient, a Fokker–Planck solve, and the
//! duality relation `E[X_T^i δ(u_k)] = δ_ik`.

mod fokker_planck;

pub use fokker_planck::{fokker_planck_1d, FokkerPlanckSolution, Mesh, MASS_TOLERANCE};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::malliavin::{
    dt_first_variation, dt_gamma, dt_inverse_variation, malliavin_covariance_with,
    malliavin_derivative_state, CovarianceOptions,
};
use crate::model::SdeModel;
use crate::path::{derive_seed, perturb_increment, BrownianPath, TimeGrid, VariationTrajectory};
use crate::path::{sample_brownian, simulate_variations};
use crate::score::{gaussian_weights, ratio_estimate, skorokhod_sample, PipelineOptions};

/// Quantity differentiated by the bump oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BumpTarget {
    /// `X_T` (an `m×1` column for the bumped channel).
    State,
    /// `Y_T`.
    FirstVar,
    /// `Y_s⁻¹` at node `s`.
    InvVar { s: usize },
    /// `γ`.
    Gamma,
}

impl BumpTarget {
    pub fn label(&self) -> &'static str {
        match self {
            BumpTarget::State => "state",
            BumpTarget::FirstVar => "firstvar",
            BumpTarget::InvVar { .. } => "invvar",
            BumpTarget::Gamma => "gamma",
        }
    }
}

fn unguarded() -> CovarianceOptions {
    CovarianceOptions {
        ridge: false,
        max_condition: f64::INFINITY,
    }
}

fn evaluate_target(target: BumpTarget, traj: &VariationTrajectory) -> Result<DMatrix<f64>> {
    let m = traj.state_dim();
    let view = |s: &[f64]| DMatrix::from_row_slice(m, m, s);
    Ok(match target {
        BumpTarget::State => DMatrix::from_column_slice(m, 1, traj.terminal()),
        BumpTarget::FirstVar => view(traj.y(traj.steps())),
        BumpTarget::InvVar { s } => {
            if s > traj.steps() {
                return Err(Error::OutOfRange(format!("node {s} beyond {}", traj.steps())));
            }
            view(traj.yinv(s))
        }
        BumpTarget::Gamma => malliavin_covariance_with(traj, unguarded())?.gamma(),
    })
}

/// Central difference of `target` under `ΔB_i^l ± ε`, all other increments unchanged.
#[allow(clippy::too_many_arguments)]
pub fn fd_malliavin(
    target: BumpTarget,
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    w: &BrownianPath,
    i: usize,
    l: usize,
    eps: f64,
) -> Result<DMatrix<f64>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Contract(format!("bump size {eps} must be > 0")));
    }
    let run = |sign: f64| -> Result<DMatrix<f64>> {
        let bumped = perturb_increment(w, i, l, sign * eps)?;
        match simulate_variations(model, x0, grid, &bumped) {
            Ok(t) => evaluate_target(target, &t),
            Err(Error::BlowUp { step }) => Err(Error::Oracle(format!("bumped path blew up at step {step}"))),
            Err(e) => Err(e),
        }
    };
    Ok((run(1.0)? - run(-1.0)?) / (2.0 * eps))
}

/// The closed-form counterpart of [`fd_malliavin`] for channel `l`.
pub fn malliavin_formula(target: BumpTarget, traj: &VariationTrajectory, i: usize, l: usize) -> Result<DMatrix<f64>> {
    if l >= traj.noise_dim() {
        return Err(Error::OutOfRange(format!("channel {l} ≥ {}", traj.noise_dim())));
    }
    Ok(match target {
        BumpTarget::State => malliavin_derivative_state(traj, i)?.columns(l, 1).into_owned(),
        BumpTarget::FirstVar => dt_first_variation(traj, i)?.swap_remove(l),
        BumpTarget::InvVar { s } => dt_inverse_variation(traj, i, s)?.swap_remove(l),
        BumpTarget::Gamma => {
            let bundle = malliavin_covariance_with(traj, unguarded())?;
            dt_gamma(traj, &bundle, i)?.swap_remove(l)
        }
    })
}

/// One `(path, i, s, l)` comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpProbe {
    pub path: u64,
    pub i: usize,
    pub s: Option<usize>,
    pub l: usize,
    pub bump: DMatrix<f64>,
    pub formula: DMatrix<f64>,
}

/// Aggregate bump-vs-formula discrepancy over a set of probes.
#[derive(Debug, Clone, PartialEq)]
pub struct BumpReport {
    pub target: &'static str,
    pub probes: Vec<BumpProbe>,
    /// `‖bump − formula‖₂ / ‖bump‖₂` over all probe entries.
    pub relative_error: f64,
    /// `max |bump − formula|` over all probe entries.
    pub max_abs_error: f64,
    /// `max |bump|` over all probe entries.
    pub max_abs_bump: f64,
}

/// Below this the bump is treated as zero and the absolute error is checked instead.
pub const BUMP_ZERO_LEVEL: f64 = 1e-6;

impl BumpReport {
    fn from_probes(target: &'static str, probes: Vec<BumpProbe>) -> Self {
        let (mut num, mut den, mut max_abs, mut max_bump) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        for p in &probes {
            for (b, f) in p.bump.iter().zip(p.formula.iter()) {
                num += (b - f).powi(2);
                den += b * b;
                max_abs = max_abs.max((b - f).abs());
                max_bump = max_bump.max(b.abs());
            }
        }
        BumpReport {
            target,
            probes,
            relative_error: if den > 0.0 { (num / den).sqrt() } else { f64::NAN },
            max_abs_error: max_abs,
            max_abs_bump: max_bump,
        }
    }

    /// Relative error within `tol`, or both sides below [`BUMP_ZERO_LEVEL`] when the bump vanishes.
    pub fn passed(&self, tol: f64) -> bool {
        if self.max_abs_bump <= BUMP_ZERO_LEVEL {
            self.max_abs_error <= BUMP_ZERO_LEVEL
        } else {
            self.relative_error <= tol
        }
    }

    /// The figure compared against the tolerance.
    pub fn error(&self) -> f64 {
        if self.max_abs_bump <= BUMP_ZERO_LEVEL {
            self.max_abs_error
        } else {
            self.relative_error
        }
    }
}

/// Probe positions as fractions of the horizon, so the same probes can be replayed on
/// refined grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePlan {
    pub probes: Vec<(u64, f64, f64, usize)>,
}

impl ProbePlan {
    /// `count` probes over `n_paths` candidate paths; `i` uniform in `[0, T)`, `s` in `(t_i, T]`.
    pub fn random(count: usize, n_paths: u64, noise_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6275_6d70));
        let probes = (0..count)
            .map(|_| {
                let p = rng.random_range(0..n_paths);
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                let l = rng.random_range(0..noise_dim);
                (p, u, v, l)
            })
            .collect();
        ProbePlan { probes }
    }

    fn nodes(u: f64, v: f64, n: usize) -> (usize, usize) {
        let i = ((u * n as f64) as usize).min(n - 1);
        let s = i + 1 + ((v * (n - i) as f64) as usize).min(n - i - 1);
        (i, s)
    }
}

/// Replays `plan` on `grid` against the formula for `target` (the `s` of `InvVar` comes from the plan).
///
/// Brownian paths are drawn on `fine` steps (a multiple of `grid.steps()`) and summed down,
/// so refining the grid keeps the underlying path.
#[allow(clippy::too_many_arguments)]
pub fn bump_report(
    target: BumpTarget,
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    fine: usize,
    plan: &ProbePlan,
    eps_scale: f64,
    seed: u64,
) -> Result<BumpReport> {
    let n = grid.steps();
    if !fine.is_multiple_of(n) {
        return Err(Error::InvalidGrid(format!("{fine} fine steps do not refine {n}")));
    }
    let fine_grid = TimeGrid::new(grid.horizon(), fine)?;
    let eps = eps_scale * grid.dt().sqrt();
    let mut probes = Vec::with_capacity(plan.probes.len());
    for &(p, u, v, l) in &plan.probes {
        let w = coarsen(&sample_brownian(&fine_grid, model.noise_dim(), seed, p), fine / n)?;
        let traj = simulate_variations(model, x0, grid, &w)?;
        let (i, s) = ProbePlan::nodes(u, v, n);
        let target = match target {
            BumpTarget::InvVar { .. } => BumpTarget::InvVar { s },
            t => t,
        };
        let bump = fd_malliavin(target, model, x0, grid, &w, i, l, eps)?;
        let formula = malliavin_formula(target, &traj, i, l)?;
        probes.push(BumpProbe {
            path: p,
            i,
            s: matches!(target, BumpTarget::InvVar { .. }).then_some(s),
            l,
            bump,
            formula,
        });
    }
    Ok(BumpReport::from_probes(target.label(), probes))
}

/// Sums consecutive blocks of `factor` increments.
pub fn coarsen(w: &BrownianPath, factor: usize) -> Result<BrownianPath> {
    if factor == 0 || !w.steps().is_multiple_of(factor) {
        return Err(Error::InvalidGrid(format!("cannot coarsen {} steps by {factor}", w.steps())));
    }
    let d = w.noise_dim();
    let steps = w.steps() / factor;
    let mut inc = vec![0.0; steps * d];
    for i in 0..w.steps() {
        for l in 0..d {
            inc[(i / factor) * d + l] += w.increment(i)[l];
        }
    }
    BrownianPath::from_increments(inc, d, w.seed, w.path_index)
}

/// Gradient of the log of a Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeScore {
    pub score: Vec<f64>,
    pub stderr: Vec<f64>,
    pub density: f64,
    /// Density below `1e−12`: the estimate is reported but should not be trusted.
    pub unreliable: bool,
}

/// `∇_y log p̂(y)` for `p̂ = n⁻¹ Σ_p Π_j φ_{h_j}(x_pj − y_j)`; flat `n×m` samples.
pub fn kde_score(xs: &[f64], m: usize, y: &[f64], h: &[f64]) -> Result<KdeScore> {
    if m == 0 || !xs.len().is_multiple_of(m) || y.len() != m || h.len() != m {
        return Err(Error::Dimension("kde_score shapes disagree".into()));
    }
    let n = xs.len() / m;
    if n < 100 {
        return Err(Error::Contract(format!("{n} samples, need ≥ 100")));
    }
    if h.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Contract("bandwidths must be > 0".into()));
    }
    let mut w = Vec::with_capacity(n);
    gaussian_weights(xs, m, y, h, &mut w);
    let top = (0..n)
        .map(|p| {
            -(0..m)
                .map(|j| ((xs[p * m + j] - y[j]) / h[j]).powi(2))
                .sum::<f64>()
                / 2.0
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = h
        .iter()
        .map(|hj| (hj * (2.0 * std::f64::consts::PI).sqrt()).ln())
        .sum();
    let density = (top + w.iter().sum::<f64>().ln() - (n as f64).ln() - norm).exp();
    let mut score = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    for j in 0..m {
        let r = ratio_estimate(&w, |p| (xs[p * m + j] - y[j]) / (h[j] * h[j]));
        score.push(r.value);
        stderr.push(r.stderr);
    }
    Ok(KdeScore {
        score,
        stderr,
        density,
        unreliable: !(density >= 1e-12),
    })
}

/// Monte Carlo `E[X_T^i δ(u_k)]` (expected `δ_ik`).
#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub m: usize,
    /// `mean[i * m + k]`.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub valid: usize,
    pub excluded: usize,
}

impl DualityReport {
    /// Largest `|mean − δ_ik| / SE` over all entries.
    pub fn max_z(&self) -> f64 {
        (0..self.m * self.m)
            .map(|ik| {
                let target = if ik / self.m == ik % self.m { 1.0 } else { 0.0 };
                (self.mean[ik] - target).abs() / self.stderr[ik]
            })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, z: f64) -> bool {
        self.max_z() <= z
    }
}

pub fn duality_report(
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    opts: PipelineOptions,
) -> Result<DualityReport> {
    let sample = skorokhod_sample(model, x0, grid, grid.steps(), n_paths, seed, opts)?;
    let m = sample.m;
    let (xs, ds) = sample.columns();
    let n = xs.len() / m;
    if n < 2 {
        return Err(Error::NearSingular {
            condition: f64::INFINITY,
        });
    }
    let mut mean = vec![0.0; m * m];
    let mut stderr = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let v = |p: usize| xs[p * m + i] * ds[p * m + k];
            let mu = (0..n).map(v).sum::<f64>() / n as f64;
            let var = (0..n).map(|p| (v(p) - mu).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            mean[i * m + k] = mu;
            stderr[i * m + k] = (var / n as f64).sqrt();
        }
    }
    Ok(DualityReport {
        m,
        mean,
        stderr,
        valid: n,
        excluded: sample.excluded(),
    })
}
