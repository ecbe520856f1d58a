//! Score estimation `∇log p_t(y) = −E[δ(u) | X_t = y]`, the closed-form linear score,
//! and the reverse-time sampler.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::malliavin::{
    malliavin_covariance_with, skorokhod_all, CovarianceOptions, SkorokhodBreakdown, SkorokhodMode,
    SkorokhodOptions,
};
use crate::model::{divergence_from_parts, BuiltinModel, SdeModel};
use crate::path::{derive_seed, fmt_f64, path_rng, sample_brownian, simulate_variations, TimeGrid};

/// Points whose kernel effective sample size falls below this are reported but not estimated.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 5.0;

const TAG_REVERSE_TERMINAL: u64 = 0x7265_7665_7273_6531;
const TAG_REVERSE_NOISE: u64 = 0x7265_7665_7273_6532;

/// Per-path options for the Skorokhod pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PipelineOptions {
    pub skorokhod: SkorokhodOptions,
    pub ridge: bool,
}

/// Why a path was left out of the averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exclusion {
    BlowUp,
    NearSingular,
}

/// One path's contribution at the evaluation node.
#[derive(Debug, Clone, PartialEq)]
pub enum PathOutcome {
    Valid {
        x: Vec<f64>,
        breakdown: Vec<SkorokhodBreakdown>,
    },
    Excluded(Exclusion),
}

/// `(X_t, δ(u_k))` pairs in path order, excluded paths kept as markers.
#[derive(Debug, Clone)]
pub struct SkorokhodSample {
    pub m: usize,
    pub node: usize,
    pub t: f64,
    pub outcomes: Vec<PathOutcome>,
}

impl SkorokhodSample {
    pub fn excluded(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o, PathOutcome::Excluded(_)))
            .count()
    }

    pub fn valid(&self) -> impl Iterator<Item = (&[f64], &[SkorokhodBreakdown])> {
        self.outcomes.iter().filter_map(|o| match o {
            PathOutcome::Valid { x, breakdown } => Some((x.as_slice(), breakdown.as_slice())),
            PathOutcome::Excluded(_) => None,
        })
    }

    /// Flat `n×m` states and `n×m` Skorokhod totals of the valid paths.
    pub fn columns(&self) -> (Vec<f64>, Vec<f64>) {
        let mut xs = Vec::new();
        let mut ds = Vec::new();
        for (x, b) in self.valid() {
            xs.extend_from_slice(x);
            ds.extend(b.iter().map(|s| s.total));
        }
        (xs, ds)
    }
}

/// Simulates `n_paths` paths on the grid truncated at `node` and evaluates `δ(u_k)` for all `k`.
///
/// Path `p` always uses stream `p` of `seed`, so the result does not depend on the
/// rayon pool size.
pub fn skorokhod_sample(
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    node: usize,
    n_paths: usize,
    seed: u64,
    opts: PipelineOptions,
) -> Result<SkorokhodSample> {
    let m = model.state_dim();
    if x0.len() != m {
        return Err(Error::Dimension(format!("x0 has length {}, model expects {m}", x0.len())));
    }
    if opts.skorokhod.mode == SkorokhodMode::StateIndependent && !model.state_independent_diffusion() {
        return Err(Error::UnsupportedModel(format!(
            "{} has a state-dependent diffusion; the pruned evaluator does not apply",
            model.name()
        )));
    }
    let sub = grid.truncated(node)?;
    let d = model.noise_dim();
    let outcomes = (0..n_paths as u64)
        .into_par_iter()
        .map(|p| -> Result<PathOutcome> {
            let w = sample_brownian(grid, d, seed, p).truncated(node)?;
            let traj = match simulate_variations(model, x0, &sub, &w) {
                Ok(t) => t,
                Err(Error::BlowUp { .. }) => return Ok(PathOutcome::Excluded(Exclusion::BlowUp)),
                Err(e) => return Err(e),
            };
            let cov = CovarianceOptions {
                ridge: opts.ridge,
                ..Default::default()
            };
            let bundle = match malliavin_covariance_with(&traj, cov) {
                Ok(b) => b,
                Err(Error::NearSingular { .. }) => {
                    return Ok(PathOutcome::Excluded(Exclusion::NearSingular))
                }
                Err(e) => return Err(e),
            };
            let breakdown = skorokhod_all(&traj, &bundle, opts.skorokhod)?;
            if breakdown.iter().any(|b| !b.total.is_finite()) {
                return Ok(PathOutcome::Excluded(Exclusion::BlowUp));
            }
            Ok(PathOutcome::Valid {
                x: traj.terminal().to_vec(),
                breakdown,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SkorokhodSample {
        m,
        node,
        t: grid.time(node),
        outcomes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule, per dimension.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regression {
    NadarayaWatson(Bandwidth),
    /// Uniform average over the `k` nearest states (per-dimension standardised distance).
    NearestNeighbours(usize),
}

impl Default for Regression {
    fn default() -> Self {
        Regression::NadarayaWatson(Bandwidth::Auto)
    }
}

/// `h_j = s_j (4 / ((m + 2) n))^{1/(m+4)}` from flat `n×m` samples.
pub fn silverman_bandwidth(xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len() / m;
    let factor = (4.0 / ((m as f64 + 2.0) * n as f64)).powf(1.0 / (m as f64 + 4.0));
    column_std(xs, m).into_iter().map(|s| s * factor).collect()
}

fn column_std(xs: &[f64], m: usize) -> Vec<f64> {
    let n = xs.len() / m;
    (0..m)
        .map(|j| {
            let mean = (0..n).map(|p| xs[p * m + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|p| (xs[p * m + j] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            var.sqrt()
        })
        .collect()
}

/// Kernel-weighted ratio estimate `R = Σ w δ / Σ w` with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_eff: f64,
}

/// Weighted mean and delta-method SE for weights `w` and responses `v`.
pub(crate) fn ratio_estimate(w: &[f64], v: impl Fn(usize) -> f64) -> RatioEstimate {
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    if !(sw > 0.0) {
        return RatioEstimate {
            value: f64::NAN,
            stderr: f64::NAN,
            n_eff: 0.0,
        };
    }
    let value = w.iter().enumerate().map(|(p, wp)| wp * v(p)).sum::<f64>() / sw;
    let resid = w
        .iter()
        .enumerate()
        .map(|(p, wp)| (wp * (v(p) - value)).powi(2))
        .sum::<f64>();
    RatioEstimate {
        value,
        stderr: resid.sqrt() / sw,
        n_eff: sw * sw / sw2,
    }
}

/// Gaussian product-kernel weights rescaled so the largest is 1.
pub(crate) fn gaussian_weights(xs: &[f64], m: usize, y: &[f64], h: &[f64], out: &mut Vec<f64>) {
    let n = xs.len() / m;
    out.clear();
    out.extend((0..n).map(|p| {
        -(0..m)
            .map(|j| ((xs[p * m + j] - y[j]) / h[j]).powi(2))
            .sum::<f64>()
            / 2.0
    }));
    let top = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.iter_mut().for_each(|l| *l = (*l - top).exp());
}

/// One row of a score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub score: f64,
    pub stderr: f64,
    pub n_eff: f64,
}

impl ScoreEntry {
    pub fn is_flagged(&self) -> bool {
        !(self.n_eff >= MIN_EFFECTIVE_SAMPLES) || !self.score.is_finite()
    }
}

/// Score estimates at a fixed time on a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub t: f64,
    pub m: usize,
    pub points: Vec<Vec<f64>>,
    /// `entries[q * m + k]`.
    pub entries: Vec<ScoreEntry>,
    pub excluded: usize,
    pub valid_paths: usize,
    /// Bandwidth actually used (empty in nearest-neighbour mode).
    pub bandwidth: Vec<f64>,
}

impl ScoreTable {
    pub fn entry(&self, q: usize, k: usize) -> &ScoreEntry {
        &self.entries[q * self.m + k]
    }

    pub fn csv_header(m: usize) -> String {
        let ys: Vec<String> = (1..=m).map(|j| format!("y_{j}")).collect();
        format!("t,{},k,score,stderr,n_eff,excluded", ys.join(","))
    }

    /// `t,y_1..y_m,k,score,stderr,n_eff,excluded`, `k` 1-based.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "{}", Self::csv_header(self.m))?;
        for (q, y) in self.points.iter().enumerate() {
            for k in 0..self.m {
                let e = self.entry(q, k);
                let ys: Vec<String> = y.iter().map(|v| fmt_f64(*v)).collect();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    fmt_f64(self.t),
                    ys.join(","),
                    k + 1,
                    fmt_f64(e.score),
                    fmt_f64(e.stderr),
                    fmt_f64(e.n_eff),
                    self.excluded
                )?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let m = headers.len().checked_sub(6).filter(|m| *m > 0).ok_or_else(|| {
            Error::Io(format!("score table header has {} columns", headers.len()))
        })?;
        if headers.iter().collect::<Vec<_>>().join(",") != Self::csv_header(m) {
            return Err(Error::Io("unexpected score table header".into()));
        }
        let mut t = None;
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut entries = Vec::new();
        let mut excluded = 0;
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Io(format!("column {}: {e}", &headers[i])))
            };
            let row_t = num(0)?;
            if *t.get_or_insert(row_t) != row_t {
                return Err(Error::Io("score table mixes several times".into()));
            }
            let y: Vec<f64> = (1..=m).map(num).collect::<Result<_>>()?;
            let k: usize = rec[m + 1]
                .parse()
                .map_err(|e| Error::Io(format!("column k: {e}")))?;
            if k == 1 {
                points.push(y);
            } else if points.last() != Some(&y) {
                return Err(Error::Io("score table rows are not grouped by point".into()));
            }
            if k != entries.len() % m + 1 {
                return Err(Error::Io("score table components out of order".into()));
            }
            entries.push(ScoreEntry {
                score: num(m + 2)?,
                stderr: num(m + 3)?,
                n_eff: num(m + 4)?,
            });
            excluded = rec[m + 5]
                .parse()
                .map_err(|e| Error::Io(format!("column excluded: {e}")))?;
        }
        if entries.len() != points.len() * m || points.is_empty() {
            return Err(Error::Io("incomplete score table".into()));
        }
        Ok(ScoreTable {
            t: t.unwrap_or(0.0),
            m,
            points,
            entries,
            excluded,
            valid_paths: 0,
            bandwidth: Vec::new(),
        })
    }
}

/// Regresses `−δ(u_k)` on `X_t` at each point.
pub fn regress_score(sample: &SkorokhodSample, points: &[Vec<f64>], regression: Regression) -> Result<ScoreTable> {
    let m = sample.m;
    if points.iter().any(|y| y.len() != m) {
        return Err(Error::Dimension(format!("evaluation points must have length {m}")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("evaluation point".into()));
    }
    let (xs, ds) = sample.columns();
    let n = xs.len() / m;
    if n < 2 {
        return Err(Error::Contract(format!("only {n} valid paths")));
    }
    let mut entries = Vec::with_capacity(points.len() * m);
    let mut bandwidth = Vec::new();
    match regression {
        Regression::NadarayaWatson(bw) => {
            bandwidth = match bw {
                Bandwidth::Auto => silverman_bandwidth(&xs, m),
                Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => vec![h; m],
                Bandwidth::Fixed(h) => return Err(Error::Contract(format!("bandwidth {h} must be > 0"))),
            };
            let mut w = Vec::with_capacity(n);
            for y in points {
                gaussian_weights(&xs, m, y, &bandwidth, &mut w);
                for k in 0..m {
                    entries.push(finish_entry(ratio_estimate(&w, |p| ds[p * m + k])));
                }
            }
        }
        Regression::NearestNeighbours(kn) => {
            if kn < 2 || kn > n {
                return Err(Error::Contract(format!("k = {kn} neighbours with {n} paths")));
            }
            let scale = column_std(&xs, m);
            let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
            for y in points {
                order.clear();
                order.extend((0..n).map(|p| {
                    let d2 = (0..m)
                        .map(|j| ((xs[p * m + j] - y[j]) / scale[j]).powi(2))
                        .sum::<f64>();
                    (d2, p)
                }));
                order.sort_by(|a, b| {
                    a.0.total_cmp(&b.0).then_with(|| {
                        let (pa, pb) = (a.1, b.1);
                        xs[pa * m..(pa + 1) * m]
                            .iter()
                            .zip(&xs[pb * m..(pb + 1) * m])
                            .map(|(u, v)| u.total_cmp(v))
                            .chain((0..m).map(|k| ds[pa * m + k].total_cmp(&ds[pb * m + k])))
                            .find(|o| o.is_ne())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                });
                let w = vec![1.0; kn];
                for k in 0..m {
                    entries.push(finish_entry(ratio_estimate(&w, |i| ds[order[i].1 * m + k])));
                }
            }
        }
    }
    Ok(ScoreTable {
        t: sample.t,
        m,
        points: points.to_vec(),
        entries,
        excluded: sample.excluded(),
        valid_paths: n,
        bandwidth,
    })
}

fn finish_entry(r: RatioEstimate) -> ScoreEntry {
    if r.n_eff >= MIN_EFFECTIVE_SAMPLES {
        ScoreEntry {
            score: -r.value,
            stderr: r.stderr,
            n_eff: r.n_eff,
        }
    } else {
        ScoreEntry {
            score: f64::NAN,
            stderr: f64::NAN,
            n_eff: r.n_eff,
        }
    }
}

/// Simulates, evaluates `δ(u)` at node `t` and regresses. `t` must be a grid node.
#[allow(clippy::too_many_arguments)]
pub fn estimate_score(
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    t: f64,
    points: &[Vec<f64>],
    regression: Regression,
    seed: u64,
    opts: PipelineOptions,
) -> Result<ScoreTable> {
    if n_paths < 100 {
        return Err(Error::Contract(format!("n_paths = {n_paths} < 100")));
    }
    let node = grid.node_of(t)?;
    let sample = skorokhod_sample(model, x0, grid, node, n_paths, seed, opts)?;
    regress_score(&sample, points, regression)
}

/// Mean and covariance of a linear SDE at time `t` (`None` for non-linear models).
pub fn linear_moments(model: &BuiltinModel, t: f64, x0: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!("x0 must have length {}", model.state_dim())));
    }
    match *model {
        BuiltinModel::OrnsteinUhlenbeck { theta, sigma } => {
            let mean = x0[0] * (-theta * t).exp();
            let var = if theta.abs() < 1e-12 {
                sigma * sigma * t
            } else {
                sigma * sigma * (-(-2.0 * theta * t).exp_m1()) / (2.0 * theta)
            };
            Ok((DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)))
        }
        BuiltinModel::LinearMultiDim { m, d, ref a, ref sigma } => {
            let a = DMatrix::from_row_slice(m, m, a);
            let s = DMatrix::from_row_slice(m, d, sigma);
            // exp([[−A, SSᵀ], [0, Aᵀ]] t) = [[·, G], [0, F]] gives Φ = Fᵀ and Γ = Φ G.
            let mut block = DMatrix::zeros(2 * m, 2 * m);
            block.view_mut((0, 0), (m, m)).copy_from(&(-&a * t));
            block.view_mut((0, m), (m, m)).copy_from(&(&s * s.transpose() * t));
            block.view_mut((m, m), (m, m)).copy_from(&(a.transpose() * t));
            let e = block.exp();
            let phi = e.view((m, m), (m, m)).transpose();
            let g = e.view((0, m), (m, m)).into_owned();
            let cov = &phi * g;
            let cov = (&cov + cov.transpose()) * 0.5;
            Ok((&phi * DVector::from_column_slice(x0), cov))
        }
        _ => Err(Error::UnsupportedModel(format!(
            "{} has no closed-form transition density",
            model.id()
        ))),
    }
}

/// `−Γ_t⁻¹(y − m_t)` for OU and linear multi-dimensional models; refuses `t ≤ 0`.
pub fn analytic_score_linear(model: &BuiltinModel, t: f64, x0: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Contract(format!("analytic score needs t > 0, got {t}")));
    }
    if y.len() != model.state_dim() {
        return Err(Error::Dimension(format!("y must have length {}", model.state_dim())));
    }
    let (mean, cov) = linear_moments(model, t, x0)?;
    let inv = cov
        .clone()
        .try_inverse()
        .ok_or(Error::NearSingular { condition: f64::INFINITY })?;
    let r = inv * (DVector::from_column_slice(y) - mean);
    Ok(r.iter().map(|v| -v).collect())
}

/// Supplies `∇log p_t(y)` to the reverse sampler at grid node `node`.
pub trait ScoreProvider: Sync {
    fn score(&self, node: usize, t: f64, y: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Closed-form score of a linear model.
pub struct AnalyticScore {
    pub model: BuiltinModel,
    pub x0: Vec<f64>,
}

impl ScoreProvider for AnalyticScore {
    fn score(&self, _node: usize, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&analytic_score_linear(&self.model, t, &self.x0, y)?);
        Ok(())
    }
}

pub struct ZeroScore;

impl ScoreProvider for ZeroScore {
    fn score(&self, _node: usize, _t: f64, _y: &[f64], out: &mut [f64]) -> Result<()> {
        out.iter_mut().for_each(|v| *v = 0.0);
        Ok(())
    }
}

pub struct FnScore<F>(pub F);

impl<F> ScoreProvider for FnScore<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Sync,
{
    fn score(&self, _node: usize, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.0)(t, y, out);
        Ok(())
    }
}

/// Score tables keyed by grid node, interpolated multilinearly in `y`.
///
/// Points of each table must form a full tensor grid. Outside the grid the edge cell is
/// extended linearly.
pub struct TableScore {
    tables: BTreeMap<usize, GridTable>,
}

struct GridTable {
    m: usize,
    axes: Vec<Vec<f64>>,
    /// Values in row-major order over `axes`, `m` components each.
    values: Vec<f64>,
}

impl TableScore {
    pub fn new(tables: BTreeMap<usize, ScoreTable>) -> Result<Self> {
        let tables = tables
            .into_iter()
            .map(|(node, t)| Ok((node, GridTable::from_table(&t)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tables })
    }
}

impl GridTable {
    fn from_table(t: &ScoreTable) -> Result<Self> {
        let m = t.m;
        let mut axes: Vec<Vec<f64>> = (0..m)
            .map(|j| {
                let mut v: Vec<f64> = t.points.iter().map(|p| p[j]).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            })
            .collect();
        let total: usize = axes.iter().map(Vec::len).product();
        if total != t.points.len() || axes.iter().any(|a| a.len() < 2) {
            return Err(Error::Contract(
                "score table points must form a tensor grid with ≥ 2 values per axis".into(),
            ));
        }
        let mut values = vec![f64::NAN; total * m];
        for (q, p) in t.points.iter().enumerate() {
            let mut flat = 0;
            for (j, axis) in axes.iter().enumerate() {
                let idx = axis.binary_search_by(|v| v.total_cmp(&p[j])).expect("point on axis");
                flat = flat * axis.len() + idx;
            }
            for k in 0..m {
                values[flat * m + k] = t.entry(q, k).score;
            }
        }
        axes.shrink_to_fit();
        Ok(Self { m, axes, values })
    }

    fn interpolate(&self, y: &[f64], out: &mut [f64]) -> bool {
        let m = self.m;
        let mut lo = vec![0usize; m];
        let mut frac = vec![0.0; m];
        for j in 0..m {
            let axis = &self.axes[j];
            let i = axis.partition_point(|v| *v <= y[j]).clamp(1, axis.len() - 1) - 1;
            lo[j] = i;
            frac[j] = (y[j] - axis[i]) / (axis[i + 1] - axis[i]);
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..(1usize << m) {
            let mut weight = 1.0;
            let mut flat = 0;
            for j in 0..m {
                let up = (corner >> j) & 1 == 1;
                weight *= if up { frac[j] } else { 1.0 - frac[j] };
                flat = flat * self.axes[j].len() + lo[j] + up as usize;
            }
            for k in 0..m {
                out[k] += weight * self.values[flat * m + k];
            }
        }
        out.iter().all(|v| v.is_finite())
    }
}

impl ScoreProvider for TableScore {
    fn score(&self, node: usize, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        let table = self.tables.get(&node).ok_or(Error::ScoreGap { node, t })?;
        if table.m != y.len() || !table.interpolate(y, out) {
            return Err(Error::ScoreGap { node, t });
        }
        Ok(())
    }
}

/// Reverse-time samples: the forward terminal draws and where they end up at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseSamples {
    pub m: usize,
    pub initial: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl ReverseSamples {
    pub fn len(&self) -> usize {
        self.terminal.len() / self.m
    }
    pub fn is_empty(&self) -> bool {
        self.terminal.is_empty()
    }
    /// Per-component mean and sample standard deviation of the `t = 0` samples.
    pub fn terminal_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let std = column_std(&self.terminal, self.m);
        let n = self.len() as f64;
        let mean = (0..self.m)
            .map(|j| (0..self.len()).map(|p| self.terminal[p * self.m + j]).sum::<f64>() / n)
            .collect();
        (mean, std)
    }
}

/// Euler–Maruyama from `x0` to the grid horizon; `None` if the path blows up.
pub(crate) fn forward_terminal(model: &dyn SdeModel, x0: &[f64], grid: &TimeGrid, seed: u64, p: u64) -> Option<Vec<f64>> {
    let (m, d) = (model.state_dim(), model.noise_dim());
    let w = sample_brownian(grid, d, seed, p);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; m];
    let mut s = vec![0.0; m * d];
    for i in 0..grid.steps() {
        let t = grid.time(i);
        model.drift(t, &x, &mut b);
        model.diffusion(t, &x, &mut s);
        let dw = w.increment(i);
        for r in 0..m {
            x[r] += b[r] * grid.dt() + (0..d).map(|l| s[r * d + l] * dw[l]).sum::<f64>();
        }
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Integrates `dX = [b − ∇·(σσᵀ) − σσᵀ∇log p] dt + σ dW̄` backwards from `T` to `0`.
///
/// Starting points are fresh forward simulations from `x0` (their own seed stream); the
/// step from node `i+1` to node `i` evaluates every coefficient and the score at `t_{i+1}`.
pub fn reverse_time_sample(
    model: &dyn SdeModel,
    provider: &dyn ScoreProvider,
    x0: &[f64],
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<ReverseSamples> {
    let (m, d) = (model.state_dim(), model.noise_dim());
    if x0.len() != m {
        return Err(Error::Dimension(format!("x0 has length {}, model expects {m}", x0.len())));
    }
    let start_seed = derive_seed(seed, TAG_REVERSE_TERMINAL);
    let noise_seed = derive_seed(seed, TAG_REVERSE_NOISE);
    let dt = grid.dt();
    let pairs = (0..n_samples as u64)
        .into_par_iter()
        .map(|p| -> Result<(Vec<f64>, Vec<f64>)> {
            let start = forward_terminal(model, x0, grid, start_seed, p)
                .ok_or(Error::BlowUp { step: grid.steps() })?;
            let mut rng = path_rng(noise_seed, p);
            let mut x = start.clone();
            let mut b = vec![0.0; m];
            let mut s = vec![0.0; m * d];
            let mut ds = vec![0.0; d * m * m];
            let mut div = vec![0.0; m];
            let mut score = vec![0.0; m];
            let mut dw = vec![0.0; d];
            for i in (0..grid.steps()).rev() {
                let node = i + 1;
                let t = grid.time(node);
                model.drift(t, &x, &mut b);
                model.diffusion(t, &x, &mut s);
                if model.state_independent_diffusion() {
                    div.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    model.diffusion_jacobian(t, &x, &mut ds);
                    divergence_from_parts(&s, &ds, m, d, &mut div);
                }
                provider.score(node, t, &x, &mut score)?;
                for v in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * dt.sqrt();
                }
                let mut next = x.clone();
                for r in 0..m {
                    let mut a_score = 0.0;
                    for c in 0..m {
                        let a_rc: f64 = (0..d).map(|l| s[r * d + l] * s[c * d + l]).sum();
                        a_score += a_rc * score[c];
                    }
                    let drift = b[r] - div[r] - a_score;
                    next[r] = x[r] - drift * dt + (0..d).map(|l| s[r * d + l] * dw[l]).sum::<f64>();
                }
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::BlowUp { step: i });
                }
                x = next;
            }
            Ok((start, x))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut initial = Vec::with_capacity(n_samples * m);
    let mut terminal = Vec::with_capacity(n_samples * m);
    for (a, b) in pairs {
        initial.extend(a);
        terminal.extend(b);
    }
    Ok(ReverseSamples { m, initial, terminal })
}
