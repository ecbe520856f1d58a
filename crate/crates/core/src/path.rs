//! Brownian increments and joint Euler–Maruyama propagation of `X`, `Y`, `Y⁻¹` and `Z`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Coefficients, SdeModel};

/// Uniform grid `t_i = i·T/N`, `i = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    /// Node index of `t`, or the nearest node when `t` is off-grid.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        let raw = t / self.dt();
        let nearest = raw.round().clamp(0.0, self.steps as f64) as usize;
        if (raw - raw.round()).abs() > 1e-9 || raw < -1e-9 || raw > self.steps as f64 + 1e-9 {
            return Err(Error::NotAGridNode {
                t,
                nearest,
                nearest_time: self.time(nearest),
            });
        }
        Ok(nearest)
    }

    /// The grid `[0, t_node]` with the same spacing; a single step is allowed here.
    pub fn truncated(&self, node: usize) -> Result<Self> {
        if node == 0 || node > self.steps {
            return Err(Error::OutOfRange(format!(
                "node {node} outside 1..={} for truncation",
                self.steps
            )));
        }
        Ok(Self {
            horizon: self.time(node),
            steps: node,
        })
    }
}

/// Brownian increments `ΔB_i ∈ ℝ^d`, `i = 0..N`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    increments: Vec<f64>,
    steps: usize,
    noise_dim: usize,
    pub seed: u64,
    pub path_index: u64,
}

impl BrownianPath {
    /// Builds a path from explicit increments (length `steps·noise_dim`).
    pub fn from_increments(increments: Vec<f64>, noise_dim: usize, seed: u64, path_index: u64) -> Result<Self> {
        if noise_dim == 0 || !increments.len().is_multiple_of(noise_dim) {
            return Err(Error::Dimension(format!(
                "{} increments do not split into {noise_dim} channels",
                increments.len()
            )));
        }
        Ok(Self {
            steps: increments.len() / noise_dim,
            increments,
            noise_dim,
            seed,
            path_index,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[i * self.noise_dim..(i + 1) * self.noise_dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// The first `steps` increments.
    pub fn truncated(&self, steps: usize) -> Result<Self> {
        if steps > self.steps {
            return Err(Error::OutOfRange(format!(
                "cannot truncate {} steps to {steps}",
                self.steps
            )));
        }
        Ok(Self {
            increments: self.increments[..steps * self.noise_dim].to_vec(),
            steps,
            noise_dim: self.noise_dim,
            seed: self.seed,
            path_index: self.path_index,
        })
    }
}

/// Mixes a run seed with a purpose tag so independent uses never share a stream.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic generator for one path: ChaCha8 keyed by `seed`, stream `path_index`.
pub(crate) fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// Draws `N(0, Δt·I_d)` increments for path `path_index`.
///
/// The output depends only on `(seed, path_index, grid, noise_dim)`, never on which
/// worker draws it or in what order paths are generated.
pub fn sample_brownian(grid: &TimeGrid, noise_dim: usize, seed: u64, path_index: u64) -> BrownianPath {
    let mut rng = path_rng(seed, path_index);
    let sd = grid.dt().sqrt();
    let increments = (0..grid.steps() * noise_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    BrownianPath {
        increments,
        steps: grid.steps(),
        noise_dim,
        seed,
        path_index,
    }
}

/// Copy of `w` with `ΔB_i^l` shifted by `eps`.
pub fn perturb_increment(w: &BrownianPath, i: usize, l: usize, eps: f64) -> Result<BrownianPath> {
    if i >= w.steps || l >= w.noise_dim {
        return Err(Error::OutOfRange(format!(
            "increment ({i}, {l}) outside {}×{}",
            w.steps, w.noise_dim
        )));
    }
    let mut out = w.clone();
    out.increments[i * w.noise_dim + l] += eps;
    Ok(out)
}

/// How `Y⁻¹` is advanced from one node to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InverseScheme {
    /// Euler step of the inverse-variation SDE with the Itô correction realised
    /// from the increments, `(Σ_l ∂_xσ^l ΔB^l)²`.
    #[default]
    SdeRealized,
    /// Euler step of the inverse-variation SDE with the correction `Σ_l (∂_xσ^l)² Δt`.
    SdeExpected,
    /// Exact inverse of each step's Jacobian factor.
    StepInversion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimulationOptions {
    pub inverse: InverseScheme,
    /// Replace `Y⁻¹` by `inv(Y)` every `K` steps. `None` disables it.
    pub reinvert_every: Option<usize>,
}

/// Per-node states of one simulated path.
///
/// Arrays are indexed by node `i = 0..=N`; `σ` and `∂_xσ` along the path are cached so
/// the Malliavin layer never calls back into the model.
#[derive(Debug, Clone)]
pub struct VariationTrajectory {
    pub(crate) m: usize,
    pub(crate) d: usize,
    pub(crate) grid: TimeGrid,
    pub(crate) path: BrownianPath,
    pub(crate) state_independent: bool,
    pub(crate) x: Vec<f64>,
    pub(crate) y: Vec<f64>,
    pub(crate) yinv: Vec<f64>,
    pub(crate) z: Vec<f64>,
    pub(crate) sigma: Vec<f64>,
    pub(crate) dsigma: Vec<f64>,
}

impl VariationTrajectory {
    pub fn state_dim(&self) -> usize {
        self.m
    }
    pub fn noise_dim(&self) -> usize {
        self.d
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn path(&self) -> &BrownianPath {
        &self.path
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }
    pub fn state_independent_diffusion(&self) -> bool {
        self.state_independent
    }
    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }
    pub fn y(&self, i: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.y[i * mm..(i + 1) * mm]
    }
    pub fn yinv(&self, i: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.yinv[i * mm..(i + 1) * mm]
    }
    /// `Z_i` in `[i][p][q]` order.
    pub fn z(&self, i: usize) -> &[f64] {
        let m3 = self.m * self.m * self.m;
        &self.z[i * m3..(i + 1) * m3]
    }
    /// `σ(t_i, X_i)`, `m×d`.
    pub fn sigma(&self, i: usize) -> &[f64] {
        let md = self.m * self.d;
        &self.sigma[i * md..(i + 1) * md]
    }
    /// `∂_xσ^l(t_i, X_i)`, `m×m`.
    pub fn dsigma(&self, i: usize, l: usize) -> &[f64] {
        let mm = self.m * self.m;
        let base = i * self.d * mm + l * mm;
        &self.dsigma[base..base + mm]
    }
    pub fn terminal(&self) -> &[f64] {
        self.x(self.steps())
    }

    /// `max_i ‖Y_i Y⁻¹_i − I‖_∞` (max-abs entry).
    pub fn inverse_drift(&self) -> f64 {
        let m = self.m;
        let mut prod = vec![0.0; m * m];
        let mut worst = 0.0_f64;
        for i in 0..=self.steps() {
            linalg::matmul(self.y(i), self.yinv(i), &mut prod, m, m, m);
            for r in 0..m {
                prod[r * m + r] -= 1.0;
            }
            worst = worst.max(linalg::max_abs(&prod));
        }
        worst
    }
}

/// Simulates with the default options (`Y⁻¹` from its own SDE, no re-inversion).
pub fn simulate_variations(
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    w: &BrownianPath,
) -> Result<VariationTrajectory> {
    simulate_variations_with(model, x0, grid, w, SimulationOptions::default())
}

/// Euler–Maruyama for `X`, `Y`, `Y⁻¹`, `Z` driven by the same increments.
///
/// A non-finite state aborts with [`Error::BlowUp`]; callers count and exclude such paths.
pub fn simulate_variations_with(
    model: &dyn SdeModel,
    x0: &[f64],
    grid: &TimeGrid,
    w: &BrownianPath,
    opts: SimulationOptions,
) -> Result<VariationTrajectory> {
    let (m, d) = (model.state_dim(), model.noise_dim());
    if x0.len() != m {
        return Err(Error::Dimension(format!("x0 has length {}, model expects {m}", x0.len())));
    }
    if w.noise_dim != d {
        return Err(Error::Dimension(format!(
            "path has {} channels, model expects {d}",
            w.noise_dim
        )));
    }
    if w.steps != grid.steps() {
        return Err(Error::Dimension(format!(
            "path has {} increments, grid has {} steps",
            w.steps,
            grid.steps()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("x0 = {x0:?}")));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let (mm, m3) = (m * m, m * m * m);

    let mut traj = VariationTrajectory {
        m,
        d,
        grid: *grid,
        path: w.clone(),
        state_independent: model.state_independent_diffusion(),
        x: vec![0.0; (n + 1) * m],
        y: vec![0.0; (n + 1) * mm],
        yinv: vec![0.0; (n + 1) * mm],
        z: vec![0.0; (n + 1) * m3],
        sigma: vec![0.0; (n + 1) * m * d],
        dsigma: vec![0.0; (n + 1) * d * mm],
    };
    traj.x[..m].copy_from_slice(x0);
    let eye = linalg::identity(m);
    traj.y[..mm].copy_from_slice(&eye);
    traj.yinv[..mm].copy_from_slice(&eye);

    let mut c = Coefficients::zeros(m, d);
    let mut jump = vec![0.0; mm]; // J − I = ∂_x b Δt + Σ_l ∂_xσ^l ΔB^l
    let mut noise_jac = vec![0.0; mm];
    let mut inv_step = vec![0.0; mm];
    let mut hess = vec![0.0; m3]; // ∂_xx b Δt + Σ_l ∂_xx σ^l ΔB^l
    let mut tmp = vec![0.0; mm];

    for i in 0..n {
        let t = grid.time(i);
        let xi = traj.x[i * m..(i + 1) * m].to_vec();
        c.fill(model, t, &xi);
        if !c.is_finite() {
            return Err(Error::BlowUp { step: i });
        }
        traj.sigma[i * m * d..(i + 1) * m * d].copy_from_slice(&c.diffusion);
        traj.dsigma[i * d * mm..(i + 1) * d * mm].copy_from_slice(&c.diffusion_jacobian);
        let db = w.increment(i);

        // X
        for r in 0..m {
            let mut next = xi[r] + c.drift[r] * dt;
            for l in 0..d {
                next += c.diffusion[r * d + l] * db[l];
            }
            traj.x[(i + 1) * m + r] = next;
        }

        noise_jac.fill(0.0);
        for l in 0..d {
            linalg::axpy(&mut noise_jac, db[l], c.diffusion_jacobian_column(l));
        }
        for e in 0..mm {
            jump[e] = c.drift_jacobian[e] * dt + noise_jac[e];
        }
        hess.iter_mut()
            .zip(&c.drift_hessian)
            .for_each(|(h, b)| *h = b * dt);
        for l in 0..d {
            linalg::axpy(&mut hess, db[l], &c.diffusion_hessian[l * m3..(l + 1) * m3]);
        }

        let (y_prev, y_rest) = traj.y.split_at_mut((i + 1) * mm);
        let y_i = &y_prev[i * mm..];
        let y_next = &mut y_rest[..mm];

        // Y_{i+1} = (I + jump) Y_i
        linalg::matmul(&jump, y_i, &mut tmp, m, m, m);
        for e in 0..mm {
            y_next[e] = y_i[e] + tmp[e];
        }

        // Y⁻¹_{i+1} = Y⁻¹_i · M
        match opts.inverse {
            InverseScheme::StepInversion => {
                let mut j = jump.clone();
                for r in 0..m {
                    j[r * m + r] += 1.0;
                }
                match linalg::invert(&j, m) {
                    Some(inv) => inv_step.copy_from_slice(&inv),
                    None => return Err(Error::BlowUp { step: i }),
                }
            }
            scheme => {
                // I − ∂_x b Δt − Σ ∂_xσ^l ΔB^l + correction
                for e in 0..mm {
                    inv_step[e] = eye[e] - jump[e];
                }
                if scheme == InverseScheme::SdeRealized {
                    linalg::matmul(&noise_jac, &noise_jac, &mut tmp, m, m, m);
                    linalg::axpy(&mut inv_step, 1.0, &tmp);
                } else {
                    for l in 0..d {
                        let ds = c.diffusion_jacobian_column(l);
                        linalg::matmul(ds, ds, &mut tmp, m, m, m);
                        linalg::axpy(&mut inv_step, dt, &tmp);
                    }
                }
            }
        }
        let (yi_prev, yi_rest) = traj.yinv.split_at_mut((i + 1) * mm);
        linalg::matmul(&yi_prev[i * mm..], &inv_step, &mut yi_rest[..mm], m, m, m);
        if let Some(k) = opts.reinvert_every {
            if k > 0 && (i + 1) % k == 0 {
                match linalg::invert(&traj.y[(i + 1) * mm..(i + 2) * mm], m) {
                    Some(inv) => traj.yinv[(i + 1) * mm..(i + 2) * mm].copy_from_slice(&inv),
                    None => return Err(Error::BlowUp { step: i }),
                }
            }
        }

        // Z_{i+1}^{r,p,q} = Z + Σ_{jk} hess[r][j][k] Y^{j,p} Y^{k,q} + Σ_s jump[r][s] Z^{s,p,q}
        let y_i = &traj.y[i * mm..(i + 1) * mm];
        let (z_prev, z_rest) = traj.z.split_at_mut((i + 1) * m3);
        let z_i = &z_prev[i * m3..];
        let z_next = &mut z_rest[..m3];
        for r in 0..m {
            for p in 0..m {
                for q in 0..m {
                    let mut acc = z_i[r * mm + p * m + q];
                    for j in 0..m {
                        for k in 0..m {
                            acc += hess[r * mm + j * m + k] * y_i[j * m + p] * y_i[k * m + q];
                        }
                    }
                    for s in 0..m {
                        acc += jump[r * m + s] * z_i[s * mm + p * m + q];
                    }
                    z_next[r * mm + p * m + q] = acc;
                }
            }
        }

        let finite = traj.x[(i + 1) * m..(i + 2) * m].iter().all(|v| v.is_finite())
            && traj.y[(i + 1) * mm..(i + 2) * mm].iter().all(|v| v.is_finite())
            && traj.yinv[(i + 1) * mm..(i + 2) * mm].iter().all(|v| v.is_finite())
            && z_next.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::BlowUp { step: i + 1 });
        }
    }

    let xn = traj.x[n * m..].to_vec();
    c.fill(model, grid.horizon(), &xn);
    if !c.is_finite() {
        return Err(Error::BlowUp { step: n });
    }
    traj.sigma[n * m * d..].copy_from_slice(&c.diffusion);
    traj.dsigma[n * d * mm..].copy_from_slice(&c.diffusion_jacobian);
    Ok(traj)
}

/// CSV header for trajectory dumps: `path,i,t,X_*,Y_*,Yinv_*,Z_*` (1-based, row-major).
pub fn trajectory_csv_header(m: usize) -> String {
    let mut cols = vec!["path".to_string(), "i".to_string(), "t".to_string()];
    cols.extend((1..=m).map(|a| format!("X_{a}")));
    for name in ["Y", "Yinv"] {
        for a in 1..=m {
            for b in 1..=m {
                cols.push(format!("{name}_{a}{b}"));
            }
        }
    }
    for a in 1..=m {
        for b in 1..=m {
            for c in 1..=m {
                cols.push(format!("Z_{a}{b}{c}"));
            }
        }
    }
    cols.join(",")
}

/// Appends every node of `traj` to a trajectory dump.
pub fn write_trajectory_rows<W: Write>(out: &mut W, traj: &VariationTrajectory) -> Result<()> {
    for i in 0..=traj.steps() {
        let mut row = vec![traj.path.path_index.to_string(), i.to_string(), fmt_f64(traj.grid.time(i))];
        row.extend(
            traj.x(i)
                .iter()
                .chain(traj.y(i))
                .chain(traj.yinv(i))
                .chain(traj.z(i))
                .map(|v| fmt_f64(*v)),
        );
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Shortest round-trip formatting; stable across runs and platforms.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BuiltinModel;

    #[test]
    fn grid_rejects_degenerate() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 8).is_err());
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.time(4), 1.0);
        assert_eq!(g.node_of(0.5).unwrap(), 2);
        match g.node_of(0.3) {
            Err(Error::NotAGridNode { nearest, .. }) => assert_eq!(nearest, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn brownian_is_reproducible_and_path_keyed() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let a = sample_brownian(&g, 2, 7, 0);
        let b = sample_brownian(&g, 2, 7, 0);
        assert_eq!(a, b);
        let c = sample_brownian(&g, 2, 7, 1);
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn perturbation_contract() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let w = sample_brownian(&g, 1, 3, 0);
        assert_eq!(perturb_increment(&w, 2, 0, 0.0).unwrap(), w);
        let back = perturb_increment(&perturb_increment(&w, 2, 0, 0.25).unwrap(), 2, 0, -0.25).unwrap();
        assert!(back
            .increments()
            .iter()
            .zip(w.increments())
            .all(|(a, b)| (a - b).abs() < 1e-15));
        let ab = perturb_increment(&perturb_increment(&w, 1, 0, 0.1).unwrap(), 5, 0, 0.2).unwrap();
        let ba = perturb_increment(&perturb_increment(&w, 5, 0, 0.2).unwrap(), 1, 0, 0.1).unwrap();
        assert_eq!(ab, ba);
        assert!(perturb_increment(&w, 8, 0, 0.1).is_err());
        assert!(perturb_increment(&w, 0, 1, 0.1).is_err());
    }

    #[test]
    fn ou_first_variation_is_euler_product() {
        let theta = 1.0;
        let g = TimeGrid::new(1.0, 64).unwrap();
        let w = sample_brownian(&g, 1, 1, 0);
        let traj = simulate_variations(&BuiltinModel::ou(theta, 1.0), &[0.0], &g, &w).unwrap();
        for i in 0..=64 {
            let expect = (1.0 - theta * g.dt()).powi(i as i32);
            assert!((traj.y(i)[0] - expect).abs() < 1e-14);
            assert_eq!(traj.z(i)[0], 0.0);
        }
        assert_eq!(traj.y(0), &[1.0]);
        assert_eq!(traj.yinv(0), &[1.0]);
    }

    #[test]
    fn zero_noise_follows_deterministic_euler() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let w = sample_brownian(&g, 1, 5, 0);
        let traj = simulate_variations(&BuiltinModel::ou(1.0, 0.0), &[1.0], &g, &w).unwrap();
        let mut x = 1.0;
        for i in 0..=16 {
            assert!((traj.x(i)[0] - x).abs() < 1e-15);
            x -= x * g.dt();
        }
    }

    #[test]
    fn linear_state_independent_has_zero_second_variation() {
        let g = TimeGrid::new(1.0, 32).unwrap();
        let model = BuiltinModel::linear_2d([[-1.0, 0.5], [0.2, -2.0]], [[1.0, 0.0], [0.3, 0.8]]);
        let w = sample_brownian(&g, 2, 9, 3);
        let traj = simulate_variations(&model, &[0.5, -0.5], &g, &w).unwrap();
        assert!(traj.z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_inversion_keeps_identity() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let w = sample_brownian(&g, 1, 2, 0);
        let opts = SimulationOptions {
            inverse: InverseScheme::StepInversion,
            reinvert_every: None,
        };
        let traj =
            simulate_variations_with(&BuiltinModel::tanh(1.0, 1.0, 0.5), &[0.1], &g, &w, opts).unwrap();
        assert!(traj.inverse_drift() < 1e-12);
    }

    #[test]
    fn blow_up_is_reported() {
        // A huge increment drives the cubic-free OU fine, so force it with a large drift rate.
        let g = TimeGrid::new(1.0, 8).unwrap();
        let w = BrownianPath::from_increments(vec![1e300; 8], 1, 0, 0).unwrap();
        let err = simulate_variations(&BuiltinModel::ou(1.0, 1e10), &[0.0], &g, &w).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn csv_header_shape() {
        assert_eq!(trajectory_csv_header(1), "path,i,t,X_1,Y_11,Yinv_11,Z_111");
        assert_eq!(trajectory_csv_header(2).split(',').count(), 3 + 2 + 4 + 4 + 8);
    }
}
