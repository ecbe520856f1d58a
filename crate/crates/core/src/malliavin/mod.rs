//! Per-trajectory Malliavin objects: `D_tX_T`, the covariance `γ`, the covering field,
//! `D_tY_T`, `D_tY_s⁻¹`, `Ω`, `Θ`, `D_tγ` and the Skorokhod integral `δ(u_k)`.
//!
//! Every time integral is a left-point Riemann sum over nodes `0..N`. Tensor products such
//! as `Z_T Y_t⁻¹σ^l` contract the *third* index of `Z` with the vector `Y_t⁻¹σ^l`, giving one
//! `m×m` matrix per noise channel `l`.

mod skorokhod;

pub use skorokhod::{
    skorokhod_all, skorokhod_integral_general, skorokhod_integral_reference,
    skorokhod_integral_state_independent, Fault, SkorokhodBreakdown, SkorokhodMode,
    SkorokhodOptions,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::path::VariationTrajectory;

/// Paths whose `γ` has a condition number at or above this are excluded.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceOptions {
    /// Add `λI` with `λ = 1e−10·trace(γ)/m` before inverting.
    pub ridge: bool,
    pub max_condition: f64,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        Self {
            ridge: false,
            max_condition: MAX_CONDITION,
        }
    }
}

/// `γ`, its inverse, `Y_T`, the table of `D_{t_i}X_T` and the vectors `F_k = Y_Tᵀγ⁻¹e_k`.
#[derive(Debug, Clone)]
pub struct MalliavinBundle {
    m: usize,
    d: usize,
    gamma: Vec<f64>,
    gamma_inv: Vec<f64>,
    y_terminal: Vec<f64>,
    dx_table: Vec<f64>,
    f: Vec<f64>,
    condition_number: f64,
    ridge: f64,
}

impl MalliavinBundle {
    pub fn state_dim(&self) -> usize {
        self.m
    }
    pub fn gamma(&self) -> DMatrix<f64> {
        linalg::to_dmatrix(&self.gamma, self.m, self.m)
    }
    pub fn gamma_inv(&self) -> DMatrix<f64> {
        linalg::to_dmatrix(&self.gamma_inv, self.m, self.m)
    }
    pub fn y_terminal(&self) -> DMatrix<f64> {
        linalg::to_dmatrix(&self.y_terminal, self.m, self.m)
    }
    /// `D_{t_i}X_T` as an `m×d` matrix.
    pub fn dx(&self, i: usize) -> DMatrix<f64> {
        linalg::to_dmatrix(self.dx_slice(i), self.m, self.d)
    }
    /// `F_k` (0-based `k`).
    pub fn f(&self, k: usize) -> &[f64] {
        &self.f[k * self.m..(k + 1) * self.m]
    }
    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }
    /// The ridge actually added to `γ` (0 unless requested).
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub(crate) fn gamma_inv_slice(&self) -> &[f64] {
        &self.gamma_inv
    }
    pub(crate) fn dx_slice(&self, i: usize) -> &[f64] {
        let md = self.m * self.d;
        &self.dx_table[i * md..(i + 1) * md]
    }
}

fn check_node(traj: &VariationTrajectory, i: usize) -> Result<()> {
    if i > traj.steps() {
        return Err(Error::OutOfRange(format!(
            "node {i} beyond grid of {} steps",
            traj.steps()
        )));
    }
    Ok(())
}

fn check_bundle(traj: &VariationTrajectory, bundle: &MalliavinBundle) -> Result<()> {
    if bundle.m != traj.m || bundle.d != traj.d || bundle.dx_table.len() != (traj.steps() + 1) * traj.m * traj.d
    {
        return Err(Error::Dimension("bundle does not belong to this trajectory".into()));
    }
    Ok(())
}

/// `Y_N · Y⁻¹_i · σ(t_i, X_i)` written into an `m×d` buffer.
pub(crate) fn dx_into(traj: &VariationTrajectory, i: usize, tmp: &mut [f64], out: &mut [f64]) {
    let (m, d) = (traj.m, traj.d);
    linalg::matmul(traj.yinv(i), traj.sigma(i), tmp, m, m, d);
    linalg::matmul(traj.y(traj.steps()), tmp, out, m, m, d);
}

/// `D_{t_i}X_T = Y_T Y_{t_i}⁻¹ σ(t_i, X_{t_i})` (`m×d`).
pub fn malliavin_derivative_state(traj: &VariationTrajectory, i: usize) -> Result<DMatrix<f64>> {
    check_node(traj, i)?;
    let (m, d) = (traj.m, traj.d);
    let mut tmp = vec![0.0; m * d];
    let mut out = vec![0.0; m * d];
    dx_into(traj, i, &mut tmp, &mut out);
    Ok(linalg::to_dmatrix(&out, m, d))
}

pub fn malliavin_covariance(traj: &VariationTrajectory) -> Result<MalliavinBundle> {
    malliavin_covariance_with(traj, CovarianceOptions::default())
}

/// Left-point sum `γ = Σ_i D_{t_i}X_T (D_{t_i}X_T)ᵀ Δt`, its inverse, and `F_k`.
///
/// Fails with [`Error::NearSingular`] when the condition number reaches the threshold.
pub fn malliavin_covariance_with(
    traj: &VariationTrajectory,
    opts: CovarianceOptions,
) -> Result<MalliavinBundle> {
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let dt = traj.grid.dt();
    let md = m * d;
    let mut dx_table = vec![0.0; (n + 1) * md];
    let mut tmp = vec![0.0; md];
    for i in 0..=n {
        dx_into(traj, i, &mut tmp, &mut dx_table[i * md..(i + 1) * md]);
    }
    let mut gamma = vec![0.0; m * m];
    let mut outer = vec![0.0; m * m];
    for i in 0..n {
        let w = &dx_table[i * md..(i + 1) * md];
        linalg::matmul_nt(w, w, &mut outer, m, d, m);
        linalg::axpy(&mut gamma, dt, &outer);
    }
    let ridge = if opts.ridge {
        1e-10 * (0..m).map(|r| gamma[r * m + r]).sum::<f64>() / m as f64
    } else {
        0.0
    };
    let mut regularised = gamma.clone();
    for r in 0..m {
        regularised[r * m + r] += ridge;
    }
    let condition_number = linalg::symmetric_condition_number(&regularised, m);
    if !(condition_number < opts.max_condition) {
        return Err(Error::NearSingular {
            condition: condition_number,
        });
    }
    let gamma_inv = linalg::invert(&regularised, m).ok_or(Error::NearSingular {
        condition: f64::INFINITY,
    })?;
    let y_terminal = traj.y(n).to_vec();
    // F_k = Y_Tᵀ γ⁻¹ e_k
    let mut f = vec![0.0; m * m];
    let mut g = vec![0.0; m];
    for k in 0..m {
        linalg::column(&gamma_inv, k, &mut g, m, m);
        linalg::matvec_t(&y_terminal, &g, &mut f[k * m..(k + 1) * m], m, m);
    }
    Ok(MalliavinBundle {
        m,
        d,
        gamma: regularised,
        gamma_inv,
        y_terminal,
        dx_table,
        f,
        condition_number,
        ridge,
    })
}

/// `u_{t_i}(x) = xᵀ Y_{t_i}⁻¹ σ(t_i, X_{t_i})` for a fixed `x` (length `d`).
pub fn covering_field_frozen(traj: &VariationTrajectory, x: &[f64], i: usize) -> Result<Vec<f64>> {
    check_node(traj, i)?;
    let (m, d) = (traj.m, traj.d);
    if x.len() != m {
        return Err(Error::Dimension(format!("x has length {}, expected {m}", x.len())));
    }
    let mut c = vec![0.0; m * d];
    linalg::matmul(traj.yinv(i), traj.sigma(i), &mut c, m, m, d);
    let mut out = vec![0.0; d];
    linalg::matvec_t(&c, x, &mut out, m, d);
    Ok(out)
}

/// The covering field `u_k(t_i) = Σ_j (γ⁻¹)_{kj} D_{t_i}X_T^j`, built from `γ⁻¹` directly.
pub fn covering_field(bundle: &MalliavinBundle, k: usize, i: usize) -> Result<Vec<f64>> {
    let (m, d) = (bundle.m, bundle.d);
    if k >= m {
        return Err(Error::OutOfRange(format!("component {k} ≥ {m}")));
    }
    let w = bundle.dx_slice(i);
    Ok((0..d)
        .map(|l| (0..m).map(|j| bundle.gamma_inv[k * m + j] * w[j * d + l]).sum())
        .collect())
}

/// `⟨D X_T^{i_comp}, u_k⟩_H` with `u_k(t) = u_t(F_k)`, by the same left-point sum as `γ`.
pub fn covering_inner_product(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    i_comp: usize,
    k: usize,
) -> Result<f64> {
    check_bundle(traj, bundle)?;
    let (m, d) = (traj.m, traj.d);
    if i_comp >= m || k >= m {
        return Err(Error::OutOfRange(format!("components ({i_comp}, {k}) with m = {m}")));
    }
    let dt = traj.grid.dt();
    let mut acc = 0.0;
    for i in 0..traj.steps() {
        let u = covering_field_frozen(traj, bundle.f(k), i)?;
        let w = bundle.dx_slice(i);
        acc += (0..d).map(|l| w[i_comp * d + l] * u[l]).sum::<f64>() * dt;
    }
    Ok(acc)
}

/// Scratch space for the per-node formulas.
pub(crate) struct NodeScratch {
    pub a: Vec<f64>,
    pub za: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub t3: Vec<f64>,
}

impl NodeScratch {
    pub fn new(m: usize) -> Self {
        Self {
            a: vec![0.0; m],
            za: vec![0.0; m * m],
            t1: vec![0.0; m * m],
            t2: vec![0.0; m * m],
            t3: vec![0.0; m * m],
        }
    }
}

/// `a = Y⁻¹_i σ^l(t_i, X_i)`.
pub(crate) fn perturbation_direction(traj: &VariationTrajectory, i: usize, l: usize, out: &mut [f64]) {
    let (m, d) = (traj.m, traj.d);
    let yinv = traj.yinv(i);
    let sigma = traj.sigma(i);
    for r in 0..m {
        out[r] = (0..m).map(|j| yinv[r * m + j] * sigma[j * d + l]).sum();
    }
}

/// `Y_s D_t Y_s⁻¹`-type bracket at horizon node `h`:
/// `Z_h∘a − Y_h Y⁻¹_i (Z_i∘a) + Y_h Y⁻¹_i ∂_xσ^l_i Y_i`, with `a` already in `sc.a`.
/// With `include_dsigma = false` the last summand is dropped.
pub(crate) fn variation_bracket(
    traj: &VariationTrajectory,
    i: usize,
    h: usize,
    l: usize,
    include_dsigma: bool,
    sc: &mut NodeScratch,
    out: &mut [f64],
) {
    let m = traj.m;
    // out = Z_h∘a
    linalg::contract_last(traj.z(h), &sc.a, out, m);
    // inner = Z_i∘a − ∂_xσ^l_i Y_i
    linalg::contract_last(traj.z(i), &sc.a, &mut sc.za, m);
    if include_dsigma {
        linalg::matmul(traj.dsigma(i, l), traj.y(i), &mut sc.t1, m, m, m);
        for (z, v) in sc.za.iter_mut().zip(&sc.t1) {
            *z -= v;
        }
    }
    // out −= Y_h (Y⁻¹_i inner)
    linalg::matmul(traj.yinv(i), &sc.za, &mut sc.t2, m, m, m);
    linalg::matmul(traj.y(h), &sc.t2, &mut sc.t3, m, m, m);
    for (o, v) in out.iter_mut().zip(&sc.t3) {
        *o -= v;
    }
}

/// `Ω^l(t_i) = Z_T Y_t⁻¹σ^l − Y_T Y_t⁻¹ Z_t Y_t⁻¹σ^l + Y_T Y_t⁻¹ ∂_xσ^l Y_t`, one `m×m` per `l`.
pub fn omega(traj: &VariationTrajectory, i: usize) -> Result<Vec<DMatrix<f64>>> {
    check_node(traj, i)?;
    let m = traj.m;
    let mut sc = NodeScratch::new(m);
    let mut out = vec![0.0; m * m];
    Ok((0..traj.d)
        .map(|l| {
            perturbation_direction(traj, i, l, &mut sc.a);
            variation_bracket(traj, i, traj.steps(), l, true, &mut sc, &mut out);
            linalg::to_dmatrix(&out, m, m)
        })
        .collect())
}

fn z_contract(traj: &VariationTrajectory, node: usize, v: &DMatrix<f64>) -> DMatrix<f64> {
    let m = traj.m;
    let z = traj.z(node);
    DMatrix::from_fn(m, m, |r, p| (0..m).map(|q| z[r * m * m + p * m + q] * v[q]).sum())
}

/// `D_{t_i}Y_T = Z_T∘(Y_t⁻¹σ^l) − Y_T Y_t⁻¹ Z_t∘(Y_t⁻¹σ^l) + Y_T Y_t⁻¹ ∂_xσ^l Y_t` per channel.
pub fn dt_first_variation(traj: &VariationTrajectory, i: usize) -> Result<Vec<DMatrix<f64>>> {
    check_node(traj, i)?;
    let (m, d) = (traj.m, traj.d);
    let n = traj.steps();
    let y_t = linalg::to_dmatrix(traj.y(n), m, m);
    let yinv_i = linalg::to_dmatrix(traj.yinv(i), m, m);
    let y_i = linalg::to_dmatrix(traj.y(i), m, m);
    let sigma_i = linalg::to_dmatrix(traj.sigma(i), m, d);
    Ok((0..d)
        .map(|l| {
            let v = &yinv_i * sigma_i.column(l);
            let v = DMatrix::from_column_slice(m, 1, v.as_slice());
            let ds = linalg::to_dmatrix(traj.dsigma(i, l), m, m);
            z_contract(traj, n, &v) - &y_t * (&yinv_i * z_contract(traj, i, &v))
                + &y_t * (&yinv_i * (ds * &y_i))
        })
        .collect())
}

/// `D_{t_i}Y_{t_s}⁻¹` per channel: zero for `i > s`, otherwise
/// `−Y_s⁻¹[Z_s∘a − Y_sY_i⁻¹Z_i∘a + Y_sY_i⁻¹∂_xσ^lY_i]Y_s⁻¹` with `a = Y_i⁻¹σ^l_i`.
pub fn dt_inverse_variation(traj: &VariationTrajectory, i: usize, s: usize) -> Result<Vec<DMatrix<f64>>> {
    check_node(traj, i)?;
    check_node(traj, s)?;
    let m = traj.m;
    if i > s {
        return Ok(vec![DMatrix::zeros(m, m); traj.d]);
    }
    let mut sc = NodeScratch::new(m);
    let mut bracket = vec![0.0; m * m];
    let mut tmp = vec![0.0; m * m];
    let mut out = vec![0.0; m * m];
    Ok((0..traj.d)
        .map(|l| {
            perturbation_direction(traj, i, l, &mut sc.a);
            variation_bracket(traj, i, s, l, true, &mut sc, &mut bracket);
            linalg::matmul(traj.yinv(s), &bracket, &mut tmp, m, m, m);
            linalg::matmul(&tmp, traj.yinv(s), &mut out, m, m, m);
            out.iter_mut().for_each(|v| *v = -*v);
            linalg::to_dmatrix(&out, m, m)
        })
        .collect())
}

/// Writes `Θ^l(t_i, s)` (`m×d`, column `r` pairs with `σ^r(s)`), `a` already in `sc.a`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn theta_into(
    traj: &VariationTrajectory,
    i: usize,
    s: usize,
    l: usize,
    include_dsigma: bool,
    sc: &mut NodeScratch,
    bracket: &mut [f64],
    out: &mut [f64],
) {
    let (m, d) = (traj.m, traj.d);
    variation_bracket(traj, i, s, l, include_dsigma, sc, bracket);
    // −Y_s⁻¹ [bracket] Y_s⁻¹ σ_s
    linalg::matmul(traj.yinv(s), bracket, &mut sc.t1, m, m, m);
    let mut c_s = vec![0.0; m * d];
    linalg::matmul(traj.yinv(s), traj.sigma(s), &mut c_s, m, m, d);
    linalg::matmul(&sc.t1, &c_s, out, m, m, d);
    out.iter_mut().for_each(|v| *v = -*v);
    if include_dsigma {
        // + Y_s⁻¹ ∂_xσ^r(s) (Y_s a), column r
        let mut ya = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        let mut col = vec![0.0; m];
        linalg::matvec(traj.y(s), &sc.a, &mut ya, m, m);
        for r in 0..d {
            linalg::matvec(traj.dsigma(s, r), &ya, &mut tmp, m, m);
            linalg::matvec(traj.yinv(s), &tmp, &mut col, m, m);
            for p in 0..m {
                out[p * d + r] += col[p];
            }
        }
    }
}

/// `Θ^l(t_i, s) = D_{t_i}(Y_s⁻¹σ(s, X_s))` for `i ≤ s`, one `m×d` matrix per channel `l`.
pub fn theta(traj: &VariationTrajectory, i: usize, s: usize) -> Result<Vec<DMatrix<f64>>> {
    check_node(traj, i)?;
    check_node(traj, s)?;
    if i > s {
        return Err(Error::Contract(format!("Θ(t_{i}, s_{s}) requires i ≤ s")));
    }
    let (m, d) = (traj.m, traj.d);
    let mut sc = NodeScratch::new(m);
    let mut bracket = vec![0.0; m * m];
    let mut out = vec![0.0; m * d];
    Ok((0..d)
        .map(|l| {
            perturbation_direction(traj, i, l, &mut sc.a);
            theta_into(traj, i, s, l, true, &mut sc, &mut bracket, &mut out);
            linalg::to_dmatrix(&out, m, d)
        })
        .collect())
}

/// `D_t γ` per noise channel, split into the parts from `s < t` and `s ≥ t`.
pub type SplitDerivative = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

/// `D_{t_i}γ` split into the `s < i` part (`I₁+I₂`) and the `s ≥ i` part (`I₃+I₄`).
///
/// Direct `O(N)` evaluation per node; the Skorokhod evaluators use prefix/suffix sums instead.
pub fn dt_gamma_split(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    i: usize,
) -> Result<SplitDerivative> {
    dt_gamma_split_impl(traj, bundle, i, true)
}

pub(crate) fn dt_gamma_split_impl(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    i: usize,
    include_dsigma: bool,
) -> Result<SplitDerivative> {
    check_node(traj, i)?;
    check_bundle(traj, bundle)?;
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let dt = traj.grid.dt();
    let mut sc = NodeScratch::new(m);
    let mut om = vec![0.0; m * m];
    let mut bracket = vec![0.0; m * m];
    let mut th = vec![0.0; m * d];
    let mut c_s = vec![0.0; m * d];
    let mut dw = vec![0.0; m * d];
    let mut tmp = vec![0.0; m * d];
    let mut outer = vec![0.0; m * m];
    let mut sym = vec![0.0; m * m];
    let mut before = Vec::with_capacity(d);
    let mut after = Vec::with_capacity(d);
    for l in 0..d {
        perturbation_direction(traj, i, l, &mut sc.a);
        variation_bracket(traj, i, n, l, include_dsigma, &mut sc, &mut om);
        let mut g_before = vec![0.0; m * m];
        let mut g_after = vec![0.0; m * m];
        for s in 0..n {
            let w = bundle.dx_slice(s);
            linalg::matmul(traj.yinv(s), traj.sigma(s), &mut c_s, m, m, d);
            linalg::matmul(&om, &c_s, &mut dw, m, m, d);
            if s >= i {
                theta_into(traj, i, s, l, include_dsigma, &mut sc, &mut bracket, &mut th);
                linalg::matmul(traj.y(n), &th, &mut tmp, m, m, d);
                linalg::axpy(&mut dw, 1.0, &tmp);
            }
            linalg::matmul_nt(&dw, w, &mut outer, m, d, m);
            let target = if s < i { &mut g_before } else { &mut g_after };
            linalg::axpy(target, dt, &outer);
        }
        linalg::symmetrize_into(&g_before, &mut sym, m);
        before.push(linalg::to_dmatrix(&sym, m, m));
        linalg::symmetrize_into(&g_after, &mut sym, m);
        after.push(linalg::to_dmatrix(&sym, m, m));
    }
    Ok((before, after))
}

/// `D_{t_i}γ` per noise channel (symmetric `m×m`).
pub fn dt_gamma(traj: &VariationTrajectory, bundle: &MalliavinBundle, i: usize) -> Result<Vec<DMatrix<f64>>> {
    let (before, after) = dt_gamma_split(traj, bundle, i)?;
    Ok(before.into_iter().zip(after).map(|(b, a)| b + a).collect())
}
