//! SDE coefficient models `dX = b(t, X) dt + σ(t, X) dB` with analytic spatial derivatives.
//!
//! Layouts (all row-major):
//! - `b`: `m`, `σ`: `m×d` with `σ[i*d + l] = σ^{i,l}`
//! - `∂_x b`: `m×m`, `∂_x σ`: `d×m×m` with `[l][i][j] = ∂σ^{i,l}/∂x_j`
//! - `∂_xx b`: `m×m×m` with `[i][p][q] = ∂²b^i/∂x_p∂x_q`
//! - `∂_xx σ`: `d×m×m×m` with `[l][i][p][q] = ∂²σ^{i,l}/∂x_p∂x_q`

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Coefficients of an Itô SDE together with their first and second spatial derivatives.
///
/// Implementations must overwrite every entry of the output buffers they are handed.
pub trait SdeModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn noise_dim(&self) -> usize;
    /// True when σ depends on `t` only; `∂_x σ` and `∂_xx σ` must then be identically zero.
    fn state_independent_diffusion(&self) -> bool;
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn drift_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn diffusion_jacobian(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn drift_hessian(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn diffusion_hessian(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn name(&self) -> String {
        "custom".to_string()
    }
}

/// Built-in desk-scale models. All derivatives are bounded.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinModel {
    /// `b = −θx`, `σ = σ0`.
    OrnsteinUhlenbeck { theta: f64, sigma: f64 },
    /// `b = −k(x−a)/(1+(x−a)²)`, `σ = σ0`.
    BoundedNonlinearDrift { k: f64, a: f64, sigma: f64 },
    /// `b = −θx`, `σ = σ0(1 + α tanh x)`.
    StateDependentTanh { theta: f64, sigma: f64, alpha: f64 },
    /// `b = A x`, `σ = Σ` (constant), `A: m×m`, `Σ: m×d`.
    LinearMultiDim {
        m: usize,
        d: usize,
        a: Vec<f64>,
        sigma: Vec<f64>,
    },
}

impl BuiltinModel {
    pub fn ou(theta: f64, sigma: f64) -> Self {
        Self::OrnsteinUhlenbeck { theta, sigma }
    }

    pub fn bounded_nonlinear(k: f64, a: f64, sigma: f64) -> Self {
        Self::BoundedNonlinearDrift { k, a, sigma }
    }

    pub fn tanh(theta: f64, sigma: f64, alpha: f64) -> Self {
        Self::StateDependentTanh {
            theta,
            sigma,
            alpha,
        }
    }

    /// Two-dimensional linear model with row-major `A` and `Σ`.
    pub fn linear_2d(a: [[f64; 2]; 2], sigma: [[f64; 2]; 2]) -> Self {
        Self::LinearMultiDim {
            m: 2,
            d: 2,
            a: a.iter().flatten().copied().collect(),
            sigma: sigma.iter().flatten().copied().collect(),
        }
    }

    /// Looks a builtin up by its short name (`ou`, `bounded_nonlinear`, `tanh`, `linear2d`).
    ///
    /// Missing parameters fall back to the documented defaults; unknown names are rejected.
    pub fn from_name(name: &str, params: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
        let allowed: &[&str] = match name {
            "ou" => &["theta", "sigma"],
            "bounded_nonlinear" => &["k", "a", "sigma"],
            "tanh" => &["theta", "sigma", "alpha"],
            "linear2d" => &["a11", "a12", "a21", "a22", "s11", "s12", "s21", "s22"],
            other => return Err(Error::Config(format!("unknown model '{other}'"))),
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::Config(format!(
                "model '{name}' has no parameter '{bad}' (expected one of {allowed:?})"
            )));
        }
        let model = match name {
            "ou" => Self::ou(get("theta", 1.0), get("sigma", 1.0)),
            "bounded_nonlinear" => {
                Self::bounded_nonlinear(get("k", 1.0), get("a", 0.0), get("sigma", 1.0))
            }
            "tanh" => Self::tanh(get("theta", 1.0), get("sigma", 1.0), get("alpha", 0.5)),
            _ => Self::linear_2d(
                [
                    [get("a11", -1.0), get("a12", 0.5)],
                    [get("a21", 0.0), get("a22", -2.0)],
                ],
                [[get("s11", 1.0), get("s12", 0.0)], [get("s21", 0.3), get("s22", 0.8)]],
            ),
        };
        if let Some((k, v)) = model.params().iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Config(format!("parameter '{k}' is not finite ({v})")));
        }
        Ok(model)
    }

    /// Short name used in configs and file headers.
    pub fn id(&self) -> &'static str {
        match self {
            Self::OrnsteinUhlenbeck { .. } => "ou",
            Self::BoundedNonlinearDrift { .. } => "bounded_nonlinear",
            Self::StateDependentTanh { .. } => "tanh",
            Self::LinearMultiDim { .. } => "linear2d",
        }
    }

    /// Named parameters in a fixed order.
    pub fn params(&self) -> Vec<(String, f64)> {
        let named = |pairs: &[(&str, f64)]| {
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect::<Vec<_>>()
        };
        match self {
            Self::OrnsteinUhlenbeck { theta, sigma } => {
                named(&[("theta", *theta), ("sigma", *sigma)])
            }
            Self::BoundedNonlinearDrift { k, a, sigma } => {
                named(&[("k", *k), ("a", *a), ("sigma", *sigma)])
            }
            Self::StateDependentTanh {
                theta,
                sigma,
                alpha,
            } => named(&[("theta", *theta), ("sigma", *sigma), ("alpha", *alpha)]),
            Self::LinearMultiDim { m, d, a, sigma } => {
                let mut out = Vec::new();
                for i in 0..*m {
                    for j in 0..*m {
                        out.push((format!("a{}{}", i + 1, j + 1), a[i * m + j]));
                    }
                }
                for i in 0..*m {
                    for l in 0..*d {
                        out.push((format!("s{}{}", i + 1, l + 1), sigma[i * d + l]));
                    }
                }
                out
            }
        }
    }

    /// Linear drift and constant diffusion: Gaussian transition densities are available.
    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Self::OrnsteinUhlenbeck { .. } | Self::LinearMultiDim { .. }
        )
    }
}

impl SdeModel for BuiltinModel {
    fn state_dim(&self) -> usize {
        match self {
            Self::LinearMultiDim { m, .. } => *m,
            _ => 1,
        }
    }

    fn noise_dim(&self) -> usize {
        match self {
            Self::LinearMultiDim { d, .. } => *d,
            _ => 1,
        }
    }

    fn state_independent_diffusion(&self) -> bool {
        !matches!(self, Self::StateDependentTanh { .. })
    }

    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::OrnsteinUhlenbeck { theta, .. } | Self::StateDependentTanh { theta, .. } => {
                out[0] = -theta * x[0]
            }
            Self::BoundedNonlinearDrift { k, a, .. } => {
                let u = x[0] - a;
                out[0] = -k * u / (1.0 + u * u);
            }
            Self::LinearMultiDim { m, a, .. } => crate::linalg::matvec(a, x, out, *m, *m),
        }
    }

    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::OrnsteinUhlenbeck { sigma, .. } | Self::BoundedNonlinearDrift { sigma, .. } => {
                out[0] = *sigma
            }
            Self::StateDependentTanh { sigma, alpha, .. } => {
                out[0] = sigma * (1.0 + alpha * x[0].tanh())
            }
            Self::LinearMultiDim { sigma, .. } => out.copy_from_slice(sigma),
        }
    }

    fn drift_jacobian(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::OrnsteinUhlenbeck { theta, .. } | Self::StateDependentTanh { theta, .. } => {
                out[0] = -theta
            }
            Self::BoundedNonlinearDrift { k, a, .. } => {
                let u = x[0] - a;
                let s = 1.0 + u * u;
                out[0] = -k * (1.0 - u * u) / (s * s);
            }
            Self::LinearMultiDim { a, .. } => out.copy_from_slice(a),
        }
    }

    fn diffusion_jacobian(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::StateDependentTanh { sigma, alpha, .. } => {
                let th = x[0].tanh();
                out[0] = sigma * alpha * (1.0 - th * th);
            }
            _ => out.fill(0.0),
        }
    }

    fn drift_hessian(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::BoundedNonlinearDrift { k, a, .. } => {
                let u = x[0] - a;
                let s = 1.0 + u * u;
                out[0] = 2.0 * k * u * (3.0 - u * u) / (s * s * s);
            }
            _ => out.fill(0.0),
        }
    }

    fn diffusion_hessian(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Self::StateDependentTanh { sigma, alpha, .. } => {
                let th = x[0].tanh();
                out[0] = -2.0 * sigma * alpha * (1.0 - th * th) * th;
            }
            _ => out.fill(0.0),
        }
    }

    fn name(&self) -> String {
        self.id().to_string()
    }
}

/// All coefficient evaluations at one `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub m: usize,
    pub d: usize,
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub drift_jacobian: Vec<f64>,
    pub diffusion_jacobian: Vec<f64>,
    pub drift_hessian: Vec<f64>,
    pub diffusion_hessian: Vec<f64>,
}

impl Coefficients {
    pub(crate) fn zeros(m: usize, d: usize) -> Self {
        Self {
            m,
            d,
            drift: vec![0.0; m],
            diffusion: vec![0.0; m * d],
            drift_jacobian: vec![0.0; m * m],
            diffusion_jacobian: vec![0.0; d * m * m],
            drift_hessian: vec![0.0; m * m * m],
            diffusion_hessian: vec![0.0; d * m * m * m],
        }
    }

    /// Refreshes every field in place.
    pub(crate) fn fill(&mut self, model: &dyn SdeModel, t: f64, x: &[f64]) {
        model.drift(t, x, &mut self.drift);
        model.diffusion(t, x, &mut self.diffusion);
        model.drift_jacobian(t, x, &mut self.drift_jacobian);
        model.diffusion_jacobian(t, x, &mut self.diffusion_jacobian);
        model.drift_hessian(t, x, &mut self.drift_hessian);
        model.diffusion_hessian(t, x, &mut self.diffusion_hessian);
    }

    /// `∂_x σ^l` as an `m×m` slice.
    pub fn diffusion_jacobian_column(&self, l: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.diffusion_jacobian[l * mm..(l + 1) * mm]
    }

    pub(crate) fn is_finite(&self) -> bool {
        [
            &self.drift,
            &self.diffusion,
            &self.drift_jacobian,
            &self.diffusion_jacobian,
            &self.drift_hessian,
            &self.diffusion_hessian,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

fn check_point(model: &dyn SdeModel, t: f64, x: &[f64]) -> Result<()> {
    if x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "state has length {} but model dimension is {}",
            x.len(),
            model.state_dim()
        )));
    }
    if !t.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(format!("t = {t}, x = {x:?}")));
    }
    Ok(())
}

/// Evaluates all coefficients and derivatives at `(t, x)`.
pub fn evaluate_model(model: &dyn SdeModel, t: f64, x: &[f64]) -> Result<Coefficients> {
    check_point(model, t, x)?;
    let mut c = Coefficients::zeros(model.state_dim(), model.noise_dim());
    c.fill(model, t, x);
    if !c.is_finite() {
        return Err(Error::NonFiniteInput(format!(
            "coefficients at t = {t}, x = {x:?} are not finite"
        )));
    }
    Ok(c)
}

/// Divergence of `σσᵀ`: component `i` is `Σ_j ∂_{x_j}[σσᵀ]_{ij}`.
pub fn divergence_sigma_sigma_t(model: &dyn SdeModel, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    check_point(model, t, x)?;
    let (m, d) = (model.state_dim(), model.noise_dim());
    let mut out = vec![0.0; m];
    if model.state_independent_diffusion() {
        return Ok(out);
    }
    let mut sigma = vec![0.0; m * d];
    let mut dsigma = vec![0.0; d * m * m];
    model.diffusion(t, x, &mut sigma);
    model.diffusion_jacobian(t, x, &mut dsigma);
    divergence_from_parts(&sigma, &dsigma, m, d, &mut out);
    Ok(out)
}

/// Product rule: `∂_j(σ_il σ_jl) = ∂_jσ_il σ_jl + σ_il ∂_jσ_jl`.
pub(crate) fn divergence_from_parts(
    sigma: &[f64],
    dsigma: &[f64],
    m: usize,
    d: usize,
    out: &mut [f64],
) {
    let mm = m * m;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..m {
            for l in 0..d {
                acc += dsigma[l * mm + i * m + j] * sigma[j * d + l]
                    + sigma[i * d + l] * dsigma[l * mm + j * m + j];
            }
        }
        *o = acc;
    }
}

/// One entry whose analytic derivative disagrees with its finite-difference estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeMismatch {
    pub quantity: &'static str,
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub samples: usize,
    pub max_rel_error: f64,
    pub failures: Vec<DerivativeMismatch>,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const DERIVATIVE_FAILURE_THRESHOLD: f64 = 1e-4;

/// Compares analytic Jacobians and Hessians against central differences at random `(t, x)`.
///
/// Jacobians are differenced from the coefficients, Hessians from the analytic Jacobians.
/// Errors are measured as `|analytic − numeric| / (1 + |numeric|)`.
pub fn check_derivatives(
    model: &dyn SdeModel,
    sample_count: usize,
    seed: u64,
) -> Result<DerivativeReport> {
    if sample_count == 0 {
        return Err(Error::Contract("sample_count must be ≥ 1".into()));
    }
    let (m, d) = (model.state_dim(), model.noise_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = DerivativeReport {
        samples: sample_count,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let mut plus = Coefficients::zeros(m, d);
    let mut minus = Coefficients::zeros(m, d);
    for _ in 0..sample_count {
        let t: f64 = rng.random_range(0.0..1.0);
        let x: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
        let base = evaluate_model(model, t, &x)?;
        let mut record = |quantity: &'static str, index: usize, analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / (1.0 + numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > DERIVATIVE_FAILURE_THRESHOLD || !rel.is_finite() {
                report.failures.push(DerivativeMismatch {
                    quantity,
                    index,
                    t,
                    x: x.clone(),
                    analytic,
                    numeric,
                    rel_error: rel,
                });
            }
        };
        for j in 0..m {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += FD_STEP;
            xm[j] -= FD_STEP;
            plus.fill(model, t, &xp);
            minus.fill(model, t, &xm);
            let fd = |a: f64, b: f64| (a - b) / (2.0 * FD_STEP);
            for i in 0..m {
                record(
                    "drift_jacobian",
                    i * m + j,
                    base.drift_jacobian[i * m + j],
                    fd(plus.drift[i], minus.drift[i]),
                );
                for l in 0..d {
                    record(
                        "diffusion_jacobian",
                        l * m * m + i * m + j,
                        base.diffusion_jacobian[l * m * m + i * m + j],
                        fd(plus.diffusion[i * d + l], minus.diffusion[i * d + l]),
                    );
                }
                // Hessian [i][p][j]: differentiate the Jacobian entry (i, p) along x_j.
                for p in 0..m {
                    let h = i * m * m + p * m + j;
                    record(
                        "drift_hessian",
                        h,
                        base.drift_hessian[h],
                        fd(plus.drift_jacobian[i * m + p], minus.drift_jacobian[i * m + p]),
                    );
                    for l in 0..d {
                        let jac = l * m * m + i * m + p;
                        let hs = l * m * m * m + h;
                        record(
                            "diffusion_hessian",
                            hs,
                            base.diffusion_hessian[hs],
                            fd(plus.diffusion_jacobian[jac], minus.diffusion_jacobian[jac]),
                        );
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ou_coefficients() {
        let c = evaluate_model(&BuiltinModel::ou(1.0, 1.0), 0.0, &[2.0]).unwrap();
        assert_eq!(c.drift, vec![-2.0]);
        assert_eq!(c.diffusion, vec![1.0]);
        assert_eq!(c.drift_jacobian, vec![-1.0]);
        assert_eq!(c.diffusion_jacobian, vec![0.0]);
        assert_eq!(c.drift_hessian, vec![0.0]);
        assert_eq!(c.diffusion_hessian, vec![0.0]);
    }

    #[test]
    fn tanh_diffusion_slope_at_origin() {
        let c = evaluate_model(&BuiltinModel::tanh(1.0, 1.0, 0.5), 0.0, &[0.0]).unwrap();
        assert_eq!(c.diffusion, vec![1.0]);
        assert_eq!(c.diffusion_jacobian, vec![0.5]);
    }

    #[test]
    fn bounded_drift_at_unit_offset() {
        let c = evaluate_model(&BuiltinModel::bounded_nonlinear(1.0, 0.0, 1.0), 0.0, &[1.0])
            .unwrap();
        assert_eq!(c.drift, vec![-0.5]);
        // (1 − u²)/(1 + u²)² vanishes at u = 1
        assert_eq!(c.drift_jacobian, vec![0.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let m = BuiltinModel::ou(1.0, 1.0);
        assert!(matches!(
            evaluate_model(&m, 0.0, &[f64::NAN]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            evaluate_model(&m, f64::INFINITY, &[0.0]),
            Err(Error::NonFiniteInput(_))
        ));
        assert!(matches!(
            evaluate_model(&m, 0.0, &[0.0, 1.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn divergence_cases() {
        let tanh = BuiltinModel::tanh(1.0, 1.0, 0.5);
        // d/dx σ² = 2σσ' = 2 · 1 · 0.5
        assert_eq!(divergence_sigma_sigma_t(&tanh, 0.0, &[0.0]).unwrap(), vec![1.0]);
        let ou = BuiltinModel::ou(1.0, 2.0);
        assert_eq!(divergence_sigma_sigma_t(&ou, 0.0, &[3.0]).unwrap(), vec![0.0]);
        let lin = BuiltinModel::linear_2d([[-1.0, 0.0], [0.0, -1.0]], [[1.0, 0.2], [0.0, 1.0]]);
        assert_eq!(
            divergence_sigma_sigma_t(&lin, 0.0, &[1.0, -1.0]).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn divergence_matches_finite_difference_away_from_origin() {
        let tanh = BuiltinModel::tanh(1.0, 0.7, 0.4);
        let x = 0.8;
        let h = 1e-6;
        let s2 = |x: f64| {
            let mut s = [0.0];
            tanh.diffusion(0.0, &[x], &mut s);
            s[0] * s[0]
        };
        let fd = (s2(x + h) - s2(x - h)) / (2.0 * h);
        let div = divergence_sigma_sigma_t(&tanh, 0.0, &[x]).unwrap()[0];
        assert!((div - fd).abs() < 1e-8, "{div} vs {fd}");
    }

    #[test]
    fn builtins_pass_derivative_check() {
        let models = [
            BuiltinModel::ou(1.0, 1.0),
            BuiltinModel::bounded_nonlinear(1.0, 0.0, 1.0),
            BuiltinModel::bounded_nonlinear(2.0, 0.5, 0.7),
            BuiltinModel::tanh(1.0, 1.0, 0.5),
            BuiltinModel::linear_2d([[-1.0, 0.5], [0.0, -2.0]], [[1.0, 0.0], [0.3, 0.8]]),
        ];
        for model in &models {
            let r = check_derivatives(model, 100, 11).unwrap();
            assert!(r.passed(), "{}: {:?}", model.name(), r.failures.first());
            assert!(r.max_rel_error <= 1e-5, "{}: {}", model.name(), r.max_rel_error);
        }
        let ou = check_derivatives(&BuiltinModel::ou(1.0, 1.0), 20, 1).unwrap();
        assert!(ou.max_rel_error < 1e-9);
    }

    #[test]
    fn state_independent_flag_implies_zero_sigma_derivatives() {
        for model in [
            BuiltinModel::ou(0.3, 2.0),
            BuiltinModel::bounded_nonlinear(1.0, 0.0, 1.0),
            BuiltinModel::linear_2d([[-1.0, 0.5], [0.0, -2.0]], [[1.0, 0.0], [0.3, 0.8]]),
        ] {
            assert!(model.state_independent_diffusion());
            let c = evaluate_model(&model, 0.2, &vec![0.7; model.state_dim()]).unwrap();
            assert!(c.diffusion_jacobian.iter().all(|v| *v == 0.0));
            assert!(c.diffusion_hessian.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn from_name_round_trip_and_rejections() {
        let mut p = BTreeMap::new();
        p.insert("theta".to_string(), 2.0);
        assert_eq!(
            BuiltinModel::from_name("ou", &p).unwrap(),
            BuiltinModel::ou(2.0, 1.0)
        );
        assert!(BuiltinModel::from_name("nope", &p).is_err());
        p.insert("bogus".to_string(), 1.0);
        assert!(BuiltinModel::from_name("ou", &p).is_err());
    }

    #[test]
    fn evaluation_is_pure() {
        let m = BuiltinModel::tanh(1.0, 1.0, 0.5);
        let a = evaluate_model(&m, 0.3, &[0.123]).unwrap();
        let b = evaluate_model(&m, 0.3, &[0.123]).unwrap();
        assert_eq!(a, b);
    }
}
