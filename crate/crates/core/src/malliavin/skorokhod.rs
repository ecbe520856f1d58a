//! `δ(u_k) = Itô − A + B + C` for the covering field `u_k`.
//!
//! Three evaluators share the same discretised objects:
//! * [`skorokhod_integral_general`] runs in `O(N)` using suffix sums of the `s ≥ t` integrand,
//! * [`skorokhod_integral_state_independent`] is the pruned form for `∂_xσ ≡ 0`,
//! * [`skorokhod_integral_reference`] rebuilds `D_tγ` at every node directly, `O(N²)`.

use crate::error::{Error, Result};
use crate::linalg;
use crate::path::VariationTrajectory;

use super::{
    check_bundle, dt_gamma_split_impl, perturbation_direction, variation_bracket, MalliavinBundle,
    NodeScratch,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkorokhodBreakdown {
    /// 0-based component.
    pub k: usize,
    pub ito: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub total: f64,
}

impl SkorokhodBreakdown {
    fn assemble(k: usize, ito: f64, a: f64, b: f64, c: f64) -> Self {
        Self {
            k,
            ito,
            a,
            b,
            c,
            total: ito - a + b + c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SkorokhodMode {
    /// Pruned evaluator when `∂_xσ ≡ 0`, general otherwise.
    #[default]
    Auto,
    General,
    StateIndependent,
    Reference,
}

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    FlipB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SkorokhodOptions {
    pub mode: SkorokhodMode,
    #[doc(hidden)]
    pub fault: Fault,
}

/// All `m` components at once.
pub fn skorokhod_all(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    opts: SkorokhodOptions,
) -> Result<Vec<SkorokhodBreakdown>> {
    let mode = match opts.mode {
        SkorokhodMode::Auto if traj.state_independent => SkorokhodMode::StateIndependent,
        SkorokhodMode::Auto => SkorokhodMode::General,
        m => m,
    };
    let mut out = match mode {
        SkorokhodMode::StateIndependent => state_independent_all(traj, bundle)?,
        SkorokhodMode::Reference => (0..traj.m)
            .map(|k| skorokhod_integral_reference(traj, bundle, k))
            .collect::<Result<Vec<_>>>()?,
        _ => general_all(traj, bundle)?,
    };
    if opts.fault == Fault::FlipB {
        for s in &mut out {
            *s = SkorokhodBreakdown::assemble(s.k, s.ito, s.a, -s.b, s.c);
        }
    }
    Ok(out)
}

fn check_k(traj: &VariationTrajectory, k: usize) -> Result<()> {
    if k >= traj.m {
        return Err(Error::OutOfRange(format!("component {k} ≥ {}", traj.m)));
    }
    Ok(())
}

pub fn skorokhod_integral_general(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    k: usize,
) -> Result<SkorokhodBreakdown> {
    check_k(traj, k)?;
    Ok(general_all(traj, bundle)?[k])
}

/// Refuses models whose diffusion depends on the state.
pub fn skorokhod_integral_state_independent(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    k: usize,
) -> Result<SkorokhodBreakdown> {
    check_k(traj, k)?;
    Ok(state_independent_all(traj, bundle)?[k])
}

/// Itô sum `Σ_i (Y_i⁻¹σ_i ΔB_i)` shared by every route (`m`-vector; `δ`'s Itô part is `F_k·` this).
fn ito_vector(traj: &VariationTrajectory) -> Vec<f64> {
    let (m, d) = (traj.m, traj.d);
    let mut acc = vec![0.0; m];
    let mut c = vec![0.0; m * d];
    let mut tmp = vec![0.0; m];
    for i in 0..traj.steps() {
        linalg::matmul(traj.yinv(i), traj.sigma(i), &mut c, m, m, d);
        linalg::matvec(&c, traj.path.increment(i), &mut tmp, m, d);
        linalg::axpy(&mut acc, 1.0, &tmp);
    }
    acc
}

/// Per-node `c_s = Y_s⁻¹σ_s` and `c_s W_sᵀ` with `W_s = D_{s}X_T`.
fn node_tables(traj: &VariationTrajectory, bundle: &MalliavinBundle) -> (Vec<f64>, Vec<f64>) {
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let mut c_all = vec![0.0; n * m * d];
    let mut cw_all = vec![0.0; n * m * m];
    for s in 0..n {
        let c = &mut c_all[s * m * d..(s + 1) * m * d];
        linalg::matmul(traj.yinv(s), traj.sigma(s), c, m, m, d);
        linalg::matmul_nt(c, bundle.dx_slice(s), &mut cw_all[s * m * m..(s + 1) * m * m], m, d, m);
    }
    (c_all, cw_all)
}

fn finish(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    ito: &[f64],
    alpha: &[f64],
    beta_b: &[f64],
    beta_c: &[f64],
) -> Vec<SkorokhodBreakdown> {
    let m = traj.m;
    let ginv = bundle.gamma_inv_slice();
    let mut g = vec![0.0; m];
    (0..m)
        .map(|k| {
            linalg::column(ginv, k, &mut g, m, m);
            SkorokhodBreakdown::assemble(
                k,
                linalg::dot(bundle.f(k), ito),
                linalg::dot(alpha, &g),
                linalg::dot(beta_b, &g),
                linalg::dot(beta_c, &g),
            )
        })
        .collect()
}

/// `acc += scale · (G + Gᵀ) v`.
fn add_sym_apply(acc: &mut [f64], scale: f64, g: &[f64], v: &[f64], m: usize) {
    for p in 0..m {
        let mut s = 0.0;
        for q in 0..m {
            s += (g[p * m + q] + g[q * m + p]) * v[q];
        }
        acc[p] += scale * s;
    }
}

fn general_all(traj: &VariationTrajectory, bundle: &MalliavinBundle) -> Result<Vec<SkorokhodBreakdown>> {
    check_bundle(traj, bundle)?;
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let mm = m * m;
    let dt = traj.grid.dt();
    let ginv = bundle.gamma_inv_slice();
    let y_t = traj.y(n);
    let (c_all, cw_all) = node_tables(traj, bundle);

    let mut p_total = vec![0.0; mm];
    for s in 0..n {
        linalg::axpy(&mut p_total, dt, &cw_all[s * mm..(s + 1) * mm]);
    }
    // Suffix sums over s ≥ i.
    let mut p_suf = vec![0.0; mm];
    let mut s1 = vec![0.0; m * mm];
    let mut s2 = vec![0.0; mm * mm];
    let mut s4 = vec![0.0; m * mm];

    let mut alpha = vec![0.0; m];
    let mut beta_b = vec![0.0; m];
    let mut beta_c = vec![0.0; m];

    let mut sc = NodeScratch::new(m);
    let mut om = vec![0.0; mm];
    let mut zc = vec![0.0; mm];
    let mut mc = vec![0.0; mm];
    let mut prod = vec![0.0; mm];
    let mut yy = vec![0.0; mm];
    let mut kr = vec![0.0; d * mm];
    let mut e = vec![0.0; mm];
    let mut h = vec![0.0; mm];
    let mut g_before = vec![0.0; mm];
    let mut g_after = vec![0.0; mm];
    let mut p_pre = vec![0.0; mm];
    let mut wl = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut tmp = vec![0.0; m];

    for i in (0..n).rev() {
        let cw = &cw_all[i * mm..(i + 1) * mm];
        let w_i = bundle.dx_slice(i);
        let yinv = traj.yinv(i);
        let z = traj.z(i);

        linalg::axpy(&mut p_suf, dt, cw);
        for c in 0..m {
            for r in 0..m {
                for p in 0..m {
                    zc[r * m + p] = z[r * mm + p * m + c];
                }
            }
            linalg::matmul(yinv, &zc, &mut mc, m, m, m);
            linalg::matmul(&mc, cw, &mut prod, m, m, m);
            linalg::axpy(&mut s1[c * mm..(c + 1) * mm], dt, &prod);
        }
        linalg::matmul(yinv, traj.y(i), &mut yy, m, m, m);
        for p in 0..m {
            for a in 0..m {
                let ypa = dt * yy[p * m + a];
                let row = &mut s2[(p * m + a) * mm..(p * m + a + 1) * mm];
                linalg::axpy(row, ypa, cw);
            }
        }
        for r in 0..d {
            linalg::matmul(traj.dsigma(i, r), traj.y(i), &mut mc, m, m, m);
            linalg::matmul(yinv, &mc, &mut kr[r * mm..(r + 1) * mm], m, m, m);
        }
        for c in 0..m {
            let blk = &mut s4[c * mm..(c + 1) * mm];
            for p in 0..m {
                for q in 0..m {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += kr[r * mm + p * m + c] * w_i[q * d + r];
                    }
                    blk[p * m + q] += dt * acc;
                }
            }
        }
        for (pp, (t, s)) in p_pre.iter_mut().zip(p_total.iter().zip(&p_suf)) {
            *pp = t - s;
        }

        for l in 0..d {
            perturbation_direction(traj, i, l, &mut sc.a);
            variation_bracket(traj, i, n, l, true, &mut sc, &mut om);
            linalg::matvec(&om, &sc.a, &mut tmp, m, m);
            linalg::axpy(&mut alpha, dt, &tmp);

            // E = Y_i⁻¹(Z_i∘a) − Y_i⁻¹∂σ^l_i Y_i
            linalg::contract_last(z, &sc.a, &mut zc, m);
            linalg::matmul(yinv, &zc, &mut e, m, m, m);
            linalg::axpy(&mut e, -1.0, &kr[l * mm..(l + 1) * mm]);

            h.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..m {
                linalg::axpy(&mut h, -sc.a[c], &s1[c * mm..(c + 1) * mm]);
                linalg::axpy(&mut h, sc.a[c], &s4[c * mm..(c + 1) * mm]);
            }
            for p in 0..m {
                for a in 0..m {
                    for b in 0..m {
                        let blk = &s2[(p * m + a) * mm + b * m..(p * m + a) * mm + (b + 1) * m];
                        let eab = e[a * m + b];
                        for q in 0..m {
                            h[p * m + q] += eab * blk[q];
                        }
                    }
                }
            }
            linalg::matmul(y_t, &h, &mut g_after, m, m, m);
            linalg::matmul(&om, &p_suf, &mut prod, m, m, m);
            linalg::axpy(&mut g_after, 1.0, &prod);
            linalg::matmul(&om, &p_pre, &mut g_before, m, m, m);

            linalg::column(w_i, l, &mut wl, m, d);
            linalg::matvec_t(ginv, &wl, &mut v, m, m);
            add_sym_apply(&mut beta_b, dt, &g_before, &v, m);
            add_sym_apply(&mut beta_c, dt, &g_after, &v, m);
        }
    }
    let _ = c_all;
    let ito = ito_vector(traj);
    Ok(finish(traj, bundle, &ito, &alpha, &beta_b, &beta_c))
}

/// Pruned evaluator: with `∂_xσ ≡ 0`, `Ω = Z_T∘a − Y_TY_t⁻¹Z_t∘a` and the `s ≥ t` integrand is
/// `Φ(t,s) = Ω c_s − Y_T Y_s⁻¹ [Z_s∘a − Y_sY_t⁻¹Z_t∘a] c_s`.
fn state_independent_all(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
) -> Result<Vec<SkorokhodBreakdown>> {
    check_bundle(traj, bundle)?;
    if !traj.state_independent {
        return Err(Error::UnsupportedModel(
            "pruned Skorokhod evaluator needs a state-independent diffusion".into(),
        ));
    }
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let mm = m * m;
    let dt = traj.grid.dt();
    let ginv = bundle.gamma_inv_slice();
    let y_t = traj.y(n);
    let (c_all, cw_all) = node_tables(traj, bundle);

    // Prefix sums Σ_{s<i} c_sW_sᵀΔt, built forward.
    let mut prefix = vec![0.0; (n + 1) * mm];
    for s in 0..n {
        let (head, tail) = prefix.split_at_mut((s + 1) * mm);
        tail[..mm].copy_from_slice(&head[s * mm..]);
        linalg::axpy(&mut tail[..mm], dt, &cw_all[s * mm..(s + 1) * mm]);
    }
    // Suffix tensors: Q[c] = Σ_{s≥i} Y_s⁻¹ Z_s[·,·,c] c_sW_sᵀΔt and R[p,a] = Σ_{s≥i} (Y_s⁻¹Y_s)[p,a] c_sW_sᵀΔt.
    let mut q = vec![0.0; m * mm];
    let mut r = vec![0.0; mm * mm];

    let mut a_vec = vec![0.0; m];
    let mut zt_a = vec![0.0; mm];
    let mut zi_a = vec![0.0; mm];
    let mut inner = vec![0.0; mm];
    let mut om = vec![0.0; mm];
    let mut tmp = vec![0.0; mm];
    let mut slab = vec![0.0; mm];
    let mut phi_sum = vec![0.0; mm];
    let mut before = vec![0.0; mm];
    let mut after = vec![0.0; mm];
    let mut yy = vec![0.0; mm];

    // Per-k accumulators, evaluated with g_k explicitly rather than through shared vectors.
    let mut a_k = vec![0.0; m];
    let mut b_k = vec![0.0; m];
    let mut c_k = vec![0.0; m];
    let mut g = vec![0.0; m];
    let mut w_col = vec![0.0; m];
    let mut v = vec![0.0; m];
    let mut gv = vec![0.0; m];

    for i in (0..n).rev() {
        let cw = &cw_all[i * mm..(i + 1) * mm];
        let yinv = traj.yinv(i);
        let z = traj.z(i);
        for c in 0..m {
            for rr in 0..m {
                for p in 0..m {
                    inner[rr * m + p] = z[rr * mm + p * m + c];
                }
            }
            linalg::matmul(yinv, &inner, &mut tmp, m, m, m);
            linalg::matmul(&tmp, cw, &mut slab, m, m, m);
            linalg::axpy(&mut q[c * mm..(c + 1) * mm], dt, &slab);
        }
        linalg::matmul(yinv, traj.y(i), &mut yy, m, m, m);
        for pa in 0..mm {
            linalg::axpy(&mut r[pa * mm..(pa + 1) * mm], dt * yy[pa], cw);
        }
        let p_suf: Vec<f64> = (0..mm).map(|j| prefix[n * mm + j] - prefix[i * mm + j]).collect();
        let p_pre = &prefix[i * mm..(i + 1) * mm];

        for l in 0..d {
            let c_i = &c_all[i * m * d..(i + 1) * m * d];
            linalg::column(c_i, l, &mut a_vec, m, d);
            linalg::contract_last(traj.z(n), &a_vec, &mut zt_a, m);
            linalg::contract_last(z, &a_vec, &mut zi_a, m);
            // inner = Y_t⁻¹ Z_t∘a
            linalg::matmul(yinv, &zi_a, &mut inner, m, m, m);
            linalg::matmul(y_t, &inner, &mut tmp, m, m, m);
            for j in 0..mm {
                om[j] = zt_a[j] - tmp[j];
            }
            // Σ_{s≥i} Y_s⁻¹[Z_s∘a − Y_s inner] c_sW_sᵀΔt
            phi_sum.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..m {
                linalg::axpy(&mut phi_sum, a_vec[c], &q[c * mm..(c + 1) * mm]);
            }
            for p in 0..m {
                for a in 0..m {
                    for b in 0..m {
                        let coef = inner[a * m + b];
                        for qq in 0..m {
                            phi_sum[p * m + qq] -= coef * r[(p * m + a) * mm + b * m + qq];
                        }
                    }
                }
            }
            linalg::matmul(y_t, &phi_sum, &mut tmp, m, m, m);
            linalg::matmul(&om, &p_suf, &mut after, m, m, m);
            linalg::axpy(&mut after, -1.0, &tmp);
            linalg::matmul(&om, p_pre, &mut before, m, m, m);

            linalg::column(bundle.dx_slice(i), l, &mut w_col, m, d);
            linalg::matvec_t(ginv, &w_col, &mut v, m, m);
            for k in 0..m {
                linalg::column(ginv, k, &mut g, m, m);
                // A: a ᵀ Ωᵀ g_k
                linalg::matvec_t(&om, &g, &mut gv, m, m);
                a_k[k] += dt * linalg::dot(&a_vec, &gv);
                // B, C: vᵀ (G + Gᵀ) g_k
                let mut sb = 0.0;
                let mut sc_ = 0.0;
                for p in 0..m {
                    for qq in 0..m {
                        let w = v[p] * g[qq];
                        sb += w * (before[p * m + qq] + before[qq * m + p]);
                        sc_ += w * (after[p * m + qq] + after[qq * m + p]);
                    }
                }
                b_k[k] += dt * sb;
                c_k[k] += dt * sc_;
            }
        }
    }
    let ito = ito_vector(traj);
    Ok((0..m)
        .map(|k| SkorokhodBreakdown::assemble(k, linalg::dot(bundle.f(k), &ito), a_k[k], b_k[k], c_k[k]))
        .collect())
}

/// `O(N²)` route through [`super::omega`]-style brackets and a direct `D_tγ` at every node.
pub fn skorokhod_integral_reference(
    traj: &VariationTrajectory,
    bundle: &MalliavinBundle,
    k: usize,
) -> Result<SkorokhodBreakdown> {
    check_bundle(traj, bundle)?;
    check_k(traj, k)?;
    let (m, d, n) = (traj.m, traj.d, traj.steps());
    let dt = traj.grid.dt();
    let ginv = bundle.gamma_inv();
    let g = ginv.column(k).into_owned();
    let y_t = bundle.y_terminal();

    let mut ito = 0.0;
    let mut a_sum = 0.0;
    let mut b_sum = 0.0;
    let mut c_sum = 0.0;
    let f = y_t.transpose() * &g;
    for i in 0..n {
        let yinv = linalg::to_dmatrix(traj.yinv(i), m, m);
        let sigma = linalg::to_dmatrix(traj.sigma(i), m, d);
        let db = nalgebra::DVector::from_column_slice(traj.path.increment(i));
        let u = (&yinv * &sigma).transpose() * &f;
        ito += u.dot(&db);

        let omegas = super::omega(traj, i)?;
        let (before, after) = dt_gamma_split_impl(traj, bundle, i, true)?;
        let w = bundle.dx(i);
        for l in 0..d {
            let a = &yinv * sigma.column(l);
            a_sum += dt * (&omegas[l] * a).dot(&g);
            let left = w.column(l).transpose() * &ginv;
            b_sum += dt * (&left * &before[l] * &g)[(0, 0)];
            c_sum += dt * (&left * &after[l] * &g)[(0, 0)];
        }
    }
    Ok(SkorokhodBreakdown::assemble(k, ito, a_sum, b_sum, c_sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::malliavin::malliavin_covariance;
    use crate::model::{BuiltinModel, SdeModel};
    use crate::path::{sample_brownian, simulate_variations, TimeGrid};

    fn setup(model: &BuiltinModel, n: usize, seed: u64) -> (VariationTrajectory, MalliavinBundle) {
        let g = TimeGrid::new(1.0, n).unwrap();
        let w = sample_brownian(&g, model.noise_dim(), seed, 0);
        let x0 = vec![0.3; model.state_dim()];
        let t = simulate_variations(model, &x0, &g, &w).unwrap();
        let b = malliavin_covariance(&t).unwrap();
        (t, b)
    }

    fn close(a: &SkorokhodBreakdown, b: &SkorokhodBreakdown, tol: f64) -> bool {
        let scale = 1.0 + a.ito.abs().max(a.a.abs()).max(a.b.abs()).max(a.c.abs());
        [(a.ito, b.ito), (a.a, b.a), (a.b, b.b), (a.c, b.c), (a.total, b.total)]
            .iter()
            .all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn fast_matches_reference_on_tanh() {
        let (t, b) = setup(&BuiltinModel::tanh(1.0, 1.0, 0.5), 40, 3);
        let fast = skorokhod_integral_general(&t, &b, 0).unwrap();
        let slow = skorokhod_integral_reference(&t, &b, 0).unwrap();
        assert!(close(&fast, &slow, 1e-11), "{fast:?} vs {slow:?}");
        assert!(fast.c.abs() > 0.0);
    }

    #[test]
    fn pruned_matches_general_on_state_independent() {
        for model in [
            BuiltinModel::bounded_nonlinear(1.0, 0.0, 1.0),
            BuiltinModel::linear_2d([[-1.0, 0.5], [0.2, -2.0]], [[1.0, 0.0], [0.3, 0.8]]),
        ] {
            let (t, b) = setup(&model, 48, 11);
            for k in 0..model.state_dim() {
                let p = skorokhod_integral_state_independent(&t, &b, k).unwrap();
                let g = skorokhod_integral_general(&t, &b, k).unwrap();
                let r = skorokhod_integral_reference(&t, &b, k).unwrap();
                assert!(close(&p, &g, 1e-12), "{p:?} vs {g:?}");
                assert!(close(&p, &r, 1e-11), "{p:?} vs {r:?}");
            }
        }
    }

    #[test]
    fn pruned_refuses_state_dependent() {
        let (t, b) = setup(&BuiltinModel::tanh(1.0, 1.0, 0.5), 16, 1);
        assert!(matches!(
            skorokhod_integral_state_independent(&t, &b, 0),
            Err(Error::UnsupportedModel(_))
        ));
    }

    #[test]
    fn ou_reduces_to_ito_term() {
        let (t, b) = setup(&BuiltinModel::ou(1.0, 1.0), 64, 5);
        let s = skorokhod_all(&t, &b, SkorokhodOptions::default()).unwrap()[0];
        assert_eq!((s.a, s.b, s.c), (0.0, 0.0, 0.0));
        assert_eq!(s.total, s.ito);
    }

    #[test]
    fn flipped_b_changes_total() {
        let (t, b) = setup(&BuiltinModel::bounded_nonlinear(1.0, 0.0, 1.0), 32, 2);
        let good = skorokhod_all(&t, &b, SkorokhodOptions::default()).unwrap()[0];
        let bad = skorokhod_all(
            &t,
            &b,
            SkorokhodOptions {
                fault: Fault::FlipB,
                ..Default::default()
            },
        )
        .unwrap()[0];
        assert!((good.total - bad.total - 2.0 * good.b).abs() < 1e-12);
    }
}
