use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use approx::assert_relative_eq;
use malliavin_score::malliavin::SkorokhodBreakdown;
use malliavin_score::oracle::{duality_report, fokker_planck_1d, kde_score, Mesh};
use malliavin_score::path::{sample_brownian, simulate_variations};
use malliavin_score::score::{
    analytic_score_linear, estimate_score, linear_moments, regress_score, reverse_time_sample, silverman_bandwidth,
    skorokhod_sample, Bandwidth, PathOutcome, SkorokhodSample, PipelineOptions, Regression, ScoreTable, TableScore, ZeroScore,
};
use malliavin_score::{BuiltinModel, Error, TimeGrid};

fn gaussian(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn points(ys: &[f64]) -> Vec<Vec<f64>> {
    ys.iter().map(|y| vec![*y]).collect()
}

#[test]
fn ou_score_matches_closed_form_with_narrow_kernel() {
    // At 10⁵ paths the error bar (~6e-4) is below the O(Δt) bias of N = 256.
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 512).unwrap();
    let table = estimate_score(
        &model,
        &[0.0],
        &grid,
        100_000,
        1.0,
        &points(&[0.0, 0.5]),
        Regression::NadarayaWatson(Bandwidth::Fixed(0.02)),
        11,
        PipelineOptions::default(),
    )
    .unwrap();
    let at_mean = table.entry(0, 0);
    assert!(at_mean.score.abs() <= 3.0 * at_mean.stderr, "{at_mean:?}");
    let half = table.entry(1, 0);
    assert!((half.score + 1.15652).abs() <= 3.0 * half.stderr, "{half:?}");
    assert_relative_eq!(
        analytic_score_linear(&model, 1.0, &[0.0], &[0.5]).unwrap()[0],
        -1.15652,
        max_relative = 1e-5
    );
}

#[test]
fn ou_score_bias_is_first_order_in_the_step() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let bias = |steps| {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let table = estimate_score(
            &model,
            &[0.0],
            &grid,
            100_000,
            1.0,
            &points(&[0.5]),
            Regression::NadarayaWatson(Bandwidth::Fixed(0.02)),
            11,
            PipelineOptions::default(),
        )
        .unwrap();
        table.entry(0, 0).score + 1.15652
    };
    let ratio = bias(32) / bias(64);
    assert!((1.6..2.5).contains(&ratio), "bias ratio {ratio}");
}

#[test]
fn one_step_score_is_the_transition_score() {
    // The left-point D X carries a factor 1 − θΔt, so the grid has to be fine.
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let dt = grid.dt();
    let y = 0.45;
    let table = estimate_score(
        &model,
        &[0.4],
        &grid,
        20_000,
        dt,
        &points(&[y]),
        Regression::NadarayaWatson(Bandwidth::Fixed(0.2 * dt.sqrt())),
        6,
        PipelineOptions::default(),
    )
    .unwrap();
    let exact = -(y - 0.4 * (1.0 - dt)) / dt;
    let e = table.entry(0, 0);
    assert!((e.score - exact).abs() <= (3.0 * e.stderr).max(0.03 * exact.abs()), "{e:?} vs {exact}");
}

#[test]
fn standard_error_shrinks_with_more_paths() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let run = |n| {
        estimate_score(
            &model,
            &[0.0],
            &grid,
            n,
            1.0,
            &points(&[0.3]),
            Regression::NadarayaWatson(Bandwidth::Fixed(0.1)),
            5,
            PipelineOptions::default(),
        )
        .unwrap()
        .entry(0, 0)
        .stderr
    };
    let ratio = run(40_000) / run(20_000);
    let expected = std::f64::consts::FRAC_1_SQRT_2;
    assert!((ratio - expected).abs() <= 0.2 * expected, "ratio {ratio}");
}

/// Holds when the response carries noise beyond its dependence on the state. On OU runs
/// `δ` is almost a function of `X_t`, the residual spread scales with `h` and the SE drops
/// with the bandwidth instead.
#[test]
fn halving_the_bandwidth_does_not_shrink_the_error_bar() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let outcomes = (0..20_000)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let noise: f64 = rng.sample(StandardNormal);
            let total = -x + noise;
            PathOutcome::Valid {
                x: vec![x],
                breakdown: vec![SkorokhodBreakdown { k: 0, ito: total, a: 0.0, b: 0.0, c: 0.0, total }],
            }
        })
        .collect();
    let sample = SkorokhodSample { m: 1, node: 1, t: 1.0, outcomes };
    let ys = points(&[-1.0, -0.5, 0.0, 0.5, 1.0]);
    let wide = regress_score(&sample, &ys, Regression::NadarayaWatson(Bandwidth::Fixed(0.2))).unwrap();
    let narrow = regress_score(&sample, &ys, Regression::NadarayaWatson(Bandwidth::Fixed(0.1))).unwrap();
    for q in 0..ys.len() {
        assert!(narrow.entry(q, 0).stderr >= wide.entry(q, 0).stderr, "point {q}");
    }
}

#[test]
fn regression_ignores_path_order() {
    let model = BuiltinModel::tanh(1.0, 1.0, 0.5);
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let sample = skorokhod_sample(&model, &[0.2], &grid, 32, 2_000, 9, PipelineOptions::default()).unwrap();
    let mut shuffled = sample.clone();
    shuffled.outcomes.reverse();
    shuffled.outcomes.rotate_left(517);
    let ys = points(&[-0.4, 0.1, 0.7]);
    for regression in [Regression::default(), Regression::NearestNeighbours(100)] {
        let a = regress_score(&sample, &ys, regression).unwrap();
        let b = regress_score(&shuffled, &ys, regression).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_relative_eq!(x.score, y.score, max_relative = 1e-12);
            assert_relative_eq!(x.stderr, y.stderr, max_relative = 1e-9);
        }
    }
}

#[test]
fn silverman_width_on_a_known_sample() {
    let xs: Vec<f64> = (0..1000).map(|p| (p as f64 / 999.0) * 2.0 - 1.0).collect();
    let s = (xs.iter().map(|x| x * x).sum::<f64>() / 999.0).sqrt();
    let h = silverman_bandwidth(&xs, 1);
    assert_relative_eq!(h[0], s * (4.0 / (3.0 * 1000.0f64)).powf(0.2), max_relative = 1e-12);
}

#[test]
fn estimate_score_rejects_small_runs_and_off_grid_times() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 16).unwrap();
    let ys = points(&[0.0]);
    let call = |n, t| estimate_score(&model, &[0.0], &grid, n, t, &ys, Regression::default(), 1, PipelineOptions::default());
    assert!(matches!(call(99, 1.0), Err(Error::Contract(_))));
    assert!(matches!(call(200, 0.3), Err(Error::NotAGridNode { nearest: 5, .. })));
}

#[test]
fn fokker_planck_matches_ou_density() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let sol = fokker_planck_1d(&model, 0.5, 1.0, Mesh { lo: -5.0, hi: 5.0, cells: 2000 }, 2000).unwrap();
    let (mean, cov) = linear_moments(&model, 1.0, &[0.5]).unwrap();
    let last = sol.times.len() - 1;
    let err = sol
        .x
        .iter()
        .zip(sol.density(last))
        .map(|(x, p)| (p - gaussian(*x, mean[0], cov[(0, 0)])).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-3, "sup error {err}");
    let exact = analytic_score_linear(&model, 1.0, &[0.5], &[0.8]).unwrap()[0];
    assert!((sol.score_at(last, 0.8) - exact).abs() < 1e-2);
}

#[test]
fn fokker_planck_conserves_mass_for_nonlinear_drift() {
    let model = BuiltinModel::bounded_nonlinear(1.0, 0.5, 1.0);
    let sol = fokker_planck_1d(&model, 0.0, 1.0, Mesh { lo: -6.0, hi: 6.0, cells: 1200 }, 1000).unwrap();
    for n in [0, sol.times.len() / 2, sol.times.len() - 1] {
        assert!((sol.mass(n) - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn kde_score_on_ou_terminal_draws() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 128).unwrap();
    let xs: Vec<f64> = (0..10_000)
        .map(|p| {
            let w = sample_brownian(&grid, 1, 21, p);
            simulate_variations(&model, &[0.0], &grid, &w).unwrap().terminal()[0]
        })
        .collect();
    let h = silverman_bandwidth(&xs, 1);
    let kde = kde_score(&xs, 1, &[0.5], &h).unwrap();
    assert!(!kde.unreliable);
    let tol = (3.0 * kde.stderr[0]).max(0.1);
    assert!((kde.score[0] + 1.157).abs() <= tol, "{kde:?}");
}

#[test]
fn duality_holds_for_linear_models() {
    let grid = TimeGrid::new(1.0, 256).unwrap();
    let ou = duality_report(&BuiltinModel::ou(1.0, 1.0), &[0.0], &grid, 10_000, 2, PipelineOptions::default()).unwrap();
    assert!(ou.passed(3.0), "{ou:?}");
    let model = BuiltinModel::linear_2d([[-1.0, 0.5], [0.0, -2.0]], [[1.0, 0.0], [0.3, 0.8]]);
    let lin = duality_report(&model, &[0.2, -0.1], &grid, 10_000, 2, PipelineOptions::default()).unwrap();
    assert!(lin.passed(3.0), "{lin:?}");
    assert_eq!(lin.excluded, 0);
}

#[test]
fn zero_score_reverse_run_is_a_brownian_walk() {
    let model = BuiltinModel::ou(0.0, 1.5);
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let out = reverse_time_sample(&model, &ZeroScore, &[0.0], &grid, 10_000, 4).unwrap();
    let n = out.len() as f64;
    let diffs: Vec<f64> = out.terminal.iter().zip(&out.initial).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var / 2.25 - 1.0).abs() <= 0.05, "variance {var}");
}

#[test]
fn reverse_run_stops_at_a_missing_table() {
    let model = BuiltinModel::ou(1.0, 1.0);
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let ys = points(&[-1.0, 0.0, 1.0]);
    let mut tables = BTreeMap::new();
    for node in [4, 2, 1] {
        let t = grid.time(node);
        let entries = ys
            .iter()
            .map(|y| malliavin_score::score::ScoreEntry {
                score: analytic_score_linear(&model, t, &[0.0], y).unwrap()[0],
                stderr: 0.0,
                n_eff: 100.0,
            })
            .collect();
        tables.insert(
            node,
            ScoreTable { t, m: 1, points: ys.clone(), entries, excluded: 0, valid_paths: 100, bandwidth: vec![] },
        );
    }
    let provider = TableScore::new(tables).unwrap();
    match reverse_time_sample(&model, &provider, &[0.0], &grid, 10, 1) {
        Err(Error::ScoreGap { node, .. }) => assert_eq!(node, 3),
        other => panic!("expected a gap at node 3, got {other:?}"),
    }
}
