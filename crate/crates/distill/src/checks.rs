//! Oracle check suites: each check pits an implementation path against an
//! independent route (exact solver, finite differences, brute force) at a
//! fixed tolerance and reports pass/fail with diagnostics. The `check`
//! subcommand runs them from the command line; the acceptance tests call
//! them directly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::denoiser::AnalyticDenoiser;
use crate::diffusion::{ddim_step, make_cosine_schedule};
use crate::guidance::{ot_guidance, DistMatchConfig, MemorySet};
use crate::numerics::{
    seeded_rng, standard_normal_point, GaussianComponent, LabeledMixture, MixtureClass, Point,
};
use crate::quantization::{assignment_plan_cost, kmeans_approx, mean_approx};
use crate::semantic::condition_shift;
use crate::transport::{
    cost_matrix, exact_1d, exact_small, ot_grad_row, sinkhorn, DiscreteDistribution, Metric,
};
use crate::{Error, Result};

/// Result of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

/// Suite names accepted by [`run_suite`].
pub const SUITES: &[&str] = &[
    "sinkhorn",
    "exact-1d",
    "lemma1",
    "prop1",
    "prop2",
    "corollary1",
    "ot-grad",
    "all",
];

/// Run one suite (or `all`).
pub fn run_suite(name: &str) -> Result<Vec<CheckOutcome>> {
    match name {
        "sinkhorn" => Ok(vec![check_sinkhorn_vs_exact()]),
        "exact-1d" => Ok(vec![check_exact_1d_vs_simplex()]),
        "lemma1" => Ok(vec![check_lemma1_identity()]),
        "prop1" => Ok(vec![check_prop1_step_halving()]),
        "prop2" => Ok(vec![check_prop2_quantizer_ordering()]),
        "corollary1" => Ok(vec![check_corollary1_triangle()]),
        "ot-grad" => Ok(vec![check_ot_gradients()]),
        "all" => Ok(vec![
            check_sinkhorn_vs_exact(),
            check_exact_1d_vs_simplex(),
            check_lemma1_identity(),
            check_prop1_step_halving(),
            check_prop2_quantizer_ordering(),
            check_corollary1_triangle(),
            check_ot_gradients(),
        ]),
        other => Err(Error::Config(format!(
            "unknown check suite `{other}` (expected one of {})",
            SUITES.join(", ")
        ))),
    }
}

/// Uniform-mass random point-cloud instance — the shape every transport
/// call in the sampling pipeline produces.
fn random_cloud_instance(
    seed: u64,
    n: usize,
    m: usize,
    d: usize,
) -> (DiscreteDistribution, DiscreteDistribution, DMatrix<f64>) {
    let mut rng = seeded_rng(seed);
    let a = DiscreteDistribution::uniform(
        (0..n).map(|_| standard_normal_point(d, &mut rng)).collect(),
    )
    .unwrap();
    let b = DiscreteDistribution::uniform(
        (0..m).map(|_| standard_normal_point(d, &mut rng)).collect(),
    )
    .unwrap();
    let c = cost_matrix(&a, &b, Metric::Euclidean, false).unwrap();
    (a, b, c)
}

/// Entropic solver vs exact transportation simplex: 200 instances
/// (n,m ≤ 8), ε = 1e-3, log domain, 5000 iterations. Requires the value
/// gap within 1e-2·(exact + 1e-6), marginal residuals within 1e-6, and a
/// 10-second runtime.
pub fn check_sinkhorn_vs_exact() -> CheckOutcome {
    const INSTANCES: u64 = 200;
    const EPSILON: f64 = 1e-3;
    const ITERS: usize = 5000;
    const GAP_TOL: f64 = 1e-2;
    const RESIDUAL_TOL: f64 = 1e-6;

    let start = std::time::Instant::now();
    let mut worst_gap = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut failures = 0usize;
    for seed in 0..INSTANCES {
        let mut r = seeded_rng(seed);
        let n = r.random_range(2..=8);
        let m = r.random_range(2..=8);
        let (a, b, c) = random_cloud_instance(seed * 131 + 5, n, m, 2);
        let plan = match sinkhorn(&a, &b, &c, EPSILON, ITERS, true) {
            Ok(p) => p,
            Err(e) => {
                return CheckOutcome::new("sinkhorn", false, format!("solver error: {e}"));
            }
        };
        let exact = match exact_small(&a, &b, &c) {
            Ok(v) => v,
            Err(e) => {
                return CheckOutcome::new("sinkhorn", false, format!("exact solver error: {e}"));
            }
        };
        let gap = (plan.value - exact).abs();
        let residual = plan.max_row_residual.max(plan.max_col_residual);
        worst_gap = worst_gap.max(gap / (exact + 1e-6));
        worst_residual = worst_residual.max(residual);
        if gap > GAP_TOL * (exact + 1e-6) || residual > RESIDUAL_TOL {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = failures == 0 && elapsed.as_secs_f64() < 10.0;
    CheckOutcome::new(
        "sinkhorn",
        passed,
        format!(
            "{INSTANCES} instances: {failures} failures, worst relative gap {worst_gap:.3e}, \
             worst marginal residual {worst_residual:.3e}, runtime {elapsed:.2?}"
        ),
    )
}

/// Sorted quantile matching vs transportation simplex on 100 random 1-D
/// instances, agreement within 1e-9.
pub fn check_exact_1d_vs_simplex() -> CheckOutcome {
    const TOL: f64 = 1e-9;
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for seed in 0..100u64 {
        let mut r = seeded_rng(900 + seed);
        let n = r.random_range(2..=8);
        let m = r.random_range(2..=8);
        let (a, b, c) = random_cloud_instance(seed * 77 + 3, n, m, 1);
        let quantile = exact_1d(&a, &b, Metric::Euclidean).unwrap();
        let simplex = exact_small(&a, &b, &c).unwrap();
        let diff = (quantile - simplex).abs();
        worst = worst.max(diff);
        if diff > TOL {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "exact-1d",
        failures == 0,
        format!("100 instances: {failures} failures, worst absolute gap {worst:.3e}"),
    )
}

/// Fixed three-class 2-D mixture shared by the denoiser-facing checks.
fn check_mixture() -> LabeledMixture {
    let mut classes = Vec::new();
    for c in 0..3usize {
        let angle = c as f64 * 2.0 * std::f64::consts::PI / 3.0;
        let center = DVector::from_vec(vec![4.0 * angle.cos(), 4.0 * angle.sin()]);
        let spread = DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.6]);
        let comps = vec![
            GaussianComponent::new(
                &center + DVector::from_vec(vec![0.7, 0.0]),
                spread.clone(),
                0.5,
            )
            .unwrap(),
            GaussianComponent::new(
                &center + DVector::from_vec(vec![-0.7, 0.4]),
                spread,
                0.5,
            )
            .unwrap(),
        ];
        classes.push(MixtureClass::new(c, comps, 1.0 / 3.0).unwrap());
    }
    LabeledMixture::new(classes).unwrap()
}

/// The conditional log-likelihood gradient identity:
/// (ε_∅ - ε_y)/√(1-ᾱ_t) vs central finite differences of
/// log p(y | z_t), 100 random (z_t, t, y), relative error ≤ 1e-3 (with a
/// 1e-6 gradient-norm floor so flat regions do not divide by zero).
pub fn check_lemma1_identity() -> CheckOutcome {
    const TOL: f64 = 1e-3;
    let target = check_mixture();
    let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
    let den = AnalyticDenoiser::new(target, sched).unwrap();
    let mut rng = seeded_rng(1001);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for case in 0..100 {
        let t = 2 + case % 49;
        let c = case % 3;
        let z = standard_normal_point(2, &mut rng) * 2.5;
        let grad = den.posterior_grad_via_cfg(&z, t, c).unwrap();
        let fd = DVector::from_fn(2, |i, _| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            (den.noised_posterior(&zp, t).unwrap()[c].ln()
                - den.noised_posterior(&zm, t).unwrap()[c].ln())
                / (2.0 * h)
        });
        let err = (&grad - &fd).norm() / grad.norm().max(1e-6);
        worst = worst.max(err);
        if err > TOL {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "lemma1",
        failures == 0,
        format!("100 cases: {failures} failures, worst relative error {worst:.3e}"),
    )
}

/// First-order condition-shift approximation: the step-halving residual
/// ratio must sit in \[3,5\] across ||δ|| ∈ {1e-2, 5e-3, 2.5e-3} for 50
/// random cases (labels kept strictly inside the positive orthant).
pub fn check_prop1_step_halving() -> CheckOutcome {
    const RATIO_LO: f64 = 3.0;
    const RATIO_HI: f64 = 5.0;
    let target = check_mixture();
    let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
    let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
    let mut rng = seeded_rng(2002);
    let zero = DVector::zeros(2);
    let mut checked = 0usize;
    let mut failures = 0usize;
    let mut worst: Option<f64> = None;
    let mut attempts = 0usize;
    while checked < 50 && attempts < 400 {
        attempts += 1;
        let t = 2 + attempts % 49;
        let z = standard_normal_point(2, &mut rng) * 1.5;
        let y = DVector::from_fn(3, |_, _| rng.random_range(0.3..1.2));
        let dir = standard_normal_point(3, &mut rng).normalize();

        let residual = |scale: f64| -> f64 {
            let delta = &dir * scale;
            let eps0 = den.eps_pred(&z, t, Some(&y)).unwrap();
            let eps1 = den.eps_pred(&z, t, Some(&(&y + &delta))).unwrap();
            let s0 = ddim_step(&sched, &z, t, &eps0, &zero).unwrap();
            let s1 = ddim_step(&sched, &z, t, &eps1, &zero).unwrap();
            let lam = condition_shift(&den, &sched, &z, t, &y, &delta).unwrap();
            (s1 - s0 - lam).norm()
        };
        let r = [residual(1e-2), residual(5e-3), residual(2.5e-3)];
        if r[0] < 1e-12 || r[1] < 1e-13 {
            continue; // curvature too small to measure
        }
        checked += 1;
        for ratio in [r[0] / r[1], r[1] / r[2]] {
            if !(RATIO_LO..=RATIO_HI).contains(&ratio) {
                failures += 1;
            }
            let dev = (ratio - 4.0).abs();
            if worst.is_none_or(|w| dev > (w - 4.0f64).abs()) {
                worst = Some(ratio);
            }
        }
    }
    let passed = failures == 0 && checked == 50;
    CheckOutcome::new(
        "prop1",
        passed,
        format!(
            "{checked} cases: {failures} ratios outside [3,5], most extreme ratio {:.3}",
            worst.unwrap_or(f64::NAN)
        ),
    )
}

/// Quantizer ordering: the count-weighted k-means assignment plan never
/// costs more than the all-mass-to-the-mean plan (K ∈ {2,4,8}, 200 random
/// point sets, n ≤ 128, d ≤ 8); on tiny instances the exact transport
/// distances obey the same ordering.
pub fn check_prop2_quantizer_ordering() -> CheckOutcome {
    const TOL: f64 = 1e-9;
    let mut rng = seeded_rng(3003);
    let mut failures = 0usize;
    let mut worst_margin = f64::INFINITY;
    for case in 0..200u64 {
        let n = 16 + (case as usize % 8) * 14;
        let d = 1 + case as usize % 8;
        let samples: Vec<Point> = (0..n)
            .map(|_| standard_normal_point(d, &mut rng) * 1.5)
            .collect();
        let mean = mean_approx(&samples).unwrap();
        let mean_cost = assignment_plan_cost(&samples, &mean, Metric::Euclidean).unwrap();
        for k in [2usize, 4, 8] {
            let mut krng = seeded_rng(7000 + case * 3 + k as u64);
            let qt = kmeans_approx(&samples, k, 50, 10, &mut krng).unwrap();
            let km_cost = assignment_plan_cost(&samples, &qt, Metric::Euclidean).unwrap();
            worst_margin = worst_margin.min(mean_cost - km_cost);
            if km_cost > mean_cost + TOL {
                failures += 1;
            }
        }
    }
    // Exact transport ordering on tiny instances.
    let mut exact_failures = 0usize;
    for case in 0..40u64 {
        let samples: Vec<Point> = (0..8)
            .map(|_| standard_normal_point(2, &mut rng) * 2.0)
            .collect();
        let empirical = DiscreteDistribution::uniform(samples.clone()).unwrap();
        let mut krng = seeded_rng(8000 + case);
        let qt = kmeans_approx(&samples, 4, 50, 10, &mut krng).unwrap();
        let mean = mean_approx(&samples).unwrap();
        let c_km = cost_matrix(&empirical, qt.distribution(), Metric::Euclidean, false).unwrap();
        let c_mean =
            cost_matrix(&empirical, mean.distribution(), Metric::Euclidean, false).unwrap();
        let w_km = exact_small(&empirical, qt.distribution(), &c_km).unwrap();
        let w_mean = exact_small(&empirical, mean.distribution(), &c_mean).unwrap();
        if w_km > w_mean + TOL {
            exact_failures += 1;
        }
    }
    let passed = failures == 0 && exact_failures == 0;
    CheckOutcome::new(
        "prop2",
        passed,
        format!(
            "200 sets x K in {{2,4,8}}: {failures} ordering violations (smallest margin \
             {worst_margin:.3e}); 40 tiny exact instances: {exact_failures} violations"
        ),
    )
}

/// Triangle inequality under exact solves: W(S,T) ≤ W(S,U) + W(U,T) + 1e-6
/// over 100 random triples.
pub fn check_corollary1_triangle() -> CheckOutcome {
    const TOL: f64 = 1e-6;
    let mut failures = 0usize;
    let mut worst_slack = f64::INFINITY;
    for seed in 0..100u64 {
        let (s, t, _) = random_cloud_instance(4000 + seed, 5, 4, 2);
        let (u, _, _) = random_cloud_instance(5000 + seed, 3, 4, 2);
        let c_st = cost_matrix(&s, &t, Metric::Euclidean, false).unwrap();
        let c_su = cost_matrix(&s, &u, Metric::Euclidean, false).unwrap();
        let c_ut = cost_matrix(&u, &t, Metric::Euclidean, false).unwrap();
        let w_st = exact_small(&s, &t, &c_st).unwrap();
        let w_su = exact_small(&s, &u, &c_su).unwrap();
        let w_ut = exact_small(&u, &t, &c_ut).unwrap();
        let slack = w_su + w_ut - w_st;
        worst_slack = worst_slack.min(slack);
        if w_st > w_su + w_ut + TOL {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "corollary1",
        failures == 0,
        format!("100 triples: {failures} violations, smallest slack {worst_slack:.3e}"),
    )
}

/// Transport-cost gradients vs frozen-plan finite differences, through
/// both the raw row gradient and the full guidance assembly, 100 random
/// cases, relative error ≤ 1e-4.
pub fn check_ot_gradients() -> CheckOutcome {
    const TOL: f64 = 1e-4;
    let mut rng = seeded_rng(6006);
    let mut worst = 0.0f64;
    let mut failures = 0usize;
    for case in 0..100usize {
        let metric = if case % 2 == 0 {
            Metric::Euclidean
        } else {
            Metric::SqEuclidean
        };
        let cfg = DistMatchConfig {
            rho: 0.05,
            window: (1, 50),
            metric,
            epsilon: 0.1,
            iters: 5,
            project_sphere: false,
        };
        let mut mem = MemorySet::new(0);
        for _ in 0..(case % 5) {
            mem.push(standard_normal_point(2, &mut rng));
        }
        let z = standard_normal_point(2, &mut rng) * 1.5;
        let support: Vec<Point> = (0..4)
            .map(|_| standard_normal_point(2, &mut rng) * 2.0)
            .collect();
        let qt = DiscreteDistribution::uniform(support).unwrap();
        let guidance = ot_guidance(&cfg, &mem, &z, &qt).unwrap();

        // Independent route: rebuild the plan, freeze it, difference the
        // row value, and also cross-check the raw row-gradient helper.
        let row = mem.len();
        let mut pts = mem.points().to_vec();
        pts.push(z.clone());
        let surrogate = DiscreteDistribution::uniform(pts).unwrap();
        let c = cost_matrix(&surrogate, &qt, metric, false).unwrap();
        let plan = sinkhorn(&surrogate, &qt, &c, cfg.epsilon, cfg.iters, false).unwrap();
        let raw_grad = ot_grad_row(&plan, &surrogate, &qt, row, metric).unwrap();
        let value = |p: &Point| -> f64 {
            qt.points()
                .iter()
                .enumerate()
                .map(|(j, k)| plan.gamma[(row, j)] * metric.distance(p, k))
                .sum()
        };
        let h = 1e-5;
        let fd = DVector::from_fn(2, |i, _| {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            (value(&zp) - value(&zm)) / (2.0 * h)
        });
        let err_guidance = (&guidance.gradient - &fd).norm() / guidance.gradient.norm().max(1e-8);
        let err_raw = (&raw_grad - &fd).norm() / raw_grad.norm().max(1e-8);
        let err = err_guidance.max(err_raw);
        worst = worst.max(err);
        if err > TOL {
            failures += 1;
        }
    }
    CheckOutcome::new(
        "ot-grad",
        failures == 0,
        format!("100 cases: {failures} failures, worst relative error {worst:.3e}"),
    )
}
