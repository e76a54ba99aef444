//! Distribution-matching guidance.
//!
//! Each finalized surrogate sample is frozen into a per-class memory set.
//! While sampling the next one, every step inside the temporal window
//! forms the surrogate distribution {frozen ∪ current clean estimate} with
//! uniform masses, solves a few entropic transport iterations against the
//! quantized class target, and descends the transport cost through the
//! current sample's row of the frozen plan. Steps outside the window
//! contribute exactly nothing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{cfg_combine, encode_label, AnalyticDenoiser, LabelVector};
use crate::diffusion::{estimate_x0, guided_step, NoiseSchedule};
use crate::numerics::{standard_normal_point, Point};
use crate::semantic::{dynamic_label, stage, SemanticConfig, Stage};
use crate::transport::{cost_matrix, ot_grad_row, sinkhorn, DiscreteDistribution, Metric};
use crate::{Error, Result};

/// Frozen surrogate samples for one class, in finalization order.
#[derive(Debug, Clone)]
pub struct MemorySet {
    label: usize,
    frozen: Vec<Point>,
}

impl MemorySet {
    pub fn new(label: usize) -> Self {
        Self {
            label,
            frozen: Vec::new(),
        }
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.frozen
    }

    /// Append-only: a finalized sample never moves again.
    pub fn push(&mut self, p: Point) {
        self.frozen.push(p);
    }
}

/// Distribution-matching hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DistMatchConfig {
    /// Base guidance strength ρ (0 disables the term).
    pub rho: f64,
    /// Inclusive window of steps where the term is active.
    pub window: (usize, usize),
    pub metric: Metric,
    /// Entropic regularization for the runtime transport solves.
    pub epsilon: f64,
    /// Iteration count for the runtime transport solves.
    pub iters: usize,
    /// Project points onto the unit sphere inside the cost.
    pub project_sphere: bool,
}

impl DistMatchConfig {
    /// Defaults: ρ = 0.05, window \[30,45\] on a 50-step schedule, euclidean
    /// metric, ε = 0.1 with 5 iterations, no projection.
    pub fn default_for(t_steps: usize) -> Self {
        Self {
            rho: 0.05,
            window: ((t_steps * 3) / 5, (t_steps * 9) / 10),
            metric: Metric::Euclidean,
            epsilon: 0.1,
            iters: 5,
            project_sphere: false,
        }
    }

    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.rho < 0.0 || !self.rho.is_finite() {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("must be nonnegative and finite, got {}", self.rho),
            });
        }
        let (lo, hi) = self.window;
        if !(1 <= lo && lo <= hi && hi <= t_steps) {
            return Err(Error::InvalidParameter {
                name: "window",
                reason: format!("need 1 <= lo <= hi <= {t_steps}, got [{lo},{hi}]"),
            });
        }
        if self.epsilon <= 0.0 || self.epsilon.is_nan() || self.iters < 1 {
            return Err(Error::InvalidParameter {
                name: "epsilon/iters",
                reason: "need positive epsilon and at least one iteration".into(),
            });
        }
        Ok(())
    }

    pub fn window_contains(&self, t: usize) -> bool {
        self.window.0 <= t && t <= self.window.1
    }
}

/// ρ_t = ρ·√(1-ᾱ_t) inside the window, 0 outside. The scale follows the
/// noise standard deviation, so guidance is strongest where the state is
/// still fluid.
pub fn rho_schedule(cfg: &DistMatchConfig, sched: &NoiseSchedule, t: usize) -> Result<f64> {
    if !cfg.window_contains(t) {
        // Out-of-range t is simply "outside the window".
        return Ok(0.0);
    }
    Ok(cfg.rho * (1.0 - sched.alpha_bar(t)?).sqrt())
}

/// The gradient of the transport cost at the new sample, plus diagnostics.
#[derive(Debug, Clone)]
pub struct OtGuidance {
    pub gradient: Point,
    /// ⟨γ, C⟩ of the runtime plan (unconverged by design).
    pub transport_value: f64,
}

/// Distribution-matching gradient for the sample currently being built:
/// surrogate = frozen ∪ {z0_est} with uniform masses, a few Sinkhorn
/// iterations against the quantized target, then the frozen-plan gradient
/// of the new sample's row. With spherical projection enabled the chain
/// rule through z/‖z‖ is applied, so the gradient stays consistent with
/// the cost actually computed.
pub fn ot_guidance(
    cfg: &DistMatchConfig,
    mem: &MemorySet,
    z0_est: &Point,
    qt: &DiscreteDistribution,
) -> Result<OtGuidance> {
    if qt.is_empty() {
        return Err(Error::EmptyInput("quantized target"));
    }
    if z0_est.len() != qt.dim() {
        return Err(Error::DimensionMismatch {
            expected: qt.dim(),
            got: z0_est.len(),
        });
    }
    let mut points = mem.points().to_vec();
    points.push(z0_est.clone());
    let row = points.len() - 1;
    let surrogate = DiscreteDistribution::uniform(points)?;
    let c = cost_matrix(&surrogate, qt, cfg.metric, cfg.project_sphere)?;
    // Early clean estimates can sit far from the target, where exp(-C/ε)
    // underflows the scaling kernel; the log-domain variant computes the
    // identical iterates there.
    let plan = match sinkhorn(&surrogate, qt, &c, cfg.epsilon, cfg.iters, false) {
        Err(Error::ScalingUnderflow) => {
            log::debug!("scaling kernel underflowed; switching to the log-domain solver");
            sinkhorn(&surrogate, qt, &c, cfg.epsilon, cfg.iters, true)?
        }
        other => other?,
    };

    let gradient = if cfg.project_sphere {
        // d(ẑ, k̂) with ẑ = z/‖z‖: chain through the projection Jacobian
        // (I - ẑẑᵀ)/‖z‖.
        let norm = z0_est.norm();
        if norm == 0.0 {
            return Err(Error::InvalidParameter {
                name: "project_sphere",
                reason: "cannot project a zero-norm point onto the unit sphere".into(),
            });
        }
        let zhat = z0_est / norm;
        let mut raw = z0_est * 0.0;
        for (j, k) in qt.points().iter().enumerate() {
            let g = plan.gamma[(row, j)];
            if g != 0.0 {
                let khat = k / k.norm();
                raw += cfg.metric.gradient(&zhat, &khat) * g;
            }
        }
        (&raw - &zhat * zhat.dot(&raw)) / norm
    } else {
        ot_grad_row(&plan, &surrogate, qt, row, cfg.metric)?
    };
    Ok(OtGuidance {
        gradient,
        transport_value: plan.value,
    })
}

/// Per-sample conditioning state: the one-hot target and the fixed wrong
/// class chosen once per trajectory (absent when the dynamic stages are
/// disabled or only one class exists).
#[derive(Debug, Clone)]
pub struct LabelState {
    pub y: LabelVector,
    pub y_star: Option<LabelVector>,
}

impl LabelState {
    /// Choose y* uniformly among the other classes.
    pub fn choose(
        label: usize,
        num_classes: usize,
        needs_y_star: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let y = encode_label(label, num_classes)?;
        let y_star = if needs_y_star {
            if num_classes < 2 {
                return Err(Error::InvalidParameter {
                    name: "classes",
                    reason: "dynamic labels need at least 2 classes (set t2 = steps to disable)"
                        .into(),
                });
            }
            let pick = rng.random_range(0..num_classes - 1);
            let other = if pick >= label { pick + 1 } else { pick };
            Some(encode_label(other, num_classes)?)
        } else {
            None
        };
        Ok(Self { y, y_star })
    }
}

/// Diagnostics for one guided step.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub t: usize,
    pub rho_t: f64,
    /// Transport value of the runtime plan, when the window was active.
    pub ot_value: Option<f64>,
    pub grad_norm: f64,
    /// The label interpretation fell back to uniform weights this step.
    pub label_fallback: bool,
}

/// One fully guided reverse step: dynamic label → classifier-free ε̂ →
/// clean estimate → transport gradient (inside the window) → guided DDIM
/// update. Deterministic given the stream.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_step(
    den: &AnalyticDenoiser,
    sched: &NoiseSchedule,
    sem_cfg: &SemanticConfig,
    dm_cfg: &DistMatchConfig,
    mem: &MemorySet,
    qt: Option<&DiscreteDistribution>,
    z_t: &Point,
    t: usize,
    labels: &LabelState,
    rng: &mut ChaCha8Rng,
) -> Result<(Point, StepDiagnostics)> {
    let num_classes = den.num_classes();
    // The label noise draw happens only in stages that use it, so disabled
    // stages leave the stream untouched.
    let y_t = match stage(sem_cfg, t) {
        Stage::Refinement => labels.y.clone(),
        _ => {
            let noise = standard_normal_point(num_classes, rng);
            let y_star = labels.y_star.as_ref().ok_or(Error::InvalidParameter {
                name: "y_star",
                reason: "dynamic stages need a wrong-class label".into(),
            })?;
            dynamic_label(sem_cfg, t, &labels.y, y_star, &noise)?
        }
    };
    let label_fallback = crate::denoiser::condition_weights(&y_t).1;

    let eps_cond = den.eps_pred(z_t, t, Some(&y_t))?;
    let eps_uncond = den.eps_pred(z_t, t, None)?;
    let eps_hat = cfg_combine(&eps_cond, &eps_uncond, sem_cfg.omega)?;

    let rho_t = rho_schedule(dm_cfg, sched, t)?;
    let (grad, ot_value) = if rho_t > 0.0 {
        let qt = qt.ok_or(Error::EmptyInput("quantized target for active window"))?;
        let z0 = estimate_x0(sched, z_t, t, &eps_hat)?;
        let g = ot_guidance(dm_cfg, mem, &z0, qt)?;
        (g.gradient, Some(g.transport_value))
    } else {
        (z_t * 0.0, None)
    };

    let noise = if sched.eta() > 0.0 && t >= 2 {
        standard_normal_point(z_t.len(), rng)
    } else {
        z_t * 0.0
    };
    let next = guided_step(sched, z_t, t, &eps_hat, &noise, &grad, rho_t)?;
    let diag = StepDiagnostics {
        t,
        rho_t,
        ot_value,
        grad_norm: grad.norm(),
        label_fallback,
    };
    Ok((next, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{ddim_step, make_cosine_schedule};
    use crate::numerics::seeded_rng;
    use crate::testutil::two_class_mixture;
    use nalgebra::DVector;

    fn dm_cfg() -> DistMatchConfig {
        DistMatchConfig {
            rho: 0.05,
            window: (30, 45),
            metric: Metric::Euclidean,
            epsilon: 0.1,
            iters: 5,
            project_sphere: false,
        }
    }

    fn sem_cfg() -> SemanticConfig {
        SemanticConfig {
            t1: 45,
            t2: 25,
            beta_n: 0.06,
            beta_s: 0.01,
            omega: 3.0,
        }
    }

    #[test]
    fn rho_schedule_gating() {
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let cfg = dm_cfg();
        assert_eq!(rho_schedule(&cfg, &sched, 29).unwrap(), 0.0);
        assert_eq!(rho_schedule(&cfg, &sched, 46).unwrap(), 0.0);
        let zero_rho = DistMatchConfig { rho: 0.0, ..cfg };
        for t in 1..=50 {
            assert_eq!(rho_schedule(&zero_rho, &sched, t).unwrap(), 0.0);
        }
        // Monotone in the noise level inside the window.
        let mut prev = 0.0;
        for t in 30..=45 {
            let r = rho_schedule(&cfg, &sched, t).unwrap();
            assert!(r > prev, "t = {t}");
            prev = r;
        }
    }

    #[test]
    fn ot_guidance_single_support_point() {
        // Empty memory, one support atom, squared metric: the whole unit
        // mass couples to it and the gradient is 2(z - k).
        let cfg = DistMatchConfig {
            metric: Metric::SqEuclidean,
            ..dm_cfg()
        };
        let mem = MemorySet::new(0);
        let z = DVector::from_vec(vec![1.0, -0.5]);
        let k = DVector::from_vec(vec![0.2, 0.3]);
        let qt = DiscreteDistribution::uniform(vec![k.clone()]).unwrap();
        let g = ot_guidance(&cfg, &mem, &z, &qt).unwrap();
        assert!((&g.gradient - (&z - &k) * 2.0).norm() < 1e-12);

        // Coincident point under the euclidean metric: zero gradient.
        let cfg_e = dm_cfg();
        let qt2 = DiscreteDistribution::uniform(vec![z.clone()]).unwrap();
        let g2 = ot_guidance(&cfg_e, &mem, &z, &qt2).unwrap();
        assert_eq!(g2.gradient.norm(), 0.0);
    }

    #[test]
    fn ot_guidance_matches_finite_differences() {
        let mut rng = seeded_rng(12);
        for case in 0..100 {
            let metric = if case % 2 == 0 {
                Metric::Euclidean
            } else {
                Metric::SqEuclidean
            };
            let cfg = DistMatchConfig {
                metric,
                ..dm_cfg()
            };
            let mut mem = MemorySet::new(0);
            for _ in 0..(case % 4) {
                mem.push(crate::numerics::standard_normal_point(2, &mut rng));
            }
            let z = crate::numerics::standard_normal_point(2, &mut rng) * 1.5;
            let support: Vec<crate::numerics::Point> = (0..3)
                .map(|_| crate::numerics::standard_normal_point(2, &mut rng) * 2.0)
                .collect();
            let qt = DiscreteDistribution::uniform(support).unwrap();
            let g = ot_guidance(&cfg, &mem, &z, &qt).unwrap();

            // Frozen-plan value as a function of the new sample only.
            let row = mem.len();
            let mut pts = mem.points().to_vec();
            pts.push(z.clone());
            let surrogate = DiscreteDistribution::uniform(pts).unwrap();
            let c = cost_matrix(&surrogate, &qt, metric, false).unwrap();
            let plan = sinkhorn(&surrogate, &qt, &c, cfg.epsilon, cfg.iters, false).unwrap();
            let value = |p: &crate::numerics::Point| -> f64 {
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
            let err = (&g.gradient - &fd).norm() / g.gradient.norm().max(1e-8);
            assert!(err < 1e-4, "case {case}: relative error {err}");
        }
    }

    #[test]
    fn ot_guidance_descends_the_frozen_value() {
        // An infinitesimal move along -gradient strictly decreases the
        // frozen-plan transport value.
        let mut rng = seeded_rng(13);
        let cfg = dm_cfg();
        for case in 0..100 {
            let mut mem = MemorySet::new(0);
            for _ in 0..(case % 3) {
                mem.push(crate::numerics::standard_normal_point(2, &mut rng));
            }
            let z = crate::numerics::standard_normal_point(2, &mut rng) * 2.0;
            let support: Vec<crate::numerics::Point> = (0..4)
                .map(|_| crate::numerics::standard_normal_point(2, &mut rng) * 2.0)
                .collect();
            let qt = DiscreteDistribution::uniform(support).unwrap();
            let g = ot_guidance(&cfg, &mem, &z, &qt).unwrap();
            if g.gradient.norm() < 1e-10 {
                continue;
            }

            let row = mem.len();
            let mut pts = mem.points().to_vec();
            pts.push(z.clone());
            let surrogate = DiscreteDistribution::uniform(pts).unwrap();
            let c = cost_matrix(&surrogate, &qt, cfg.metric, false).unwrap();
            let plan = sinkhorn(&surrogate, &qt, &c, cfg.epsilon, cfg.iters, false).unwrap();
            let value = |p: &crate::numerics::Point| -> f64 {
                qt.points()
                    .iter()
                    .enumerate()
                    .map(|(j, k)| plan.gamma[(row, j)] * cfg.metric.distance(p, k))
                    .sum()
            };
            let h = 1e-6;
            let moved = &z - &g.gradient * (h / g.gradient.norm());
            assert!(
                value(&moved) < value(&z),
                "case {case}: no descent along -gradient"
            );
        }
    }

    #[test]
    fn projected_guidance_matches_projected_finite_differences() {
        let cfg = DistMatchConfig {
            project_sphere: true,
            ..dm_cfg()
        };
        let mut rng = seeded_rng(14);
        for case in 0..30 {
            let mem = MemorySet::new(0);
            let z = crate::numerics::standard_normal_point(3, &mut rng) * 2.0;
            let support: Vec<crate::numerics::Point> = (0..3)
                .map(|_| crate::numerics::standard_normal_point(3, &mut rng) * 2.0)
                .collect();
            let qt = DiscreteDistribution::uniform(support).unwrap();
            let g = ot_guidance(&cfg, &mem, &z, &qt).unwrap();

            let mut pts = mem.points().to_vec();
            pts.push(z.clone());
            let surrogate = DiscreteDistribution::uniform(pts).unwrap();
            let c = cost_matrix(&surrogate, &qt, cfg.metric, true).unwrap();
            let plan = sinkhorn(&surrogate, &qt, &c, cfg.epsilon, cfg.iters, false).unwrap();
            let value = |p: &crate::numerics::Point| -> f64 {
                let ph = p / p.norm();
                qt.points()
                    .iter()
                    .enumerate()
                    .map(|(j, k)| plan.gamma[(0, j)] * cfg.metric.distance(&ph, &(k / k.norm())))
                    .sum()
            };
            let h = 1e-6;
            let fd = DVector::from_fn(3, |i, _| {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[i] += h;
                zm[i] -= h;
                (value(&zp) - value(&zm)) / (2.0 * h)
            });
            let err = (&g.gradient - &fd).norm() / g.gradient.norm().max(1e-8);
            assert!(err < 1e-3, "case {case}: relative error {err}");
        }
    }

    #[test]
    fn guided_step_collapses_without_guidance() {
        // rho = 0, zero modulation, refinement everywhere: the guided step
        // equals a plain conditional classifier-free DDIM step.
        let target = two_class_mixture();
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
        let sem = SemanticConfig {
            t1: 51,
            t2: 50,
            beta_n: 0.0,
            beta_s: 0.0,
            omega: 3.0,
        };
        let dm = DistMatchConfig { rho: 0.0, ..dm_cfg() };
        let mem = MemorySet::new(0);
        let mut rng = seeded_rng(15);
        let z = crate::numerics::standard_normal_point(2, &mut rng);
        let labels = LabelState {
            y: encode_label(0, 2).unwrap(),
            y_star: None,
        };
        for t in [50, 37, 12, 1] {
            let mut r1 = seeded_rng(16);
            let (out, diag) = guided_sample_step(
                &den, &sched, &sem, &dm, &mem, None, &z, t, &labels, &mut r1,
            )
            .unwrap();
            let eps_c = den.eps_pred(&z, t, Some(&labels.y)).unwrap();
            let eps_u = den.eps_pred(&z, t, None).unwrap();
            let eps_hat = cfg_combine(&eps_c, &eps_u, 3.0).unwrap();
            let zero = DVector::zeros(2);
            let plain = ddim_step(&sched, &z, t, &eps_hat, &zero).unwrap();
            assert_eq!(out, plain, "t = {t}");
            assert_eq!(diag.rho_t, 0.0);
            assert!(diag.ot_value.is_none());
        }
    }

    #[test]
    fn window_gating_is_bitwise() {
        // Outside the window the full config must match the rho = 0 config
        // bit for bit.
        let target = two_class_mixture();
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
        let sem = sem_cfg();
        let dm_on = dm_cfg();
        let dm_off = DistMatchConfig { rho: 0.0, ..dm_cfg() };
        let qt = DiscreteDistribution::uniform(vec![
            DVector::from_vec(vec![-3.0, 0.0]),
            DVector::from_vec(vec![-3.0, 2.0]),
        ])
        .unwrap();
        let mem = MemorySet::new(0);
        let z = DVector::from_vec(vec![0.7, -1.1]);
        for t in [1, 10, 25, 29, 46, 50] {
            let labels = LabelState::choose(0, 2, true, &mut seeded_rng(17)).unwrap();
            let mut r1 = seeded_rng(18);
            let mut r2 = seeded_rng(18);
            let (a, _) = guided_sample_step(
                &den, &sched, &sem, &dm_on, &mem, Some(&qt), &z, t, &labels, &mut r1,
            )
            .unwrap();
            let (b, _) = guided_sample_step(
                &den, &sched, &sem, &dm_off, &mem, Some(&qt), &z, t, &labels, &mut r2,
            )
            .unwrap();
            assert_eq!(a[0].to_bits(), b[0].to_bits(), "t = {t}");
            assert_eq!(a[1].to_bits(), b[1].to_bits(), "t = {t}");
        }
    }

    #[test]
    fn full_step_is_reproducible_under_fixed_seed() {
        // Three classes: with only two, rescaling collapses every label
        // vector to a one-hot and the stream draw could not show up in the
        // output at all.
        let target = crate::testutil::three_class_mixture();
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
        let sem = sem_cfg();
        let dm = dm_cfg();
        let qt = DiscreteDistribution::uniform(vec![
            DVector::from_vec(vec![4.7, 0.3]),
            DVector::from_vec(vec![5.5, -0.4]),
        ])
        .unwrap();
        let mut mem = MemorySet::new(0);
        mem.push(DVector::from_vec(vec![5.2, 0.4]));
        let z = DVector::from_vec(vec![0.3, 0.9]);
        let labels = LabelState::choose(0, 3, true, &mut seeded_rng(19)).unwrap();
        let run = |seed: u64| {
            let mut rng = seeded_rng(seed);
            guided_sample_step(
                &den, &sched, &sem, &dm, &mem, Some(&qt), &z, 40, &labels, &mut rng,
            )
            .unwrap()
            .0
        };
        let a = run(7);
        let b = run(7);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
        let c = run(8);
        assert_ne!(a[0].to_bits(), c[0].to_bits());
    }

    #[test]
    fn greedy_memory_growth_shrinks_exact_transport_cost() {
        // Statistical invariant of the greedy loop: as finalized samples
        // accumulate, the exact transport cost between the uniform memory
        // set and the quantized target is non-increasing for at least 80%
        // of the growth steps, over seeded toy runs.
        //
        // The toy stays in the continuous regime (overlapping modes,
        // k-means atoms from samples), where positional improvement
        // dominates. With well-separated point atoms the bound is
        // unattainable even for an oracle: matching uniform 1/n masses
        // against fixed weighted atoms forces W(n) up-steps at integer
        // reallocation points (simulated oracle-greedy tops out near 73%).
        use crate::pipeline::{
            distill_class, generate_class_samples, quantize_class, DistillConfig,
        };
        use crate::transport::exact_small;

        let target = crate::testutil::three_class_mixture();
        let mut improving = 0usize;
        let mut total = 0usize;
        for seed in 0..8u64 {
            let mut cfg = DistillConfig::default_with(3, 8, seed);
            cfg.dist_match.rho = 0.5;
            cfg.k = 5; // memory (<= 8) x support (5) stays within the exact solver
            let sched = cfg.schedule().unwrap();
            let den = crate::denoiser::AnalyticDenoiser::new(target.clone(), sched).unwrap();
            for class in 0..3 {
                let samples = generate_class_samples(&target, class, 150, seed).unwrap();
                let qt = quantize_class(&cfg, class, &samples).unwrap();
                let (points, _) = distill_class(&cfg, &den, class, &samples).unwrap();
                let mut prev = f64::INFINITY;
                for n in 1..=points.len() {
                    let mem = DiscreteDistribution::uniform(points[..n].to_vec()).unwrap();
                    let c = cost_matrix(&mem, qt.distribution(), Metric::Euclidean, false)
                        .unwrap();
                    let w = exact_small(&mem, qt.distribution(), &c).unwrap();
                    if n > 1 {
                        total += 1;
                        if w <= prev + 1e-12 {
                            improving += 1;
                        }
                    }
                    prev = w;
                }
            }
        }
        let rate = improving as f64 / total as f64;
        assert!(
            rate >= 0.8,
            "transport cost non-increasing in only {improving}/{total} growth steps ({rate:.2})"
        );
    }

    #[test]
    fn config_validation() {
        let sched_steps = 50;
        assert!(dm_cfg().validate(sched_steps).is_ok());
        assert!(DistMatchConfig { rho: -0.1, ..dm_cfg() }.validate(sched_steps).is_err());
        assert!(DistMatchConfig { window: (0, 45), ..dm_cfg() }
            .validate(sched_steps)
            .is_err());
        assert!(DistMatchConfig { window: (30, 51), ..dm_cfg() }
            .validate(sched_steps)
            .is_err());
        assert!(DistMatchConfig { epsilon: 0.0, ..dm_cfg() }
            .validate(sched_steps)
            .is_err());
    }
}
