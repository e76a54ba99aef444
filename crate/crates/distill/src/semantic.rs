//! Time-staged dynamic soft labels.
//!
//! Sampling runs through three stages as t falls from T to 1:
//!
//! - **t ≥ t1** (exploration): the label is pure noise, rescaled to the
//!   statistics of the one-hot target;
//! - **t2 < t < t1** (soft guidance): a blend
//!   `√σ_t·y + (1-√σ_t)·(β_s·y* + β_n·n)` with σ_t = (t1-t)/(t1-t2),
//!   again rescaled;
//! - **t ≤ t2** (refinement): exactly the one-hot target.
//!
//! `y*` is a fixed, randomly chosen wrong class per sample and `n` is
//! per-step isotropic Gaussian noise over the C label entries. Setting
//! `t2 = T` (with `t1 = T+1`) disables the first two stages entirely,
//! which is how the hard-label ablation is expressed.

use nalgebra::DVector;

use crate::denoiser::{AnalyticDenoiser, LabelVector};
use crate::diffusion::NoiseSchedule;
use crate::numerics::Point;
use crate::{Error, Result};

/// Stage boundaries and modulation strengths for dynamic labels, plus the
/// classifier-free guidance scale ω used alongside them.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SemanticConfig {
    /// Exploration/soft-guidance boundary (exclusive upper end of the
    /// soft window).
    pub t1: usize,
    /// Soft-guidance/refinement boundary.
    pub t2: usize,
    /// Label-noise modulation β_n.
    pub beta_n: f64,
    /// Wrong-class modulation β_s.
    pub beta_s: f64,
    /// Guidance scale ω (the combined scale is 1+ω).
    pub omega: f64,
}

impl SemanticConfig {
    /// Defaults: boundaries 45/25 on a 50-step schedule, β_n = 0.06,
    /// β_s = 0.01, combined guidance scale 1+ω = 4.
    pub fn default_for(t_steps: usize) -> Self {
        Self {
            t1: (t_steps * 9) / 10,
            t2: t_steps / 2,
            beta_n: 0.06,
            beta_s: 0.01,
            omega: 3.0,
        }
    }

    /// `t2 = T` pushes every step into the refinement stage; `t1` may then
    /// sit at T+1 so the invariant t1 > t2 still holds.
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if !(self.t2 >= 1 && self.t1 > self.t2 && self.t1 <= t_steps + 1) {
            return Err(Error::InvalidParameter {
                name: "t1/t2",
                reason: format!(
                    "need 1 <= t2 < t1 <= T+1 (T = {t_steps}), got t1 = {}, t2 = {}",
                    self.t1, self.t2
                ),
            });
        }
        for (name, v) in [("beta_n", self.beta_n), ("beta_s", self.beta_s)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be nonnegative and finite, got {v}"),
                });
            }
        }
        if !self.omega.is_finite() {
            return Err(Error::InvalidParameter {
                name: "omega",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

/// The stage a timestep belongs to. Refinement is checked first so that
/// `t2 = T` disables the other stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Exploration,
    SoftGuidance,
    Refinement,
}

pub fn stage(cfg: &SemanticConfig, t: usize) -> Stage {
    if t <= cfg.t2 {
        Stage::Refinement
    } else if t >= cfg.t1 {
        Stage::Exploration
    } else {
        Stage::SoftGuidance
    }
}

/// σ_t = (t1 - t)/(t1 - t2), defined on the open window t2 < t < t1.
pub fn sigma_t(cfg: &SemanticConfig, t: usize) -> Result<f64> {
    if t <= cfg.t2 || t >= cfg.t1 {
        return Err(Error::StepOutOfRange { t, max: cfg.t1 });
    }
    Ok((cfg.t1 - t) as f64 / (cfg.t1 - cfg.t2) as f64)
}

/// Rescale `v` to the entrywise mean and population standard deviation of
/// `reference`. A zero-variance `v` carries no direction and falls back to
/// the reference itself.
pub fn rescale_label(v: &LabelVector, reference: &LabelVector) -> Result<LabelVector> {
    if v.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: v.len(),
        });
    }
    if v.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "label vector",
            reason: "rescaling needs at least 2 entries".into(),
        });
    }
    let (mean_v, std_v) = mean_std(v);
    if std_v <= 1e-12 {
        log::debug!("zero-variance label vector; falling back to the reference");
        return Ok(reference.clone());
    }
    let (mean_r, std_r) = mean_std(reference);
    Ok(v.map(|x| (x - mean_v) / std_v * std_r + mean_r))
}

/// Entrywise mean and population standard deviation (divide by C).
pub fn mean_std(v: &LabelVector) -> (f64, f64) {
    let c = v.len() as f64;
    let mean = v.sum() / c;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c;
    (mean, var.sqrt())
}

/// The staged dynamic label for step t. `noise` must carry one entry per
/// class; it is only consumed outside the refinement stage.
pub fn dynamic_label(
    cfg: &SemanticConfig,
    t: usize,
    y: &LabelVector,
    y_star: &LabelVector,
    noise: &LabelVector,
) -> Result<LabelVector> {
    if y == y_star {
        return Err(Error::InvalidParameter {
            name: "y_star",
            reason: "the shifted class must differ from the target class".into(),
        });
    }
    if y.len() != y_star.len() || y.len() != noise.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: y_star.len().max(noise.len()),
        });
    }
    match stage(cfg, t) {
        Stage::Refinement => Ok(y.clone()),
        Stage::Exploration => rescale_label(noise, y),
        Stage::SoftGuidance => {
            let root_sigma = sigma_t(cfg, t)?.sqrt();
            let blend = y * root_sigma
                + (y_star * cfg.beta_s + noise * cfg.beta_n) * (1.0 - root_sigma);
            rescale_label(&blend, y)
        }
    }
}

/// First-order response of one deterministic reverse step to a label
/// perturbation δ: Λ_t(δ) = c_t · J δ, where J = ∂ε/∂y is evaluated by
/// central finite differences over the label entries (step 1e-4) and
/// c_t = √(1-ᾱ_{t-1}) - √ᾱ_{t-1}·√(1-ᾱ_t)/√ᾱ_t.
pub fn condition_shift(
    den: &AnalyticDenoiser,
    sched: &NoiseSchedule,
    z_t: &Point,
    t: usize,
    y: &LabelVector,
    delta: &LabelVector,
) -> Result<Point> {
    if t < 2 {
        return Err(Error::StepOutOfRange {
            t,
            max: sched.steps(),
        });
    }
    if y.len() != delta.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: delta.len(),
        });
    }
    let c_t = shift_scale(sched, t)?;
    let h = 1e-4;
    let mut out = DVector::zeros(z_t.len());
    for k in 0..y.len() {
        if delta[k] == 0.0 {
            continue;
        }
        let mut yp = y.clone();
        let mut ym = y.clone();
        yp[k] += h;
        ym[k] -= h;
        let col = (den.eps_pred(z_t, t, Some(&yp))? - den.eps_pred(z_t, t, Some(&ym))?) / (2.0 * h);
        out += col * delta[k];
    }
    Ok(out * c_t)
}

/// The ε-coefficient of a deterministic (η = 0) reverse step, which is the
/// scale factor in the condition-shift operator.
pub fn shift_scale(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    let a = sched.alpha_bar(t)?;
    let a_prev = sched.alpha_bar_prev(t)?;
    Ok((1.0 - a_prev).sqrt() - a_prev.sqrt() * (1.0 - a).sqrt() / a.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::encode_label;
    use crate::diffusion::{ddim_step, make_cosine_schedule};
    use crate::numerics::{seeded_rng, standard_normal_point};

    fn cfg() -> SemanticConfig {
        SemanticConfig {
            t1: 45,
            t2: 25,
            beta_n: 0.06,
            beta_s: 0.01,
            omega: 3.0,
        }
    }

    #[test]
    fn sigma_schedule_endpoints_and_midpoint() {
        let c = cfg();
        assert!((sigma_t(&c, 44).unwrap() - 0.05).abs() < 1e-15);
        assert!((sigma_t(&c, 35).unwrap() - 0.5).abs() < 1e-15);
        assert!((sigma_t(&c, 26).unwrap() - 0.95).abs() < 1e-15);
        assert!(sigma_t(&c, 45).is_err());
        assert!(sigma_t(&c, 25).is_err());
    }

    #[test]
    fn stage_partition_is_exhaustive_and_exclusive() {
        let c = cfg();
        for t in 1..=50 {
            let s = stage(&c, t);
            let expected = if t <= 25 {
                Stage::Refinement
            } else if t >= 45 {
                Stage::Exploration
            } else {
                Stage::SoftGuidance
            };
            assert_eq!(s, expected, "t = {t}");
        }
        // t2 = T disables the dynamic stages entirely.
        let off = SemanticConfig {
            t1: 51,
            t2: 50,
            ..cfg()
        };
        off.validate(50).unwrap();
        for t in 1..=50 {
            assert_eq!(stage(&off, t), Stage::Refinement);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate(50).is_ok());
        assert!(SemanticConfig { t1: 25, t2: 25, ..cfg() }.validate(50).is_err());
        assert!(SemanticConfig { t1: 52, t2: 50, ..cfg() }.validate(50).is_err());
        assert!(SemanticConfig { t2: 0, ..cfg() }.validate(50).is_err());
        assert!(SemanticConfig { beta_n: -0.1, ..cfg() }.validate(50).is_err());
    }

    #[test]
    fn refinement_stage_returns_target_exactly() {
        let c = cfg();
        let y = encode_label(1, 4).unwrap();
        let y_star = encode_label(2, 4).unwrap();
        let mut rng = seeded_rng(1);
        for t in 1..=25 {
            let noise = standard_normal_point(4, &mut rng);
            let out = dynamic_label(&c, t, &y, &y_star, &noise).unwrap();
            assert_eq!(out, y, "t = {t}");
        }
    }

    #[test]
    fn exploration_stage_is_rescaled_noise() {
        let c = cfg();
        let y = encode_label(0, 4).unwrap();
        let y_star = encode_label(3, 4).unwrap();
        let mut rng = seeded_rng(2);
        let noise = standard_normal_point(4, &mut rng);
        let out = dynamic_label(&c, 47, &y, &y_star, &noise).unwrap();
        assert_eq!(out, rescale_label(&noise, &y).unwrap());
        let (m, s) = mean_std(&out);
        assert!((m - 0.25).abs() < 1e-10);
        let (_, s_ref) = mean_std(&y);
        assert!((s - s_ref).abs() < 1e-10);
    }

    #[test]
    fn zero_modulation_blend_is_shrunken_one_hot() {
        // With β_n = β_s = 0 the pre-rescale blend is √σ_t·y, and rescaling
        // an affine image of y restores y itself.
        let c = SemanticConfig {
            beta_n: 0.0,
            beta_s: 0.0,
            ..cfg()
        };
        let y = encode_label(1, 4).unwrap();
        let y_star = encode_label(0, 4).unwrap();
        let noise = standard_normal_point(4, &mut seeded_rng(3));
        let t = 35;
        let root_sigma = sigma_t(&c, t).unwrap().sqrt();
        let blend = &y * root_sigma;
        let out = dynamic_label(&c, t, &y, &y_star, &noise).unwrap();
        assert_eq!(out, rescale_label(&blend, &y).unwrap());
        assert!((out - &y).norm() < 1e-12);
    }

    #[test]
    fn dynamic_label_rejects_equal_classes() {
        let c = cfg();
        let y = encode_label(1, 4).unwrap();
        let noise = standard_normal_point(4, &mut seeded_rng(4));
        assert!(dynamic_label(&c, 30, &y, &y.clone(), &noise).is_err());
    }

    #[test]
    fn rescale_fixed_point_and_statistics() {
        let y = encode_label(2, 10).unwrap();
        let out = rescale_label(&y, &y).unwrap();
        assert!((out - &y).norm() < 1e-12);

        // One-hot reference with C = 10: mean 0.1, population std 0.3.
        let mut rng = seeded_rng(6);
        let v = standard_normal_point(10, &mut rng);
        let out = rescale_label(&v, &y).unwrap();
        let (m, s) = mean_std(&out);
        assert!((m - 0.1).abs() < 1e-10, "mean {m}");
        assert!((s - 0.3).abs() < 1e-10, "std {s}");
    }

    #[test]
    fn rescale_affine_image_restores_reference_statistics() {
        let y = encode_label(0, 5).unwrap();
        let v = &y * 2.0 + DVector::from_element(5, 0.7);
        let out = rescale_label(&v, &y).unwrap();
        assert!((out - &y).norm() < 1e-12);
    }

    #[test]
    fn rescale_zero_variance_falls_back() {
        let y = encode_label(0, 4).unwrap();
        let flat = DVector::from_element(4, 0.3);
        let out = rescale_label(&flat, &y).unwrap();
        assert_eq!(out, y);
    }

    #[test]
    fn condition_shift_zero_and_linearity() {
        let target = crate::testutil::two_class_mixture();
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
        let z = DVector::from_vec(vec![0.5, -0.3]);
        let y = DVector::from_vec(vec![0.8, 0.4]);
        let t = 30;

        let zero = DVector::zeros(2);
        let l0 = condition_shift(&den, &sched, &z, t, &y, &zero).unwrap();
        assert_eq!(l0.norm(), 0.0);

        let delta = DVector::from_vec(vec![0.01, -0.004]);
        let l1 = condition_shift(&den, &sched, &z, t, &y, &delta).unwrap();
        let l2 = condition_shift(&den, &sched, &z, t, &y, &(&delta * 2.0)).unwrap();
        assert!((l2 - &l1 * 2.0).norm() < 1e-8);

        assert!(condition_shift(&den, &sched, &z, 1, &y, &delta).is_err());
    }

    #[test]
    fn condition_shift_residual_is_second_order() {
        // Step-halving: || step(y+δ) - step(y) - Λ(δ) || should shrink ~4x
        // when δ halves. The label vectors stay strictly inside the
        // positive orthant so the clamp in the label interpretation is
        // locally smooth.
        let target = crate::testutil::two_class_mixture();
        let sched = make_cosine_schedule(50, 0.008, 0.0).unwrap();
        let den = AnalyticDenoiser::new(target, sched.clone()).unwrap();
        let mut rng = seeded_rng(77);
        let zero = DVector::zeros(2);
        let mut checked = 0;
        for case in 0..30 {
            let t = 5 + (case * 7) % 44;
            let z = standard_normal_point(2, &mut rng) * 1.5;
            let y = DVector::from_fn(2, |_, _| {
                use rand::Rng;
                rng.random_range(0.3..1.2)
            });
            let dir = standard_normal_point(2, &mut rng).normalize();

            let residual = |scale: f64| -> f64 {
                let delta = &dir * scale;
                let y_shift = &y + &delta;
                let eps0 = den.eps_pred(&z, t, Some(&y)).unwrap();
                let eps1 = den.eps_pred(&z, t, Some(&y_shift)).unwrap();
                let s0 = ddim_step(&sched, &z, t, &eps0, &zero).unwrap();
                let s1 = ddim_step(&sched, &z, t, &eps1, &zero).unwrap();
                let lam = condition_shift(&den, &sched, &z, t, &y, &delta).unwrap();
                (s1 - s0 - lam).norm()
            };

            let r1 = residual(1e-2);
            let r2 = residual(5e-3);
            if r1 < 1e-12 {
                continue; // negligible curvature; ratio is noise
            }
            let ratio = r1 / r2;
            assert!(
                (3.0..=5.0).contains(&ratio),
                "case {case} t={t}: ratio {ratio} (r1={r1:.3e}, r2={r2:.3e})"
            );
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} informative cases");
    }
}
