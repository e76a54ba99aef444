//! Exact noise prediction for a noised labeled mixture.
//!
//! Because the target is a Gaussian mixture and the forward process is
//! linear-Gaussian, the population-optimal noise predictor is available in
//! closed form: each component `N(μ, Σ)` observed at step t becomes
//! `N(√ᾱ_t μ, ᾱ_t Σ + (1-ᾱ_t) I)`, and the optimal prediction is
//!
//! ```text
//! ε(z_t, t, ·) = -√(1-ᾱ_t) · ∇ log p_t(z_t | ·)
//! ```
//!
//! so no network is trained anywhere. Conditioning is a label-weight
//! vector; the null condition ∅ is the exact prior-weighted marginal.
//! [`cfg_combine`] applies the usual classifier-free extrapolation
//! `(1+ω)·ε_cond - ω·ε_uncond`.

use nalgebra::{DMatrix, DVector};

use crate::diffusion::NoiseSchedule;
use crate::numerics::{GaussianComponent, LabeledMixture, MixtureClass, Point};
use crate::{Error, Result};

/// Per-class conditioning weights. Not required to be a probability
/// vector: dynamic soft labels carry noise and may go negative.
pub type LabelVector = DVector<f64>;

/// One-hot label encoding.
pub fn encode_label(c: usize, num_classes: usize) -> Result<LabelVector> {
    if c >= num_classes {
        return Err(Error::UnknownLabel(c));
    }
    let mut v = DVector::zeros(num_classes);
    v[c] = 1.0;
    Ok(v)
}

/// How a raw label vector is read as mixture weights: clamp negatives to
/// zero and renormalize. An all-nonpositive vector falls back to uniform
/// weights (`fallback = true`) because transient label noise can dominate.
pub fn condition_weights(w: &LabelVector) -> (Vec<f64>, bool) {
    let clamped: Vec<f64> = w.iter().map(|v| v.max(0.0)).collect();
    let sum: f64 = clamped.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        (clamped.iter().map(|v| v / sum).collect(), false)
    } else {
        (vec![1.0 / w.len() as f64; w.len()], true)
    }
}

/// Exact denoiser for a mixture target under a fixed schedule.
///
/// All T noised mixtures are precomputed at construction; the struct is
/// immutable afterwards and safe to share across threads.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    target: LabeledMixture,
    sched: NoiseSchedule,
    noised: Vec<LabeledMixture>,
}

impl AnalyticDenoiser {
    pub fn new(target: LabeledMixture, sched: NoiseSchedule) -> Result<Self> {
        let mut noised = Vec::with_capacity(sched.steps());
        for t in 1..=sched.steps() {
            noised.push(noised_mixture_at(&target, &sched, t)?);
        }
        Ok(Self {
            target,
            sched,
            noised,
        })
    }

    pub fn target(&self) -> &LabeledMixture {
        &self.target
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn num_classes(&self) -> usize {
        self.target.num_classes()
    }

    fn check_condition(&self, w: Option<&LabelVector>) -> Result<Vec<f64>> {
        match w {
            Some(v) => {
                if v.len() != self.num_classes() {
                    return Err(Error::DimensionMismatch {
                        expected: self.num_classes(),
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("label vector".into()));
                }
                let (weights, fallback) = condition_weights(v);
                if fallback {
                    log::debug!("all-nonpositive label vector; using uniform condition weights");
                }
                Ok(weights)
            }
            None => Ok(self.target.priors()),
        }
    }

    /// The density of z_t under the given condition: the target mixture
    /// with every component noised to step t and class weights taken from
    /// the (clamped, renormalized) label vector, or the priors for ∅.
    pub fn noised_mixture(&self, w: Option<&LabelVector>, t: usize) -> Result<LabeledMixture> {
        self.check_step(t)?;
        let weights = self.check_condition(w)?;
        reweight(&self.noised[t - 1], &weights)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.sched.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.sched.steps(),
            });
        }
        Ok(())
    }

    /// ε(z_t, t, w): exact conditional noise prediction (∅ when `w` is
    /// `None`).
    pub fn eps_pred(&self, z_t: &Point, t: usize, w: Option<&LabelVector>) -> Result<Point> {
        self.check_step(t)?;
        let weights = self.check_condition(w)?;
        let a = self.sched.alpha_bar(t)?;
        let score = self.noised[t - 1].weighted_score(&weights, z_t)?;
        Ok(score * (-(1.0 - a).sqrt()))
    }

    /// Log-density of z_t under the conditioned noised mixture. Used by the
    /// oracle checks.
    pub fn noised_logpdf(&self, z_t: &Point, t: usize, w: Option<&LabelVector>) -> Result<f64> {
        self.check_step(t)?;
        let weights = self.check_condition(w)?;
        self.noised[t - 1].weighted_logpdf(&weights, z_t)
    }

    /// Posterior p(y | z_t) under the noised mixture at step t.
    pub fn noised_posterior(&self, z_t: &Point, t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        self.noised[t - 1].class_posterior(z_t)
    }

    /// ∇_{z_t} log p(y=c | z_t) through the noise-prediction difference:
    /// (ε(z_t,t,∅) - ε(z_t,t,c)) / √(1-ᾱ_t). Exact for this denoiser.
    pub fn posterior_grad_via_cfg(&self, z_t: &Point, t: usize, c: usize) -> Result<Point> {
        if c >= self.num_classes() {
            return Err(Error::UnknownLabel(c));
        }
        let y = encode_label(c, self.num_classes())?;
        let eps_cond = self.eps_pred(z_t, t, Some(&y))?;
        let eps_uncond = self.eps_pred(z_t, t, None)?;
        let a = self.sched.alpha_bar(t)?;
        Ok((eps_uncond - eps_cond) / (1.0 - a).sqrt())
    }
}

/// Noise one mixture component to step t: N(μ, Σ) → N(√ᾱ μ, ᾱΣ + (1-ᾱ)I).
fn noised_mixture_at(
    target: &LabeledMixture,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<LabeledMixture> {
    let a = sched.alpha_bar(t)?;
    let d = target.dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut classes = Vec::with_capacity(target.num_classes());
    for class in target.classes() {
        let mut comps = Vec::with_capacity(class.components().len());
        for g in class.components() {
            let mean = g.mean() * a.sqrt();
            let cov = g.covariance() * a + &eye * (1.0 - a);
            comps.push(GaussianComponent::new(mean, cov, g.weight())?);
        }
        classes.push(MixtureClass::new(class.label(), comps, class.prior())?);
    }
    LabeledMixture::new(classes)
}

/// Evaluate the noised mixture under explicit class weights by keeping the
/// positive-weight classes and renormalizing. Labels are re-indexed, which
/// is fine since the result is only queried through logpdf/score with no
/// label argument.
fn reweight(mix: &LabeledMixture, weights: &[f64]) -> Result<LabeledMixture> {
    let mut classes = Vec::new();
    for (class, &w) in mix.classes().iter().zip(weights) {
        if w > 0.0 {
            classes.push(MixtureClass::new(
                classes.len(),
                class.components().to_vec(),
                w,
            )?);
        }
    }
    LabeledMixture::new(classes)
}

/// Classifier-free extrapolation: (1+ω)·ε_cond - ω·ε_uncond.
pub fn cfg_combine(eps_cond: &Point, eps_uncond: &Point, omega: f64) -> Result<Point> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(Error::DimensionMismatch {
            expected: eps_cond.len(),
            got: eps_uncond.len(),
        });
    }
    Ok(eps_cond * (1.0 + omega) - eps_uncond * omega)
}
