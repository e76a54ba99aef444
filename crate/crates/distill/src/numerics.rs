//! Gaussian-mixture numerics: densities, score functions, class posteriors,
//! and the seeded random-stream contract.
//!
//! Everything here is exact closed-form arithmetic over a labeled mixture
//! of multivariate Gaussians. Covariances are validated and Cholesky-factored
//! once at construction; all evaluation paths reuse the factor. All
//! operations are pure, so values and mixtures can be shared freely across
//! threads.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// A sample in data space. At desk scale the sampler's latent space is the
/// data space itself, so one vector type serves both roles.
pub type Point = DVector<f64>;

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

const SYMMETRY_TOL: f64 = 1e-12;
const MIN_EIGENVALUE: f64 = 1e-10;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Numerically stable log(Σ exp(v_i)). Returns -∞ on an empty slice.
pub fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

fn check_finite(x: &Point, what: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// One weighted Gaussian component of a class-conditional mixture.
///
/// The covariance must be symmetric (to 1e-12) with minimum eigenvalue
/// ≥ 1e-10; degenerate inputs are rejected rather than regularized.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: Point,
    covariance: DMatrix<f64>,
    weight: f64,
    chol_l: DMatrix<f64>,
    log_det: f64,
}

impl GaussianComponent {
    pub fn new(mean: Point, covariance: DMatrix<f64>, weight: f64) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::EmptyInput("component mean"));
        }
        check_finite(&mean, "component mean")?;
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows(),
            });
        }
        if covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance".into()));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > SYMMETRY_TOL {
            return Err(Error::DegenerateCovariance(format!(
                "asymmetry {asym:.3e} exceeds {SYMMETRY_TOL:.0e}"
            )));
        }
        let min_eig = covariance
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < MIN_EIGENVALUE {
            return Err(Error::DegenerateCovariance(format!(
                "minimum eigenvalue {min_eig:.3e} below {MIN_EIGENVALUE:.0e}"
            )));
        }
        if weight <= 0.0 || !weight.is_finite() {
            return Err(Error::InvalidParameter {
                name: "weight",
                reason: format!("must be positive and finite, got {weight}"),
            });
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("Cholesky factorization failed".into()))?;
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean,
            covariance,
            weight,
            chol_l,
            log_det,
        })
    }

    /// Isotropic shorthand N(mean, var·I).
    pub fn isotropic(mean: Point, var: f64, weight: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var, weight)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Point {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// log N(x; μ, Σ) via the cached Cholesky factor.
    pub fn logpdf(&self, x: &Point) -> f64 {
        let d = self.dim() as f64;
        let r = x - &self.mean;
        let w = self.chol_l.solve_lower_triangular(&r).expect("L invertible");
        -0.5 * (d * LN_2PI + self.log_det + w.norm_squared())
    }

    /// ∇_x log N(x; μ, Σ) = Σ⁻¹(μ − x).
    pub fn score(&self, x: &Point) -> Point {
        let r = &self.mean - x;
        let w = self.chol_l.solve_lower_triangular(&r).expect("L invertible");
        self.chol_l
            .transpose()
            .solve_upper_triangular(&w)
            .expect("Lᵀ invertible")
    }

    /// Draw μ + L·ε with ε standard normal.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        let eps = standard_normal_point(self.dim(), rng);
        &self.mean + &self.chol_l * eps
    }
}

/// One labeled class: a normalized component mixture plus a class prior.
#[derive(Debug, Clone)]
pub struct MixtureClass {
    label: usize,
    components: Vec<GaussianComponent>,
    prior: f64,
}

impl MixtureClass {
    pub fn new(label: usize, components: Vec<GaussianComponent>, prior: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("class components"));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: components.iter().find(|c| c.dim() != d).unwrap().dim(),
            });
        }
        let wsum: f64 = components.iter().map(|c| c.weight()).sum();
        if (wsum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::NotNormalized(wsum));
        }
        if prior <= 0.0 || !prior.is_finite() {
            return Err(Error::InvalidParameter {
                name: "prior",
                reason: format!("must be positive and finite, got {prior}"),
            });
        }
        Ok(Self {
            label,
            components,
            prior,
        })
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn prior(&self) -> f64 {
        self.prior
    }

    /// Prior-weighted mean of the class-conditional distribution.
    pub fn mean(&self) -> Point {
        let mut m = DVector::zeros(self.components[0].dim());
        for c in &self.components {
            m += c.mean() * c.weight();
        }
        m
    }
}

/// A per-class Gaussian-mixture target distribution: the ground-truth data
/// generator and the analytic score oracle behind the denoiser.
///
/// Class labels are required to be exactly `0..C` in order, which keeps
/// label vectors, posteriors, and dataset files index-aligned.
#[derive(Debug, Clone)]
pub struct LabeledMixture {
    classes: Vec<MixtureClass>,
    dim: usize,
}

impl LabeledMixture {
    pub fn new(classes: Vec<MixtureClass>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::EmptyInput("mixture classes"));
        }
        let dim = classes[0].components()[0].dim();
        for (i, class) in classes.iter().enumerate() {
            if class.label() != i {
                return Err(Error::InvalidParameter {
                    name: "label",
                    reason: format!("class labels must be 0..C in order, got {} at {i}", class.label()),
                });
            }
            if class.components()[0].dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: class.components()[0].dim(),
                });
            }
        }
        let psum: f64 = classes.iter().map(|c| c.prior()).sum();
        if (psum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::NotNormalized(psum));
        }
        Ok(Self { classes, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[MixtureClass] {
        &self.classes
    }

    pub fn class(&self, label: usize) -> Result<&MixtureClass> {
        self.classes.get(label).ok_or(Error::UnknownLabel(label))
    }

    pub fn priors(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.prior()).collect()
    }

    fn check_point(&self, x: &Point) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// log p(x | label), or the log prior-weighted marginal when `label` is
    /// absent.
    pub fn logpdf(&self, label: Option<usize>, x: &Point) -> Result<f64> {
        self.check_point(x)?;
        match label {
            Some(c) => {
                let class = self.class(c)?;
                let terms: Vec<f64> = class
                    .components()
                    .iter()
                    .map(|g| g.weight().ln() + g.logpdf(x))
                    .collect();
                Ok(logsumexp(&terms))
            }
            None => {
                let w = self.priors();
                self.weighted_logpdf(&w, x)
            }
        }
    }

    /// ∇_x log p(x | label) (or of the marginal): the responsibility-weighted
    /// sum Σ_k r_k(x) Σ_k⁻¹(μ_k − x).
    pub fn score(&self, label: Option<usize>, x: &Point) -> Result<Point> {
        self.check_point(x)?;
        match label {
            Some(c) => {
                let class = self.class(c)?;
                let mut weights = vec![0.0; self.num_classes()];
                weights[class.label()] = 1.0;
                self.weighted_score(&weights, x)
            }
            None => {
                let w = self.priors();
                self.weighted_score(&w, x)
            }
        }
    }

    /// log Σ_c w_c p(x|c) for an arbitrary nonnegative class-weight vector.
    pub fn weighted_logpdf(&self, class_weights: &[f64], x: &Point) -> Result<f64> {
        self.check_point(x)?;
        let terms = self.flat_log_terms(class_weights, x)?;
        Ok(logsumexp(&terms))
    }

    /// Score of the reweighted mixture Σ_c w_c p(x|c).
    pub fn weighted_score(&self, class_weights: &[f64], x: &Point) -> Result<Point> {
        self.check_point(x)?;
        let terms = self.flat_log_terms(class_weights, x)?;
        let lse = logsumexp(&terms);
        let mut out = DVector::zeros(self.dim);
        let mut idx = 0;
        for (c, class) in self.classes.iter().enumerate() {
            if class_weights[c] <= 0.0 {
                continue;
            }
            for g in class.components() {
                let r = (terms[idx] - lse).exp();
                if r > 0.0 {
                    out += g.score(x) * r;
                }
                idx += 1;
            }
        }
        Ok(out)
    }

    /// Flattened log(w_c · π_ck · N_ck(x)) over active classes.
    fn flat_log_terms(&self, class_weights: &[f64], x: &Point) -> Result<Vec<f64>> {
        if class_weights.len() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: class_weights.len(),
            });
        }
        if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter {
                name: "class_weights",
                reason: "must be nonnegative and finite".into(),
            });
        }
        let mut terms = Vec::new();
        for (c, class) in self.classes.iter().enumerate() {
            if class_weights[c] <= 0.0 {
                continue;
            }
            let lw = class_weights[c].ln();
            for g in class.components() {
                terms.push(lw + g.weight().ln() + g.logpdf(x));
            }
        }
        if terms.is_empty() {
            return Err(Error::InvalidParameter {
                name: "class_weights",
                reason: "all weights are zero".into(),
            });
        }
        Ok(terms)
    }

    /// p(y|x) ∝ prior_y · p(x|y), normalized over classes.
    pub fn class_posterior(&self, x: &Point) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let logs: Vec<f64> = self
            .classes
            .iter()
            .map(|class| {
                let terms: Vec<f64> = class
                    .components()
                    .iter()
                    .map(|g| g.weight().ln() + g.logpdf(x))
                    .collect();
                class.prior().ln() + logsumexp(&terms)
            })
            .collect();
        let lse = logsumexp(&logs);
        Ok(logs.iter().map(|l| (l - lse).exp()).collect())
    }

    /// Draw one sample from class `label`.
    pub fn sample_class(&self, label: usize, rng: &mut ChaCha8Rng) -> Result<Point> {
        let class = self.class(label)?;
        // Component choice by cumulative weight.
        let u: f64 = rand::Rng::random(rng);
        let mut acc = 0.0;
        for g in class.components() {
            acc += g.weight();
            if u < acc {
                return Ok(g.sample(rng));
            }
        }
        Ok(class.components().last().unwrap().sample(rng))
    }
}

/// Deterministic random stream: same seed ⇒ bit-identical draws.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream for (seed, domain, index). Streams for
/// distinct tuples are structurally decoupled, which is what makes class
/// runs order-independent.
pub fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ domain) ^ index);
    ChaCha8Rng::seed_from_u64(s)
}

/// A d-dimensional standard normal draw.
pub fn standard_normal_point(d: usize, rng: &mut ChaCha8Rng) -> Point {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}
