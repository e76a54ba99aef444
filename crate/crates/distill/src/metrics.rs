//! Evaluation metrics for a surrogate dataset against its target:
//! entropic transport distance, coverage, intra-class diversity, semantic
//! alignment, and a k-NN downstream-accuracy proxy.
//!
//! Everything runs per class and aggregates as a sample-weighted mean,
//! with weights taken from each metric's own denominator (real samples for
//! coverage, surrogate samples for the rest, held-out samples for k-NN).

use serde::{Deserialize, Serialize};

use crate::numerics::{LabeledMixture, Point};
use crate::transport::{cost_matrix, sinkhorn, DiscreteDistribution, Metric};
use crate::{Error, Result};

/// Transport distance between two point sets: uniform masses, euclidean
/// cost, log-domain solve at the given ε and iteration budget.
pub fn ot_dataset_distance(
    surrogate: &DiscreteDistribution,
    target_samples: &DiscreteDistribution,
    epsilon: f64,
    iters: usize,
) -> Result<f64> {
    Ok(ot_dataset_plan(surrogate, target_samples, epsilon, iters)?.value)
}

/// As [`ot_dataset_distance`], returning the full plan (used by the plan
/// dump in `eval`).
pub fn ot_dataset_plan(
    surrogate: &DiscreteDistribution,
    target_samples: &DiscreteDistribution,
    epsilon: f64,
    iters: usize,
) -> Result<crate::transport::TransportPlan> {
    let c = cost_matrix(surrogate, target_samples, Metric::Euclidean, false)?;
    sinkhorn(surrogate, target_samples, &c, epsilon, iters, true)
}

/// Fraction of real samples whose k-NN-radius ball (radius = distance to
/// its k-th nearest other real sample) contains at least one surrogate
/// sample, strictly.
pub fn coverage(real: &[Point], surrogate: &[Point], k_nn: usize) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::EmptyInput("real samples"));
    }
    if surrogate.is_empty() {
        return Err(Error::EmptyInput("surrogate samples"));
    }
    if k_nn == 0 || k_nn >= real.len() {
        return Err(Error::InvalidParameter {
            name: "k_nn",
            reason: format!("need 1 <= k_nn < {}, got {k_nn}", real.len()),
        });
    }
    let mut covered = 0usize;
    for (i, x) in real.iter().enumerate() {
        let mut dists: Vec<f64> = real
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| (x - y).norm())
            .collect();
        dists.sort_by(f64::total_cmp);
        let radius = dists[k_nn - 1];
        if surrogate.iter().any(|s| (x - s).norm() < radius) {
            covered += 1;
        }
    }
    Ok(covered as f64 / real.len() as f64)
}

/// Mean over samples of the minimum distance to any other sample of the
/// same class.
pub fn diversity(class_samples: &[Point]) -> Result<f64> {
    if class_samples.len() < 2 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "diversity needs at least 2 samples per class".into(),
        });
    }
    let n = class_samples.len();
    let mut total = 0.0;
    for (i, x) in class_samples.iter().enumerate() {
        let min = class_samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| (x - y).norm())
            .fold(f64::INFINITY, f64::min);
        total += min;
    }
    Ok(total / n as f64)
}

/// Fraction of labeled samples whose posterior argmax under the target
/// mixture equals their assigned label.
pub fn alignment_rate<'a>(
    target: &LabeledMixture,
    labeled: impl IntoIterator<Item = (usize, &'a Point)>,
) -> Result<f64> {
    let mut aligned = 0usize;
    let mut total = 0usize;
    for (label, x) in labeled {
        let post = target.class_posterior(x)?;
        let argmax = post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        if argmax == label {
            aligned += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyInput("labeled samples"));
    }
    Ok(aligned as f64 / total as f64)
}

/// k-NN accuracy of the labeled reference set on held-out samples:
/// euclidean distance, majority vote, ties broken toward the smallest
/// label; equidistant neighbors are ordered by index.
pub fn knn_downstream(
    reference: &[(usize, Point)],
    heldout: &[(usize, Point)],
    k: usize,
) -> Result<f64> {
    if reference.is_empty() || heldout.is_empty() {
        return Err(Error::EmptyInput("knn input"));
    }
    if k == 0 || k > reference.len() {
        return Err(Error::InvalidParameter {
            name: "k",
            reason: format!("need 1 <= k <= {}, got {k}", reference.len()),
        });
    }
    let mut correct = 0usize;
    for (label, x) in heldout {
        if knn_predict(reference, x, k) == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / heldout.len() as f64)
}

/// The k-NN vote for one query point.
pub fn knn_predict(reference: &[(usize, Point)], x: &Point, k: usize) -> usize {
    let mut order: Vec<(f64, usize, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, (label, p))| ((x - p).norm(), i, *label))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = std::collections::BTreeMap::new();
    for (_, _, label) in order.iter().take(k) {
        *votes.entry(*label).or_insert(0usize) += 1;
    }
    let best = votes.values().copied().max().unwrap();
    // BTreeMap iterates labels in ascending order, so the first maximal
    // vote is the smallest label.
    votes
        .into_iter()
        .find(|(_, v)| *v == best)
        .map(|(l, _)| l)
        .unwrap()
}

/// One class's metric block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: usize,
    pub n_real: usize,
    pub n_surrogate: usize,
    pub n_heldout: usize,
    pub ot_distance: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub alignment_rate: f64,
    pub knn_accuracy: f64,
}

/// Per-class metrics plus the sample-weighted aggregate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub aggregate: AggregateMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub ot_distance: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub alignment_rate: f64,
    pub knn_accuracy: f64,
}

/// Settings for a full evaluation pass.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Entropic regularization for the metric transport solves.
    pub ot_epsilon: f64,
    pub ot_iters: usize,
    /// Neighbor count for the coverage radius.
    pub coverage_knn: usize,
    /// Vote count for the downstream proxy.
    pub knn_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ot_epsilon: 0.01,
            ot_iters: 1000,
            coverage_knn: 5,
            knn_k: 1,
        }
    }
}

/// Evaluate a surrogate set against per-class target samples and held-out
/// samples. `surrogate` and the sample slices are indexed by class label.
pub fn evaluate(
    target: &LabeledMixture,
    real_per_class: &[Vec<Point>],
    surrogate_per_class: &[Vec<Point>],
    heldout_per_class: &[Vec<Point>],
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let c = target.num_classes();
    if real_per_class.len() != c || surrogate_per_class.len() != c || heldout_per_class.len() != c
    {
        return Err(Error::Data(format!(
            "expected {c} classes of real/surrogate/heldout samples"
        )));
    }
    let reference: Vec<(usize, Point)> = surrogate_per_class
        .iter()
        .enumerate()
        .flat_map(|(label, pts)| pts.iter().map(move |p| (label, p.clone())))
        .collect();

    let mut per_class = Vec::with_capacity(c);
    for label in 0..c {
        let real = &real_per_class[label];
        let surr = &surrogate_per_class[label];
        let held = &heldout_per_class[label];
        let ot = ot_dataset_distance(
            &DiscreteDistribution::uniform(surr.clone())?,
            &DiscreteDistribution::uniform(real.clone())?,
            cfg.ot_epsilon,
            cfg.ot_iters,
        )?;
        let cov = coverage(real, surr, cfg.coverage_knn)?;
        let div = diversity(surr)?;
        let align = alignment_rate(target, surr.iter().map(|p| (label, p)))?;
        let heldout_labeled: Vec<(usize, Point)> =
            held.iter().map(|p| (label, p.clone())).collect();
        let knn = knn_downstream(&reference, &heldout_labeled, cfg.knn_k)?;
        per_class.push(ClassMetrics {
            label,
            n_real: real.len(),
            n_surrogate: surr.len(),
            n_heldout: held.len(),
            ot_distance: ot,
            coverage: cov,
            diversity: div,
            alignment_rate: align,
            knn_accuracy: knn,
        });
    }

    let weighted = |f: fn(&ClassMetrics) -> f64, w: fn(&ClassMetrics) -> usize| -> f64 {
        let total: usize = per_class.iter().map(w).sum();
        per_class
            .iter()
            .map(|m| f(m) * w(m) as f64)
            .sum::<f64>()
            / total as f64
    };
    let aggregate = AggregateMetrics {
        ot_distance: weighted(|m| m.ot_distance, |m| m.n_surrogate),
        coverage: weighted(|m| m.coverage, |m| m.n_real),
        diversity: weighted(|m| m.diversity, |m| m.n_surrogate),
        alignment_rate: weighted(|m| m.alignment_rate, |m| m.n_surrogate),
        knn_accuracy: weighted(|m| m.knn_accuracy, |m| m.n_heldout),
    };
    Ok(MetricReport {
        per_class,
        aggregate,
    })
}
