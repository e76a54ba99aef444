//! Discrete approximation of a class-conditional sample set: support
//! points plus mass coefficients chosen to stand in for the full point
//! cloud during transport computations.
//!
//! Three constructions, matching the ablation arms: Lloyd k-means with
//! k-means++ seeding and count-proportional masses, the single-point mean
//! baseline (the K = 1 special case), and density-based random sampling
//! with density-proportional masses.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Point;
use crate::transport::{DiscreteDistribution, Metric};
use crate::{Error, Result};

/// A quantized stand-in for one class's sample set.
#[derive(Debug, Clone)]
pub struct QuantizedTarget {
    dist: DiscreteDistribution,
    /// Cluster sizes behind each support point (empty for density
    /// sampling, whose masses are not count-based).
    counts: Vec<usize>,
    /// For count-based quantizers: the cluster index of every input
    /// sample, in input order. `None` for density sampling.
    assignment: Option<Vec<usize>>,
    /// Final within-cluster sum of squared distances.
    inertia: f64,
    n_samples: usize,
}

impl QuantizedTarget {
    pub fn distribution(&self) -> &DiscreteDistribution {
        &self.dist
    }

    pub fn support(&self) -> &[Point] {
        self.dist.points()
    }

    pub fn masses(&self) -> &[f64] {
        self.dist.masses()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn k(&self) -> usize {
        self.dist.len()
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn assignment(&self) -> Option<&[usize]> {
        self.assignment.as_deref()
    }
}

fn check_samples(samples: &[Point]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("quantization samples"));
    }
    let d = samples[0].len();
    for s in samples {
        if s.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantization sample".into()));
        }
    }
    Ok(d)
}

fn count_distinct(samples: &[Point]) -> usize {
    let mut distinct: Vec<&Point> = Vec::new();
    for s in samples {
        if !distinct.contains(&s) {
            distinct.push(s);
        }
    }
    distinct.len()
}

fn nearest(centroids: &[Point], x: &Point) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d2 = (x - c).norm_squared();
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    best
}

fn mean_of(samples: &[Point], idxs: impl Iterator<Item = usize>, d: usize) -> Point {
    let mut sum = Point::zeros(d);
    let mut n = 0usize;
    for i in idxs {
        sum += &samples[i];
        n += 1;
    }
    sum / n as f64
}

/// k-means++ seeding: first centroid uniform, then distance-squared
/// weighted.
fn kmeans_pp_seed(samples: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(samples[rng.random_range(0..samples.len())].clone());
    while centroids.len() < k {
        let d2: Vec<f64> = samples.iter().map(|x| nearest(&centroids, x).1).collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // All remaining points coincide with a centroid; K exceeds the
            // distinct-point count, which the caller has already ruled out.
            centroids.push(samples[rng.random_range(0..samples.len())].clone());
            continue;
        }
        let mut u: f64 = rng.random::<f64>() * total;
        let mut chosen = samples.len() - 1;
        for (i, w) in d2.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                chosen = i;
                break;
            }
        }
        centroids.push(samples[chosen].clone());
    }
    centroids
}

/// Lloyd iterations from a given seeding; empty clusters are reseeded to
/// the point farthest from its current centroid.
fn lloyd(
    samples: &[Point],
    mut centroids: Vec<Point>,
    max_iter: usize,
) -> (Vec<Point>, Vec<usize>, f64) {
    let k = centroids.len();
    let d = samples[0].len();
    let mut assignment = vec![0usize; samples.len()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, x) in samples.iter().enumerate() {
            let (j, _) = nearest(&centroids, x);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        for j in 0..k {
            let members = assignment.iter().filter(|&&a| a == j).count();
            if members == 0 {
                // Reseed to the sample farthest from its assigned centroid.
                let far = (0..samples.len())
                    .max_by(|&p, &q| {
                        let dp = (&samples[p] - &centroids[assignment[p]]).norm_squared();
                        let dq = (&samples[q] - &centroids[assignment[q]]).norm_squared();
                        dp.total_cmp(&dq)
                    })
                    .unwrap();
                centroids[j] = samples[far].clone();
                assignment[far] = j;
                changed = true;
            } else {
                centroids[j] = mean_of(
                    samples,
                    assignment
                        .iter()
                        .enumerate()
                        .filter(|(_, &a)| a == j)
                        .map(|(i, _)| i),
                    d,
                );
            }
        }
        if !changed {
            break;
        }
    }
    for (i, x) in samples.iter().enumerate() {
        assignment[i] = nearest(&centroids, x).0;
    }
    let inertia = samples
        .iter()
        .zip(&assignment)
        .map(|(x, &j)| (x - &centroids[j]).norm_squared())
        .sum();
    (centroids, assignment, inertia)
}

/// Best-of-`n_init` Lloyd k-means with k-means++ seeding. Masses are the
/// exact cluster-count fractions.
pub fn kmeans_approx(
    samples: &[Point],
    k: usize,
    max_iter: usize,
    n_init: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QuantizedTarget> {
    check_samples(samples)?;
    if max_iter < 1 || n_init < 1 {
        return Err(Error::InvalidParameter {
            name: "max_iter/n_init",
            reason: "need at least one iteration and one restart".into(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidParameter {
            name: "K",
            reason: "need at least one support point".into(),
        });
    }
    if k > count_distinct(samples) {
        return Err(Error::InvalidParameter {
            name: "K",
            reason: format!(
                "{k} clusters exceed the {} distinct samples",
                count_distinct(samples)
            ),
        });
    }
    let mut best: Option<(Vec<Point>, Vec<usize>, f64)> = None;
    for _ in 0..n_init {
        let seeds = kmeans_pp_seed(samples, k, rng);
        let run = lloyd(samples, seeds, max_iter);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignment, inertia) = best.unwrap();
    let mut counts = vec![0usize; k];
    for &a in &assignment {
        counts[a] += 1;
    }
    let n = samples.len() as f64;
    let masses: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(QuantizedTarget {
        dist: DiscreteDistribution::new(centroids, masses)?,
        counts,
        assignment: Some(assignment),
        inertia,
        n_samples: samples.len(),
    })
}

/// The K = 1 baseline: a single support point at the sample mean.
pub fn mean_approx(samples: &[Point]) -> Result<QuantizedTarget> {
    let d = check_samples(samples)?;
    let centroid = mean_of(samples, 0..samples.len(), d);
    let inertia = samples.iter().map(|x| (x - &centroid).norm_squared()).sum();
    Ok(QuantizedTarget {
        dist: DiscreteDistribution::new(vec![centroid], vec![1.0])?,
        counts: vec![samples.len()],
        assignment: Some(vec![0; samples.len()]),
        inertia,
        n_samples: samples.len(),
    })
}

/// Density-based random sampling: per-sample density estimated as
/// 1/r_k^d (r_k = distance to the k_nn-th nearest neighbor), K support
/// points drawn without replacement with probability proportional to
/// density, masses = the selected densities renormalized.
pub fn density_sample_approx(
    samples: &[Point],
    k: usize,
    k_nn: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QuantizedTarget> {
    let d = check_samples(samples)?;
    let n = samples.len();
    if k == 0 || k > n {
        return Err(Error::InvalidParameter {
            name: "K",
            reason: format!("need 1 <= K <= {n}, got {k}"),
        });
    }
    if k_nn >= n {
        return Err(Error::InvalidParameter {
            name: "k_nn",
            reason: format!("need k_nn < {n}, got {k_nn}"),
        });
    }
    let mut densities = Vec::with_capacity(n);
    for (i, x) in samples.iter().enumerate() {
        let mut dists: Vec<f64> = samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, y)| (x - y).norm())
            .collect();
        dists.sort_by(f64::total_cmp);
        let r = dists[k_nn - 1].max(1e-12);
        densities.push(r.powi(-(d as i32)));
    }
    // Sequential weighted draws without replacement.
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().map(|&i| densities[i]).sum();
        let mut u: f64 = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (pos, &i) in remaining.iter().enumerate() {
            u -= densities[i];
            if u <= 0.0 {
                pick = pos;
                break;
            }
        }
        chosen.push(remaining.swap_remove(pick));
    }
    let mass_total: f64 = chosen.iter().map(|&i| densities[i]).sum();
    let points: Vec<Point> = chosen.iter().map(|&i| samples[i].clone()).collect();
    let masses: Vec<f64> = chosen.iter().map(|&i| densities[i] / mass_total).collect();
    Ok(QuantizedTarget {
        dist: DiscreteDistribution::new(points, masses)?,
        counts: Vec::new(),
        assignment: None,
        inertia: f64::NAN,
        n_samples: n,
    })
}

/// The transport cost of the plan that sends each sample's 1/N mass to its
/// assigned support point: Σ_i d(x_i, support[assign(i)])/N. Feasible for
/// count-based quantizations, hence an upper bound on the exact transport
/// cost between the empirical distribution and the quantized one.
pub fn assignment_plan_cost(
    samples: &[Point],
    qt: &QuantizedTarget,
    metric: Metric,
) -> Result<f64> {
    check_samples(samples)?;
    let Some(assignment) = qt.assignment() else {
        return Err(Error::Provenance(
            "quantization carries no sample assignment (density sampling is not count-based)"
                .into(),
        ));
    };
    if assignment.len() != samples.len() {
        return Err(Error::Provenance(format!(
            "quantization was built from {} samples, got {}",
            assignment.len(),
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    Ok(samples
        .iter()
        .zip(assignment)
        .map(|(x, &j)| metric.distance(x, &qt.support()[j]) / n)
        .sum())
}
