//! End-to-end distillation: per-class quantization, greedy per-sample
//! guided reverse diffusion, memory accumulation, dataset assembly.
//!
//! Determinism is structural. Every random stream is derived from
//! (seed, domain, index): one stream per (class, sample) trajectory, one
//! per class for quantization, separate domains for target generation and
//! held-out draws. Classes therefore do not interact, processing order
//! cannot matter, and the first IPC samples of a larger run coincide with
//! a smaller run's output.

use rand_chacha::ChaCha8Rng;

use crate::denoiser::AnalyticDenoiser;
use crate::diffusion::{make_cosine_schedule, NoiseSchedule};
use crate::guidance::{
    guided_sample_step, DistMatchConfig, LabelState, MemorySet, StepDiagnostics,
};
use crate::numerics::{derived_rng, standard_normal_point, LabeledMixture, Point};
use crate::quantization::{density_sample_approx, kmeans_approx, mean_approx, QuantizedTarget};
use crate::semantic::SemanticConfig;
use crate::{Error, Result};

/// Stream-domain tags (arbitrary fixed constants; see [`derived_rng`]).
pub mod domains {
    pub const QUANTIZE: u64 = 0x5154;
    pub const SAMPLE: u64 = 0x5A30;
    pub const TARGET: u64 = 0x7467;
    pub const HELDOUT: u64 = 0x686F;
    pub const SUBSET: u64 = 0x7375;
}

/// Which discrete approximation backs distribution matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    #[default]
    KMeans,
    Mean,
    Dbs,
}

impl std::str::FromStr for Quantizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Quantizer::KMeans),
            "mean" => Ok(Quantizer::Mean),
            "dbs" => Ok(Quantizer::Dbs),
            other => Err(Error::Config(format!(
                "unknown quantizer `{other}` (expected kmeans | mean | dbs)"
            ))),
        }
    }
}

impl std::fmt::Display for Quantizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quantizer::KMeans => "kmeans",
            Quantizer::Mean => "mean",
            Quantizer::Dbs => "dbs",
        })
    }
}

/// Everything a distillation run depends on.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DistillConfig {
    pub classes: usize,
    /// Surrogate samples synthesized per class.
    pub ipc: usize,
    /// Reverse-diffusion step count T.
    pub steps: usize,
    pub seed: u64,
    /// DDIM stochasticity (0 = deterministic).
    pub eta: f64,
    /// Cosine-schedule offset s.
    pub schedule_offset: f64,
    pub semantic: SemanticConfig,
    pub dist_match: DistMatchConfig,
    pub quantizer: Quantizer,
    /// Support-point count for the quantized target.
    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_n_init: usize,
    /// Neighbor count for the density estimate behind `dbs`.
    pub dbs_knn: usize,
    /// Target samples drawn per class by dataset generation.
    pub n_target: usize,
    /// Class-level parallelism bound.
    pub jobs: usize,
}

impl DistillConfig {
    pub fn default_with(classes: usize, ipc: usize, seed: u64) -> Self {
        let steps = 50;
        Self {
            classes,
            ipc,
            steps,
            seed,
            eta: 0.0,
            schedule_offset: 0.008,
            semantic: SemanticConfig {
                t1: 45,
                t2: 25,
                beta_n: 0.06,
                beta_s: 0.01,
                omega: 3.0,
            },
            dist_match: DistMatchConfig {
                rho: 0.05,
                window: (30, 45),
                metric: crate::transport::Metric::Euclidean,
                epsilon: 0.1,
                iters: 5,
                project_sphere: false,
            },
            quantizer: Quantizer::KMeans,
            k: 10,
            kmeans_max_iter: 100,
            kmeans_n_init: 10,
            dbs_knn: 5,
            n_target: 500,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.ipc == 0 {
            return Err(Error::InvalidParameter {
                name: "classes/ipc",
                reason: "need at least one class and one sample per class".into(),
            });
        }
        if self.steps < 2 {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: "need at least 2 diffusion steps".into(),
            });
        }
        self.semantic.validate(self.steps)?;
        self.dist_match.validate(self.steps)?;
        if self.k == 0 {
            return Err(Error::InvalidParameter {
                name: "k",
                reason: "need at least one support point".into(),
            });
        }
        if self.jobs == 0 {
            return Err(Error::InvalidParameter {
                name: "jobs",
                reason: "need at least one worker".into(),
            });
        }
        Ok(())
    }

    /// Whether any step can leave the refinement stage (and therefore
    /// needs a wrong-class label).
    pub fn uses_dynamic_labels(&self) -> bool {
        self.semantic.t2 < self.steps
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_cosine_schedule(self.steps, self.schedule_offset, self.eta)
    }

    /// FNV-1a hash of the canonical JSON form, recorded as provenance.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// The distilled output: per-class surrogate points plus provenance.
#[derive(Debug, Clone)]
pub struct SurrogateDataset {
    /// Index = class label.
    pub classes: Vec<Vec<Point>>,
    pub seed: u64,
    pub config_hash: u64,
}

impl SurrogateDataset {
    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Flat (label, point) view in class order.
    pub fn labeled(&self) -> impl Iterator<Item = (usize, &Point)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(c, pts)| pts.iter().map(move |p| (c, p)))
    }
}

/// One line of the step log.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub class: usize,
    pub sample: usize,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug)]
pub struct DistillOutput {
    pub dataset: SurrogateDataset,
    pub steps: Vec<StepRecord>,
}

type ClassResult = Result<(Vec<Point>, Vec<StepRecord>)>;

fn class_stream(seed: u64, class: usize, domain: u64, index: u64) -> ChaCha8Rng {
    // Two-level derivation keeps (class, purpose, index) streams disjoint.
    let class_seed = crate::numerics::splitmix64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9));
    derived_rng(class_seed, domain, index)
}

/// Quantize one class's target samples per the configured scheme.
pub fn quantize_class(
    cfg: &DistillConfig,
    class: usize,
    samples: &[Point],
) -> Result<QuantizedTarget> {
    let mut rng = class_stream(cfg.seed, class, domains::QUANTIZE, 0);
    match cfg.quantizer {
        Quantizer::KMeans => kmeans_approx(
            samples,
            cfg.k,
            cfg.kmeans_max_iter,
            cfg.kmeans_n_init,
            &mut rng,
        ),
        Quantizer::Mean => mean_approx(samples),
        Quantizer::Dbs => density_sample_approx(samples, cfg.k, cfg.dbs_knn, &mut rng),
    }
}

/// Distill one class: quantize its target samples, then grow the memory
/// set one guided trajectory at a time.
pub fn distill_class(
    cfg: &DistillConfig,
    den: &AnalyticDenoiser,
    class: usize,
    target_samples: &[Point],
) -> Result<(Vec<Point>, Vec<StepRecord>)> {
    if target_samples.is_empty() {
        return Err(Error::EmptyInput("target samples for class"));
    }
    let sched = den.schedule();
    let dim = den.target().dim();
    let needs_quant = cfg.dist_match.rho > 0.0;
    let qt = if needs_quant {
        Some(quantize_class(cfg, class, target_samples)?)
    } else {
        None
    };
    let qt_dist = qt.as_ref().map(|q| q.distribution());

    let mut mem = MemorySet::new(class);
    let mut records = Vec::new();
    for n in 0..cfg.ipc {
        let mut rng = class_stream(cfg.seed, class, domains::SAMPLE, n as u64);
        let mut z = standard_normal_point(dim, &mut rng);
        let labels = LabelState::choose(
            class,
            cfg.classes,
            cfg.uses_dynamic_labels(),
            &mut rng,
        )?;
        for t in (1..=cfg.steps).rev() {
            let (next, diag) = guided_sample_step(
                den,
                sched,
                &cfg.semantic,
                &cfg.dist_match,
                &mem,
                qt_dist,
                &z,
                t,
                &labels,
                &mut rng,
            )
            .map_err(|e| {
                Error::NonFinite(format!("class {class} sample {n} step {t}: {e}"))
            })?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "class {class} sample {n} produced a non-finite state at step {t}"
                )));
            }
            z = next;
            records.push(StepRecord {
                class,
                sample: n,
                diagnostics: diag,
            });
        }
        mem.push(z);
    }
    Ok((mem.points().to_vec(), records))
}

/// Distill every class and assemble the surrogate dataset. Classes are
/// independent; `cfg.jobs` bounds how many run concurrently, and the merge
/// order is always class order.
pub fn distill_dataset(
    cfg: &DistillConfig,
    target: &LabeledMixture,
    samples_per_class: &[Vec<Point>],
) -> Result<DistillOutput> {
    cfg.validate()?;
    if target.num_classes() != cfg.classes {
        return Err(Error::Config(format!(
            "config says {} classes, mixture has {}",
            cfg.classes,
            target.num_classes()
        )));
    }
    if samples_per_class.len() != cfg.classes {
        return Err(Error::Data(format!(
            "expected target samples for {} classes, got {}",
            cfg.classes,
            samples_per_class.len()
        )));
    }
    let sched = cfg.schedule()?;
    let den = AnalyticDenoiser::new(target.clone(), sched)?;

    let jobs = cfg.jobs.min(cfg.classes).max(1);
    let mut per_class: Vec<Option<ClassResult>> = (0..cfg.classes).map(|_| None).collect();
    if jobs == 1 {
        for (c, slot) in per_class.iter_mut().enumerate() {
            *slot = Some(distill_class(cfg, &den, c, &samples_per_class[c]));
        }
    } else {
        let den_ref = &den;
        let results: Vec<(usize, ClassResult)> = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for chunk in (0..cfg.classes).collect::<Vec<_>>().chunks(cfg.classes.div_ceil(jobs))
                {
                    let chunk = chunk.to_vec();
                    let samples = &samples_per_class;
                    handles.push(scope.spawn(move || {
                        chunk
                            .into_iter()
                            .map(|c| (c, distill_class(cfg, den_ref, c, &samples[c])))
                            .collect::<Vec<_>>()
                    }));
                }
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("class worker panicked"))
                    .collect()
            });
        for (c, res) in results {
            per_class[c] = Some(res);
        }
    }

    let mut classes = Vec::with_capacity(cfg.classes);
    let mut steps = Vec::new();
    for (c, slot) in per_class.into_iter().enumerate() {
        let (points, records) = slot
            .expect("every class processed")
            .map_err(|e| Error::Data(format!("class {c}: {e}")))?;
        classes.push(points);
        steps.extend(records);
    }
    Ok(DistillOutput {
        dataset: SurrogateDataset {
            classes,
            seed: cfg.seed,
            config_hash: cfg.content_hash(),
        },
        steps,
    })
}

/// Draw `n` target samples for one class, on the generation stream.
pub fn generate_class_samples(
    target: &LabeledMixture,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    let mut rng = class_stream(seed, class, domains::TARGET, 0);
    (0..n).map(|_| target.sample_class(class, &mut rng)).collect()
}

/// Draw held-out evaluation samples, on a stream disjoint from both
/// generation and distillation.
pub fn generate_heldout_samples(
    target: &LabeledMixture,
    class: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<Point>> {
    let mut rng = class_stream(seed, class, domains::HELDOUT, 0);
    (0..n).map(|_| target.sample_class(class, &mut rng)).collect()
}

/// Deterministic random subset of `k` indices out of `n` (partial
/// Fisher-Yates on the subset stream).
pub fn random_subset_indices(n: usize, k: usize, seed: u64, class: usize) -> Vec<usize> {
    use rand::Rng;
    let mut rng = class_stream(seed, class, domains::SUBSET, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}
