//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `cargo test --test acceptance -- --nocapture` to see
//! them all).
//!
//! Criteria 1-7 are oracle checks with pinned tolerances; criteria 8-10
//! run the scaled-down end-to-end experiments over paired seeds; criterion
//! 11 is byte-level determinism.

use std::path::Path;
use std::sync::OnceLock;

use distill::checks;
use distill::config::{parse_kv, FullConfig};
use distill::metrics::{alignment_rate, coverage, knn_downstream, ot_dataset_distance};
use distill::numerics::{LabeledMixture, Point};
use distill::pipeline::{
    distill_dataset, generate_class_samples, generate_heldout_samples, random_subset_indices,
    DistillConfig, SurrogateDataset,
};
use distill::transport::DiscreteDistribution;

fn report(criterion: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("{tag} {criterion} — {detail}");
    assert!(passed, "{criterion}: {detail}");
}

// ---------------------------------------------------------------------------
// Criteria 1-7: oracle checks.

#[test]
fn criterion_01_sinkhorn_matches_exact_solver() {
    let o = checks::check_sinkhorn_vs_exact();
    report("criterion 1 (entropic solver vs exact)", o.passed, &o.detail);
}

#[test]
fn criterion_02_exact_1d_agrees_with_simplex() {
    let o = checks::check_exact_1d_vs_simplex();
    report("criterion 2 (1-D oracle agreement)", o.passed, &o.detail);
}

#[test]
fn criterion_03_posterior_gradient_identity() {
    let o = checks::check_lemma1_identity();
    report(
        "criterion 3 (conditional log-likelihood gradient identity)",
        o.passed,
        &o.detail,
    );
}

#[test]
fn criterion_04_condition_shift_first_order() {
    let o = checks::check_prop1_step_halving();
    report(
        "criterion 4 (first-order condition shift, step halving)",
        o.passed,
        &o.detail,
    );
}

#[test]
fn criterion_05_quantizer_ordering() {
    let o = checks::check_prop2_quantizer_ordering();
    report(
        "criterion 5 (k-means vs mean-matching transport ordering)",
        o.passed,
        &o.detail,
    );
}

#[test]
fn criterion_06_triangle_inequality() {
    let o = checks::check_corollary1_triangle();
    report(
        "criterion 6 (transport triangle inequality)",
        o.passed,
        &o.detail,
    );
}

#[test]
fn criterion_07_guidance_gradients() {
    let o = checks::check_ot_gradients();
    report(
        "criterion 7 (guidance gradient vs finite differences)",
        o.passed,
        &o.detail,
    );
}

// ---------------------------------------------------------------------------
// Criteria 8-10: scaled-down end-to-end experiments, shared across tests.

const SEEDS: u64 = 10;
const METRIC_EPSILON: f64 = 0.01;
const METRIC_ITERS: usize = 1000;
const COVERAGE_KNN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Arm {
    Full,
    Unguided,
    DistributionOnly,
    SemanticOnly,
}

impl Arm {
    fn configure(self, base: &DistillConfig) -> DistillConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Full => {}
            Arm::Unguided => {
                cfg.dist_match.rho = 0.0;
                disable_dynamic_labels(&mut cfg);
            }
            Arm::DistributionOnly => {
                disable_dynamic_labels(&mut cfg);
            }
            Arm::SemanticOnly => {
                cfg.dist_match.rho = 0.0;
            }
        }
        cfg
    }
}

/// β's = 0 with t2 = T: every step runs hard-label refinement.
fn disable_dynamic_labels(cfg: &mut DistillConfig) {
    cfg.semantic.beta_n = 0.0;
    cfg.semantic.beta_s = 0.0;
    cfg.semantic.t2 = cfg.steps;
    cfg.semantic.t1 = cfg.steps + 1;
}

#[derive(Debug, Clone)]
struct RunMetrics {
    ot_distance: f64,
    coverage: f64,
    alignment: f64,
    knn_accuracy: f64,
}

struct Experiment {
    /// (arm, ipc, seed) -> metrics.
    runs: std::collections::HashMap<(Arm, usize, u64), RunMetrics>,
    /// Paired random-subset baseline accuracy at IPC = 10 per seed.
    subset_knn: Vec<f64>,
    elapsed: std::time::Duration,
}

fn shared_experiment() -> &'static Experiment {
    static DATA: OnceLock<Experiment> = OnceLock::new();
    DATA.get_or_init(run_experiment)
}

fn experiment_mixture() -> (LabeledMixture, DistillConfig) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.conf");
    let text = std::fs::read_to_string(path).expect("example config exists");
    let map = parse_kv(&text).expect("example config parses");
    let full = FullConfig::from_map(&map).expect("example config is valid");
    (full.mixture, full.distill)
}

fn evaluate_run(
    target: &LabeledMixture,
    real: &[Vec<Point>],
    heldout: &[(usize, Point)],
    dataset: &SurrogateDataset,
) -> RunMetrics {
    let classes = target.num_classes();
    let mut ot_sum = 0.0;
    let mut cov_sum = 0.0;
    for (c, real_c) in real.iter().enumerate() {
        let surrogate =
            DiscreteDistribution::uniform(dataset.classes[c].clone()).expect("nonempty surrogate");
        let real_dd = DiscreteDistribution::uniform(real_c.clone()).expect("nonempty target");
        ot_sum +=
            ot_dataset_distance(&surrogate, &real_dd, METRIC_EPSILON, METRIC_ITERS).unwrap();
        cov_sum += coverage(real_c, &dataset.classes[c], COVERAGE_KNN).unwrap();
    }
    let alignment = alignment_rate(target, dataset.labeled()).unwrap();
    let reference: Vec<(usize, Point)> = dataset
        .labeled()
        .map(|(c, p)| (c, p.clone()))
        .collect();
    let knn_accuracy = knn_downstream(&reference, heldout, 1).unwrap();
    RunMetrics {
        ot_distance: ot_sum / classes as f64,
        coverage: cov_sum / classes as f64,
        alignment,
        knn_accuracy,
    }
}

fn run_experiment() -> Experiment {
    let start = std::time::Instant::now();
    let (target, base) = experiment_mixture();
    let classes = target.num_classes();
    let mut runs = std::collections::HashMap::new();
    let mut subset_knn = Vec::new();

    for seed in 0..SEEDS {
        let mut cfg_seed = base.clone();
        cfg_seed.seed = seed;
        let real: Vec<Vec<Point>> = (0..classes)
            .map(|c| generate_class_samples(&target, c, cfg_seed.n_target, seed).unwrap())
            .collect();
        let heldout: Vec<(usize, Point)> = (0..classes)
            .flat_map(|c| {
                generate_heldout_samples(&target, c, 200, seed)
                    .unwrap()
                    .into_iter()
                    .map(move |p| (c, p))
            })
            .collect();

        for (arm, ipc) in [
            (Arm::Full, 10),
            (Arm::Unguided, 10),
            (Arm::DistributionOnly, 10),
            (Arm::SemanticOnly, 10),
            (Arm::Full, 50),
            (Arm::Unguided, 50),
        ] {
            let mut cfg = arm.configure(&cfg_seed);
            cfg.ipc = ipc;
            let out = distill_dataset(&cfg, &target, &real).unwrap();
            let metrics = evaluate_run(&target, &real, &heldout, &out.dataset);
            runs.insert((arm, ipc, seed), metrics);
        }

        // Paired baseline for criterion 10: a random target subset of the
        // same size as the IPC-10 surrogate.
        let mut reference: Vec<(usize, Point)> = Vec::new();
        for (c, real_c) in real.iter().enumerate() {
            for i in random_subset_indices(real_c.len(), 10, seed, c) {
                reference.push((c, real_c[i].clone()));
            }
        }
        subset_knn.push(knn_downstream(&reference, &heldout, 1).unwrap());
    }
    Experiment {
        runs,
        subset_knn,
        elapsed: start.elapsed(),
    }
}

#[test]
fn criterion_08_guided_beats_unguided_end_to_end() {
    let exp = shared_experiment();
    let mut detail = String::new();
    let mut passed = true;
    for ipc in [10usize, 50] {
        let mut ot_wins = 0;
        let mut cov_wins = 0;
        let mut align_sum = 0.0;
        for seed in 0..SEEDS {
            let full = &exp.runs[&(Arm::Full, ipc, seed)];
            let unguided = &exp.runs[&(Arm::Unguided, ipc, seed)];
            if full.ot_distance < unguided.ot_distance {
                ot_wins += 1;
            }
            if full.coverage > unguided.coverage {
                cov_wins += 1;
            }
            align_sum += full.alignment;
        }
        let mean_align = align_sum / SEEDS as f64;
        detail.push_str(&format!(
            "IPC {ipc}: transport-distance wins {ot_wins}/{SEEDS}, coverage wins \
             {cov_wins}/{SEEDS}, mean alignment {mean_align:.4}; "
        ));
        passed &= ot_wins >= 8 && cov_wins >= 8 && mean_align >= 0.95;
    }
    detail.push_str(&format!("experiment runtime {:.1?}", exp.elapsed));
    passed &= exp.elapsed.as_secs_f64() < 300.0;
    report("criterion 8 (end-to-end guided vs unguided)", passed, &detail);
}

#[test]
fn criterion_09_ablation_directions() {
    let exp = shared_experiment();
    let ipc = 10usize;
    let mut dm_wins = 0;
    let mut sm_wins = 0;
    for seed in 0..SEEDS {
        let unguided = &exp.runs[&(Arm::Unguided, ipc, seed)];
        if exp.runs[&(Arm::DistributionOnly, ipc, seed)].ot_distance < unguided.ot_distance {
            dm_wins += 1;
        }
        if exp.runs[&(Arm::SemanticOnly, ipc, seed)].coverage > unguided.coverage {
            sm_wins += 1;
        }
    }

    // Combined rank across seeds: rank the three guided variants per seed
    // on transport distance and on coverage (1 = best), sum the two ranks,
    // take each variant's median. The full method must not be worse than
    // both single-component variants.
    let variants = [Arm::Full, Arm::DistributionOnly, Arm::SemanticOnly];
    let mut combined: std::collections::HashMap<Arm, Vec<f64>> = std::collections::HashMap::new();
    for seed in 0..SEEDS {
        let rank_of = |key: fn(&RunMetrics) -> f64, better_low: bool| {
            let mut scored: Vec<(Arm, f64)> = variants
                .iter()
                .map(|a| (*a, key(&exp.runs[&(*a, ipc, seed)])))
                .collect();
            scored.sort_by(|x, y| {
                if better_low {
                    x.1.total_cmp(&y.1)
                } else {
                    y.1.total_cmp(&x.1)
                }
            });
            let ranks: std::collections::HashMap<Arm, f64> = scored
                .iter()
                .enumerate()
                .map(|(i, (a, _))| (*a, (i + 1) as f64))
                .collect();
            ranks
        };
        let ot_ranks = rank_of(|m| m.ot_distance, true);
        let cov_ranks = rank_of(|m| m.coverage, false);
        for a in variants {
            combined
                .entry(a)
                .or_default()
                .push(ot_ranks[&a] + cov_ranks[&a]);
        }
    }
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    let med_full = median(combined[&Arm::Full].clone());
    let med_dm = median(combined[&Arm::DistributionOnly].clone());
    let med_sm = median(combined[&Arm::SemanticOnly].clone());
    let not_dominated = !(med_full > med_dm && med_full > med_sm);

    let passed = dm_wins >= 7 && sm_wins >= 7 && not_dominated;
    report(
        "criterion 9 (ablation directions)",
        passed,
        &format!(
            "distribution-only transport wins {dm_wins}/{SEEDS}, semantic-only coverage wins \
             {sm_wins}/{SEEDS}; median combined ranks: full {med_full}, distribution-only \
             {med_dm}, semantic-only {med_sm}"
        ),
    );
}

#[test]
fn criterion_10_downstream_proxy() {
    let exp = shared_experiment();
    let mut wins = 0;
    let mut details = Vec::new();
    for seed in 0..SEEDS {
        let surrogate = exp.runs[&(Arm::Full, 10, seed)].knn_accuracy;
        let subset = exp.subset_knn[seed as usize];
        if surrogate >= subset {
            wins += 1;
        }
        details.push(format!("{surrogate:.3}/{subset:.3}"));
    }
    report(
        "criterion 10 (1-NN downstream proxy)",
        wins >= 7,
        &format!(
            "surrogate >= random-subset accuracy in {wins}/{SEEDS} paired seeds ({})",
            details.join(", ")
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let (target, mut cfg) = experiment_mixture();
    cfg.ipc = 5;
    cfg.seed = 123;
    let real: Vec<Vec<Point>> = (0..target.num_classes())
        .map(|c| generate_class_samples(&target, c, 200, cfg.seed).unwrap())
        .collect();
    let a = distill_dataset(&cfg, &target, &real).unwrap();
    let b = distill_dataset(&cfg, &target, &real).unwrap();

    // Byte-identical serialized outputs.
    let dir = std::env::temp_dir().join(format!("distill-acc-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let pa = dir.join("a.csv");
    let pb = dir.join("b.csv");
    distill::io::write_dataset_csv(&pa, &a.dataset.classes).unwrap();
    distill::io::write_dataset_csv(&pb, &b.dataset.classes).unwrap();
    let bytes_a = std::fs::read(&pa).unwrap();
    let bytes_b = std::fs::read(&pb).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    report(
        "criterion 11 (byte-identical reruns)",
        bytes_a == bytes_b,
        &format!("{} bytes compared", bytes_a.len()),
    );
}
