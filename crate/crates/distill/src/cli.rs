//! Command-line interface.
//!
//! Four subcommands: `gen-target` samples a labeled dataset from the
//! configured mixture, `distill` synthesizes the surrogate dataset,
//! `eval` scores a surrogate against its target, and `check` runs the
//! oracle suites. Every run writes a manifest capturing the effective
//! configuration, so reruns from the same inputs are byte-identical.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numerical failure (including failed checks).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{apply_overrides, parse_kv, ConfigMap, FullConfig};
use crate::io::{
    read_dataset_csv, write_dataset_csv, write_metrics_json, write_plot_csv, write_step_log,
    RunManifest,
};
use crate::pipeline::{distill_dataset, generate_class_samples, generate_heldout_samples};
use crate::{Error, Result};

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "DISTILL_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "distill",
    version,
    about = "Synthesize and evaluate small surrogate datasets from Gaussian-mixture targets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a labeled target dataset from the configured mixture.
    GenTarget {
        /// Config file (run settings + mixture block).
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (defaults to $DISTILL_OUT_DIR/target.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run guided distillation against a target dataset file.
    Distill {
        #[arg(long)]
        config: PathBuf,
        /// Target dataset CSV (from gen-target or external).
        #[arg(long)]
        target: PathBuf,
        /// Output directory (defaults to $DISTILL_OUT_DIR).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a surrogate dataset against its target.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also dump each class's metric transport plan as a matrix CSV.
        #[arg(long)]
        dump_plans: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run an oracle check suite (see `--help` for names).
    Check {
        /// One of: sinkhorn, exact-1d, lemma1, prop1, prop2, corollary1,
        /// ot-grad, all.
        suite: String,
    },
}

/// Config overrides: dedicated flags for the common knobs plus generic
/// `--set key=value` for everything else. Flags beat file values.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ipc: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    beta_n: Option<f64>,
    #[arg(long)]
    beta_s: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    quantizer: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Additional overrides as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("ipc", self.ipc.map(|v| v.to_string()));
        push("steps", self.steps.map(|v| v.to_string()));
        push("rho", self.rho.map(|v| v.to_string()));
        push("beta_n", self.beta_n.map(|v| v.to_string()));
        push("beta_s", self.beta_s.map(|v| v.to_string()));
        push("omega", self.omega.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("quantizer", self.quantizer.clone());
        push("jobs", self.jobs.map(|v| v.to_string()));
        for raw in &self.set {
            let Some((k, v)) = raw.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects key=value, got `{raw}`"
                )));
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

/// Parse arguments from the process environment and run; returns the exit
/// code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidParameter { .. } => 1,
        Error::NonFinite(_)
        | Error::ScalingUnderflow
        | Error::NegativeRadicand { .. }
        | Error::DegenerateCovariance(_) => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenTarget {
            config,
            out,
            overrides,
        } => {
            let out = resolve_out(out, "target.csv")?;
            cmd_gen_target(&config, &out, &overrides.pairs()?)?;
            Ok(0)
        }
        Command::Distill {
            config,
            target,
            out_dir,
            overrides,
        } => {
            let dir = resolve_dir(out_dir)?;
            cmd_distill(&config, &target, &dir, &overrides.pairs()?)?;
            Ok(0)
        }
        Command::Eval {
            config,
            surrogate,
            target,
            out_dir,
            dump_plans,
            overrides,
        } => {
            let dir = resolve_dir(out_dir)?;
            cmd_eval(
                &config,
                &surrogate,
                &target,
                &dir,
                dump_plans,
                &overrides.pairs()?,
            )?;
            Ok(0)
        }
        Command::Check { suite } => cmd_check(&suite),
    }
}

fn resolve_dir(out_dir: Option<PathBuf>) -> Result<PathBuf> {
    out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Error::Config(format!(
                "no output directory: pass --out-dir or set {OUT_DIR_ENV}"
            ))
        })
}

fn resolve_out(out: Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    match out {
        Some(p) => Ok(p),
        None => Ok(resolve_dir(None)?.join(default_name)),
    }
}

fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<(FullConfig, ConfigMap)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut map = parse_kv(&text)?;
    apply_overrides(&mut map, overrides);
    let cfg = FullConfig::from_map(&map)?;
    let effective = cfg.effective_map(&map);
    Ok((cfg, effective))
}

/// Tracks written outputs so a failed run can remove its partial files.
struct OutputSet {
    written: Vec<PathBuf>,
}

impl OutputSet {
    fn new() -> Self {
        Self {
            written: Vec::new(),
        }
    }

    fn record(&mut self, path: PathBuf) -> PathBuf {
        self.written.push(path.clone());
        path
    }

    fn discard_all(&self) {
        for path in &self.written {
            let _ = std::fs::remove_file(path);
        }
    }
}

/// `gen-target`: one CSV of `n_target` samples per class, plus a manifest.
pub fn cmd_gen_target(config: &Path, out: &Path, overrides: &[(String, String)]) -> Result<()> {
    let (cfg, effective) = load_config(config, overrides)?;
    let mut per_class = Vec::with_capacity(cfg.mixture.num_classes());
    for c in 0..cfg.mixture.num_classes() {
        per_class.push(generate_class_samples(
            &cfg.mixture,
            c,
            cfg.distill.n_target,
            cfg.distill.seed,
        )?);
    }
    let mut outputs = OutputSet::new();
    let result = (|| -> Result<()> {
        write_dataset_csv(&outputs.record(out.to_path_buf()), &per_class)?;
        let mut manifest = RunManifest::new(
            "gen-target",
            cfg.distill.seed,
            cfg.distill.content_hash(),
            effective.clone(),
        )
        .input(config)
        .output(out);
        manifest.finish();
        manifest.write(&outputs.record(manifest_path(out)))?;
        Ok(())
    })();
    if result.is_err() {
        outputs.discard_all();
    }
    result
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// `distill`: surrogate CSV + step log + manifest into the output
/// directory. Partial outputs are removed on failure.
pub fn cmd_distill(
    config: &Path,
    target: &Path,
    out_dir: &Path,
    overrides: &[(String, String)],
) -> Result<()> {
    let (cfg, effective) = load_config(config, overrides)?;
    let per_class = read_dataset_csv(target)?;
    check_against_mixture(&cfg, &per_class, target)?;
    let output = distill_dataset(&cfg.distill, &cfg.mixture, &per_class)?;

    let mut outputs = OutputSet::new();
    let result = (|| -> Result<()> {
        let surrogate_path = outputs.record(out_dir.join("surrogate.csv"));
        write_dataset_csv(&surrogate_path, &output.dataset.classes)?;
        let steps_path = outputs.record(out_dir.join("steps.log"));
        write_step_log(&steps_path, &output.steps)?;
        let mut manifest = RunManifest::new(
            "distill",
            cfg.distill.seed,
            cfg.distill.content_hash(),
            effective.clone(),
        )
        .input(config)
        .input(target)
        .output(&surrogate_path)
        .output(&steps_path);
        // The quantized targets the run matched against, reusable by later
        // runs or external tooling. Quantization only runs when the
        // distribution-matching term is live.
        if cfg.distill.dist_match.rho > 0.0 {
            let per_class: Vec<_> = (0..cfg.distill.classes)
                .map(|c| crate::pipeline::quantize_class(&cfg.distill, c, &per_class[c]))
                .collect::<Result<_>>()?;
            let quantized_path = outputs.record(out_dir.join("quantized.json"));
            crate::io::write_quantized_json(&quantized_path, &per_class)?;
            manifest = manifest.output(&quantized_path);
        }
        manifest.finish();
        manifest.write(&outputs.record(out_dir.join("manifest.json")))?;
        Ok(())
    })();
    if result.is_err() {
        outputs.discard_all();
    }
    result
}

fn check_against_mixture(
    cfg: &FullConfig,
    per_class: &[Vec<crate::numerics::Point>],
    path: &Path,
) -> Result<()> {
    if per_class.len() != cfg.mixture.num_classes() {
        return Err(Error::Data(format!(
            "{}: {} classes, config mixture has {}",
            path.display(),
            per_class.len(),
            cfg.mixture.num_classes()
        )));
    }
    for (c, points) in per_class.iter().enumerate() {
        if points.is_empty() {
            return Err(Error::Data(format!(
                "{}: class {c} has no samples",
                path.display()
            )));
        }
        if points[0].len() != cfg.mixture.dim() {
            return Err(Error::Data(format!(
                "{}: dimension {} does not match the mixture's {}",
                path.display(),
                points[0].len(),
                cfg.mixture.dim()
            )));
        }
    }
    Ok(())
}

/// `eval`: metrics JSON + per-class plot CSVs + manifest (+ optional plan
/// matrices).
pub fn cmd_eval(
    config: &Path,
    surrogate: &Path,
    target: &Path,
    out_dir: &Path,
    dump_plans: bool,
    overrides: &[(String, String)],
) -> Result<()> {
    let (cfg, effective) = load_config(config, overrides)?;
    let target_classes = read_dataset_csv(target)?;
    let surrogate_classes = read_dataset_csv(surrogate)?;
    check_against_mixture(&cfg, &target_classes, target)?;
    check_against_mixture(&cfg, &surrogate_classes, surrogate)?;

    let mut heldout = Vec::with_capacity(cfg.mixture.num_classes());
    for c in 0..cfg.mixture.num_classes() {
        heldout.push(generate_heldout_samples(
            &cfg.mixture,
            c,
            cfg.heldout_per_class,
            cfg.distill.seed,
        )?);
    }
    let report = crate::metrics::evaluate(
        &cfg.mixture,
        &target_classes,
        &surrogate_classes,
        &heldout,
        &cfg.eval,
    )?;

    let mut outputs = OutputSet::new();
    let result = (|| -> Result<()> {
        let metrics_path = outputs.record(out_dir.join("metrics.json"));
        write_metrics_json(&metrics_path, &report)?;
        let plot_dir = out_dir.join("plot");
        let mut manifest = RunManifest::new(
            "eval",
            cfg.distill.seed,
            cfg.distill.content_hash(),
            effective.clone(),
        )
        .input(config)
        .input(surrogate)
        .input(target)
        .output(&metrics_path);
        for c in 0..cfg.mixture.num_classes() {
            let p = write_plot_csv(&plot_dir, c, &target_classes[c], &surrogate_classes[c])?;
            manifest = manifest.output(&outputs.record(p));
        }
        if dump_plans {
            for c in 0..cfg.mixture.num_classes() {
                let plan = crate::metrics::ot_dataset_plan(
                    &crate::transport::DiscreteDistribution::uniform(
                        surrogate_classes[c].clone(),
                    )?,
                    &crate::transport::DiscreteDistribution::uniform(target_classes[c].clone())?,
                    cfg.eval.ot_epsilon,
                    cfg.eval.ot_iters,
                )?;
                let p = outputs.record(out_dir.join(format!("plan_class_{c}.csv")));
                crate::io::write_matrix_csv(&p, &plan.gamma)?;
                manifest = manifest.output(&p);
            }
        }
        manifest.finish();
        manifest.write(&outputs.record(out_dir.join("manifest.json")))?;
        Ok(())
    })();
    if result.is_err() {
        outputs.discard_all();
    }
    result
}

/// `check`: run a suite, print one line per check, exit 0 iff all passed.
pub fn cmd_check(suite: &str) -> Result<i32> {
    let outcomes = crate::checks::run_suite(suite)?;
    let mut all_passed = true;
    for o in &outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        println!("{tag} {} — {}", o.name, o.detail);
        all_passed &= o.passed;
    }
    Ok(if all_passed { 0 } else { 3 })
}
