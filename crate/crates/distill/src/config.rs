//! Flat key-value configuration files.
//!
//! One file carries both the run settings and the target mixture
//! definition. Lines are `key = value`, `#` starts a comment, and CLI
//! flags override file values. Example:
//!
//! ```text
//! seed = 0
//! ipc = 10
//! rho = 0.05
//!
//! dim = 2
//! class0.prior = 0.5
//! class0.comp0.weight = 1.0
//! class0.comp0.mean = -3.0 0.0
//! class0.comp0.cov = 1.0 0.0 0.0 1.0
//! class1.prior = 0.5
//! class1.comp0.weight = 1.0
//! class1.comp0.mean = 3.0 0.0
//! class1.comp0.cov = 1.0 0.0 0.0 1.0
//! ```
//!
//! Every key has a default except the mixture block; unknown keys are
//! rejected so typos fail loudly. The effective (post-override) map is
//! what the run manifest records.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::metrics::EvalConfig;
use crate::numerics::{GaussianComponent, LabeledMixture, MixtureClass};
use crate::pipeline::{DistillConfig, Quantizer};
use crate::semantic::SemanticConfig;
use crate::transport::Metric;
use crate::{Error, Result};

/// Ordered raw key-value view of a config file.
pub type ConfigMap = BTreeMap<String, String>;

/// Parse `key = value` lines; duplicate keys are rejected.
pub fn parse_kv(text: &str) -> Result<ConfigMap> {
    let mut map = ConfigMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Apply `key=value` overrides (CLI flags beat file values).
pub fn apply_overrides(map: &mut ConfigMap, overrides: &[(String, String)]) {
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
}

fn take<T: FromStr>(map: &ConfigMap, key: &str, default: T) -> Result<T> {
    match map.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`"))),
        None => Ok(default),
    }
}

fn take_floats(raw: &str, key: &str) -> Result<Vec<f64>> {
    raw.split_whitespace()
        .map(|tok| {
            tok.parse()
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{tok}`")))
        })
        .collect()
}

/// Everything a run needs: distillation settings, evaluation settings, and
/// the target mixture.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    /// Held-out evaluation samples drawn per class.
    pub heldout_per_class: usize,
    pub mixture: LabeledMixture,
}

/// Keys understood outside the mixture block.
const SETTING_KEYS: &[&str] = &[
    "seed",
    "ipc",
    "steps",
    "eta",
    "schedule_offset",
    "t1",
    "t2",
    "beta_n",
    "beta_s",
    "omega",
    "rho",
    "window_lo",
    "window_hi",
    "ot_epsilon",
    "ot_iters",
    "metric",
    "project_sphere",
    "quantizer",
    "k",
    "kmeans_max_iter",
    "kmeans_n_init",
    "dbs_knn",
    "n_target",
    "jobs",
    "eval_ot_epsilon",
    "eval_ot_iters",
    "coverage_knn",
    "knn_k",
    "heldout_per_class",
];

fn is_mixture_key(key: &str) -> bool {
    if key == "dim" {
        return true;
    }
    let Some(rest) = key.strip_prefix("class") else {
        return false;
    };
    let Some((idx, field)) = rest.split_once('.') else {
        return false;
    };
    if idx.parse::<usize>().is_err() {
        return false;
    }
    if field == "prior" {
        return true;
    }
    let Some(comp_rest) = field.strip_prefix("comp") else {
        return false;
    };
    let Some((cidx, cfield)) = comp_rest.split_once('.') else {
        return false;
    };
    cidx.parse::<usize>().is_ok() && matches!(cfield, "weight" | "mean" | "cov")
}

impl FullConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        for key in map.keys() {
            if !SETTING_KEYS.contains(&key.as_str()) && !is_mixture_key(key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }
        let mixture = parse_mixture(map)?;
        let classes = mixture.num_classes();
        let seed = take(map, "seed", 0u64)?;
        let ipc = take(map, "ipc", 10usize)?;
        let base = DistillConfig::default_with(classes, ipc, seed);
        let steps = take(map, "steps", base.steps)?;
        let semantic = SemanticConfig {
            t1: take(map, "t1", 45)?,
            t2: take(map, "t2", 25)?,
            beta_n: take(map, "beta_n", 0.06)?,
            beta_s: take(map, "beta_s", 0.01)?,
            omega: take(map, "omega", 3.0)?,
        };
        let dist_match = crate::guidance::DistMatchConfig {
            rho: take(map, "rho", 0.05)?,
            window: (take(map, "window_lo", 30)?, take(map, "window_hi", 45)?),
            metric: match map.get("metric") {
                Some(raw) => Metric::from_str(raw)?,
                None => Metric::Euclidean,
            },
            epsilon: take(map, "ot_epsilon", 0.1)?,
            iters: take(map, "ot_iters", 5)?,
            project_sphere: take(map, "project_sphere", false)?,
        };
        let quantizer = match map.get("quantizer") {
            Some(raw) => Quantizer::from_str(raw)?,
            None => Quantizer::KMeans,
        };
        let distill = DistillConfig {
            classes,
            ipc,
            steps,
            seed,
            eta: take(map, "eta", 0.0)?,
            schedule_offset: take(map, "schedule_offset", 0.008)?,
            semantic,
            dist_match,
            quantizer,
            k: take(map, "k", 10)?,
            kmeans_max_iter: take(map, "kmeans_max_iter", 100)?,
            kmeans_n_init: take(map, "kmeans_n_init", 10)?,
            dbs_knn: take(map, "dbs_knn", 5)?,
            n_target: take(map, "n_target", 500)?,
            jobs: take(map, "jobs", 1)?,
        };
        distill.validate()?;
        let eval = EvalConfig {
            ot_epsilon: take(map, "eval_ot_epsilon", 0.01)?,
            ot_iters: take(map, "eval_ot_iters", 1000)?,
            coverage_knn: take(map, "coverage_knn", 5)?,
            knn_k: take(map, "knn_k", 1)?,
        };
        Ok(Self {
            distill,
            eval,
            heldout_per_class: take(map, "heldout_per_class", 200)?,
            mixture,
        })
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<(Self, ConfigMap)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut map = parse_kv(&text)?;
        apply_overrides(&mut map, overrides);
        let cfg = Self::from_map(&map)?;
        let effective = cfg.effective_map(&map);
        Ok((cfg, effective))
    }

    /// The full effective map: every setting key with its resolved value,
    /// plus the mixture block as given.
    pub fn effective_map(&self, raw: &ConfigMap) -> ConfigMap {
        let d = &self.distill;
        let mut map = ConfigMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("seed", d.seed.to_string());
        put("ipc", d.ipc.to_string());
        put("steps", d.steps.to_string());
        put("eta", d.eta.to_string());
        put("schedule_offset", d.schedule_offset.to_string());
        put("t1", d.semantic.t1.to_string());
        put("t2", d.semantic.t2.to_string());
        put("beta_n", d.semantic.beta_n.to_string());
        put("beta_s", d.semantic.beta_s.to_string());
        put("omega", d.semantic.omega.to_string());
        put("rho", d.dist_match.rho.to_string());
        put("window_lo", d.dist_match.window.0.to_string());
        put("window_hi", d.dist_match.window.1.to_string());
        put("ot_epsilon", d.dist_match.epsilon.to_string());
        put("ot_iters", d.dist_match.iters.to_string());
        put(
            "metric",
            match d.dist_match.metric {
                Metric::Euclidean => "euclidean".into(),
                Metric::SqEuclidean => "sq_euclidean".into(),
            },
        );
        put("project_sphere", d.dist_match.project_sphere.to_string());
        put("quantizer", d.quantizer.to_string());
        put("k", d.k.to_string());
        put("kmeans_max_iter", d.kmeans_max_iter.to_string());
        put("kmeans_n_init", d.kmeans_n_init.to_string());
        put("dbs_knn", d.dbs_knn.to_string());
        put("n_target", d.n_target.to_string());
        put("jobs", d.jobs.to_string());
        put("eval_ot_epsilon", self.eval.ot_epsilon.to_string());
        put("eval_ot_iters", self.eval.ot_iters.to_string());
        put("coverage_knn", self.eval.coverage_knn.to_string());
        put("knn_k", self.eval.knn_k.to_string());
        put("heldout_per_class", self.heldout_per_class.to_string());
        for (k, v) in raw {
            if is_mixture_key(k) {
                map.insert(k.clone(), v.clone());
            }
        }
        map
    }
}

fn parse_mixture(map: &ConfigMap) -> Result<LabeledMixture> {
    let dim: usize = match map.get("dim") {
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("key `dim`: cannot parse `{raw}`")))?,
        None => return Err(Error::Config("missing mixture block (`dim = ...`)".into())),
    };
    let mut classes = Vec::new();
    for label in 0.. {
        let prior_key = format!("class{label}.prior");
        let Some(prior_raw) = map.get(&prior_key) else {
            break;
        };
        let prior: f64 = prior_raw
            .parse()
            .map_err(|_| Error::Config(format!("key `{prior_key}`: cannot parse `{prior_raw}`")))?;
        let mut comps = Vec::new();
        for comp in 0.. {
            let wkey = format!("class{label}.comp{comp}.weight");
            let Some(wraw) = map.get(&wkey) else { break };
            let weight: f64 = wraw
                .parse()
                .map_err(|_| Error::Config(format!("key `{wkey}`: cannot parse `{wraw}`")))?;
            let mkey = format!("class{label}.comp{comp}.mean");
            let mean_raw = map
                .get(&mkey)
                .ok_or_else(|| Error::Config(format!("missing `{mkey}`")))?;
            let mean = take_floats(mean_raw, &mkey)?;
            if mean.len() != dim {
                return Err(Error::Config(format!(
                    "`{mkey}`: expected {dim} entries, got {}",
                    mean.len()
                )));
            }
            let ckey = format!("class{label}.comp{comp}.cov");
            let cov_raw = map
                .get(&ckey)
                .ok_or_else(|| Error::Config(format!("missing `{ckey}`")))?;
            let cov = take_floats(cov_raw, &ckey)?;
            if cov.len() != dim * dim {
                return Err(Error::Config(format!(
                    "`{ckey}`: expected {} entries (row-major {dim}x{dim}), got {}",
                    dim * dim,
                    cov.len()
                )));
            }
            comps.push(
                GaussianComponent::new(
                    DVector::from_vec(mean),
                    DMatrix::from_row_slice(dim, dim, &cov),
                    weight,
                )
                .map_err(|e| Error::Config(format!("class {label} component {comp}: {e}")))?,
            );
        }
        if comps.is_empty() {
            return Err(Error::Config(format!(
                "class {label} declares a prior but no components"
            )));
        }
        classes.push(
            MixtureClass::new(label, comps, prior)
                .map_err(|e| Error::Config(format!("class {label}: {e}")))?,
        );
    }
    if classes.is_empty() {
        return Err(Error::Config("mixture block declares no classes".into()));
    }
    LabeledMixture::new(classes).map_err(|e| Error::Config(format!("mixture: {e}")))
}

/// Render a mixture plus settings back into config-file text. Used to ship
/// generated example configs; floats print in shortest round-trip form.
pub fn render_config(settings: &ConfigMap) -> String {
    let mut out = String::new();
    for (k, v) in settings {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}
