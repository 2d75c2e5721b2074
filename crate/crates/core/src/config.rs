//! Run configuration: a flat `key = value` file, one setting per line, `#`
//! starts a comment. Command-line flags override file values through
//! [`RunConfig::set`].
//!
//! | key | meaning |
//! |---|---|
//! | `model` | `lenet5` or `tiny_resnet` |
//! | `dataset` | dataset directory (MNIST IDX or CIFAR-10 binary) |
//! | `seed` | master seed |
//! | `deterministic` | `true` pins rayon to one thread |
//! | `output_dir` | where stage checkpoints and reports go |
//! | `cache_dir` | stage cache shared between runs (default `<output_dir>/cache`) |
//! | `train_limit`, `test_limit` | use only the first N samples (0 = all) |
//! | `optimizer`, `lr`, `beta1`, `beta2`, `eps` | optimizer for baseline training |
//! | `batch_size` | mini-batch size for every stage |
//! | `train.epochs`, `train.lr_decay` | baseline epochs; per-epoch learning-rate multiplier |
//! | `admm.rho`, `admm.rho_growth` | initial penalty, multiplier per iteration |
//! | `admm.iterations`, `admm.epochs_per_proximal`, `admm.lr`, `admm.lr_decay` | ADMM schedule; the proximal learning rate is multiplied by `lr_decay` after every iteration |
//! | `budget.<layer>.filters`, `budget.<layer>.columns` | count or fraction |
//! | `retrain.epochs`, `retrain.lr` | masked retraining |
//! | `th1` .. `th4` | purification thresholds |
//! | `purify.<layer>.th1` .. `purify.<layer>.th4` | per-layer overrides |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::admm::{Amount, BudgetSpec, StructuredBudget};
use crate::error::{Error, Result};
use crate::graph::{build_lenet5, build_tiny_resnet, LayerGraph};
use crate::optim::{Hyper, OptimizerKind};
use crate::purify::{ThresholdSet, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Lenet5,
    TinyResnet,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(ModelKind::Lenet5),
            "tiny_resnet" => Ok(ModelKind::TinyResnet),
            _ => Err(Error::Config(format!("unknown model `{s}` (lenet5|tiny_resnet)"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Lenet5 => "lenet5",
            ModelKind::TinyResnet => "tiny_resnet",
        })
    }
}

impl ModelKind {
    pub fn build(self) -> LayerGraph {
        match self {
            ModelKind::Lenet5 => build_lenet5(),
            ModelKind::TinyResnet => build_tiny_resnet(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub dataset: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
    pub optimizer: Hyper,
    pub batch_size: usize,
    pub train_epochs: usize,
    pub train_lr_decay: f64,
    pub rho: f64,
    pub rho_growth: f64,
    pub admm_iterations: usize,
    pub epochs_per_proximal: usize,
    pub admm_lr: f64,
    pub admm_lr_decay: f64,
    pub budgets: BTreeMap<String, BudgetSpec>,
    pub retrain_epochs: usize,
    pub retrain_lr: f64,
    /// Global purification thresholds.
    pub thresholds: Thresholds,
    /// Per-layer overrides; unset entries fall back to the global value.
    pub threshold_overrides: BTreeMap<String, [Option<f64>; 4]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Lenet5,
            dataset: PathBuf::from("data/mnist"),
            seed: 1,
            deterministic: false,
            output_dir: PathBuf::from("runs/default"),
            cache_dir: None,
            train_limit: 0,
            test_limit: 0,
            optimizer: Hyper::default(),
            batch_size: 64,
            train_epochs: 10,
            train_lr_decay: 1.0,
            rho: 1e-3,
            rho_growth: 1.0,
            admm_iterations: 9,
            epochs_per_proximal: 3,
            admm_lr: 1e-3,
            admm_lr_decay: 1.0,
            budgets: BTreeMap::new(),
            retrain_epochs: 3,
            retrain_lr: 1e-4,
            thresholds: Thresholds::ZERO,
            threshold_overrides: BTreeMap::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("`{key}` must be positive, got {v}")))
    }
}

fn threshold_index(which: &str, key: &str) -> Result<usize> {
    match which {
        "th1" => Ok(0),
        "th2" => Ok(1),
        "th3" => Ok(2),
        "th4" => Ok(3),
        _ => Err(Error::Config(format!("unknown key `{key}`"))),
    }
}

fn threshold_array(t: &Thresholds) -> [f64; 4] {
    [t.th1, t.th2, t.th3, t.th4]
}

fn from_array(a: [f64; 4]) -> Thresholds {
    Thresholds {
        th1: a[0],
        th2: a[1],
        th3: a[2],
        th4: a[3],
    }
}

fn set_threshold(t: &mut Thresholds, which: &str, key: &str, value: &str) -> Result<()> {
    let mut a = threshold_array(t);
    a[threshold_index(which, key)?] = parse(key, value)?;
    *t = from_array(a);
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Error::Config(format!(
                    "line {}: `{k}` already set on line {prev}",
                    n + 1
                )));
            }
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model" => self.model = value.parse()?,
            "dataset" => self.dataset = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "deterministic" => self.deterministic = parse_bool(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = parse(key, value)?,
            "test_limit" => self.test_limit = parse(key, value)?,
            "optimizer" => {
                self.optimizer.kind = value
                    .parse::<OptimizerKind>()
                    .map_err(|e| Error::Config(e.to_string()))?
            }
            "lr" => self.optimizer.lr = positive(key, parse(key, value)?)?,
            "beta1" => self.optimizer.beta1 = parse(key, value)?,
            "beta2" => self.optimizer.beta2 = parse(key, value)?,
            "eps" => self.optimizer.eps = positive(key, parse(key, value)?)?,
            "batch_size" => {
                self.batch_size = parse(key, value)?;
                if self.batch_size == 0 {
                    return Err(Error::Config("`batch_size` must be at least 1".into()));
                }
            }
            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.lr_decay" => self.train_lr_decay = positive(key, parse(key, value)?)?,
            "admm.rho" => self.rho = positive(key, parse(key, value)?)?,
            "admm.rho_growth" => self.rho_growth = positive(key, parse(key, value)?)?,
            "admm.iterations" => self.admm_iterations = parse(key, value)?,
            "admm.epochs_per_proximal" => self.epochs_per_proximal = parse(key, value)?,
            "admm.lr" => self.admm_lr = positive(key, parse(key, value)?)?,
            "admm.lr_decay" => self.admm_lr_decay = positive(key, parse(key, value)?)?,
            "retrain.epochs" => self.retrain_epochs = parse(key, value)?,
            "retrain.lr" => self.retrain_lr = positive(key, parse(key, value)?)?,
            "th1" | "th2" | "th3" | "th4" => set_threshold(&mut self.thresholds, key, key, value)?,
            _ => {
                let parts: Vec<&str> = key.split('.').collect();
                match parts.as_slice() {
                    ["budget", layer, "filters"] => {
                        self.budgets.entry(layer.to_string()).or_default().filters = Some(value.parse::<Amount>()?)
                    }
                    ["budget", layer, "columns"] => {
                        self.budgets.entry(layer.to_string()).or_default().columns = Some(value.parse::<Amount>()?)
                    }
                    ["purify", layer, which] => {
                        let i = threshold_index(which, key)?;
                        self.threshold_overrides.entry(layer.to_string()).or_default()[i] = Some(parse(key, value)?);
                    }
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    /// Checks every referenced layer exists and resolves budgets against the
    /// layer dims.
    pub fn resolve_budgets(&self, model: &LayerGraph) -> Result<Vec<StructuredBudget>> {
        self.check_layers(model)?;
        self.budgets
            .iter()
            .map(|(layer, spec)| {
                let id = model.find_weighted(layer)?;
                let (rows, cols) = model.node(id).weights().lowered_shape();
                StructuredBudget::resolve(layer, spec, rows, cols).map_err(|e| Error::Config(e.to_string()))
            })
            .collect()
    }

    pub fn check_layers(&self, model: &LayerGraph) -> Result<()> {
        let names = model.weighted_names();
        for layer in self.budgets.keys().chain(self.threshold_overrides.keys()) {
            if !names.contains(layer) {
                return Err(Error::Config(format!(
                    "config references layer `{layer}`, which is not a weighted layer of {}",
                    self.model
                )));
            }
        }
        self.threshold_set().validate()
    }

    /// Global thresholds with per-layer overrides applied.
    pub fn threshold_set(&self) -> ThresholdSet {
        let per_layer = self
            .threshold_overrides
            .iter()
            .map(|(layer, o)| {
                let mut a = threshold_array(&self.thresholds);
                for (slot, v) in a.iter_mut().zip(o) {
                    if let Some(v) = v {
                        *slot = *v;
                    }
                }
                (layer.clone(), from_array(a))
            })
            .collect();
        ThresholdSet {
            global: self.thresholds,
            per_layer,
        }
    }

    pub fn proximal_hyper(&self) -> Hyper {
        Hyper {
            lr: self.admm_lr,
            ..self.optimizer
        }
    }

    pub fn retrain_hyper(&self) -> Hyper {
        Hyper {
            lr: self.retrain_lr,
            ..self.optimizer
        }
    }

    /// Every setting as canonical `key -> value` pairs; parsing the echo
    /// (as `key = value` lines) gives back an equal config.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model", self.model.to_string());
        put("dataset", self.dataset.display().to_string());
        put("seed", self.seed.to_string());
        put("deterministic", self.deterministic.to_string());
        put("output_dir", self.output_dir.display().to_string());
        if let Some(dir) = &self.cache_dir {
            put("cache_dir", dir.display().to_string());
        }
        put("train_limit", self.train_limit.to_string());
        put("test_limit", self.test_limit.to_string());
        put("optimizer", self.optimizer.kind.to_string());
        put("lr", format!("{:?}", self.optimizer.lr));
        put("beta1", format!("{:?}", self.optimizer.beta1));
        put("beta2", format!("{:?}", self.optimizer.beta2));
        put("eps", format!("{:?}", self.optimizer.eps));
        put("batch_size", self.batch_size.to_string());
        put("train.epochs", self.train_epochs.to_string());
        put("train.lr_decay", format!("{:?}", self.train_lr_decay));
        put("admm.rho", format!("{:?}", self.rho));
        put("admm.rho_growth", format!("{:?}", self.rho_growth));
        put("admm.iterations", self.admm_iterations.to_string());
        put("admm.epochs_per_proximal", self.epochs_per_proximal.to_string());
        put("admm.lr", format!("{:?}", self.admm_lr));
        put("admm.lr_decay", format!("{:?}", self.admm_lr_decay));
        put("retrain.epochs", self.retrain_epochs.to_string());
        put("retrain.lr", format!("{:?}", self.retrain_lr));
        for (k, v) in ["th1", "th2", "th3", "th4"]
            .into_iter()
            .zip(threshold_array(&self.thresholds))
        {
            put(k, format!("{v:?}"));
        }
        for (layer, b) in &self.budgets {
            if let Some(f) = b.filters {
                put(&format!("budget.{layer}.filters"), f.to_string());
            }
            if let Some(c) = b.columns {
                put(&format!("budget.{layer}.columns"), c.to_string());
            }
        }
        for (layer, o) in &self.threshold_overrides {
            for (k, v) in ["th1", "th2", "th3", "th4"].into_iter().zip(o) {
                if let Some(v) = v {
                    put(&format!("purify.{layer}.{k}"), format!("{v:?}"));
                }
            }
        }
        m
    }

    pub fn echo_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# reference preset
model = lenet5
seed = 42
admm.rho = 0.002   # penalty
budget.conv1.filters = 8
budget.fc1.columns = 0.25
th2 = 0.3
purify.conv2.th3 = 1e-4
th3 = 0.5
";

    #[test]
    fn parses_sample() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.rho, 0.002);
        assert_eq!(c.budgets["conv1"].filters, Some(Amount::Count(8)));
        assert_eq!(c.budgets["fc1"].columns, Some(Amount::Fraction(0.25)));
        assert_eq!(c.thresholds.th2, 0.3);
        let t = c.threshold_set().for_layer("conv2");
        assert_eq!((t.th2, t.th3), (0.3, 1e-4));
        assert_eq!(c.threshold_set().for_layer("conv1").th3, 0.5);
        let b = c.resolve_budgets(&build_lenet5()).unwrap();
        assert_eq!(b[1].columns, Some(200));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        assert_eq!(RunConfig::parse(&c.echo_text()).unwrap(), c);
    }

    #[test]
    fn errors() {
        for bad in [
            "model = vgg",
            "nonsense = 1",
            "admm.rho = -1",
            "budget.conv1.filters = 1.5",
            "seed = x",
            "just a line",
            "seed = 1\nseed = 2",
            "batch_size = 0",
        ] {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        let c = RunConfig::parse("budget.conv9.filters = 3").unwrap();
        assert!(matches!(c.resolve_budgets(&build_lenet5()), Err(Error::Config(_))));
        let c = RunConfig::parse("budget.conv1.filters = 21").unwrap();
        assert!(matches!(c.resolve_budgets(&build_lenet5()), Err(Error::Config(_))));
    }
}
