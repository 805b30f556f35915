//! Run configuration files.
//!
//! One `key = value` pair per line; `#` starts a comment. Keys carry a
//! dotted section prefix. Lists are comma-separated. Every key is optional
//! and unknown keys are rejected.
//!
//! ```text
//! dtype                     = f32          # f32 | f64
//! output                    = runs/demo
//!
//! network.backbone          = 8:1, 16:2, 32:2   # channels:stride per 3x3 stage
//! network.branch_width      = 32
//! network.embedding_dim     = 64
//! network.lambda_fr         = 3
//! network.attributes        = male, bald, chubby, big_nose, narrow_eyes
//! network.attribute_weights = 1, 1, 0.5, 0.5, 0.5
//! network.fusion            = aai          # aai | add | concat | se | aff
//! aai.reduction             = 8
//!
//! train.epochs              = 25
//! train.lr                  = 0.01
//! train.lr_steps            = 4, 10, 17
//! train.lr_factor           = 0.1
//! train.momentum            = 0.9
//! train.batch_size          = 8
//! train.seed                = 1
//! train.deterministic       = true
//! train.stage               = all          # fr | sb | joint | all
//!
//! data.path                 = some/dir     # dataset container; omit for synthetic
//! data.identities           = 32
//! data.samples_per_identity = 20
//! data.channels             = 1
//! data.height               = 32
//! data.width                = 32
//! data.attributes           = 5
//! data.noise                = 0.05
//! data.pose                 = 1
//! data.seed                 = 7
//! data.eval_fraction        = 0.25
//!
//! eval.fars                 = 1e-5, 1e-4, 1e-3, 1e-2, 1e-1
//! eval.pairs                = 1000
//! eval.seed                 = 11
//! eval.branch               = fused        # baseline | fused
//! ```
//!
//! When `network.attribute_weights` is omitted, `male` and `bald` weigh 1
//! and every other attribute 0.5.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_FAR_TARGETS;
use crate::network::{AttributeSpec, Branch, NetworkConfig, StageSpec};
use crate::tensor::DType;
use crate::training::{Stage, TrainConfig};

/// Stages a training command runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    One(Stage),
    All,
}

impl StageSelection {
    pub fn stages(self) -> Vec<Stage> {
        match self {
            StageSelection::One(s) => vec![s],
            StageSelection::All => Stage::ORDER.to_vec(),
        }
    }
}

impl FromStr for StageSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(StageSelection::All)
        } else {
            s.parse().map(StageSelection::One)
        }
    }
}

impl std::fmt::Display for StageSelection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageSelection::One(s) => write!(f, "{s}"),
            StageSelection::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub far_targets: Vec<f64>,
    pub pairs: usize,
    pub seed: u64,
    pub branch: Branch,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            far_targets: DEFAULT_FAR_TARGETS.to_vec(),
            pairs: 1000,
            seed: 11,
            branch: Branch::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dtype: DType,
    pub output: PathBuf,
    /// `n_identities` and `in_channels` are filled in from the data.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub stage: StageSelection,
    pub data: SyntheticSpec,
    pub data_path: Option<PathBuf>,
    pub eval: EvalConfig,
    explicit_weights: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dtype: DType::F32,
            output: PathBuf::from("aaface-out"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            stage: StageSelection::All,
            data: SyntheticSpec::default(),
            data_path: None,
            eval: EvalConfig::default(),
            explicit_weights: false,
        }
    }
}

const SYNTHETIC_KEYS: [&str; 9] = [
    "data.identities",
    "data.samples_per_identity",
    "data.channels",
    "data.height",
    "data.width",
    "data.attributes",
    "data.noise",
    "data.pose",
    "data.seed",
];

pub const KEYS: [&str; 34] = [
    "dtype",
    "output",
    "network.backbone",
    "network.branch_width",
    "network.embedding_dim",
    "network.lambda_fr",
    "network.attributes",
    "network.attribute_weights",
    "network.fusion",
    "aai.reduction",
    "train.epochs",
    "train.lr",
    "train.lr_steps",
    "train.lr_factor",
    "train.momentum",
    "train.batch_size",
    "train.seed",
    "train.deterministic",
    "train.stage",
    "data.path",
    "data.identities",
    "data.samples_per_identity",
    "data.channels",
    "data.height",
    "data.width",
    "data.attributes",
    "data.noise",
    "data.pose",
    "data.seed",
    "data.eval_fraction",
    "eval.fars",
    "eval.pairs",
    "eval.seed",
    "eval.branch",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn default_weight(name: &str) -> f64 {
    match name {
        "male" | "bald" => 1.0,
        _ => 0.5,
    }
}

fn join<V: std::fmt::Display>(items: &[V]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Parses and validates a config file.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(format!("line {}: key '{key}' set twice", n + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
            seen.push(key.to_string());
        }
        if cfg.data_path.is_some() {
            if let Some(k) = SYNTHETIC_KEYS.iter().find(|k| seen.iter().any(|s| s == *k)) {
                return Err(Error::config(format!(
                    "{k} describes the synthetic generator and conflicts with data.path"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dtype" => {
                self.dtype = match value {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(Error::config(format!("dtype: expected f32 or f64, got '{value}'"))),
                }
            }
            "output" => self.output = PathBuf::from(value),
            "network.backbone" => {
                self.network.backbone = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        let (c, st) = s.split_once(':').ok_or_else(|| {
                            Error::config(format!("network.backbone: stage '{s}' is not channels:stride"))
                        })?;
                        Ok(StageSpec {
                            channels: parse(key, c.trim())?,
                            stride: parse(key, st.trim())?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "network.branch_width" => self.network.branch_width = parse(key, value)?,
            "network.embedding_dim" => self.network.embedding_dim = parse(key, value)?,
            "network.lambda_fr" => self.network.lambda_fr = parse(key, value)?,
            "network.attributes" => {
                let names: Vec<String> = parse_list(key, value)?;
                let old = std::mem::take(&mut self.network.attributes);
                self.network.attributes = names
                    .into_iter()
                    .map(|name| {
                        let weight = if self.explicit_weights {
                            old.iter().find(|a| a.name == name).map_or(default_weight(&name), |a| a.weight)
                        } else {
                            default_weight(&name)
                        };
                        AttributeSpec::new(name, weight)
                    })
                    .collect();
            }
            "network.attribute_weights" => {
                let weights: Vec<f64> = parse_list(key, value)?;
                if weights.len() != self.network.attributes.len() {
                    return Err(Error::config(format!(
                        "network.attribute_weights has {} entries for {} attributes",
                        weights.len(),
                        self.network.attributes.len()
                    )));
                }
                for (a, w) in self.network.attributes.iter_mut().zip(weights) {
                    a.weight = w;
                }
                self.explicit_weights = true;
            }
            "network.fusion" => self.network.fusion = value.parse()?,
            "aai.reduction" => self.network.reduction = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lr" => self.train.lr0 = parse(key, value)?,
            "train.lr_steps" => self.train.lr_steps = parse_list(key, value)?,
            "train.lr_factor" => self.train.lr_factor = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.deterministic" => self.train.deterministic = parse_bool(key, value)?,
            "train.stage" => self.stage = value.parse()?,
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.identities" => self.data.n_identities = parse(key, value)?,
            "data.samples_per_identity" => self.data.samples_per_identity = parse(key, value)?,
            "data.channels" => self.data.channels = parse(key, value)?,
            "data.height" => self.data.height = parse(key, value)?,
            "data.width" => self.data.width = parse(key, value)?,
            "data.attributes" => self.data.n_attributes = parse(key, value)?,
            "data.noise" => self.data.noise = parse(key, value)?,
            "data.pose" => self.data.pose = parse(key, value)?,
            "data.seed" => self.data.seed = parse(key, value)?,
            "data.eval_fraction" => self.data.eval_fraction = parse(key, value)?,
            "eval.fars" => self.eval.far_targets = parse_list(key, value)?,
            "eval.pairs" => self.eval.pairs = parse(key, value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "eval.branch" => self.eval.branch = value.parse()?,
            _ => {
                return Err(Error::config(format!(
                    "unknown key '{key}' (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Checks everything that can be checked before the data is loaded.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data_path.is_none() {
            self.data.validate()?;
        } else if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(Error::config(format!(
                "data.eval_fraction = {} must be in [0, 1)",
                self.data.eval_fraction
            )));
        }
        let mut net = self.network.clone();
        net.n_identities = net.n_identities.max(2);
        if self.data_path.is_none() {
            net.in_channels = self.data.channels;
            net.n_identities = self.synthetic_train_identities();
        }
        net.validate()?;
        if self.eval.far_targets.is_empty() {
            return Err(Error::config("eval.fars must list at least one target"));
        }
        if let Some(f) = self.eval.far_targets.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!("eval.fars entry {f} must lie in (0, 1]")));
        }
        if self.eval.pairs < 2 || self.eval.pairs % 2 != 0 {
            return Err(Error::config(format!(
                "eval.pairs = {} must be a positive even number",
                self.eval.pairs
            )));
        }
        if self.data_path.is_none() {
            if let Some(a) = self
                .network
                .attributes
                .iter()
                .find(|a| synthetic_attribute_index(&a.name, self.data.n_attributes).is_none())
            {
                return Err(Error::config(format!(
                    "attribute '{}' is not produced by the synthetic generator with data.attributes = {}",
                    a.name, self.data.n_attributes
                )));
            }
        }
        Ok(())
    }

    fn synthetic_train_identities(&self) -> usize {
        let n = self.data.n_identities;
        n - (n as f64 * self.data.eval_fraction).ceil() as usize
    }

    /// Network config for a training split.
    pub fn network_for(&self, train: &Dataset) -> Result<NetworkConfig> {
        let mut net = self.network.clone();
        net.n_identities = train.identities().len();
        net.in_channels = train
            .image_shape()
            .ok_or_else(|| Error::config("training split is empty"))?[0];
        net.validate()?;
        Ok(net)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k:<25} = {v}");
        };
        kv("dtype", self.dtype.to_string());
        kv("output", self.output.display().to_string());
        let n = &self.network;
        kv(
            "network.backbone",
            n.backbone
                .iter()
                .map(|st| format!("{}:{}", st.channels, st.stride))
                .collect::<Vec<_>>()
                .join(", "),
        );
        kv("network.branch_width", n.branch_width.to_string());
        kv("network.embedding_dim", n.embedding_dim.to_string());
        kv("network.lambda_fr", n.lambda_fr.to_string());
        let names: Vec<&str> = n.attributes.iter().map(|a| a.name.as_str()).collect();
        kv("network.attributes", names.join(", "));
        kv("network.attribute_weights", join(&n.attribute_weights()));
        kv("network.fusion", n.fusion.to_string());
        kv("aai.reduction", n.reduction.to_string());
        let t = &self.train;
        kv("train.epochs", t.epochs.to_string());
        kv("train.lr", t.lr0.to_string());
        kv("train.lr_steps", join(&t.lr_steps));
        kv("train.lr_factor", t.lr_factor.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.deterministic", t.deterministic.to_string());
        kv("train.stage", self.stage.to_string());
        match &self.data_path {
            Some(p) => kv("data.path", p.display().to_string()),
            None => {
                let d = &self.data;
                kv("data.identities", d.n_identities.to_string());
                kv("data.samples_per_identity", d.samples_per_identity.to_string());
                kv("data.channels", d.channels.to_string());
                kv("data.height", d.height.to_string());
                kv("data.width", d.width.to_string());
                kv("data.attributes", d.n_attributes.to_string());
                kv("data.noise", d.noise.to_string());
                kv("data.pose", d.pose.to_string());
                kv("data.seed", d.seed.to_string());
            }
        }
        kv("data.eval_fraction", self.data.eval_fraction.to_string());
        kv("eval.fars", join(&self.eval.far_targets));
        kv("eval.pairs", self.eval.pairs.to_string());
        kv("eval.seed", self.eval.seed.to_string());
        kv("eval.branch", self.eval.branch.to_string());
        s
    }
}

fn synthetic_attribute_index(name: &str, n: usize) -> Option<usize> {
    (0..n).find(|&i| crate::datagen::attribute_name(i) == name)
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse_str("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse_str(
            "network.attributes = bald, male\nnetwork.attribute_weights = 2, 0.25\naai.reduction = 4\ntrain.epochs = 3\ntrain.lr_steps = 1\n",
        )
        .unwrap();
        let again = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.network.attribute_weights(), vec![2.0, 0.25]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse_str("train.epochs = 3\ntrain.lr_steps = 1\ntrain.warmup = 2\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("'train.warmup'") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn nonpositive_lambda_is_rejected() {
        let err = RunConfig::parse_str("network.lambda_fr = 0").unwrap_err();
        assert!(err.to_string().contains("lambda_fr"), "{err}");
        let err = RunConfig::parse_str("network.attribute_weights = 1, 1, -0.5, 0.5, 0.5").unwrap_err();
        assert!(err.to_string().contains("chubby"), "{err}");
    }

    #[test]
    fn reduction_must_divide_channels() {
        let err = RunConfig::parse_str("aai.reduction = 6").unwrap_err();
        assert!(err.to_string().contains("does not divide"), "{err}");
    }

    #[test]
    fn lr_steps_must_precede_last_epoch() {
        let err = RunConfig::parse_str("train.epochs = 10").unwrap_err();
        assert!(err.to_string().contains("lr_steps entry 10"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(RunConfig::parse_str("train.seed = 1\ntrain.seed = 2").is_err());
        assert!(RunConfig::parse_str("train.seed 1").is_err());
        assert!(RunConfig::parse_str("train.seed = one").is_err());
    }

    #[test]
    fn synthetic_keys_conflict_with_a_dataset_path() {
        let err = RunConfig::parse_str("data.path = x\ndata.noise = 0.1").unwrap_err();
        assert!(err.to_string().contains("data.noise"), "{err}");
    }

    #[test]
    fn unknown_synthetic_attribute_is_rejected() {
        assert!(RunConfig::parse_str("network.attributes = male, smiling").is_err());
    }
}
