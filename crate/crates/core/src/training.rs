//! Three-stage training with momentum SGD and a step learning-rate schedule.
//!
//! 1. `fr`: recognition branch only (backbone frozen).
//! 2. `sb`: soft-biometric conv and heads only (backbone and `fr.conv1` frozen).
//! 3. `joint`: both branches, the fusion operator and the fused head, on
//!    `lambda_fr * CE(fused) + sb_loss` (backbone still frozen).

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, BCE_EPS};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::network::{sb_loss, total_loss, Heads, Network, ParamGroup};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Fr,
    Sb,
    Joint,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::Fr, Stage::Sb, Stage::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fr => "fr",
            Stage::Sb => "sb",
            Stage::Joint => "joint",
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Stage::Fr => matches!(group, FrConv1 | FrConv2 | FrHead),
            Stage::Sb => matches!(group, SbConv | SbHead),
            Stage::Joint => matches!(group, FrConv1 | FrConv2 | SbConv | SbHead | Fusion | FusedHead),
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Fr => &[],
            Stage::Sb => &[Stage::Fr],
            Stage::Joint => &[Stage::Fr, Stage::Sb],
        }
    }

    fn heads(self) -> Heads {
        match self {
            Stage::Fr => Heads {
                fr: true,
                sb: false,
                fused: false,
            },
            Stage::Sb => Heads {
                fr: false,
                sb: true,
                fused: false,
            },
            Stage::Joint => Heads {
                fr: false,
                sb: true,
                fused: true,
            },
        }
    }

    fn salt(self) -> u64 {
        match self {
            Stage::Fr => 0x11,
            Stage::Sb => 0x22,
            Stage::Joint => 0x33,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fr" => Ok(Stage::Fr),
            "sb" => Ok(Stage::Sb),
            "joint" => Ok(Stage::Joint),
            other => Err(Error::config(format!("unknown stage '{other}' (expected fr, sb, joint)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_factor`.
    pub lr_steps: Vec<usize>,
    pub lr_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Leave wall-clock times out of the written log.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            lr0: 0.01,
            lr_steps: vec![4, 10, 17],
            lr_factor: 0.1,
            momentum: 0.9,
            batch_size: 8,
            seed: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be positive"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("train.lr must be positive, got {}", self.lr0)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::config(format!(
                "train.lr_factor = {} must lie strictly between 0 and 1",
                self.lr_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("train.momentum = {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.lr_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "train.lr_steps {:?} must be strictly increasing",
                self.lr_steps
            )));
        }
        if let Some(&s) = self.lr_steps.iter().find(|&&s| s >= self.epochs) {
            return Err(Error::config(format!(
                "train.lr_steps entry {s} is not below train.epochs = {}",
                self.epochs
            )));
        }
        Ok(())
    }
}

/// `lr0 * lr_factor ^ #{steps <= epoch}`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = cfg.lr_steps.iter().filter(|&&s| s <= epoch).count();
    cfg.lr0 * cfg.lr_factor.powi(steps as i32)
}

/// One momentum-SGD update: `v = momentum * v + g; w -= lr * v`.
pub fn sgd_step<T: Real>(weights: &mut [T], grads: &[T], velocity: &mut [T], lr: f64, momentum: f64) {
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *w = *w - lr * *v;
    }
}

/// Momentum SGD over a parameter store; parameters without a gradient are untouched.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(n_params: usize, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: vec![None; n_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        for (id, g) in grads {
            let w = store.value_mut(*id);
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            sgd_step(w.data_mut(), g.data(), v, lr, self.momentum);
        }
    }
}

/// A network plus the record of which stages it has completed.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub net: Network<T>,
    pub completed: BTreeSet<Stage>,
}

impl<T: Real> Model<T> {
    pub fn new(net: Network<T>) -> Self {
        Model {
            net,
            completed: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    /// Mean identity cross-entropy (fr and joint stages).
    pub fr: Option<f64>,
    /// Mean unweighted BCE per attribute (sb and joint stages).
    pub attributes: Vec<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub attribute_names: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(attribute_names: Vec<String>) -> Self {
        TrainLog {
            attribute_names,
            records: Vec::new(),
        }
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }

    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    /// Line-delimited records, fields tab-separated in the order
    /// `stage epoch lr total fr <attribute...> wall_ms`. Missing losses are
    /// written as `-`, and so is `wall_ms` when `deterministic` is set.
    pub fn to_text(&self, cfg: &TrainConfig) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# epochs={} lr0={:e} lr_steps={:?} lr_factor={:e} momentum={:e} batch_size={} seed={}",
            cfg.epochs, cfg.lr0, cfg.lr_steps, cfg.lr_factor, cfg.momentum, cfg.batch_size, cfg.seed
        );
        let _ = write!(out, "stage\tepoch\tlr\ttotal\tfr");
        for n in &self.attribute_names {
            let _ = write!(out, "\t{n}");
        }
        out.push_str("\twall_ms\n");
        for r in &self.records {
            let _ = write!(out, "{}\t{}\t{:e}\t{:e}\t", r.stage, r.epoch, r.lr, r.total);
            match r.fr {
                Some(v) => {
                    let _ = write!(out, "{v:e}");
                }
                None => out.push('-'),
            }
            for i in 0..self.attribute_names.len() {
                match r.attributes.get(i) {
                    Some(v) => {
                        let _ = write!(out, "\t{v:e}");
                    }
                    None => out.push_str("\t-"),
                }
            }
            if cfg.deterministic {
                out.push_str("\t-\n");
            } else {
                let _ = writeln!(out, "\t{}", r.wall_ms);
            }
        }
        out
    }
}

/// Per-sample targets for the network's heads, prepared from a dataset.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Identity labels remapped to `0..n_classes`.
    pub classes: Vec<usize>,
    /// `N x n_attr` bits in head order.
    pub attributes: Vec<u8>,
    pub n_classes: usize,
    pub n_attributes: usize,
}

impl TrainData {
    pub fn new(data: &Dataset, columns: &[usize]) -> Result<Self> {
        let ids = data.identities();
        let classes = data
            .samples
            .iter()
            .map(|s| ids.binary_search(&s.identity).expect("identity listed"))
            .collect();
        let mut attributes = Vec::with_capacity(data.len() * columns.len());
        for s in &data.samples {
            for &c in columns {
                let bit = *s.attributes.get(c).ok_or_else(|| {
                    Error::contract(format!("sample '{}' has no attribute column {c}", s.id))
                })?;
                attributes.push(bit);
            }
        }
        Ok(TrainData {
            classes,
            attributes,
            n_classes: ids.len(),
            n_attributes: columns.len(),
        })
    }
}

/// Dataset column of every attribute head, looked up by name.
pub fn attribute_columns<T: Real>(net: &Network<T>, data: &Dataset) -> Result<Vec<usize>> {
    net.config()
        .attributes
        .iter()
        .map(|a| {
            data.attribute_index(&a.name).ok_or_else(|| {
                Error::config(format!(
                    "attribute '{}' not present in dataset (has {:?})",
                    a.name, data.attribute_names
                ))
            })
        })
        .collect()
}

fn gather<T: Real>(features: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let inner: usize = features.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * inner);
    for &i in indices {
        data.extend_from_slice(&features.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = features.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

fn backbone_features<T: Real>(net: &Network<T>, data: &Dataset) -> Result<Tensor<T>> {
    const CHUNK: usize = 64;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for chunk in idx.chunks(CHUNK) {
        let f = net.backbone_features(&data.batch::<T>(chunk)?)?;
        shape = f.shape().to_vec();
        out.extend_from_slice(f.data());
    }
    shape[0] = data.len();
    Tensor::new(shape, out)
}

fn mean_bce(p: f64, t: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if t == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Runs one stage for `cfg.epochs` epochs and marks it completed.
pub fn run_stage<T: Real>(stage: Stage, model: &mut Model<T>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if let Some(missing) = stage.prerequisites().iter().find(|s| !model.completed.contains(s)) {
        return Err(Error::Staging(format!(
            "stage {stage} needs weights from stage {missing}, which has not been run or loaded"
        )));
    }
    let columns = attribute_columns(&model.net, data)?;
    let targets = TrainData::new(data, &columns)?;
    if targets.n_classes != model.net.config().n_identities {
        return Err(Error::config(format!(
            "dataset has {} identities but the network was built for {}",
            targets.n_classes,
            model.net.config().n_identities
        )));
    }
    let n = data.len();
    if n < cfg.batch_size {
        return Err(Error::config(format!(
            "train.batch_size = {} exceeds the {n} training samples",
            cfg.batch_size
        )));
    }
    // Backbone weights are frozen in every stage, so its features are fixed.
    let features = backbone_features(&model.net, data)?;
    let weights_sb = model.net.config().attribute_weights();
    let lambda_fr = model.net.config().lambda_fr;
    let k = targets.n_attributes;
    let trainable = |name: &str| ParamGroup::of(name).is_some_and(|g| stage.trains(g));
    let mut sgd = Sgd::new(model.net.params().len(), cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (stage.salt() << 56));
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::new(model.net.config().attributes.iter().map(|a| a.name.clone()).collect());
    let heads = stage.heads();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut total_sum, mut fr_sum) = (0.0, 0.0);
        let mut attr_sum = vec![0.0; k];
        let batches = n / cfg.batch_size;
        for (b, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let p = model.net.params().bind(&mut g, trainable);
            let x = g.constant(gather(&features, idx)?);
            let out = model.net.heads_forward(&mut g, &p, x, heads)?;
            let classes: Vec<usize> = idx.iter().map(|&i| targets.classes[i]).collect();
            let sb_targets: Vec<T> = idx
                .iter()
                .flat_map(|&i| targets.attributes[i * k..(i + 1) * k].iter().map(|&v| T::of(v as f64)))
                .collect();
            let loss = match stage {
                Stage::Fr => {
                    let ce = g.softmax_cross_entropy(out.fr_logits.unwrap(), &classes)?;
                    fr_sum += g.value(ce).item().as_f64();
                    ce
                }
                Stage::Sb => sb_loss(&mut g, out.sb_probs.unwrap(), &sb_targets, &weights_sb)?,
                Stage::Joint => {
                    let logits = out.fused_logits.unwrap();
                    let loss = total_loss(
                        &mut g,
                        logits,
                        &classes,
                        out.sb_probs.unwrap(),
                        &sb_targets,
                        &weights_sb,
                        lambda_fr,
                    )?;
                    // Recomputed outside the tape for logging only.
                    let probs = crate::autograd::softmax_rows(g.value(logits).data(), targets.n_classes);
                    let ce: f64 = classes
                        .iter()
                        .enumerate()
                        .map(|(r, &c)| -probs[r * targets.n_classes + c].as_f64().max(f64::MIN_POSITIVE).ln())
                        .sum::<f64>()
                        / classes.len() as f64;
                    fr_sum += ce;
                    loss
                }
            };
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: stage.to_string(),
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            total_sum += value;
            if let Some(probs) = out.sb_probs {
                let pv = g.value(probs).data();
                for (j, &i) in idx.iter().enumerate() {
                    for a in 0..k {
                        attr_sum[a] += mean_bce(pv[j * k + a].as_f64(), targets.attributes[i * k + a]);
                    }
                }
            }
            g.backward(loss)?;
            let grads: Vec<(ParamId, Tensor<T>)> = model
                .net
                .params()
                .ids()
                .filter_map(|id| g.grad(p.var(id)).map(|t| (id, t.clone())))
                .collect();
            sgd.step(model.net.params_mut(), &grads, lr);
        }
        let nb = batches as f64;
        let seen = (batches * cfg.batch_size) as f64;
        log.records.push(EpochRecord {
            stage,
            epoch,
            lr,
            total: total_sum / nb,
            fr: heads_has_fr(stage).then_some(fr_sum / nb),
            attributes: if heads.sb { attr_sum.iter().map(|s| s / seen).collect() } else { Vec::new() },
            wall_ms: started.elapsed().as_millis(),
        });
    }
    model.completed.insert(stage);
    Ok(log)
}

fn heads_has_fr(stage: Stage) -> bool {
    matches!(stage, Stage::Fr | Stage::Joint)
}

/// `fr -> sb -> joint`, writing `stage_<name>.aafw` into `checkpoints` after
/// each stage when a directory is given.
pub fn run_all<T: Real>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    checkpoints: Option<&Path>,
) -> Result<TrainLog> {
    let mut log = TrainLog::new(model.net.config().attributes.iter().map(|a| a.name.clone()).collect());
    for stage in Stage::ORDER {
        log.extend(run_stage(stage, model, data, cfg)?);
        if let Some(dir) = checkpoints {
            weights::save_weights(&dir.join(checkpoint_name(stage)), model.net.params())?;
        }
    }
    Ok(log)
}

pub fn checkpoint_name(stage: Stage) -> String {
    format!("stage_{}.aafw", stage.name())
}
