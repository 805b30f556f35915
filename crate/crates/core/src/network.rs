//! Shared-backbone network with a face-recognition branch, a soft-biometric
//! branch, and a fused recognition head.
//!
//! ```text
//! images -> backbone -> fr.conv1 -> fr.conv2 -> F_FR -> GAP -> fr.head
//!                          |
//!                          +------> sb.conv --> F_SB -> GAP -> sb.head -> sigmoid
//!
//! fuse(F_FR, F_SB) -> GAP -> fused.head
//! ```
//!
//! `fr.conv1` is shared by both branches. The recognition embedding is the
//! GAP output; identity logits come from a linear layer on top of it.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AaiConfig, AttentionWeights, FusionOperator, FusionVariant, GateVars};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSpec {
    pub name: String,
    /// Loss weight of this attribute's binary cross-entropy.
    pub weight: f64,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, weight: f64) -> Self {
        AttributeSpec {
            name: name.into(),
            weight,
        }
    }
}

/// The five soft biometrics with their default loss weights, in the order
/// the synthetic generator renders them.
pub fn default_attributes() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec::new("male", 1.0),
        AttributeSpec::new("bald", 1.0),
        AttributeSpec::new("chubby", 0.5),
        AttributeSpec::new("big_nose", 0.5),
        AttributeSpec::new("narrow_eyes", 0.5),
    ]
}

pub const DEFAULT_LAMBDA_FR: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// 3x3 conv stages, padding 1, ReLU after each.
    pub backbone: Vec<StageSpec>,
    /// Width of the shared `fr.conv1` layer.
    pub branch_width: usize,
    /// Width of `fr.conv2` and `sb.conv`, hence of both GAP embeddings.
    pub embedding_dim: usize,
    pub n_identities: usize,
    pub attributes: Vec<AttributeSpec>,
    pub lambda_fr: f64,
    pub reduction: usize,
    pub fusion: FusionVariant,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            backbone: vec![
                StageSpec { channels: 8, stride: 1 },
                StageSpec { channels: 16, stride: 2 },
                StageSpec { channels: 32, stride: 2 },
            ],
            branch_width: 32,
            embedding_dim: 64,
            n_identities: 10,
            attributes: default_attributes(),
            lambda_fr: DEFAULT_LAMBDA_FR,
            reduction: 8,
            fusion: FusionVariant::Aai,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("network.in_channels must be positive"));
        }
        if self.backbone.is_empty() {
            return Err(Error::config("network.backbone needs at least one stage"));
        }
        if let Some(s) = self.backbone.iter().find(|s| s.channels == 0 || s.stride == 0) {
            return Err(Error::config(format!(
                "backbone stage {s:?} needs positive channels and stride"
            )));
        }
        if self.branch_width == 0 {
            return Err(Error::config("network.branch_width must be positive"));
        }
        if self.embedding_dim < 2 {
            return Err(Error::config(format!(
                "network.embedding_dim = {} must be at least 2",
                self.embedding_dim
            )));
        }
        if self.n_identities < 2 {
            return Err(Error::config(format!(
                "need at least 2 training identities, got {}",
                self.n_identities
            )));
        }
        if self.attributes.is_empty() {
            return Err(Error::config("network.attributes must name at least one attribute"));
        }
        for a in &self.attributes {
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(Error::config(format!(
                    "loss weight for attribute '{}' must be positive, got {}",
                    a.name, a.weight
                )));
            }
        }
        for (i, a) in self.attributes.iter().enumerate() {
            if self.attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::config(format!("attribute '{}' listed twice", a.name)));
            }
        }
        if !(self.lambda_fr > 0.0 && self.lambda_fr.is_finite()) {
            return Err(Error::config(format!(
                "network.lambda_fr must be positive, got {}",
                self.lambda_fr
            )));
        }
        self.aai().validate()
    }

    pub fn aai(&self) -> AaiConfig {
        AaiConfig {
            channels: self.embedding_dim,
            reduction: self.reduction,
        }
    }

    pub fn attribute_weights(&self) -> Vec<f64> {
        self.attributes.iter().map(|a| a.weight).collect()
    }

    pub fn backbone_channels(&self) -> usize {
        self.backbone.last().map_or(self.in_channels, |s| s.channels)
    }
}

/// Parameter groups, used to decide what each training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    FrConv1,
    FrConv2,
    FrHead,
    SbConv,
    SbHead,
    Fusion,
    FusedHead,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        const PREFIXES: [(&str, ParamGroup); 8] = [
            ("backbone.", ParamGroup::Backbone),
            ("fr.conv1.", ParamGroup::FrConv1),
            ("fr.conv2.", ParamGroup::FrConv2),
            ("fr.head.", ParamGroup::FrHead),
            ("sb.conv.", ParamGroup::SbConv),
            ("sb.head.", ParamGroup::SbHead),
            ("fusion.", ParamGroup::Fusion),
            ("fused.head.", ParamGroup::FusedHead),
        ];
        PREFIXES
            .iter()
            .find(|(p, _)| name.starts_with(p))
            .map(|&(_, g)| g)
    }
}

/// Which embedding a verification run reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    /// GAP of `F_FR`, without soft-biometric information.
    Baseline,
    /// GAP of the fused map.
    Fused,
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Branch::Baseline),
            "fused" => Ok(Branch::Fused),
            other => Err(Error::config(format!(
                "unknown branch '{other}' (expected baseline or fused)"
            ))),
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Baseline => "baseline",
            Branch::Fused => "fused",
        })
    }
}

/// Which heads a forward pass should build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub fr: bool,
    pub sb: bool,
    pub fused: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        fr: true,
        sb: true,
        fused: true,
    };
}

/// Graph handles of a forward pass; absent heads are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BranchVars {
    pub fr_map: Option<Var>,
    pub sb_map: Option<Var>,
    pub fr_embedding: Option<Var>,
    pub fr_logits: Option<Var>,
    pub sb_probs: Option<Var>,
    pub fused_embedding: Option<Var>,
    pub fused_logits: Option<Var>,
    pub gates: Option<GateVars>,
}

#[derive(Debug, Clone)]
pub struct BranchOutputs<T> {
    pub fr_embedding: Tensor<T>,
    pub fr_logits: Tensor<T>,
    pub sb_probs: Tensor<T>,
    pub fused_embedding: Tensor<T>,
    pub fused_logits: Tensor<T>,
    /// Present when the fusion operator is the AAI module.
    pub attention: Option<AttentionWeights<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    cfg: NetworkConfig,
    store: ParamStore<T>,
    backbone: Vec<Conv2d>,
    fr_conv1: Conv2d,
    fr_conv2: Conv2d,
    fr_head: Linear,
    sb_conv: Conv2d,
    sb_head: Linear,
    fusion: FusionOperator,
    fused_head: Linear,
}

impl<T: Real> Network<T> {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut backbone = Vec::with_capacity(cfg.backbone.len());
        let mut c = cfg.in_channels;
        for (i, stage) in cfg.backbone.iter().enumerate() {
            backbone.push(Conv2d::new(
                &mut store,
                &format!("backbone.{i}"),
                c,
                stage.channels,
                3,
                stage.stride,
                1,
                &mut rng,
            )?);
            c = stage.channels;
        }
        let (bw, e) = (cfg.branch_width, cfg.embedding_dim);
        let fr_conv1 = Conv2d::new(&mut store, "fr.conv1", c, bw, 3, 1, 1, &mut rng)?;
        let fr_conv2 = Conv2d::new(&mut store, "fr.conv2", bw, e, 3, 1, 1, &mut rng)?;
        let fr_head = Linear::new(&mut store, "fr.head", e, cfg.n_identities, &mut rng)?;
        let sb_conv = Conv2d::new(&mut store, "sb.conv", bw, e, 3, 1, 1, &mut rng)?;
        let sb_head = Linear::new(&mut store, "sb.head", e, cfg.attributes.len(), &mut rng)?;
        let fusion = FusionOperator::new(cfg.fusion, &mut store, "fusion", cfg.aai(), &mut rng)?;
        let fused_head = Linear::new(&mut store, "fused.head", e, cfg.n_identities, &mut rng)?;
        Ok(Network {
            cfg,
            store,
            backbone,
            fr_conv1,
            fr_conv2,
            fr_head,
            sb_conv,
            sb_head,
            fusion,
            fused_head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn fusion(&self) -> &FusionOperator {
        &self.fusion
    }

    pub fn fusion_mut(&mut self) -> &mut FusionOperator {
        &mut self.fusion
    }

    /// Copies every parameter whose group passes `select` from `other`.
    ///
    /// Names and shapes must match; returns how many tensors were copied.
    pub fn copy_params_from(&mut self, other: &Network<T>, select: impl Fn(ParamGroup) -> bool) -> Result<usize> {
        let mut copied = 0;
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            if !ParamGroup::of(&name).is_some_and(&select) {
                continue;
            }
            let src = other
                .store
                .find(&name)
                .ok_or_else(|| Error::contract(format!("source network has no parameter '{name}'")))?;
            let value = &other.store.get(src).value;
            if value.shape() != self.store.get(id).value.shape() {
                return Err(Error::WeightShape {
                    name,
                    expected: self.store.get(id).value.shape().to_vec(),
                    found: value.shape().to_vec(),
                });
            }
            *self.store.value_mut(id) = value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Frozen backbone features of `images`, `(N, C_b, H_b, W_b)`.
    pub fn backbone_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let f = self.backbone_forward(&mut g, &p, x)?;
        Ok(g.value(f).clone())
    }

    pub fn backbone_forward(&self, g: &mut Graph<T>, p: &Bound, images: Var) -> Result<Var> {
        let s = g.shape(images);
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::config(format!(
                "network expects (N, {}, H, W) images, got {:?}",
                self.cfg.in_channels, s
            )));
        }
        let mut x = images;
        for layer in &self.backbone {
            let y = layer.forward(g, p, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Everything after the backbone.
    pub fn heads_forward(&self, g: &mut Graph<T>, p: &Bound, features: Var, heads: Heads) -> Result<BranchVars> {
        let mut out = BranchVars::default();
        let s = g.shape(features);
        if s.len() != 4 || s[1] != self.cfg.backbone_channels() {
            return Err(Error::config(format!(
                "heads expect (N, {}, H, W) backbone features, got {:?}",
                self.cfg.backbone_channels(),
                s
            )));
        }
        let h1 = self.fr_conv1.forward(g, p, features)?;
        let h1 = g.relu(h1);
        if heads.fr || heads.fused {
            let f = self.fr_conv2.forward(g, p, h1)?;
            out.fr_map = Some(g.relu(f));
        }
        if heads.sb || heads.fused {
            let f = self.sb_conv.forward(g, p, h1)?;
            out.sb_map = Some(g.relu(f));
        }
        if heads.fr {
            let emb = self.pool_embedding(g, out.fr_map.unwrap())?;
            out.fr_embedding = Some(emb);
            out.fr_logits = Some(self.fr_head.forward(g, p, emb)?);
        }
        if heads.sb {
            let emb = self.pool_embedding(g, out.sb_map.unwrap())?;
            let logits = self.sb_head.forward(g, p, emb)?;
            out.sb_probs = Some(g.sigmoid(logits));
        }
        if heads.fused {
            let fusion = self.fusion.apply(g, p, out.fr_map.unwrap(), out.sb_map.unwrap())?;
            let emb = self.pool_embedding(g, fusion.fused)?;
            out.fused_embedding = Some(emb);
            out.fused_logits = Some(self.fused_head.forward(g, p, emb)?);
            out.gates = fusion.gates;
        }
        Ok(out)
    }

    fn pool_embedding(&self, g: &mut Graph<T>, map: Var) -> Result<Var> {
        let pooled = g.gap_spatial(map)?;
        let n = g.shape(pooled)[0];
        g.reshape(pooled, &[n, self.cfg.embedding_dim])
    }

    /// Inference pass through every head.
    pub fn forward(&self, images: &Tensor<T>) -> Result<BranchOutputs<T>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let f = self.backbone_forward(&mut g, &p, x)?;
        let v = self.heads_forward(&mut g, &p, f, Heads::ALL)?;
        let read = |var: Option<Var>| g.value(var.expect("all heads requested")).clone();
        Ok(BranchOutputs {
            fr_embedding: read(v.fr_embedding),
            fr_logits: read(v.fr_logits),
            sb_probs: read(v.sb_probs),
            fused_embedding: read(v.fused_embedding),
            fused_logits: read(v.fused_logits),
            attention: v.gates.map(|gv| gv.read(&g)),
        })
    }

    /// Embeddings `(N, E)` of the selected branch from backbone features.
    pub fn embed_features(&self, features: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let x = g.constant(features.clone());
        let heads = match branch {
            Branch::Baseline => Heads {
                fr: true,
                sb: false,
                fused: false,
            },
            Branch::Fused => Heads {
                fr: false,
                sb: false,
                fused: true,
            },
        };
        let v = self.heads_forward(&mut g, &p, x, heads)?;
        let e = match branch {
            Branch::Baseline => v.fr_embedding,
            Branch::Fused => v.fused_embedding,
        };
        Ok(g.value(e.unwrap()).clone())
    }

    pub fn embed(&self, images: &Tensor<T>, branch: Branch) -> Result<Tensor<T>> {
        let f = self.backbone_features(images)?;
        self.embed_features(&f, branch)
    }

    /// Attribute probabilities `(N, n)` from backbone features.
    pub fn attribute_probs(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let x = g.constant(features.clone());
        let heads = Heads {
            fr: false,
            sb: true,
            fused: false,
        };
        let v = self.heads_forward(&mut g, &p, x, heads)?;
        Ok(g.value(v.sb_probs.unwrap()).clone())
    }
}

/// Weighted soft-biometric loss: batch mean of `sum_i w_i * BCE(p_i, a_i)`.
///
/// `probs` is `(N, n)`; `targets` holds `N * n` values in row-major order.
pub fn sb_loss<T: Real>(g: &mut Graph<T>, probs: Var, targets: &[T], weights: &[f64]) -> Result<Var> {
    let s = g.shape(probs).to_vec();
    if s.len() != 2 {
        return Err(Error::Rank {
            op: "sb_loss",
            expected: 2,
            shape: s,
        });
    }
    let (n, k) = (s[0], s[1]);
    if weights.len() != k {
        return Err(Error::contract(format!(
            "sb_loss: {k} attribute probabilities but {} loss weights",
            weights.len()
        )));
    }
    if targets.len() != n * k {
        return Err(Error::contract(format!(
            "sb_loss: {} targets for {n} samples x {k} attributes",
            targets.len()
        )));
    }
    let per = g.bce(probs, targets)?;
    let w = g.constant(Tensor::from_f64([1, k], weights)?);
    let weighted = g.mul(per, w)?;
    let total = g.sum(weighted);
    Ok(g.affine(total, 1.0 / n as f64, 0.0))
}

/// `lambda_fr * CE(fused_logits, ids) + sb_loss`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    fused_logits: Var,
    identities: &[usize],
    sb_probs: Var,
    sb_targets: &[T],
    weights: &[f64],
    lambda_fr: f64,
) -> Result<Var> {
    let ce = g.softmax_cross_entropy(fused_logits, identities)?;
    let fr = g.affine(ce, lambda_fr, 0.0);
    let sb = sb_loss(g, sb_probs, sb_targets, weights)?;
    g.add(fr, sb)
}

/// Cosine of the angle between two embeddings.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine_similarity: lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding(
            "cosine similarity of a zero vector is undefined".into(),
        ));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}
