//! Attribute-aware attentional integration of two feature maps.
//!
//! Given a face-recognition map `x` and a soft-biometric map `y` of equal
//! shape `(N, C, H, W)`, the module computes a channel gate `M_c` from
//! `U = x + y`, blends `V = M_c * x + (1 - M_c) * y`, derives a spatial gate
//! `M_s` from `V`, and returns
//!
//! ```text
//! fused = M_s * (M_c * x) + (1 - M_s) * ((1 - M_c) * y)
//! ```
//!
//! with `M_s` broadcast over channels. Both gates are sigmoids, so every
//! element lies strictly inside `(0, 1)`.
//!
//! Channel gate topology: the GAP and GMP descriptors of `U` share one
//! bottleneck and their outputs are summed; `U` itself passes through a
//! separate full-resolution pointwise bottleneck; the two are merged by
//! broadcast addition. Spatial gate: the channel mean/max map of `V` goes
//! through a pointwise bottleneck (local), and its spatial average through a
//! second bottleneck (global, broadcast over `H x W`).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bottleneck, Bound, Conv2d, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AaiConfig {
    pub channels: usize,
    /// Bottleneck divisor `r`; the hidden width is `channels / r`.
    pub reduction: usize,
}

impl AaiConfig {
    pub fn new(channels: usize, reduction: usize) -> Result<Self> {
        let cfg = AaiConfig { channels, reduction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.reduction > self.channels {
            return Err(Error::config(format!(
                "aai.reduction = {} must satisfy 1 <= r <= channels ({})",
                self.reduction, self.channels
            )));
        }
        if self.channels % self.reduction != 0 {
            return Err(Error::config(format!(
                "aai.reduction = {} does not divide the channel count {}",
                self.reduction, self.channels
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

/// Gate maps produced by one fusion call.
#[derive(Debug, Clone)]
pub struct AttentionWeights<T> {
    /// `(N, C, H, W)`.
    pub m_c: Tensor<T>,
    /// `(N, 1, H, W)`, broadcast over channels when applied.
    pub m_s: Tensor<T>,
}

/// Graph handles of the gates, before they are read back.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub m_c: Var,
    pub m_s: Var,
}

impl GateVars {
    pub fn read<T: Real>(&self, g: &Graph<T>) -> AttentionWeights<T> {
        AttentionWeights {
            m_c: g.value(self.m_c).clone(),
            m_s: g.value(self.m_s).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub fused: Var,
    pub gates: Option<GateVars>,
}

/// Multi-scale channel sub-module.
#[derive(Debug, Clone, Copy)]
pub struct ChannelGate {
    pub cfg: AaiConfig,
    /// Shared by the GAP and GMP descriptors.
    pub pooled: Bottleneck,
    /// Full-resolution pointwise path.
    pub local: Bottleneck,
}

impl ChannelGate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: AaiConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, h) = (cfg.channels, cfg.hidden());
        Ok(ChannelGate {
            cfg,
            pooled: Bottleneck::new(store, &format!("{name}.pooled"), c, h, c, rng)?,
            local: Bottleneck::new(store, &format!("{name}.local"), c, h, c, rng)?,
        })
    }

    /// `M_c` for the pair `(f_fr, f_sb)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_fr: Var, f_sb: Var) -> Result<Var> {
        check_pair(g, f_fr, f_sb, self.cfg.channels)?;
        let u = g.add(f_fr, f_sb)?;
        let avg = g.gap_spatial(u)?;
        let max = g.gmp_spatial(u)?;
        let avg = self.pooled.forward(g, p, avg)?;
        let max = self.pooled.forward(g, p, max)?;
        let pooled = g.add(avg, max)?;
        let local = self.local.forward(g, p, u)?;
        let logits = g.broadcast_add(local, pooled)?;
        Ok(g.sigmoid(logits))
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.pooled.zero_output(store);
        self.local.zero_output(store);
    }
}

/// Multi-scale spatial sub-module.
#[derive(Debug, Clone, Copy)]
pub struct SpatialGate {
    pub local: Bottleneck,
    pub global: Bottleneck,
}

impl SpatialGate {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(SpatialGate {
            local: Bottleneck::new(store, &format!("{name}.local"), 2, 1, 1, rng)?,
            global: Bottleneck::new(store, &format!("{name}.global"), 2, 1, 1, rng)?,
        })
    }

    /// `M_s` of shape `(N, 1, H, W)` for the channel-stage blend `v`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let descriptor = g.channel_mean_max(v)?;
        let local = self.local.forward(g, p, descriptor)?;
        let global = g.gap_spatial(descriptor)?;
        let global = self.global.forward(g, p, global)?;
        let logits = g.broadcast_add(local, global)?;
        Ok(g.sigmoid(logits))
    }

    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.local.zero_output(store);
        self.global.zero_output(store);
    }
}

/// The channel-then-spatial attentional fusion module.
#[derive(Debug, Clone, Copy)]
pub struct AaiModule {
    pub cfg: AaiConfig,
    pub channel: ChannelGate,
    pub spatial: SpatialGate,
    pinned: Option<f64>,
}

impl AaiModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: AaiConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(AaiModule {
            cfg,
            channel: ChannelGate::new(store, &format!("{name}.channel"), cfg, rng)?,
            spatial: SpatialGate::new(store, &format!("{name}.spatial"), rng)?,
            pinned: None,
        })
    }

    /// Standalone module with its own parameter store.
    pub fn standalone<T: Real>(cfg: AaiConfig, seed: u64) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let module = Self::new(&mut store, "aai", cfg, &mut rng)?;
        Ok((store, module))
    }

    /// Test hook: replaces both gates by a constant (e.g. exactly 0 or 1).
    pub fn pin_gates(&mut self, value: Option<f64>) {
        self.pinned = value;
    }

    pub fn channel_gate<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_fr: Var, f_sb: Var) -> Result<Var> {
        match self.pinned {
            Some(v) => {
                check_pair(g, f_fr, f_sb, self.cfg.channels)?;
                let shape = g.shape(f_fr).to_vec();
                Ok(g.constant(Tensor::full(shape, T::of(v))))
            }
            None => self.channel.forward(g, p, f_fr, f_sb),
        }
    }

    pub fn spatial_gate<T: Real>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        match self.pinned {
            Some(pin) => {
                let s = g.shape(v);
                let shape = [s[0], 1, s[2], s[3]];
                Ok(g.constant(Tensor::full(shape, T::of(pin))))
            }
            None => self.spatial.forward(g, p, v),
        }
    }

    pub fn fuse<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_fr: Var, f_sb: Var) -> Result<FusionOutput> {
        let m_c = self.channel_gate(g, p, f_fr, f_sb)?;
        let fr_part = g.mul(m_c, f_fr)?;
        let inv_c = g.one_minus(m_c);
        let sb_part = g.mul(inv_c, f_sb)?;
        let blend = g.add(fr_part, sb_part)?;
        let m_s = self.spatial_gate(g, p, blend)?;
        let a = g.mul(m_s, fr_part)?;
        let inv_s = g.one_minus(m_s);
        let b = g.mul(inv_s, sb_part)?;
        let fused = g.add(a, b)?;
        Ok(FusionOutput {
            fused,
            gates: Some(GateVars { m_c, m_s }),
        })
    }

    /// Forward pass on plain tensors, returning the fused map and the gates.
    pub fn fuse_values<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_fr: &Tensor<T>,
        f_sb: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionWeights<T>)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(f_fr.clone());
        let y = g.constant(f_sb.clone());
        let out = self.fuse(&mut g, &p, x, y)?;
        let gates = out.gates.expect("aai always yields gates").read(&g);
        Ok((g.value(out.fused).clone(), gates))
    }

    /// Zeroes the last layer of every bottleneck, pinning both gates at 0.5.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        self.channel.zero_output(store);
        self.spatial.zero_output(store);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionVariant {
    Aai,
    Add,
    Concat,
    SeStyle,
    AffStyle,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 5] = [
        FusionVariant::Concat,
        FusionVariant::Add,
        FusionVariant::SeStyle,
        FusionVariant::AffStyle,
        FusionVariant::Aai,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::Aai => "aai",
            FusionVariant::Add => "add",
            FusionVariant::Concat => "concat",
            FusionVariant::SeStyle => "se",
            FusionVariant::AffStyle => "aff",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "aai" => FusionVariant::Aai,
            "add" => FusionVariant::Add,
            "concat" => FusionVariant::Concat,
            "se" => FusionVariant::SeStyle,
            "aff" => FusionVariant::AffStyle,
            other => {
                return Err(Error::config(format!(
                    "unknown fusion variant '{other}' (expected aai, add, concat, se, aff)"
                )))
            }
        })
    }
}

/// Any operator mapping two `(N, C, H, W)` maps to one of the same shape.
///
/// The non-AAI variants are minimal controls:
/// `Add` sums the maps; `Concat` projects the channel concatenation back to
/// `C` with a pointwise convolution; `SeStyle` blends with a `(N, C, 1, 1)`
/// squeeze-excitation gate computed from `U = x + y`; `AffStyle` is the AAI
/// channel stage alone.
#[derive(Debug, Clone, Copy)]
pub enum FusionOperator {
    Aai(AaiModule),
    Add,
    Concat(Conv2d),
    SeStyle(Bottleneck),
    AffStyle(ChannelGate),
}

impl FusionOperator {
    pub fn new<T: Real>(
        variant: FusionVariant,
        store: &mut ParamStore<T>,
        name: &str,
        cfg: AaiConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(match variant {
            FusionVariant::Aai => FusionOperator::Aai(AaiModule::new(store, &format!("{name}.aai"), cfg, rng)?),
            FusionVariant::Add => FusionOperator::Add,
            FusionVariant::Concat => {
                FusionOperator::Concat(Conv2d::pointwise(store, &format!("{name}.concat"), 2 * c, c, rng)?)
            }
            FusionVariant::SeStyle => FusionOperator::SeStyle(Bottleneck::new(
                store,
                &format!("{name}.se"),
                c,
                cfg.hidden(),
                c,
                rng,
            )?),
            FusionVariant::AffStyle => {
                FusionOperator::AffStyle(ChannelGate::new(store, &format!("{name}.aff"), cfg, rng)?)
            }
        })
    }

    pub fn variant(&self) -> FusionVariant {
        match self {
            FusionOperator::Aai(_) => FusionVariant::Aai,
            FusionOperator::Add => FusionVariant::Add,
            FusionOperator::Concat(_) => FusionVariant::Concat,
            FusionOperator::SeStyle(_) => FusionVariant::SeStyle,
            FusionOperator::AffStyle(_) => FusionVariant::AffStyle,
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f_fr: Var, f_sb: Var) -> Result<FusionOutput> {
        let plain = |fused| FusionOutput { fused, gates: None };
        match self {
            FusionOperator::Aai(m) => m.fuse(g, p, f_fr, f_sb),
            FusionOperator::Add => {
                check_pair(g, f_fr, f_sb, g.shape(f_fr).get(1).copied().unwrap_or(0))?;
                Ok(plain(g.add(f_fr, f_sb)?))
            }
            FusionOperator::Concat(proj) => {
                check_pair(g, f_fr, f_sb, g.shape(f_fr).get(1).copied().unwrap_or(0))?;
                let cat = g.concat_channels(f_fr, f_sb)?;
                Ok(plain(proj.forward(g, p, cat)?))
            }
            FusionOperator::SeStyle(gate) => {
                check_pair(g, f_fr, f_sb, g.shape(f_fr).get(1).copied().unwrap_or(0))?;
                let u = g.add(f_fr, f_sb)?;
                let squeezed = g.gap_spatial(u)?;
                let logits = gate.forward(g, p, squeezed)?;
                let m = g.sigmoid(logits);
                Ok(plain(blend(g, m, f_fr, f_sb)?))
            }
            FusionOperator::AffStyle(gate) => {
                let m = gate.forward(g, p, f_fr, f_sb)?;
                Ok(plain(blend(g, m, f_fr, f_sb)?))
            }
        }
    }

    /// Zeroes the operator's output layers (gated variants sit at 0.5).
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        match self {
            FusionOperator::Aai(m) => m.zero_output(store),
            FusionOperator::SeStyle(b) => b.zero_output(store),
            FusionOperator::AffStyle(c) => c.zero_output(store),
            FusionOperator::Add | FusionOperator::Concat(_) => {}
        }
    }
}

/// `m * x + (1 - m) * y`.
fn blend<T: Real>(g: &mut Graph<T>, m: Var, x: Var, y: Var) -> Result<Var> {
    let a = g.mul(m, x)?;
    let inv = g.one_minus(m);
    let b = g.mul(inv, y)?;
    g.add(a, b)
}

fn check_pair<T: Real>(g: &Graph<T>, a: Var, b: Var, channels: usize) -> Result<()> {
    const OP: &str = "fuse";
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 4 {
        return Err(Error::Rank {
            op: OP,
            expected: 4,
            shape: sa.to_vec(),
        });
    }
    if sb.len() != 4 {
        return Err(Error::Rank {
            op: OP,
            expected: 4,
            shape: sb.to_vec(),
        });
    }
    if sa[1] != channels {
        return Err(Error::Dimension {
            op: OP,
            axis: 1,
            name: "channels",
            expected: channels,
            actual: sa[1],
        });
    }
    const NAMES: [&str; 4] = ["batch", "channels", "height", "width"];
    for axis in 0..4 {
        if sa[axis] != sb[axis] {
            return Err(Error::Dimension {
                op: OP,
                axis,
                name: NAMES[axis],
                expected: sa[axis],
                actual: sb[axis],
            });
        }
    }
    Ok(())
}
