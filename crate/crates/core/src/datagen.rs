//! Deterministic synthetic face surrogates and the on-disk dataset container.
//!
//! Each identity owns a prototype image (a sum of random Gaussian bumps) and
//! a fixed attribute vector. Attribute `i` is rendered as an oriented Gabor
//! motif with a dark mean at its own anchor on a ring, present exactly when
//! the bit is set, so attributes are readable from pixels and shared by
//! every image of the identity. Attribute bits are balanced over each pair
//! of consecutive identities. Samples are the prototype under a small random
//! similarity transform plus Gaussian pixel noise.
//!
//! Container layout:
//!
//! ```text
//! <dir>/manifest           # lines: sample_id identity bits relative_path
//! <dir>/tensors/<id>.aaft  # "AAFT", rank u32, dims u32..., f32 payload (LE)
//! ```
//!
//! Manifest lines starting with `#` are comments, except
//! `# attributes: name name ...` which names the attribute columns.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"AAFT";

/// Names used for the first five synthetic attributes.
pub const ATTRIBUTE_NAMES: [&str; 5] = ["male", "bald", "chubby", "big_nose", "narrow_eyes"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_attributes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Pose amplitude in pixels of translation; rotation and scale jitter
    /// scale with it.
    pub pose: f64,
    /// Fraction of identities held out for evaluation (0 disables the split).
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 32,
            samples_per_identity: 20,
            channels: 1,
            height: 32,
            width: 32,
            n_attributes: 5,
            noise: 0.05,
            pose: 1.0,
            eval_fraction: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::config("data.identities must be at least 2"));
        }
        if self.samples_per_identity == 0 {
            return Err(Error::config("data.samples_per_identity must be positive"));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::config(format!(
                "image size {}x{}x{} too small",
                self.channels, self.height, self.width
            )));
        }
        if self.n_attributes == 0 {
            return Err(Error::config("data.attributes must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("data.noise = {} must be >= 0", self.noise)));
        }
        if !(self.pose >= 0.0 && self.pose.is_finite()) {
            return Err(Error::config(format!("data.pose = {} must be >= 0", self.pose)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config(format!(
                "data.eval_fraction = {} must be in [0, 1)",
                self.eval_fraction
            )));
        }
        if self.eval_fraction > 0.0 && self.samples_per_identity < 2 {
            return Err(Error::Protocol(
                "verification needs at least 2 samples per identity".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(C, H, W)`.
    pub image: Tensor<f32>,
    pub identity: usize,
    pub attributes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub attribute_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.image.shape())
    }

    /// Sorted distinct identity labels.
    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attribute_names.iter().position(|n| n == name)
    }

    /// Stacks the images at `indices` into `(N, C, H, W)`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let imgs: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        Ok(Tensor::stack(&imgs)?.cast())
    }

    /// Holds out the highest `ceil(n * eval_fraction)` identity labels.
    pub fn split(&self, eval_fraction: f64) -> Splits {
        let ids = self.identities();
        let n_eval = if eval_fraction > 0.0 {
            ((ids.len() as f64 * eval_fraction).ceil() as usize).clamp(1, ids.len().saturating_sub(1))
        } else {
            0
        };
        let eval_ids: HashSet<usize> = ids[ids.len() - n_eval..].iter().copied().collect();
        let (eval, train): (Vec<Sample>, Vec<Sample>) =
            self.samples.iter().cloned().partition(|s| eval_ids.contains(&s.identity));
        Splits {
            train: Dataset {
                attribute_names: self.attribute_names.clone(),
                samples: train,
            },
            eval: Dataset {
                attribute_names: self.attribute_names.clone(),
                samples: eval,
            },
        }
    }

    /// Messages for identities whose samples disagree on attributes.
    pub fn attribute_inconsistencies(&self) -> Vec<String> {
        let mut first: BTreeMap<usize, &Sample> = BTreeMap::new();
        let mut out = Vec::new();
        for s in &self.samples {
            match first.get(&s.identity) {
                Some(f) if f.attributes != s.attributes => out.push(format!(
                    "identity {}: sample '{}' attributes {:?} differ from '{}' {:?}",
                    s.identity, s.id, s.attributes, f.id, f.attributes
                )),
                Some(_) => {}
                None => {
                    first.insert(s.identity, s);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

#[derive(Debug, Clone, Copy)]
struct Bump {
    x: f64,
    y: f64,
    sigma: f64,
    amp: f64,
}

impl Bump {
    fn eval(&self, u: f64, v: f64) -> f64 {
        let d2 = (u - self.x).powi(2) + (v - self.y).powi(2);
        self.amp * (-d2 / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Gaussian-windowed grating; attribute `i` of `n` gets orientation `i * pi / n`.
#[derive(Debug, Clone, Copy)]
struct Gabor {
    x: f64,
    y: f64,
    sigma: f64,
    theta: f64,
    period: f64,
    amp: f64,
    dc: f64,
}

impl Gabor {
    fn eval(&self, u: f64, v: f64) -> f64 {
        let (du, dv) = (u - self.x, v - self.y);
        let env = (-(du * du + dv * dv) / (2.0 * self.sigma * self.sigma)).exp();
        let phase = (du * self.theta.cos() + dv * self.theta.sin()) * 2.0 * PI / self.period;
        let dc = self.dc;
        self.amp * env * (dc + (1.0 - dc.abs()) * phase.cos())
    }
}

const IDENTITY_BUMPS: usize = 6;
const IDENTITY_AMPLITUDE: f64 = 0.2;
/// Motif anchors sit on a ring of this radius in `[-1, 1]` image coordinates.
const MOTIF_RING: f64 = 0.55;
const MOTIF_SIGMA: f64 = 0.2;
const MOTIF_PERIOD: f64 = 0.3;
const MOTIF_AMPLITUDE: f64 = 1.5;
/// Negative: every motif darkens its neighbourhood on average.
const MOTIF_DC: f64 = -0.5;

fn attribute_anchor(i: usize, n: usize) -> (f64, f64) {
    let angle = 2.0 * PI * i as f64 / n as f64 - PI / 2.0;
    (MOTIF_RING * angle.cos(), MOTIF_RING * angle.sin())
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Name of synthetic attribute column `i`.
pub fn attribute_name(i: usize) -> String {
    ATTRIBUTE_NAMES
        .get(i)
        .map_or_else(|| format!("attr{i}"), |s| s.to_string())
}

/// Attribute bits per identity. Within each pair of identities `(2k, 2k+1)`
/// every attribute is present in exactly one, chosen at random, so any
/// even-aligned run of identities is balanced.
fn attribute_design(spec: &SyntheticSpec) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut design = vec![vec![0u8; spec.n_attributes]; spec.n_identities];
    for pair in 0..spec.n_identities.div_ceil(2) {
        for a in 0..spec.n_attributes {
            let first = rng.gen_bool(0.5) as u8;
            design[2 * pair][a] = first;
            if let Some(row) = design.get_mut(2 * pair + 1) {
                row[a] = 1 - first;
            }
        }
    }
    design
}

/// Generates the full dataset (use [`Dataset::split`] for train/eval).
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let attribute_names: Vec<String> = (0..spec.n_attributes).map(attribute_name).collect();
    let mut samples = Vec::with_capacity(spec.n_identities * spec.samples_per_identity);
    let design = attribute_design(spec);
    for identity in 0..spec.n_identities {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(identity as u64 + 1);
        let bumps: Vec<Bump> = (0..IDENTITY_BUMPS)
            .map(|_| Bump {
                x: rng.gen_range(-0.75..0.75),
                y: rng.gen_range(-0.75..0.75),
                sigma: rng.gen_range(0.12..0.3),
                amp: IDENTITY_AMPLITUDE * rng.gen_range(0.25..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            })
            .collect();
        let attributes = design[identity].clone();
        let mut motifs = Vec::new();
        for (i, &bit) in attributes.iter().enumerate() {
            if bit == 1 {
                let (x, y) = attribute_anchor(i, spec.n_attributes);
                motifs.push(Gabor {
                    x,
                    y,
                    sigma: MOTIF_SIGMA,
                    theta: PI * i as f64 / spec.n_attributes as f64,
                    period: MOTIF_PERIOD,
                    amp: MOTIF_AMPLITUDE,
                    dc: MOTIF_DC,
                });
            }
        }
        for k in 0..spec.samples_per_identity {
            let image = render(spec, &bumps, &motifs, &mut rng);
            samples.push(Sample {
                id: format!("id{identity:04}_s{k:03}"),
                image,
                identity,
                attributes: attributes.clone(),
            });
        }
    }
    Ok(Dataset {
        attribute_names,
        samples,
    })
}

fn render(spec: &SyntheticSpec, bumps: &[Bump], motifs: &[Gabor], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let tx = normal(rng) * spec.pose * 2.0 / w as f64;
    let ty = normal(rng) * spec.pose * 2.0 / h as f64;
    let theta = normal(rng) * spec.pose * 0.05;
    let scale = 1.0 + normal(rng) * spec.pose * 0.02;
    let (sin, cos) = theta.sin_cos();
    let mut data = Vec::with_capacity(spec.channels * h * w);
    for c in 0..spec.channels {
        let gain = 1.0 - 0.15 * c as f64;
        for py in 0..h {
            for px in 0..w {
                let u = (2 * px + 1) as f64 / w as f64 - 1.0 - tx;
                let v = (2 * py + 1) as f64 / h as f64 - 1.0 - ty;
                let su = (cos * u + sin * v) / scale;
                let sv = (-sin * u + cos * v) / scale;
                let value: f64 = bumps.iter().map(|b| b.eval(su, sv)).sum::<f64>()
                    + motifs.iter().map(|m| m.eval(su, sv)).sum::<f64>();
                data.push((gain * value + spec.noise * normal(rng)) as f32);
            }
        }
    }
    Tensor::new([spec.channels, h, w], data).expect("rendered size matches shape")
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let truncated = |msg: &str| Error::Truncated {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 {
        return Err(truncated("missing tensor header"));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("bad tensor magic {:?}", &bytes[..4]),
        });
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated("header shorter than its rank"));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    if bytes.len() != header + 4 * numel {
        return Err(truncated(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * numel
        )));
    }
    let data = bytes[header..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut manifest = String::from("# aaface dataset v1\n");
    manifest.push_str(&format!("# attributes: {}\n", data.attribute_names.join(" ")));
    for s in &data.samples {
        let rel = format!("tensors/{}.aaft", s.id);
        write_tensor(&dir.join(&rel), &s.image)?;
        let bits: String = s.attributes.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
        manifest.push_str(&format!("{} {} {} {}\n", s.id, s.identity, bits, rel));
    }
    let path = dir.join("manifest");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    /// Attribute-consistency warnings; real datasets may legitimately have them.
    pub warnings: Vec<String>,
}

pub fn load_dataset(dir: &Path) -> Result<Loaded> {
    let path = dir.join("manifest");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let format_err = |line: usize, msg: String| Error::Format {
        path: path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut names: Option<Vec<String>> = None;
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (no, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(list) = comment.trim().strip_prefix("attributes:") {
                names = Some(list.split_whitespace().map(str::to_string).collect());
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, identity, bits, rel] = fields[..] else {
            return Err(format_err(no, format!("expected 4 fields, got {}", fields.len())));
        };
        if !seen.insert(id.to_string()) {
            return Err(format_err(no, format!("duplicate sample id '{id}'")));
        }
        let identity: usize = identity
            .parse()
            .map_err(|_| format_err(no, format!("identity '{identity}' is not an unsigned integer")))?;
        let attributes = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(format_err(no, format!("attribute bit '{other}' is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let image = read_tensor(&dir.join(PathBuf::from(rel)))?;
        if image.rank() != 3 {
            return Err(format_err(no, format!("image tensor must be (C, H, W), got {:?}", image.shape())));
        }
        samples.push(Sample {
            id: id.to_string(),
            image,
            identity,
            attributes,
        });
    }
    let Some(first) = samples.first() else {
        return Err(Error::Format {
            path,
            msg: "manifest lists no samples".into(),
        });
    };
    let n_attr = first.attributes.len();
    let shape = first.image.shape().to_vec();
    for s in &samples {
        if s.attributes.len() != n_attr {
            return Err(Error::Format {
                path,
                msg: format!("sample '{}' has {} attribute bits, expected {n_attr}", s.id, s.attributes.len()),
            });
        }
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Format {
                path,
                msg: format!("sample '{}' image shape {:?} differs from {shape:?}", s.id, s.image.shape()),
            });
        }
    }
    let attribute_names = match names {
        Some(n) if n.len() == n_attr => n,
        Some(n) => {
            return Err(Error::Format {
                path,
                msg: format!("{} attribute names for {n_attr} attribute bits", n.len()),
            })
        }
        None => (0..n_attr)
            .map(|i| ATTRIBUTE_NAMES.get(i).map_or_else(|| format!("attr{i}"), |s| s.to_string()))
            .collect(),
    };
    let dataset = Dataset {
        attribute_names,
        samples,
    };
    let warnings = dataset.attribute_inconsistencies();
    Ok(Loaded { dataset, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub genuine: bool,
}

/// Verification pairs over sample indices of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProtocol {
    pub pairs: Vec<Pair>,
}

impl PairProtocol {
    pub fn new(pairs: Vec<Pair>) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.a == p.b) {
            return Err(Error::Protocol(format!("sample {} paired with itself", p.a)));
        }
        if !pairs.iter().any(|p| p.genuine) || !pairs.iter().any(|p| !p.genuine) {
            return Err(Error::Protocol(
                "a protocol needs at least one genuine and one impostor pair".into(),
            ));
        }
        Ok(PairProtocol { pairs })
    }

    pub fn genuine_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.genuine).count()
    }

    pub fn impostor_count(&self) -> usize {
        self.pairs.len() - self.genuine_count()
    }
}

/// Draws `n_pairs / 2` distinct genuine and `n_pairs / 2` distinct impostor pairs.
pub fn make_pairs(data: &Dataset, n_pairs: usize, seed: u64) -> Result<PairProtocol> {
    if n_pairs < 2 || n_pairs % 2 != 0 {
        return Err(Error::Protocol(format!(
            "pair count must be a positive even number, got {n_pairs}"
        )));
    }
    let half = n_pairs / 2;
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        by_id.entry(s.identity).or_default().push(i);
    }
    let genuine_available: usize = by_id.values().map(|v| v.len() * v.len().saturating_sub(1) / 2).sum();
    let n = data.samples.len();
    let impostor_available = n * n.saturating_sub(1) / 2 - genuine_available;
    if half > genuine_available {
        return Err(Error::Protocol(format!(
            "{half} genuine pairs requested but only {genuine_available} exist"
        )));
    }
    if half > impostor_available {
        return Err(Error::Protocol(format!(
            "{half} impostor pairs requested but only {impostor_available} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);

    let mut genuine: Vec<(usize, usize)> = by_id
        .values()
        .flat_map(|v| {
            v.iter()
                .enumerate()
                .flat_map(move |(i, &a)| v[i + 1..].iter().map(move |&b| (a, b)))
        })
        .collect();
    genuine.shuffle(&mut rng);
    pairs.extend(genuine[..half].iter().map(|&(a, b)| Pair { a, b, genuine: true }));

    let identity = |i: usize| data.samples[i].identity;
    if half * 2 <= impostor_available {
        let mut used = HashSet::with_capacity(half);
        while used.len() < half {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b || identity(a) == identity(b) {
                continue;
            }
            let key = (a.min(b), a.max(b));
            if used.insert(key) {
                pairs.push(Pair {
                    a: key.0,
                    b: key.1,
                    genuine: false,
                });
            }
        }
    } else {
        let mut all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| identity(a) != identity(b))
            .collect();
        all.shuffle(&mut rng);
        pairs.extend(all[..half].iter().map(|&(a, b)| Pair { a, b, genuine: false }));
    }
    PairProtocol::new(pairs)
}
