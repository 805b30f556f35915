//! Central finite-difference checks of the autograd engine in f64.
//!
//! Every check reduces the operation's output to a scalar through a fixed
//! random projection, then compares analytic and numeric partials on a
//! random subset of coordinates of every input.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AaiConfig, AaiModule, FusionOperator, FusionVariant};
use crate::autograd::{Graph, Var};
use crate::datagen::{generate, SyntheticSpec};
use crate::error::{Error, Result};
use crate::network::{total_loss, AttributeSpec, Heads, Network, NetworkConfig, StageSpec};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const FLOOR: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 10;
const COORDS_PER_INPUT: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Aai,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Ops, Suite::Aai, Suite::Network];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Suite::Ops),
            "aai" => Ok(Suite::Aai),
            "network" => Ok(Suite::Network),
            other => Err(Error::config(format!(
                "unknown gradcheck module '{other}' (expected ops, aai, network)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ops => "ops",
            Suite::Aai => "aai",
            Suite::Network => "network",
        })
    }
}

/// Worst disagreement seen for one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Coordinates that needed a step below [`STEP`].
    pub refined: usize,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn project(g: &mut Graph<f64>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    if g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let r = g.constant(r);
    let weighted = g.mul(out, r)?;
    Ok(g.sum(weighted))
}

fn evaluate(build: &Build, inputs: &[Tensor<f64>], proj_seed: u64, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), grads)).collect();
    let out = build(&mut g, &vars)?;
    let loss = project(&mut g, out, &mut ChaCha8Rng::seed_from_u64(proj_seed))?;
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((value, gs))
}

/// Outcome of [`check`] over one or more input sets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub worst: f64,
    pub coords: usize,
    pub refined: usize,
}

impl Tally {
    fn merge(&mut self, other: Tally) {
        self.worst = self.worst.max(other.worst);
        self.coords += other.coords;
        self.refined += other.refined;
    }

    fn result(self, name: impl Into<String>, seeds: usize) -> CheckResult {
        CheckResult {
            name: name.into(),
            max_rel_error: self.worst,
            coords: self.coords,
            refined: self.refined,
            seeds,
        }
    }
}

/// Finer steps tried when the central difference at [`STEP`] misses the
/// tolerance. A relu or max kink inside the stencil drops out once the step
/// is smaller than its distance; a wrong analytic gradient misses at every
/// step.
pub const REFINED_STEPS: [f64; 2] = [1e-6, 1e-7];

/// Largest relative error over sampled coordinates of every input.
pub fn check(build: &Build, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<Tally> {
    let proj_seed = rng.gen();
    let (_, analytic) = evaluate(build, inputs, proj_seed, true)?;
    let mut tally = Tally::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks = sample(rng, n, n.min(COORDS_PER_INPUT)).into_vec();
        for j in picks {
            let x = input.data()[j];
            let mut err = f64::INFINITY;
            for (k, &h) in std::iter::once(&STEP).chain(&REFINED_STEPS).enumerate() {
                work[i].data_mut()[j] = x + h;
                let (up, _) = evaluate(build, &work, proj_seed, false)?;
                work[i].data_mut()[j] = x - h;
                let (down, _) = evaluate(build, &work, proj_seed, false)?;
                work[i].data_mut()[j] = x;
                err = err.min(relative_error(analytic[i].data()[j], (up - down) / (2.0 * h)));
                if err <= TOLERANCE {
                    if k > 0 {
                        tally.refined += 1;
                    }
                    break;
                }
            }
            tally.worst = tally.worst.max(err);
            tally.coords += 1;
        }
    }
    Ok(tally)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so relu and max kinks stay out of reach.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

struct Case {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: Box<Build<'static>>,
}

fn op_cases() -> Vec<Case> {
    fn conv_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![
            uniform(&[2, 3, 5, 6], -1.0, 1.0, rng),
            uniform(&[4, 3, 3, 3], -1.0, 1.0, rng),
            uniform(&[4], -1.0, 1.0, rng),
        ]
    }
    fn map(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![uniform(&[2, 3, 4, 5], -1.0, 1.0, rng)]
    }
    fn two_maps(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        vec![uniform(&[2, 3, 4, 5], -1.0, 1.0, rng), uniform(&[2, 3, 4, 5], -1.0, 1.0, rng)]
    }
    vec![
        Case {
            name: "conv2d (stride 1, pad 1)",
            inputs: conv_inputs,
            build: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
        },
        Case {
            name: "conv2d (stride 2, pad 1)",
            inputs: conv_inputs,
            build: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 1)),
        },
        Case {
            name: "conv2d (stride 1, pad 0)",
            inputs: conv_inputs,
            build: Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 0)),
        },
        Case {
            name: "pointwise_conv",
            inputs: |rng| {
                vec![
                    uniform(&[2, 3, 4, 5], -1.0, 1.0, rng),
                    uniform(&[2, 3, 1, 1], -1.0, 1.0, rng),
                    uniform(&[2], -1.0, 1.0, rng),
                ]
            },
            build: Box::new(|g, v| g.pointwise_conv(v[0], v[1], v[2])),
        },
        Case {
            name: "gap_spatial",
            inputs: map,
            build: Box::new(|g, v| g.gap_spatial(v[0])),
        },
        Case {
            name: "gmp_spatial",
            inputs: map,
            build: Box::new(|g, v| g.gmp_spatial(v[0])),
        },
        Case {
            name: "channel_mean_max",
            inputs: map,
            build: Box::new(|g, v| g.channel_mean_max(v[0])),
        },
        Case {
            name: "add",
            inputs: two_maps,
            build: Box::new(|g, v| g.add(v[0], v[1])),
        },
        Case {
            name: "broadcast_add",
            inputs: |rng| vec![uniform(&[2, 3, 4, 5], -1.0, 1.0, rng), uniform(&[2, 3, 1, 1], -1.0, 1.0, rng)],
            build: Box::new(|g, v| g.broadcast_add(v[0], v[1])),
        },
        Case {
            name: "mul",
            inputs: two_maps,
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        Case {
            name: "mul (broadcast)",
            inputs: |rng| vec![uniform(&[2, 1, 4, 5], -1.0, 1.0, rng), uniform(&[2, 3, 4, 5], -1.0, 1.0, rng)],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        },
        Case {
            name: "affine",
            inputs: map,
            build: Box::new(|g, v| Ok(g.affine(v[0], -1.7, 0.3))),
        },
        Case {
            name: "one_minus",
            inputs: map,
            build: Box::new(|g, v| Ok(g.one_minus(v[0]))),
        },
        Case {
            name: "sigmoid",
            inputs: |rng| vec![uniform(&[2, 3, 4, 5], -4.0, 4.0, rng)],
            build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        },
        Case {
            name: "relu",
            inputs: |rng| vec![away_from_zero(&[2, 3, 4, 5], rng)],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
        },
        Case {
            name: "concat_channels",
            inputs: |rng| vec![uniform(&[2, 3, 4, 5], -1.0, 1.0, rng), uniform(&[2, 2, 4, 5], -1.0, 1.0, rng)],
            build: Box::new(|g, v| g.concat_channels(v[0], v[1])),
        },
        Case {
            name: "linear",
            inputs: |rng| {
                vec![
                    uniform(&[3, 5], -1.0, 1.0, rng),
                    uniform(&[4, 5], -1.0, 1.0, rng),
                    uniform(&[4], -1.0, 1.0, rng),
                ]
            },
            build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
        },
        Case {
            name: "reshape",
            inputs: map,
            build: Box::new(|g, v| g.reshape(v[0], &[6, 20])),
        },
        Case {
            name: "sum",
            inputs: map,
            build: Box::new(|g, v| Ok(g.sum(v[0]))),
        },
        Case {
            name: "mean",
            inputs: map,
            build: Box::new(|g, v| Ok(g.mean(v[0]))),
        },
        Case {
            name: "softmax_cross_entropy",
            inputs: |rng| vec![uniform(&[4, 6], -3.0, 3.0, rng)],
            build: Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 5, 2, 2])),
        },
        Case {
            name: "bce",
            inputs: |rng| vec![uniform(&[3, 4], 0.05, 0.95, rng)],
            build: Box::new(|g, v| g.bce(v[0], &[1., 0., 0., 1., 1., 1., 0., 0., 0., 1., 0., 1.])),
        },
    ]
}

fn run_cases(cases: Vec<Case>, seeds: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let mut tally = Tally::default();
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = (case.inputs)(&mut rng);
            tally.merge(check(&*case.build, &inputs, &mut rng)?);
        }
        out.push(tally.result(case.name.to_string(), seeds));
    }
    Ok(out)
}

pub fn check_ops(seeds: usize) -> Result<Vec<CheckResult>> {
    run_cases(op_cases(), seeds)
}

/// Parameter values of `store` as graph leaves, in store order.
fn store_values(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// Fusion operators end to end, with respect to both maps and every parameter.
pub fn check_aai(seeds: usize) -> Result<Vec<CheckResult>> {
    let cfg = AaiConfig::new(8, 2)?;
    let mut out = Vec::new();
    for variant in [FusionVariant::Aai, FusionVariant::Concat, FusionVariant::SeStyle, FusionVariant::AffStyle, FusionVariant::Add] {
        let mut tally = Tally::default();
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::<f64>::new();
            let op = FusionOperator::new(variant, &mut store, "fusion", cfg, &mut rng)?;
            let n_params = store.len();
            let mut inputs = vec![uniform(&[2, 8, 3, 4], -1.0, 1.0, &mut rng), uniform(&[2, 8, 3, 4], -1.0, 1.0, &mut rng)];
            inputs.extend(store_values(&store));
            let build = |g: &mut Graph<f64>, v: &[Var]| {
                let p = Bound::from_vars(v[2..2 + n_params].to_vec());
                Ok(op.apply(g, &p, v[0], v[1])?.fused)
            };
            tally.merge(check(&build, &inputs, &mut rng)?);
        }
        out.push(tally.result(format!("fusion:{variant}"), seeds));
    }
    let mut tally = Tally::default();
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, module) = AaiModule::standalone::<f64>(cfg, seed)?;
        let n_params = store.len();
        let mut inputs = vec![uniform(&[2, 8, 3, 4], -1.0, 1.0, &mut rng), uniform(&[2, 8, 3, 4], -1.0, 1.0, &mut rng)];
        inputs.extend(store_values(&store));
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[2..2 + n_params].to_vec());
            let out = module.fuse(g, &p, v[0], v[1])?;
            let gates = out.gates.expect("aai yields gates");
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = project(g, gates.m_c, &mut rng)?;
            let b = project(g, gates.m_s, &mut rng)?;
            let c = project(g, out.fused, &mut rng)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        };
        tally.merge(check(&build, &inputs, &mut rng)?);
    }
    out.push(tally.result("aai gates + fused".to_string(), seeds));
    Ok(out)
}

/// Tiny network used by the network-level check.
pub fn tiny_network_config(fusion: FusionVariant) -> NetworkConfig {
    NetworkConfig {
        in_channels: 1,
        backbone: vec![StageSpec { channels: 3, stride: 1 }, StageSpec { channels: 4, stride: 2 }],
        branch_width: 4,
        embedding_dim: 4,
        n_identities: 3,
        attributes: vec![AttributeSpec::new("male", 1.0), AttributeSpec::new("bald", 0.5)],
        lambda_fr: 3.0,
        reduction: 2,
        fusion,
    }
}

/// Total loss of the tiny network, differentiated with respect to every
/// parameter and the input images.
pub fn check_network(seeds: usize) -> Result<Vec<CheckResult>> {
    let spec = SyntheticSpec {
        n_identities: 3,
        samples_per_identity: 2,
        height: 8,
        width: 8,
        n_attributes: 2,
        eval_fraction: 0.0,
        ..SyntheticSpec::default()
    };
    let mut tally = Tally::default();
    for seed in 0..seeds as u64 {
        let data = generate(&SyntheticSpec { seed, ..spec.clone() })?;
        let images = data.batch::<f64>(&(0..data.len()).collect::<Vec<_>>())?;
        let classes: Vec<usize> = data.samples.iter().map(|s| s.identity).collect();
        let targets: Vec<f64> = data
            .samples
            .iter()
            .flat_map(|s| s.attributes.iter().map(|&b| b as f64))
            .collect();
        let net = Network::<f64>::new(tiny_network_config(FusionVariant::Aai), seed)?;
        let weights = net.config().attribute_weights();
        let n_params = net.params().len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut inputs = vec![images];
        // zero biases put relu inputs exactly on the kink
        for t in store_values(net.params()) {
            let data = t.data().iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
            inputs.push(Tensor::new(t.shape().to_vec(), data)?);
        }
        let build = |g: &mut Graph<f64>, v: &[Var]| {
            let p = Bound::from_vars(v[1..1 + n_params].to_vec());
            let f = net.backbone_forward(g, &p, v[0])?;
            let out = net.heads_forward(g, &p, f, Heads::ALL)?;
            let joint = total_loss(
                g,
                out.fused_logits.unwrap(),
                &classes,
                out.sb_probs.unwrap(),
                &targets,
                &weights,
                net.config().lambda_fr,
            )?;
            let fr = g.softmax_cross_entropy(out.fr_logits.unwrap(), &classes)?;
            g.add(joint, fr)
        };
        tally.merge(check(&build, &inputs, &mut rng)?);
    }
    Ok(vec![tally.result("network total loss".to_string(), seeds)])
}

pub fn run_suite(suite: Suite, seeds: usize) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Ops => check_ops(seeds),
        Suite::Aai => check_aai(seeds),
        Suite::Network => check_network(seeds),
    }
}

pub fn report(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:>12}  {:>7}  {:>7}  status\n",
        "op", "max rel err", "coords", "refined"
    );
    for r in results {
        s.push_str(&format!(
            "{:<width$}  {:>12.3e}  {:>7}  {:>7}  {}\n",
            r.name,
            r.max_rel_error,
            r.coords,
            r.refined,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
