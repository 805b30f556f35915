//! Ablation grids over fusion operators, reduction ratios and attribute
//! subsets, repeated over seeds.
//!
//! Within one seed every cell starts from the same FR (and, where the SB
//! head shape allows, SB) weights, so cells differ only in what they ablate.

use std::fmt;
use std::str::FromStr;

use crate::attention::FusionVariant;
use crate::config::RunConfig;
use crate::datagen::{make_pairs, Dataset, PairProtocol};
use crate::error::{Error, Result};
use crate::evaluation::{verify, AblationRow, OperatingPoint};
use crate::network::{AttributeSpec, Branch, Network, NetworkConfig, ParamGroup};
use crate::tensor::Real;
use crate::training::{run_stage, Model, Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Fusion,
    Ratio,
    Attrs,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Grid::Fusion),
            "ratio" => Ok(Grid::Ratio),
            "attrs" => Ok(Grid::Attrs),
            other => Err(Error::config(format!(
                "unknown grid '{other}' (expected fusion, ratio, attrs)"
            ))),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Fusion => "fusion",
            Grid::Ratio => "ratio",
            Grid::Attrs => "attrs",
        })
    }
}

pub const RATIOS: [usize; 3] = [4, 8, 16];
pub const BASELINE_LABEL: &str = "baseline (no SB)";

/// Cumulative subsets: male; male, bald; male, bald, chubby; every attribute.
pub fn attribute_subsets(all: &[AttributeSpec]) -> Result<Vec<(String, Vec<AttributeSpec>)>> {
    let pick = |names: &[&str]| -> Result<Vec<AttributeSpec>> {
        names
            .iter()
            .map(|n| {
                all.iter().find(|a| a.name == *n).cloned().ok_or_else(|| {
                    Error::config(format!("attribute grid needs '{n}' in network.attributes"))
                })
            })
            .collect()
    };
    Ok(vec![
        ("aai (M)".to_string(), pick(&["male"])?),
        ("aai (M&B)".to_string(), pick(&["male", "bald"])?),
        ("aai (M&B&Ch)".to_string(), pick(&["male", "bald", "chubby"])?),
        ("aai (all)".to_string(), all.to_vec()),
    ])
}

/// Row labels of a grid, in output order.
pub fn labels(grid: Grid, net: &NetworkConfig) -> Result<Vec<String>> {
    Ok(match grid {
        Grid::Fusion => std::iter::once(BASELINE_LABEL.to_string())
            .chain(FusionVariant::ALL.iter().map(|v| fusion_label(*v, net.reduction)))
            .collect(),
        Grid::Ratio => RATIOS.iter().map(|r| format!("aai (r={r})")).collect(),
        Grid::Attrs => attribute_subsets(&net.attributes)?.into_iter().map(|(l, _)| l).collect(),
    })
}

fn fusion_label(v: FusionVariant, r: usize) -> String {
    match v {
        FusionVariant::Aai => format!("aai (r={r})"),
        other => other.to_string(),
    }
}

/// Everything a grid needs besides its axis.
pub struct Setup<'a> {
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub train_data: &'a Dataset,
    pub eval_data: &'a Dataset,
    pub protocol: &'a PairProtocol,
    pub far_targets: &'a [f64],
}

fn shared_groups(g: ParamGroup) -> bool {
    matches!(
        g,
        ParamGroup::Backbone | ParamGroup::FrConv1 | ParamGroup::FrConv2 | ParamGroup::FrHead
    )
}

fn with_sb(g: ParamGroup) -> bool {
    shared_groups(g) || matches!(g, ParamGroup::SbConv | ParamGroup::SbHead)
}

/// A fresh network initialised from `seed` that inherits `from`'s selected
/// groups and is marked as having completed `done`.
fn branch_off<T: Real>(
    from: &Network<T>,
    cfg: NetworkConfig,
    seed: u64,
    select: fn(ParamGroup) -> bool,
    done: &[Stage],
) -> Result<Model<T>> {
    let mut net = Network::new(cfg, seed)?;
    net.copy_params_from(from, select)?;
    let mut model = Model::new(net);
    model.completed.extend(done.iter().copied());
    Ok(model)
}

/// One seed of a grid: a TAR@FAR operating point list per row.
pub fn run_seed<T: Real>(grid: Grid, setup: &Setup, seed: u64) -> Result<Vec<Vec<OperatingPoint>>> {
    let train = TrainConfig {
        seed,
        ..setup.train.clone()
    };
    let eval = |net: &Network<T>, branch: Branch| -> Result<Vec<OperatingPoint>> {
        Ok(verify(net, setup.eval_data, setup.protocol, branch, setup.far_targets)?.points)
    };
    let mut base = Model::new(Network::<T>::new(setup.net.clone(), seed)?);
    run_stage(Stage::Fr, &mut base, setup.train_data, &train)?;
    let mut rows = Vec::new();
    match grid {
        Grid::Fusion | Grid::Ratio => {
            if grid == Grid::Fusion {
                rows.push(eval(&base.net, Branch::Baseline)?);
            }
            run_stage(Stage::Sb, &mut base, setup.train_data, &train)?;
            let cells: Vec<NetworkConfig> = match grid {
                Grid::Fusion => FusionVariant::ALL
                    .iter()
                    .map(|&fusion| NetworkConfig {
                        fusion,
                        ..setup.net.clone()
                    })
                    .collect(),
                _ => RATIOS
                    .iter()
                    .map(|&reduction| NetworkConfig {
                        fusion: FusionVariant::Aai,
                        reduction,
                        ..setup.net.clone()
                    })
                    .collect(),
            };
            for cfg in cells {
                cfg.validate()?;
                let mut m = branch_off(&base.net, cfg, seed, with_sb, &[Stage::Fr, Stage::Sb])?;
                run_stage(Stage::Joint, &mut m, setup.train_data, &train)?;
                rows.push(eval(&m.net, Branch::Fused)?);
            }
        }
        Grid::Attrs => {
            for (_, attributes) in attribute_subsets(&setup.net.attributes)? {
                let cfg = NetworkConfig {
                    fusion: FusionVariant::Aai,
                    attributes,
                    ..setup.net.clone()
                };
                let mut m = branch_off(&base.net, cfg, seed, shared_groups, &[Stage::Fr])?;
                run_stage(Stage::Sb, &mut m, setup.train_data, &train)?;
                run_stage(Stage::Joint, &mut m, setup.train_data, &train)?;
                rows.push(eval(&m.net, Branch::Fused)?);
            }
        }
    }
    Ok(rows)
}

/// Runs `seeds` repetitions with run seeds `train.seed, train.seed + 1, ...`.
pub fn run_grid<T: Real>(grid: Grid, setup: &Setup, seeds: usize) -> Result<Vec<AblationRow>> {
    if seeds == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    let labels = labels(grid, &setup.net)?;
    let mut rows: Vec<AblationRow> = labels
        .into_iter()
        .map(|label| AblationRow {
            label,
            per_seed: Vec::with_capacity(seeds),
        })
        .collect();
    for k in 0..seeds as u64 {
        let per_row = run_seed::<T>(grid, setup, setup.train.seed.wrapping_add(k))?;
        for (row, points) in rows.iter_mut().zip(per_row) {
            row.per_seed.push(points);
        }
    }
    Ok(rows)
}

/// Builds the setup from a run config: data, split and pair protocol.
pub fn prepare(cfg: &RunConfig, data: &Dataset) -> Result<(Dataset, Dataset, PairProtocol)> {
    let splits = data.split(cfg.data.eval_fraction);
    if splits.eval.is_empty() {
        return Err(Error::Protocol(
            "ablation needs an evaluation split (data.eval_fraction > 0)".into(),
        ));
    }
    let protocol = make_pairs(&splits.eval, cfg.eval.pairs, cfg.eval.seed)?;
    Ok((splits.train, splits.eval, protocol))
}
