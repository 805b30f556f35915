//! Verification and attribute metrics, and the text/record report formats.
//!
//! Thresholding is empirical: a pair is accepted when `score >= t`, and no
//! interpolation between observed scores is done.

use std::fmt::Write as _;

use crate::datagen::{Dataset, PairProtocol};
use crate::error::{Error, Result};
use crate::network::{cosine_similarity, Branch, Network};
use crate::tensor::{Real, Tensor};

/// FAR targets reported by default.
pub const DEFAULT_FAR_TARGETS: [f64; 5] = [1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub far_target: f64,
    pub threshold: f64,
    pub tar: f64,
    /// FAR actually realised at `threshold`.
    pub far: f64,
    /// The target is finer than `1 / impostor_count`.
    pub below_resolution: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
    pub points: Vec<OperatingPoint>,
    pub roc: Vec<RocPoint>,
}

impl VerificationReport {
    pub fn new(genuine: Vec<f64>, impostor: Vec<f64>, far_targets: &[f64]) -> Result<Self> {
        let points = tar_at_far(&genuine, &impostor, far_targets)?;
        let roc = roc_curve(&genuine, &impostor)?;
        Ok(VerificationReport {
            genuine,
            impostor,
            points,
            roc,
        })
    }

    pub fn tar_at(&self, far_target: f64) -> Option<f64> {
        self.points.iter().find(|p| p.far_target == far_target).map(|p| p.tar)
    }
}

fn check_scores(genuine: &[f64], impostor: &[f64]) -> Result<()> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::contract("TAR@FAR needs nonempty genuine and impostor score lists"));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::contract("scores must not be NaN"));
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of an ascending slice that are `>= t`.
fn count_at_least(ascending: &[f64], t: f64) -> usize {
    ascending.len() - ascending.partition_point(|&v| v < t)
}

/// For each target `f`, the smallest observed score `t` whose false
/// acceptance rate `#{impostor >= t} / M` is at most `f`, and the genuine
/// acceptance rate at `t`. When no observed score qualifies the threshold
/// moves just above the largest score, where both rates are zero.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far_targets: &[f64]) -> Result<Vec<OperatingPoint>> {
    check_scores(genuine, impostor)?;
    if let Some(f) = far_targets.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::contract(format!("FAR target {f} outside (0, 1]")));
    }
    let gen = sorted(genuine);
    let imp = sorted(impostor);
    let mut candidates: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let m = imp.len() as f64;
    let g = gen.len() as f64;
    Ok(far_targets
        .iter()
        .map(|&f| {
            let ok = |t: f64| count_at_least(&imp, t) as f64 / m <= f;
            // `ok` is monotone in the candidate index.
            let idx = candidates.partition_point(|&c| !ok(c));
            let threshold = candidates
                .get(idx)
                .copied()
                .unwrap_or_else(|| candidates.last().unwrap().next_up());
            OperatingPoint {
                far_target: f,
                threshold,
                tar: count_at_least(&gen, threshold) as f64 / g,
                far: count_at_least(&imp, threshold) as f64 / m,
                below_resolution: f < 1.0 / m,
            }
        })
        .collect())
}

/// Empirical ROC at every observed score, by decreasing threshold.
pub fn roc_curve(genuine: &[f64], impostor: &[f64]) -> Result<Vec<RocPoint>> {
    check_scores(genuine, impostor)?;
    let gen = sorted(genuine);
    let imp = sorted(impostor);
    let mut candidates: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    Ok(candidates
        .into_iter()
        .map(|t| RocPoint {
            threshold: t,
            far: count_at_least(&imp, t) as f64 / imp.len() as f64,
            tar: count_at_least(&gen, t) as f64 / gen.len() as f64,
        })
        .collect())
}

/// Cosine scores per pair, in protocol order, split by pair type.
pub fn score_pairs<T: Real>(embeddings: &Tensor<T>, protocol: &PairProtocol) -> Result<(Vec<f64>, Vec<f64>)> {
    if embeddings.rank() != 2 {
        return Err(Error::Rank {
            op: "score_pairs",
            expected: 2,
            shape: embeddings.shape().to_vec(),
        });
    }
    let (n, e) = (embeddings.shape()[0], embeddings.shape()[1]);
    let row = |i: usize| &embeddings.data()[i * e..(i + 1) * e];
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for p in &protocol.pairs {
        if p.a >= n || p.b >= n {
            return Err(Error::Protocol(format!(
                "pair ({}, {}) references a sample outside the {n} embedded",
                p.a, p.b
            )));
        }
        let s = cosine_similarity(row(p.a), row(p.b))?;
        if p.genuine {
            genuine.push(s);
        } else {
            impostor.push(s);
        }
    }
    Ok((genuine, impostor))
}

const EMBED_BATCH: usize = 64;

/// Branch embeddings `(N, E)` for every sample of `data`.
pub fn embed_dataset<T: Real>(model: &Network<T>, data: &Dataset, branch: Branch) -> Result<Tensor<T>> {
    let mut rows = Vec::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EMBED_BATCH) {
        let images = data.batch::<T>(chunk)?;
        rows.extend_from_slice(model.embed(&images, branch)?.data());
    }
    Tensor::new([data.len(), model.config().embedding_dim], rows)
}

pub fn verify<T: Real>(
    model: &Network<T>,
    data: &Dataset,
    protocol: &PairProtocol,
    branch: Branch,
    far_targets: &[f64],
) -> Result<VerificationReport> {
    let emb = embed_dataset(model, data, branch)?;
    let (genuine, impostor) = score_pairs(&emb, protocol)?;
    VerificationReport::new(genuine, impostor, far_targets)
}

/// Fraction of correct `p >= 0.5` predictions per attribute column.
///
/// `probs` is `(N, n)`; `targets` holds `N * n` bits row-major.
pub fn attribute_accuracy<T: Real>(probs: &Tensor<T>, targets: &[u8]) -> Result<Vec<f64>> {
    if probs.rank() != 2 {
        return Err(Error::Rank {
            op: "attribute_accuracy",
            expected: 2,
            shape: probs.shape().to_vec(),
        });
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if targets.len() != n * k {
        return Err(Error::contract(format!(
            "attribute_accuracy: {} targets for {n} x {k} probabilities",
            targets.len()
        )));
    }
    let half = T::of(0.5);
    let mut errors = vec![0usize; k];
    for (i, (&p, &t)) in probs.data().iter().zip(targets).enumerate() {
        if (p >= half) != (t == 1) {
            errors[i % k] += 1;
        }
    }
    Ok(errors.into_iter().map(|e| 1.0 - e as f64 / n as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub names: Vec<String>,
    pub accuracy: Vec<f64>,
}

/// Attribute accuracy of the model's SB heads on `data`. `columns` maps each
/// head to its attribute column in the dataset.
pub fn model_attribute_accuracy<T: Real>(
    model: &Network<T>,
    data: &Dataset,
    columns: &[usize],
) -> Result<AttributeReport> {
    let k = columns.len();
    let mut probs = Vec::with_capacity(data.len() * k);
    let mut targets = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EMBED_BATCH) {
        let images = data.batch::<T>(chunk)?;
        let feats = model.backbone_features(&images)?;
        probs.extend_from_slice(model.attribute_probs(&feats)?.data());
        for &i in chunk {
            targets.extend(columns.iter().map(|&c| data.samples[i].attributes[c]));
        }
    }
    let probs = Tensor::new([data.len(), k], probs)?;
    Ok(AttributeReport {
        names: model.config().attributes.iter().map(|a| a.name.clone()).collect(),
        accuracy: attribute_accuracy(&probs, &targets)?,
    })
}

pub fn format_far(f: f64) -> String {
    format!("{f:.0e}")
}

/// Aligned attribute-accuracy table, values in percent.
pub fn attribute_table(report: &AttributeReport) -> String {
    let width = report.names.iter().map(|n| n.len()).max().unwrap_or(0).max(8);
    let mut out = String::new();
    let _ = writeln!(out, "{:<10}{}", "Method", join_cells(&report.names, width));
    let values: Vec<String> = report.accuracy.iter().map(|a| format!("{:.2}", 100.0 * a)).collect();
    let _ = writeln!(out, "{:<10}{}", "Ours", join_cells(&values, width));
    out
}

fn join_cells(cells: &[String], width: usize) -> String {
    cells.iter().map(|c| format!(" {c:>width$}")).collect()
}

/// One row of a TAR@FAR table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub points: Vec<OperatingPoint>,
}

/// Aligned TAR@FAR table (TAR in percent). Cells marked `*` sit below the
/// empirical FAR resolution.
pub fn verification_table(rows: &[TableRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let header: Vec<String> = first.points.iter().map(|p| format_far(p.far_target)).collect();
    let _ = writeln!(out, "{:<label_w$}{}", "Methods", join_cells(&header, 7));
    for r in rows {
        let cells: Vec<String> = r
            .points
            .iter()
            .map(|p| format!("{:.2}{}", 100.0 * p.tar, if p.below_resolution { "*" } else { "" }))
            .collect();
        let _ = writeln!(out, "{:<label_w$}{}", r.label, join_cells(&cells, 7));
    }
    if rows.iter().flat_map(|r| &r.points).any(|p| p.below_resolution) {
        out.push_str("* FAR target below 1/#impostor pairs\n");
    }
    out
}

/// Tab-separated records: `label far threshold tar`.
pub fn verification_records(rows: &[TableRow]) -> String {
    let mut out = String::from("label\tfar\tthreshold\ttar\n");
    for r in rows {
        for p in &r.points {
            let _ = writeln!(out, "{}\t{:e}\t{:e}\t{:e}", r.label, p.far_target, p.threshold, p.tar);
        }
    }
    out
}

/// Seed-aggregated TAR@FAR cell of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    /// One entry per seed, each aligned with the FAR target list.
    pub per_seed: Vec<Vec<OperatingPoint>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSummary {
    pub far_target: f64,
    pub threshold_mean: f64,
    pub tar_mean: f64,
    /// Population standard deviation across seeds.
    pub tar_std: f64,
}

impl AblationRow {
    pub fn summary(&self) -> Vec<CellSummary> {
        let Some(first) = self.per_seed.first() else {
            return Vec::new();
        };
        let k = self.per_seed.len() as f64;
        (0..first.len())
            .map(|j| {
                let tars: Vec<f64> = self.per_seed.iter().map(|s| s[j].tar).collect();
                let mean = tars.iter().sum::<f64>() / k;
                let var = tars.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / k;
                CellSummary {
                    far_target: first[j].far_target,
                    threshold_mean: self.per_seed.iter().map(|s| s[j].threshold).sum::<f64>() / k,
                    tar_mean: mean,
                    tar_std: var.sqrt(),
                }
            })
            .collect()
    }

    pub fn mean_tar_at(&self, far_target: f64) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|c| c.far_target == far_target)
            .map(|c| c.tar_mean)
    }
}

/// Aligned seed-mean table with `mean±std` cells (percent).
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
    let mut out = String::new();
    let Some(first) = rows.first() else {
        return out;
    };
    let header: Vec<String> = first.summary().iter().map(|c| format_far(c.far_target)).collect();
    let seeds = first.per_seed.len();
    let _ = writeln!(out, "{:<label_w$}{}", "Methods", join_cells(&header, 13));
    for r in rows {
        let cells: Vec<String> = r
            .summary()
            .iter()
            .map(|c| format!("{:.2}±{:.2}", 100.0 * c.tar_mean, 100.0 * c.tar_std))
            .collect();
        let _ = writeln!(out, "{:<label_w$}{}", r.label, join_cells(&cells, 13));
    }
    let _ = writeln!(out, "TAR (%) mean±std over {seeds} seed(s)");
    out
}

/// Tab-separated records: `label far threshold_mean tar_mean tar_std seeds`.
pub fn ablation_records(rows: &[AblationRow]) -> String {
    let mut out = String::from("label\tfar\tthreshold_mean\ttar_mean\ttar_std\tseeds\n");
    for r in rows {
        for c in r.summary() {
            let _ = writeln!(
                out,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{}",
                r.label,
                c.far_target,
                c.threshold_mean,
                c.tar_mean,
                c.tar_std,
                r.per_seed.len()
            );
        }
    }
    out
}
