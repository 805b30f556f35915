//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use aaface::ablation::BASELINE_LABEL;
use aaface::gradcheck::{self, Suite};
use aaface::network::{ParamGroup, StageSpec};
use aaface::training::{lr_at, run_stage};
use aaface::weights::{encode_weights, load_weights, save_weights};
use aaface::datagen::{generate, SyntheticSpec};
use aaface::evaluation::tar_at_far;
use aaface::{AaiConfig, AaiModule, Error, Model, Network, NetworkConfig, Stage, Tensor, TrainConfig};
use common::{random_scores, tar_oracle, write_tiny_config, TINY_CONFIG};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn aaface(args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_aaface"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!(
            "aaface {} exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut checks = 0;
    for suite in Suite::ALL {
        for r in gradcheck::run_suite(suite, gradcheck::DEFAULT_SEEDS).map_err(|e| e.to_string())? {
            ensure(r.seeds >= 10, format!("{} ran {} seeds", r.name, r.seeds))?;
            ensure(r.passed(), format!("{} max rel err {:.3e}", r.name, r.max_rel_error))?;
            worst = worst.max(r.max_rel_error);
            checks += 1;
        }
    }
    let t = started.elapsed();
    ensure(t < Duration::from_secs(120), format!("took {t:.1?}"))?;
    Ok(format!("{checks} checks x 10 seeds, worst rel err {worst:.2e}, {t:.1?}"))
}

fn fusion_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let r = [1, 2, 4, 8][rng.gen_range(0..4)];
        let c = r * rng.gen_range(1..5);
        let shape = [rng.gen_range(1..4), c, rng.gen_range(1..7), rng.gen_range(1..7)];
        let n: usize = shape.iter().product();
        let (store, m) = AaiModule::standalone::<f64>(AaiConfig::new(c, r).unwrap(), case).unwrap();
        let x = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let y = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let (fused, gates) = m.fuse_values(&store, &x, &y).map_err(|e| e.to_string())?;
        let hw = shape[2] * shape[3];
        for i in 0..n {
            let mc = gates.m_c.data()[i];
            let ms = gates.m_s.data()[(i / (c * hw)) * hw + i % hw];
            let expect = ms * mc * x.data()[i] + (1.0 - ms) * (1.0 - mc) * y.data()[i];
            worst = worst.max(rel(fused.data()[i], expect));
        }
    }
    ensure(worst <= 1e-6, format!("worst rel err {worst:.3e}"))?;
    Ok(format!("100 cases, worst rel err {worst:.2e}"))
}

fn gate_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..50u64 {
        let c = 4 * rng.gen_range(1..5);
        let shape = [rng.gen_range(1..4), c, rng.gen_range(1..6), rng.gen_range(1..6)];
        let n: usize = shape.iter().product();
        let (store, mut m) = AaiModule::standalone::<f64>(AaiConfig::new(c, 4).unwrap(), case).unwrap();
        let x = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let y = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (_, gates) = m.fuse_values(&store, &x, &y).map_err(|e| e.to_string())?;
        ensure(gates.m_c.shape() == shape, "m_c shape")?;
        ensure(gates.m_s.shape() == [shape[0], 1, shape[2], shape[3]], "m_s shape")?;
        ensure(
            gates.m_c.data().iter().chain(gates.m_s.data()).all(|&g| g > 0.0 && g < 1.0),
            format!("case {case}: gate outside (0, 1)"),
        )?;
        m.pin_gates(Some(1.0));
        ensure(m.fuse_values(&store, &x, &y).unwrap().0 == x, "gate 1 does not give F_FR")?;
        m.pin_gates(Some(0.0));
        ensure(m.fuse_values(&store, &x, &y).unwrap().0 == y, "gate 0 does not give F_SB")?;
    }
    Ok("50 cases in (0, 1); pinned limits exact".into())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fars = [1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3, 1.0];
    let mut largest = 0;
    for set in 0..100 {
        let (g, i) = random_scores(&mut rng, 10_000);
        largest = largest.max(g.len() + i.len());
        let points = tar_at_far(&g, &i, &fars).map_err(|e| e.to_string())?;
        for p in &points {
            let (t, tar) = tar_oracle(&g, &i, p.far_target);
            ensure(
                p.threshold == t && p.tar == tar,
                format!("set {set} far {}: ({}, {}) vs oracle ({t}, {tar})", p.far_target, p.threshold, p.tar),
            )?;
        }
        ensure(points.windows(2).all(|w| w[0].tar <= w[1].tar), format!("set {set}: TAR not monotone"))?;
    }
    Ok(format!("100 sets up to {largest} scores match exactly"))
}

fn staged_training_contract() -> Outcome {
    let cfg = TrainConfig::default();
    let expected = |e: usize| 0.01 * 0.1f64.powi([4, 10, 17].iter().filter(|&&s| s <= e).count() as i32);
    for e in 0..cfg.epochs {
        ensure(lr_at(e, &cfg) == expected(e), format!("lr at epoch {e}: {}", lr_at(e, &cfg)))?;
    }
    let data = generate(&SyntheticSpec {
        n_identities: 6,
        samples_per_identity: 4,
        height: 16,
        width: 16,
        eval_fraction: 0.0,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let net = Network::<f64>::new(
        NetworkConfig {
            backbone: vec![StageSpec { channels: 4, stride: 1 }, StageSpec { channels: 8, stride: 2 }],
            branch_width: 8,
            embedding_dim: 8,
            n_identities: 6,
            reduction: 2,
            ..NetworkConfig::default()
        },
        0,
    )
    .unwrap();
    let train = TrainConfig {
        epochs: 2,
        lr_steps: vec![1],
        batch_size: 4,
        ..TrainConfig::default()
    };
    let groups = [
        ParamGroup::Backbone,
        ParamGroup::FrConv1,
        ParamGroup::FrConv2,
        ParamGroup::FrHead,
        ParamGroup::SbConv,
        ParamGroup::SbHead,
        ParamGroup::Fusion,
        ParamGroup::FusedHead,
    ];
    let mut model = Model::new(net);
    let mut frozen_checked = 0;
    for stage in Stage::ORDER {
        let before: Vec<_> = model.net.params().iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        run_stage(stage, &mut model, &data, &train).map_err(|e| e.to_string())?;
        for (name, old) in &before {
            let g = ParamGroup::of(name).ok_or_else(|| format!("{name} has no group"))?;
            let now = &model.net.params().get(model.net.params().find(name).unwrap()).value;
            if !stage.trains(g) {
                let same = old.data().iter().zip(now.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, format!("{stage} modified frozen {name}"))?;
                frozen_checked += 1;
            }
        }
        for g in groups.iter().filter(|g| stage.trains(**g)) {
            let moved = before.iter().any(|(name, old)| {
                ParamGroup::of(name) == Some(*g)
                    && model.net.params().get(model.net.params().find(name).unwrap()).value != *old
            });
            ensure(moved, format!("{stage} did not update {g:?}"))?;
        }
    }
    Ok(format!("lr schedule exact over 25 epochs; {frozen_checked} frozen tensors bit-identical"))
}

fn attribute_accuracy() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let started = Instant::now();
    aaface(&["train", "--stage", "all", "--out", s(&out)])?;
    aaface(&["eval", "--weights", s(&out.join("stage_joint.aafw")), "--out", s(&out)])?;
    let t = started.elapsed();
    let text = fs::read_to_string(out.join("attributes.tsv")).map_err(|e| e.to_string())?;
    let mut accs = Vec::new();
    for line in text.lines().skip(1) {
        let (name, acc) = line.split_once('\t').ok_or("malformed attributes.tsv")?;
        accs.push((name.to_string(), acc.parse::<f64>().map_err(|e| e.to_string())?));
    }
    ensure(accs.len() == 5, format!("{} attributes reported", accs.len()))?;
    let summary = accs.iter().map(|(n, a)| format!("{n} {:.1}%", 100.0 * a)).collect::<Vec<_>>().join(", ");
    ensure(accs.iter().all(|(_, a)| *a >= 0.95), format!("held-out accuracy below 95%: {summary}"))?;
    ensure(t < Duration::from_secs(900), format!("took {t:.1?}"))?;
    Ok(format!("{summary}; {t:.1?}"))
}

fn ablation_means(path: &Path, far: f64) -> Result<Vec<(String, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        ensure(f.len() == 6, format!("malformed row {line:?}"))?;
        if (f[1].parse::<f64>().map_err(|e| e.to_string())? - far).abs() < 1e-12 {
            rows.push((f[0].to_string(), f[3].parse().map_err(|e: std::num::ParseFloatError| e.to_string())?));
        }
    }
    Ok(rows)
}

fn fusion_ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    aaface(&["ablate", "--grid", "fusion", "--seeds", "5", "--out", s(dir.path())])?;
    let rows = ablation_means(&dir.path().join("ablation_fusion.tsv"), 1e-2)?;
    ensure(rows.len() == 6, format!("{} variants reported", rows.len()))?;
    let get = |label: &str| rows.iter().find(|(l, _)| l == label).map(|(_, v)| *v);
    let base = get(BASELINE_LABEL).ok_or("no baseline row")?;
    let aai = get("aai (r=8)").ok_or("no aai row")?;
    let summary = rows.iter().map(|(l, v)| format!("{l} {:.1}", 100.0 * v)).collect::<Vec<_>>().join(", ");
    ensure(aai >= base, format!("aai mean below baseline: {summary}"))?;
    Ok(summary)
}

fn sweeps_are_complete_and_deterministic() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "");
    let mut lines = Vec::new();
    for (grid, labels) in [
        ("ratio", vec!["aai (r=4)", "aai (r=8)", "aai (r=16)"]),
        ("attrs", vec!["aai (M)", "aai (M&B)", "aai (M&B&Ch)", "aai (all)"]),
    ] {
        let ratio_cfg;
        let cfg = if grid == "ratio" {
            ratio_cfg = dir.path().join("ratio.cfg");
            let text = TINY_CONFIG.replace("network.embedding_dim = 8", "network.embedding_dim = 16");
            fs::write(&ratio_cfg, text).unwrap();
            &ratio_cfg
        } else {
            &cfg
        };
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = dir.path().join(format!("{grid}_{run}"));
            aaface(&["ablate", "--config", s(cfg), "--grid", grid, "--seeds", "2", "--out", s(&out)])?;
            let tsv = fs::read(out.join(format!("ablation_{grid}.tsv"))).map_err(|e| e.to_string())?;
            let txt = fs::read(out.join(format!("ablation_{grid}.txt"))).map_err(|e| e.to_string())?;
            outputs.push((tsv, txt));
        }
        ensure(outputs[0] == outputs[1], format!("{grid} reports differ between runs"))?;
        let tsv = String::from_utf8(outputs[0].0.clone()).unwrap();
        for label in &labels {
            let n = tsv.lines().filter(|l| l.split('\t').next() == Some(label)).count();
            ensure(n == 5, format!("{grid}: {label} has {n} rows"))?;
        }
        ensure(tsv.lines().count() == 1 + 5 * labels.len(), format!("{grid}: unexpected rows"))?;
        lines.push(format!("{grid} {} rows", labels.len()));
    }
    Ok(format!("{}; byte-identical reruns", lines.join(", ")))
}

fn weight_format() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, bad) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("bad"));
    let source = Network::<f32>::new(NetworkConfig::default(), 1).unwrap();
    save_weights(&a, source.params()).map_err(|e| e.to_string())?;
    let mut target = Network::<f32>::new(NetworkConfig::default(), 2).unwrap();
    load_weights(&a, target.params_mut()).map_err(|e| e.to_string())?;
    save_weights(&b, target.params()).map_err(|e| e.to_string())?;
    ensure(fs::read(&a).unwrap() == fs::read(&b).unwrap(), "round trip not byte-identical")?;

    let good = encode_weights(source.params());
    let mut magic = good.clone();
    magic[0] ^= 0xff;
    let mut version = good.clone();
    version[4..8].copy_from_slice(&99u32.to_le_bytes());
    let truncated = good[..good.len() / 2].to_vec();
    let mut errors = Vec::new();
    for bytes in [magic, version, truncated] {
        fs::write(&bad, bytes).unwrap();
        errors.push(load_weights(&bad, target.params_mut()).expect_err("corruption accepted"));
    }
    ensure(matches!(errors[0], Error::WeightMagic { .. }), format!("magic: {}", errors[0]))?;
    ensure(matches!(errors[1], Error::WeightVersion { .. }), format!("version: {}", errors[1]))?;
    ensure(matches!(errors[2], Error::Truncated { .. }), format!("truncation: {}", errors[2]))?;
    ensure(encode_weights(target.params()) == good, "failed load modified the model")?;
    Ok(format!("{} bytes round trip; bad magic, version and truncation rejected", good.len()))
}

fn training_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path(), "train.deterministic = true\n");
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        aaface(&["train", "--config", s(&cfg), "--stage", "all", "--seed", "11", "--out", s(&out)])?;
        let mut files = Vec::new();
        for name in ["stage_fr.aafw", "stage_sb.aafw", "stage_joint.aafw", "train_log.tsv"] {
            files.push(fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"))?);
        }
        runs.push(files);
    }
    ensure(runs[0] == runs[1], "runs differ")?;
    Ok("3 checkpoints and train_log.tsv byte-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("fusion formula oracle", fusion_oracle),
        ("gate contracts", gate_contracts),
        ("metric oracle", metric_oracle),
        ("staged training contract", staged_training_contract),
        ("held-out attribute accuracy", attribute_accuracy),
        ("fusion ablation trend", fusion_ablation),
        ("ratio and attribute sweeps", sweeps_are_complete_and_deterministic),
        ("weight format", weight_format),
        ("training determinism", training_determinism),
    ];
    let only: Option<usize> = std::env::var("AAFACE_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let t = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name} ({t:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name} ({t:.1}s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
