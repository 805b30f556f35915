#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Exhaustive threshold sweep: every observed score plus one value above the
/// maximum, scanned linearly. Returns `(threshold, tar)`.
pub fn tar_oracle(genuine: &[f64], impostor: &[f64], far: f64) -> (f64, f64) {
    let max = genuine.iter().chain(impostor).cloned().fold(f64::MIN, f64::max);
    let mut best: Option<f64> = None;
    for &t in genuine.iter().chain(impostor).chain(std::iter::once(&max.next_up())) {
        let accepted = impostor.iter().filter(|&&s| s >= t).count();
        if accepted as f64 / impostor.len() as f64 <= far && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    let t = best.expect("the sentinel always qualifies");
    let tar = genuine.iter().filter(|&&s| s >= t).count() as f64 / genuine.len() as f64;
    (t, tar)
}

/// Random score lists with a sprinkling of exact ties.
pub fn random_scores(rng: &mut ChaCha8Rng, max_total: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(2..=max_total);
    let n_gen = rng.gen_range(1..n);
    let coarse = rng.gen_bool(0.3);
    let mut draw = |shift: f64| {
        let v: f64 = rng.gen_range(-1.0..1.0) * 0.7 + shift;
        let v = v.clamp(-1.0, 1.0);
        if coarse {
            (v * 50.0).round() / 50.0
        } else {
            v
        }
    };
    let genuine: Vec<f64> = (0..n_gen).map(|_| draw(0.3)).collect();
    let impostor: Vec<f64> = (0..n - n_gen).map(|_| draw(-0.3)).collect();
    (genuine, impostor)
}

/// A run small enough for every CLI command to finish in seconds.
pub const TINY_CONFIG: &str = "\
# tiny run
dtype = f32
network.backbone = 4:1, 8:2
network.branch_width = 8
network.embedding_dim = 8
aai.reduction = 2
train.epochs = 2
train.lr_steps = 1
train.batch_size = 4
data.identities = 12
data.samples_per_identity = 6
data.height = 16
data.width = 16
eval.pairs = 40
";

pub fn write_tiny_config(dir: &std::path::Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, format!("{TINY_CONFIG}{extra}")).unwrap();
    path
}
