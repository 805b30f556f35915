use aaface::network::{cosine_similarity, default_attributes, sb_loss, total_loss, ParamGroup};
use aaface::{Branch, Error, Graph, Network, NetworkConfig, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([n, 1, 32, 32], (0..n * 1024).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn desk_config_output_shapes() {
    let net = Network::<f32>::new(NetworkConfig::default(), 0).unwrap();
    let features = net.backbone_features(&images(4, 1)).unwrap();
    assert_eq!(features.shape(), &[4, 32, 8, 8]);
    let out = net.forward(&images(4, 1)).unwrap();
    assert_eq!(out.fr_logits.shape(), &[4, 10]);
    assert_eq!(out.sb_probs.shape(), &[4, 5]);
    assert_eq!(out.fused_logits.shape(), &[4, 10]);
    assert_eq!(out.fr_embedding.shape(), &[4, 64]);
    assert_eq!(out.fused_embedding.shape(), &[4, 64]);
    let gates = out.attention.expect("aai exposes its gates");
    assert_eq!(gates.m_c.shape(), &[4, 64, 8, 8]);
    assert_eq!(gates.m_s.shape(), &[4, 1, 8, 8]);
}

#[test]
fn zero_parameters_give_neutral_outputs() {
    let mut net = Network::<f32>::new(NetworkConfig::default(), 0).unwrap();
    net.params_mut().zero_all();
    let out = net.forward(&images(3, 2)).unwrap();
    assert!(out.sb_probs.data().iter().all(|&p| p == 0.5));
    assert!(out.fr_logits.data().iter().all(|&v| v == 0.0));
    assert!(out.fused_logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_deterministic() {
    let a = Network::<f32>::new(NetworkConfig::default(), 7).unwrap();
    let b = Network::<f32>::new(NetworkConfig::default(), 7).unwrap();
    let x = images(2, 3);
    let (oa, ob) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
    assert_eq!(oa.fused_logits, ob.fused_logits);
    assert_eq!(oa.sb_probs, ob.sb_probs);
    assert_eq!(a.forward(&x).unwrap().fr_embedding, oa.fr_embedding);
}

#[test]
fn parameter_names_map_to_groups() {
    let net = Network::<f64>::new(NetworkConfig::default(), 0).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for (_, p) in net.params().iter() {
        seen.insert(ParamGroup::of(&p.name).unwrap_or_else(|| panic!("{} has no group", p.name)));
    }
    assert_eq!(seen.len(), 8);
}

#[test]
fn embeddings_match_forward() {
    let net = Network::<f64>::new(NetworkConfig::default(), 4).unwrap();
    let x = images(2, 4).cast::<f64>();
    let out = net.forward(&x).unwrap();
    assert_eq!(net.embed(&x, Branch::Baseline).unwrap(), out.fr_embedding);
    assert_eq!(net.embed(&x, Branch::Fused).unwrap(), out.fused_embedding);
}

#[test]
fn every_fusion_variant_builds_and_runs() {
    for fusion in aaface::FusionVariant::ALL {
        let cfg = NetworkConfig {
            fusion,
            ..NetworkConfig::default()
        };
        let out = Network::<f32>::new(cfg, 1).unwrap().forward(&images(2, 5)).unwrap();
        assert_eq!(out.fused_logits.shape(), &[2, 10], "{fusion}");
        assert!(out.fused_logits.all_finite());
    }
}

#[test]
fn bad_configs_are_rejected() {
    let bad = [
        NetworkConfig {
            lambda_fr: 0.0,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            reduction: 5,
            ..NetworkConfig::default()
        },
        NetworkConfig {
            attributes: vec![],
            ..NetworkConfig::default()
        },
        NetworkConfig {
            n_identities: 1,
            ..NetworkConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(Network::<f32>::new(cfg, 0), Err(Error::Config(_))));
    }
}

fn sb_loss_of(p: &[f64], t: &[f64], w: &[f64], n: usize) -> aaface::Result<f64> {
    let mut g = Graph::new();
    let probs = g.constant(Tensor::new([n, p.len() / n], p.to_vec()).unwrap());
    let l = sb_loss(&mut g, probs, t, w)?;
    Ok(g.value(l).item())
}

#[test]
fn uniform_probabilities_cost_weighted_ln2() {
    let w: Vec<f64> = default_attributes().iter().map(|a| a.weight).collect();
    let l = sb_loss_of(&[0.5; 5], &[1.0, 0.0, 1.0, 0.0, 1.0], &w, 1).unwrap();
    assert!((l - 3.5 * LN_2).abs() < 1e-12);
    assert!((l - 2.426).abs() < 1e-3);
}

#[test]
fn perfect_predictions_cost_nothing() {
    let t = [1.0, 0.0, 0.0, 1.0];
    assert!(sb_loss_of(&t, &t, &[1.0, 0.5], 2).unwrap() < 1e-6);
}

#[test]
fn sb_loss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, k) = (4, 5);
    for _ in 0..20 {
        let p: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0..2) as f64).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..2.0)).collect();
        let mut expected = 0.0;
        for s in 0..n {
            for i in 0..k {
                let (p, t) = (p[s * k + i], t[s * k + i]);
                expected -= w[i] * (t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            }
        }
        expected /= n as f64;
        let l = sb_loss_of(&p, &t, &w, n).unwrap();
        assert!((l - expected).abs() <= 1e-12 * expected.abs().max(1.0));
    }
}

#[test]
fn sb_loss_length_mismatch() {
    assert!(matches!(sb_loss_of(&[0.5; 5], &[1.0; 4], &[1.0; 5], 1), Err(Error::Contract(_))));
    assert!(matches!(sb_loss_of(&[0.5; 5], &[1.0; 5], &[1.0; 4], 1), Err(Error::Contract(_))));
}

fn total(logits: Tensor<f64>, ids: &[usize], p: &[f64], t: &[f64], w: &[f64], lambda: f64) -> f64 {
    let mut g = Graph::new();
    let n = ids.len();
    let logits = g.constant(logits);
    let probs = g.constant(Tensor::new([n, w.len()], p.to_vec()).unwrap());
    let l = total_loss(&mut g, logits, ids, probs, t, w, lambda).unwrap();
    g.value(l).item()
}

#[test]
fn total_loss_cases() {
    let k = 7;
    let perfect = [1.0, 0.0, 1.0, 0.0];
    let l = total(Tensor::zeros([2, k]), &[0, 3], &perfect, &perfect, &[1.0, 0.5], 3.0);
    assert!((l - 3.0 * (k as f64).ln()).abs() < 1e-6);

    let p = [0.3, 0.8, 0.6, 0.1];
    let t = [1.0, 0.0, 0.0, 1.0];
    let l = total(Tensor::full([2, k], 0.2), &[1, 2], &p, &t, &[1.0, 0.5], 0.0);
    assert!((l - sb_loss_of(&p, &t, &[1.0, 0.5], 2).unwrap()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits: Vec<f64> = (0..2 * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let ids = [4, 0];
    let ce: f64 = (0..2)
        .map(|s| {
            let row = &logits[s * k..(s + 1) * k];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[ids[s]]
        })
        .sum::<f64>()
        / 2.0;
    let expected = 3.0 * ce + sb_loss_of(&p, &t, &[1.0, 0.5], 2).unwrap();
    let l = total(Tensor::new([2, k], logits).unwrap(), &ids, &p, &t, &[1.0, 0.5], 3.0);
    assert!((l - expected).abs() < 1e-12);
}

#[test]
fn cosine_examples() {
    assert!((cosine_similarity(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-12);
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    assert!((cosine_similarity(&[0.3f32, -1.2, 4.0], &[0.3, -1.2, 4.0]).unwrap() - 1.0).abs() < 1e-6);
    assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::DegenerateEmbedding(_))));
    assert!(matches!(cosine_similarity(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 1..16),
        seed in any::<u64>(),
        s in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-5.0..5.0)).collect();
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        prop_assert!((cosine_similarity(&scaled, &b).unwrap() - c).abs() < 1e-9);
        prop_assert!((cosine_similarity(&b, &a).unwrap() - c).abs() < 1e-15);
    }
}
