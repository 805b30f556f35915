use std::collections::HashSet;
use std::fs;

use aaface::datagen::{
    generate, load_dataset, make_pairs, read_tensor, write_dataset, write_tensor, Dataset, SyntheticSpec,
    ATTRIBUTE_NAMES,
};
use aaface::{Error, Tensor};
use proptest::prelude::*;

fn small() -> SyntheticSpec {
    SyntheticSpec {
        n_identities: 8,
        samples_per_identity: 4,
        height: 12,
        width: 12,
        ..SyntheticSpec::default()
    }
}

#[test]
fn same_seed_same_bytes() {
    let a = generate(&SyntheticSpec::default()).unwrap();
    let b = generate(&SyntheticSpec::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 640);
    assert_eq!(a.image_shape(), Some(&[1, 32, 32][..]));
    assert_eq!(a.attribute_names, ATTRIBUTE_NAMES.map(String::from).to_vec());
    let c = generate(&SyntheticSpec { seed: 8, ..SyntheticSpec::default() }).unwrap();
    assert_ne!(a.samples[0].image, c.samples[0].image);
}

#[test]
fn noiseless_static_samples_are_identical() {
    let d = generate(&SyntheticSpec {
        noise: 0.0,
        pose: 0.0,
        ..small()
    })
    .unwrap();
    for id in d.identities() {
        let imgs: Vec<&Tensor<f32>> = d.samples.iter().filter(|s| s.identity == id).map(|s| &s.image).collect();
        assert!(imgs.windows(2).all(|w| w[0] == w[1]));
    }
    let first = &d.samples[0].image;
    assert!(d.samples.iter().any(|s| &s.image != first));
}

#[test]
fn attributes_are_identity_properties() {
    let d = generate(&SyntheticSpec::default()).unwrap();
    assert!(d.attribute_inconsistencies().is_empty());
    for a in 0..5 {
        let on: HashSet<usize> = d.samples.iter().filter(|s| s.attributes[a] == 1).map(|s| s.identity).collect();
        assert!(!on.is_empty() && on.len() < 32, "attribute {a} is constant");
    }
}

#[test]
fn splits_are_identity_disjoint() {
    let d = generate(&SyntheticSpec::default()).unwrap();
    let s = d.split(0.25);
    let train: HashSet<usize> = s.train.identities().into_iter().collect();
    let eval: HashSet<usize> = s.eval.identities().into_iter().collect();
    assert!(train.is_disjoint(&eval));
    assert_eq!((train.len(), eval.len()), (24, 8));
    assert_eq!(s.train.len() + s.eval.len(), d.len());
    assert!(d.split(0.0).eval.is_empty());
}

#[test]
fn single_sample_identities_cannot_verify() {
    let spec = SyntheticSpec {
        samples_per_identity: 1,
        ..small()
    };
    assert!(matches!(generate(&spec), Err(Error::Protocol(_))));
    assert!(generate(&SyntheticSpec { eval_fraction: 0.0, ..spec }).is_ok());
}

#[test]
fn pairs_have_exact_counts_and_types() {
    let d = generate(&SyntheticSpec::default()).unwrap().split(0.25).eval;
    let p = make_pairs(&d, 1000, 3).unwrap();
    assert_eq!((p.genuine_count(), p.impostor_count()), (500, 500));
    let mut seen = HashSet::new();
    for pair in &p.pairs {
        assert_ne!(pair.a, pair.b);
        let same = d.samples[pair.a].identity == d.samples[pair.b].identity;
        assert_eq!(same, pair.genuine);
        assert!(seen.insert((pair.a.min(pair.b), pair.a.max(pair.b))));
    }
    assert_eq!(p, make_pairs(&d, 1000, 3).unwrap());
    assert_ne!(p, make_pairs(&d, 1000, 4).unwrap());
    assert!(matches!(make_pairs(&d, 999, 3), Err(Error::Protocol(_))));
    assert!(matches!(make_pairs(&d, 100_000, 3), Err(Error::Protocol(_))));
}

#[test]
fn container_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(&small()).unwrap();
    write_dataset(dir.path(), &d).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.warnings.is_empty());
    assert_eq!(loaded.dataset, d);
}

#[test]
fn tensor_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.aaft");
    let t = Tensor::new([1, 2, 3], vec![1.0f32, -2.0, 0.5, 3.25, 0.0, 7.0]).unwrap();
    write_tensor(&path, &t).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"AAFT");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
    assert_eq!(bytes.len(), 8 + 12 + 24);
    assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), -2.0);
    assert_eq!(read_tensor(&path).unwrap(), t);

    fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, bad).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
}

#[test]
fn inconsistent_attributes_warn_but_load() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate(&small()).unwrap()).unwrap();
    let manifest = dir.path().join("manifest");
    let text = fs::read_to_string(&manifest).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let i = lines.iter().position(|l| !l.starts_with('#')).unwrap() + 1;
    let mut fields: Vec<String> = lines[i].split(' ').map(String::from).collect();
    fields[2] = fields[2].chars().map(|c| if c == '0' { '1' } else { '0' }).collect();
    lines[i] = fields.join(" ");
    fs::write(&manifest, lines.join("\n")).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.warnings.len(), 1, "{:?}", loaded.warnings);
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &generate(&small()).unwrap()).unwrap();
    let manifest = dir.path().join("manifest");
    let good = fs::read_to_string(&manifest).unwrap();
    for bad in ["x 0 10101\n", "x zero 10101 tensors/a.aaft\n", "x 0 10201 tensors/a.aaft\n"] {
        fs::write(&manifest, format!("{good}{bad}")).unwrap();
        let e = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
        assert!(e.to_string().contains("line"), "{e}");
    }
    fs::remove_file(&manifest).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap_err().exit_code(), 3);
}

/// Logistic regression on raw pixels, fit on the training identities.
fn probe_accuracy(train: &Dataset, eval: &Dataset, attr: usize) -> f64 {
    let dim = train.samples[0].image.numel();
    let feats = |d: &Dataset| -> Vec<Vec<f64>> {
        d.samples
            .iter()
            .map(|s| s.image.data().iter().map(|&v| v as f64).collect())
            .collect()
    };
    let (xt, xe) = (feats(train), feats(eval));
    let yt: Vec<f64> = train.samples.iter().map(|s| s.attributes[attr] as f64).collect();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let n = xt.len() as f64;
    for _ in 0..300 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, y) in xt.iter().zip(&yt) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gb += err;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += err * v;
            }
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= 0.5 * (g / n + 1e-3 * *wi);
        }
        b -= 0.5 * gb / n;
    }
    let correct = xe
        .iter()
        .zip(&eval.samples)
        .filter(|(x, s)| {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z >= 0.0) == (s.attributes[attr] == 1)
        })
        .count();
    correct as f64 / xe.len() as f64
}

#[test]
fn attributes_are_linearly_decodable_from_pixels() {
    let spec = SyntheticSpec::default();
    assert_eq!(spec.noise, 0.05);
    let s = generate(&spec).unwrap().split(spec.eval_fraction);
    for a in 0..spec.n_attributes {
        let acc = probe_accuracy(&s.train, &s.eval, a);
        assert!(acc > 0.95, "attribute {} probe accuracy {acc}", ATTRIBUTE_NAMES[a]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_seed_gives_consistent_datasets(seed in any::<u64>(), frac in 0.1f64..0.6) {
        let d = generate(&SyntheticSpec { seed, ..small() }).unwrap();
        prop_assert!(d.attribute_inconsistencies().is_empty());
        prop_assert!(d.samples.iter().all(|s| s.image.all_finite()));
        let s = d.split(frac);
        let train: HashSet<usize> = s.train.identities().into_iter().collect();
        prop_assert!(s.eval.identities().iter().all(|i| !train.contains(i)));
        prop_assert!(!s.eval.is_empty() && !s.train.is_empty());
    }
}
