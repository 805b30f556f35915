use std::ffi::{CStr, CString};
use std::ptr;

use aaface_ffi::*;

fn last_error() -> String {
    let p = aaf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> CString {
    CString::new(
        "network.backbone = 4:1, 8:2\nnetwork.branch_width = 8\nnetwork.embedding_dim = 8\naai.reduction = 2\n",
    )
    .unwrap()
}

fn new_model(cfg: &CString, seed: u64) -> *mut AafModel {
    let mut m = ptr::null_mut();
    let st = unsafe { aaf_model_new(cfg.as_ptr(), 3, seed, &mut m) };
    assert_eq!(st, AafStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(aaf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_embeds_and_round_trips_weights() {
    let cfg = tiny_config();
    let m = new_model(&cfg, 3);
    unsafe {
        assert_eq!(aaf_model_embedding_dim(m), 8);
        assert_eq!(aaf_model_num_attributes(m), 5);
        let images: Vec<f32> = (0..2 * 16 * 16).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let mut e1 = vec![0f32; 16];
        assert_eq!(
            aaf_model_embed(m, images.as_ptr(), 2, 1, 16, 16, AafBranch::Fused, e1.as_mut_ptr(), e1.len()),
            AafStatus::Ok
        );
        let mut probs = vec![0f32; 10];
        assert_eq!(
            aaf_model_attribute_probs(m, images.as_ptr(), 2, 1, 16, 16, probs.as_mut_ptr(), probs.len()),
            AafStatus::Ok
        );
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("w.aafw").to_str().unwrap()).unwrap();
        assert_eq!(aaf_model_save_weights(m, path.as_ptr()), AafStatus::Ok);
        let other = new_model(&cfg, 99);
        assert_eq!(aaf_model_load_weights(other, path.as_ptr()), AafStatus::Ok);
        let mut e2 = vec![0f32; 16];
        assert_eq!(
            aaf_model_embed(other, images.as_ptr(), 2, 1, 16, 16, AafBranch::Fused, e2.as_mut_ptr(), e2.len()),
            AafStatus::Ok
        );
        assert_eq!(e1, e2);

        let mut short = vec![0f32; 3];
        assert_eq!(
            aaf_model_embed(m, images.as_ptr(), 2, 1, 16, 16, AafBranch::Baseline, short.as_mut_ptr(), short.len()),
            AafStatus::Invalid
        );
        assert!(last_error().contains("16 required"), "{}", last_error());
        aaf_model_free(m);
        aaf_model_free(other);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut m = ptr::null_mut();
        let bad = CString::new("network.nonsense = 1").unwrap();
        assert_eq!(aaf_model_new(bad.as_ptr(), 3, 0, &mut m), AafStatus::Invalid);
        assert!(last_error().contains("network.nonsense"));
        assert!(m.is_null());

        let cfg = tiny_config();
        let m = new_model(&cfg, 1);
        let missing = CString::new("/nonexistent/dir/w.aafw").unwrap();
        assert_eq!(aaf_model_load_weights(m, missing.as_ptr()), AafStatus::Io);
        assert_eq!(aaf_model_load_weights(m, ptr::null()), AafStatus::NullPointer);
        assert_eq!(aaf_model_embedding_dim(ptr::null()), 0);
        aaf_model_free(m);
        aaf_model_free(ptr::null_mut());

        let zero = [0f32; 3];
        let mut s = 0.0;
        assert_eq!(aaf_cosine_similarity(zero.as_ptr(), zero.as_ptr(), 3, &mut s), AafStatus::Numerical);
    }
}

#[test]
fn aai_handle_fuses_with_gates_in_range() {
    unsafe {
        let mut a = ptr::null_mut();
        assert_eq!(aaf_aai_new(8, 3, 0, &mut a), AafStatus::Invalid);
        assert_eq!(aaf_aai_new(8, 2, 0, &mut a), AafStatus::Ok);
        let len = 2 * 8 * 3 * 3;
        let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
        let y: Vec<f32> = (0..len).map(|i| (i as f32 * 0.11).cos()).collect();
        let (mut f, mut mc, mut ms) = (vec![0f32; len], vec![0f32; len], vec![0f32; 18]);
        assert_eq!(
            aaf_aai_fuse(a, x.as_ptr(), y.as_ptr(), 2, 8, 3, 3, f.as_mut_ptr(), mc.as_mut_ptr(), ms.as_mut_ptr()),
            AafStatus::Ok
        );
        assert!(mc.iter().chain(&ms).all(|&g| g > 0.0 && g < 1.0));
        for i in 0..len {
            let s = ms[(i / (8 * 9)) * 9 + i % 9];
            let expect = s * mc[i] * x[i] + (1.0 - s) * (1.0 - mc[i]) * y[i];
            assert!((f[i] - expect).abs() <= 1e-6 * (1.0 + expect.abs()));
        }
        assert_eq!(
            aaf_aai_fuse(a, x.as_ptr(), y.as_ptr(), 2, 8, 3, 3, f.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()),
            AafStatus::Ok
        );
        aaf_aai_free(a);
    }
}

#[test]
fn tar_at_far_over_buffers() {
    let genuine = [0.9, 0.8];
    let impostor = [0.1, 0.2];
    let fars = [0.5, 0.1];
    let (mut th, mut tar, mut br) = ([0.0; 2], [0.0; 2], [9u8; 2]);
    let st = unsafe {
        aaf_tar_at_far(
            genuine.as_ptr(),
            2,
            impostor.as_ptr(),
            2,
            fars.as_ptr(),
            2,
            th.as_mut_ptr(),
            tar.as_mut_ptr(),
            br.as_mut_ptr(),
        )
    };
    assert_eq!(st, AafStatus::Ok);
    assert_eq!(tar, [1.0, 1.0]);
    assert_eq!(br, [0, 1]);
    let st = unsafe {
        aaf_tar_at_far(genuine.as_ptr(), 0, impostor.as_ptr(), 2, fars.as_ptr(), 2, th.as_mut_ptr(), tar.as_mut_ptr(), ptr::null_mut())
    };
    assert_eq!(st, AafStatus::Invalid);
}

#[test]
fn generated_header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/aaface.h")).unwrap();
    for name in [
        "aaf_version",
        "aaf_last_error",
        "aaf_model_new",
        "aaf_model_free",
        "aaf_model_embed",
        "aaf_aai_fuse",
        "aaf_tar_at_far",
        "AAF_STATUS_OK",
        "typedef struct AafModel AafModel",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"aaface.h\"\nint main(void) { AafStatus s = AAF_STATUS_OK; return (int)s; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
