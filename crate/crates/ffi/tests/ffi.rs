use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;

use mapdetect::image::LabeledImage;
use mapdetect::prior::{save_checkpoint, NormativePrior, PriorConfig, PriorKind};
use mapdetect::restoration::{map_restore, RestorationConfig};
use mapdetect::synth::{generate_lesioned, LesionConfig, PhantomConfig};
use mapdetect_ffi::*;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = md_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn metric_entry_points() {
    let mut out = 0.0;
    let mut img = vec![0.0; 25];
    img[12] = 1.0;
    let mask = vec![1u8; 25];
    assert_eq!(unsafe { md_tv_norm(img.as_ptr(), mask.as_ptr(), 5, 5, &mut out) }, MdStatus::Ok);
    assert_eq!(out, 4.0);

    let a = [1u8, 1, 0, 0];
    let b = [1u8, 1, 1, 1];
    assert_eq!(unsafe { md_dice(a.as_ptr(), b.as_ptr(), 4, &mut out) }, MdStatus::Ok);
    assert!((out - 2.0 / 3.0).abs() < 1e-12);

    let scores = [0.9, 0.1];
    let labels = [1u8, 0];
    assert_eq!(unsafe { md_roc_auc(scores.as_ptr(), labels.as_ptr(), 2, &mut out) }, MdStatus::Ok);
    assert_eq!(out, 1.0);

    let pool: Vec<f64> = (1..=10).rev().map(|k| k as f64 / 10.0).collect();
    assert_eq!(unsafe { md_select_threshold(pool.as_ptr(), 10, 0.10, &mut out) }, MdStatus::Ok);
    assert!((out - 0.9).abs() < 1e-12);
}

#[test]
fn errors_are_reported() {
    let mut out = 0.0;
    let s = unsafe { md_tv_norm(std::ptr::null(), [1u8].as_ptr(), 1, 1, &mut out) };
    assert_eq!(s, MdStatus::NullPointer);
    assert!(last_error().contains("image"));

    let bad = [2u8, 0];
    let s = unsafe { md_dice(bad.as_ptr(), bad.as_ptr(), 2, &mut out) };
    assert_eq!(s, MdStatus::InvalidArgument);

    let pool = [1.0, 2.0];
    let s = unsafe { md_select_threshold(pool.as_ptr(), 2, 1.5, &mut out) };
    assert_eq!(s, MdStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    let mut handle = std::ptr::null_mut();
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { md_prior_load(path.as_ptr(), &mut handle) }, MdStatus::Io);
    assert!(handle.is_null());
}

fn tiny_model() -> NormativePrior {
    let cfg = PriorConfig {
        kind: PriorKind::Gmvae,
        image_shape: [32, 32],
        latent_dim: 3,
        mixture_count: 2,
        hidden: vec![16],
        mixture_hidden: 4,
        ..PriorConfig::default()
    };
    NormativePrior::new(cfg, 3).unwrap()
}

fn lesioned() -> LabeledImage {
    generate_lesioned(11, &PhantomConfig::default(), &LesionConfig::default()).unwrap()
}

#[test]
fn prior_handle_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = tiny_model();
    save_checkpoint(&model, &path).unwrap();

    let mut handle = std::ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { md_prior_load(cpath.as_ptr(), &mut handle) }, MdStatus::Ok);

    let (mut h, mut w, mut m, mut c) = (0, 0, 0, 0);
    assert_eq!(unsafe { md_prior_info(handle, &mut h, &mut w, &mut m, &mut c) }, MdStatus::Ok);
    assert_eq!((h, w, m, c), (32, 32, 3, 2));

    let img = lesioned();
    let px = img.pixels.as_slice().unwrap();
    let mut elbo = 0.0;
    assert_eq!(unsafe { md_prior_elbo(handle, px.as_ptr(), 1, 4, 9, &mut elbo) }, MdStatus::Ok);
    let x = Array2::from_shape_vec((1, 1024), px.to_vec()).unwrap();
    let expected = model.elbo(x.view(), &mut ChaCha8Rng::seed_from_u64(9), 4).unwrap()[0];
    assert_eq!(elbo, expected);

    let mut opts = md_restore_options_default();
    opts.lambda = 2.0;
    opts.total_steps = 15;
    opts.seed = 4;
    let fg: Vec<u8> = img.foreground_mask.iter().map(|&f| f as u8).collect();
    let mut restored = vec![0.0; 1024];
    let mut diff = vec![0.0; 1024];
    let s = unsafe { md_restore(handle, px.as_ptr(), fg.as_ptr(), opts, restored.as_mut_ptr(), diff.as_mut_ptr()) };
    assert_eq!(s, MdStatus::Ok);
    let reference = map_restore(
        &model,
        &LabeledImage {
            subject_id: "external".into(),
            slice_id: 0,
            ..img.clone()
        },
        &RestorationConfig {
            lambda: 2.0,
            total_steps: 15,
            seed: 4,
            ..RestorationConfig::default()
        },
    )
    .unwrap();
    assert_eq!(restored, reference.restored.as_slice().unwrap());
    assert_eq!(diff, reference.difference.as_slice().unwrap());
    unsafe { md_prior_free(handle) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mapdetect.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["md_prior_load", "md_prior_free", "md_restore", "md_last_error_message", "MD_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mapdetect.h\"\nint main(void) { MdPrior *p = 0; MdRestoreOptions o = md_restore_options_default(); (void)o; md_prior_free(p); return MD_STATUS_OK; }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler found; skipping compile check");
        return;
    };
    assert!(status.success());
}
