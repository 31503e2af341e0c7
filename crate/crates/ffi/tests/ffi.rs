use std::ffi::{CStr, CString};
use std::ptr;

use erdetect::detect::{DetectorHyper, DetectorKind, detect, train_detector};
use erdetect::features::{ErConfig, FeatureMode};
use erdetect::image::{Image, Mask};
use erdetect::inpaint::telea_inpaint;
use erdetect::model::{Architecture, Layer, Model};
use erdetect::rng;
use erdetect_ffi::*;
use ndarray::{Array1, Array2};
use rand::Rng;

/// 4x4 grayscale -> 3 classes; logit j = sum_i x_i (i + 1)(j - 1) / 16.
fn dense_model() -> Model {
    let layer = Layer::Dense {
        weight: Array2::from_shape_fn((16, 3), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.0) / 16.0),
        bias: Array1::zeros(3),
    };
    Model::from_layers(Architecture::Custom, (4, 4, 1), 3, vec![layer]).unwrap()
}

fn ramp_image() -> Image {
    Image::new(4, 4, 1, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(erd_last_error_message()) }.to_str().unwrap().to_string()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn model_round_trip_through_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = dense_model();
    model.save(&path, "test").unwrap();

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { erd_model_load(cpath(&path).as_ptr(), &mut handle) }, ErdStatus::Ok);
    assert!(last_error().is_empty());

    let (mut h, mut w, mut c, mut k) = (0, 0, 0, 0);
    assert_eq!(unsafe { erd_model_shape(handle, &mut h, &mut w, &mut c, &mut k) }, ErdStatus::Ok);
    assert_eq!((h, w, c, k), (4, 4, 1, 3));

    let img = ramp_image();
    let mut probs = [0.0; 3];
    let mut label = usize::MAX;
    let status = unsafe { erd_model_predict(handle, img.pixels().as_ptr(), 16, probs.as_mut_ptr(), 3, &mut label) };
    assert_eq!(status, ErdStatus::Ok);
    let expected = model.forward(&img).unwrap();
    assert_eq!(probs.to_vec(), expected.probs);
    assert_eq!(label, 2);

    let status = unsafe { erd_model_predict(handle, img.pixels().as_ptr(), 15, probs.as_mut_ptr(), 3, &mut label) };
    assert_eq!(status, ErdStatus::DimensionMismatch);
    assert!(!last_error().is_empty());
    let status = unsafe { erd_model_predict(handle, img.pixels().as_ptr(), 16, probs.as_mut_ptr(), 2, &mut label) };
    assert_eq!(status, ErdStatus::DimensionMismatch);

    unsafe { erd_model_free(handle) };
}

#[test]
fn load_errors_map_to_codes() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    assert_eq!(unsafe { erd_model_load(missing.as_ptr(), &mut handle) }, ErdStatus::Io);
    assert!(last_error().contains("nonexistent"));
    assert_eq!(unsafe { erd_model_load(ptr::null(), &mut handle) }, ErdStatus::NullPointer);
    assert_eq!(
        unsafe { erd_model_load(missing.as_ptr(), ptr::null_mut()) },
        ErdStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a model").unwrap();
    assert_eq!(unsafe { erd_model_load(cpath(&junk).as_ptr(), &mut handle) }, ErdStatus::Malformed);
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { erd_detector_load(cpath(&junk).as_ptr(), &mut det) }, ErdStatus::Malformed);

    unsafe {
        erd_model_free(ptr::null_mut());
        erd_detector_free(ptr::null_mut());
    }
}

#[test]
fn detect_matches_core() {
    let dir = tempfile::tempdir().unwrap();
    let model = dense_model();
    let cfg = ErConfig {
        n: 2,
        mode: FeatureMode::Direct,
        ..Default::default()
    };
    let dim = cfg.feature_len(3);
    let mut s = rng::stream(3, "ffi-features", 0);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let adv = i % 2 == 1;
        let shift = if adv { 0.3 } else { 0.0 };
        features.push((0..dim).map(|_| s.random::<f64>() + shift).collect());
        labels.push(adv);
    }
    let detector = train_detector(&features, &labels, DetectorKind::Svm, &DetectorHyper::default(), &cfg, 3).unwrap();
    let mpath = dir.path().join("m.bin");
    let dpath = dir.path().join("d.bin");
    model.save(&mpath, "").unwrap();
    detector.save(&dpath, "").unwrap();

    let (mut m, mut d) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(erd_model_load(cpath(&mpath).as_ptr(), &mut m), ErdStatus::Ok);
        assert_eq!(erd_detector_load(cpath(&dpath).as_ptr(), &mut d), ErdStatus::Ok);
    }
    let img = ramp_image();
    for seed in [0u64, 7, 99] {
        let mut adv = -1;
        let mut score = f64::NAN;
        let status = unsafe { erd_detect(d, m, img.pixels().as_ptr(), 16, seed, &mut adv, &mut score) };
        assert_eq!(status, ErdStatus::Ok);
        let v = detect(&detector, &model, &img, &mut rng::from_seed(seed)).unwrap();
        assert_eq!(score, v.score);
        assert_eq!(adv, i32::from(v.adversarial));
    }
    let status = unsafe { erd_detect(ptr::null(), m, img.pixels().as_ptr(), 16, 0, &mut 0, &mut 0.0) };
    assert_eq!(status, ErdStatus::NullPointer);
    unsafe {
        erd_model_free(m);
        erd_detector_free(d);
    }
}

#[test]
fn inpaint_matches_core() {
    let img = Image::new(5, 6, 3, (0..90).map(|i| ((i * 37) % 90) as f64 / 90.0).collect()).unwrap();
    let mut flags = [0u8; 30];
    for i in [7, 8, 14, 22] {
        flags[i] = 1;
    }
    let mut out = vec![0.0; 90];
    let status = unsafe { erd_inpaint_telea(img.pixels().as_ptr(), 5, 6, 3, flags.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(status, ErdStatus::Ok);
    let mask = Mask::new(5, 6, vec![(1, 1), (1, 2), (2, 2), (3, 4)]).unwrap();
    assert_eq!(out, telea_inpaint(&img, &mask, 3).unwrap().pixels());

    let status = unsafe { erd_inpaint_telea(img.pixels().as_ptr(), 5, 6, 3, ptr::null(), 3, out.as_mut_ptr()) };
    assert_eq!(status, ErdStatus::NullPointer);
    let status = unsafe { erd_inpaint_telea(img.pixels().as_ptr(), usize::MAX, 2, 2, flags.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(status, ErdStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/erdetect.h")).unwrap();
    for name in [
        "erd_last_error_message",
        "erd_version",
        "erd_model_load",
        "erd_model_free",
        "erd_model_shape",
        "erd_model_predict",
        "erd_detector_load",
        "erd_detector_free",
        "erd_detect",
        "erd_inpaint_telea",
        "ERD_STATUS_OK",
        "typedef struct ErdModel ErdModel",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let v = unsafe { CStr::from_ptr(erd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
