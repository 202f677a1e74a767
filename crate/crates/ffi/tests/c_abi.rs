use std::ffi::{CStr, CString};
use std::ptr;

use svq::config::{RunConfig, Variant};
use svq::data::generate_dataset;
use svq::pipeline::{train_stage1, train_stage2, CONFIG_FILE, STAGE2_FILE};
use svq_ffi::*;

fn last_error() -> String {
    let p = svq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny() -> RunConfig {
    RunConfig {
        variant: Variant::Svqvae,
        image_size: 8,
        latent_size: 2,
        channels: 4,
        code_dim: 4,
        k_image: 8,
        k_semantic: 4,
        ar_width: 8,
        ar_layers: 1,
        ar_heads: 2,
        ae_steps: 3,
        ar_steps: 3,
        batch_size: 2,
        n_samples: 6,
        n_eval: 2,
        ..RunConfig::default()
    }
}

#[test]
fn dataset_round_trip_through_handles() {
    let mut ds = ptr::null_mut();
    assert_eq!(unsafe { svq_dataset_generate(3, 5, 8, &mut ds) }, SvqStatus::Ok);
    assert_eq!(unsafe { svq_dataset_len(ds) }, 3);
    assert_eq!(unsafe { svq_dataset_image_size(ds) }, 8);

    let reference = generate_dataset(3, 5, 8).unwrap();
    let mut img = vec![0f32; 8 * 8 * 3];
    let mut sem = vec![0u8; 64];
    let st = unsafe { svq_dataset_get(ds, 1, img.as_mut_ptr(), img.len(), sem.as_mut_ptr(), sem.len()) };
    assert_eq!(st, SvqStatus::Ok);
    assert_eq!(img, reference[1].image.data);
    assert_eq!(sem, reference[1].semantics.classes);

    let dir = tempfile::tempdir().unwrap();
    let c = CString::new(dir.path().to_str().unwrap()).unwrap();
    assert_eq!(unsafe { svq_dataset_write(ds, c.as_ptr()) }, SvqStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { svq_dataset_read(c.as_ptr(), &mut back) }, SvqStatus::Ok);
    let mut img2 = vec![0f32; img.len()];
    unsafe { svq_dataset_get(back, 1, img2.as_mut_ptr(), img2.len(), ptr::null_mut(), 0) };
    assert_eq!(img, img2);
    unsafe {
        svq_dataset_free(ds);
        svq_dataset_free(back);
    }
}

#[test]
fn errors_set_code_and_message() {
    let mut ds = ptr::null_mut();
    unsafe { svq_dataset_generate(1, 0, 8, &mut ds) };
    let mut img = vec![0f32; 5];
    let st = unsafe { svq_dataset_get(ds, 0, img.as_mut_ptr(), img.len(), ptr::null_mut(), 0) };
    assert_eq!(st, SvqStatus::InvalidArgument);
    assert!(last_error().contains("expected 192"), "{}", last_error());
    let st = unsafe { svq_dataset_get(ds, 7, ptr::null_mut(), 0, ptr::null_mut(), 0) };
    assert_eq!(st, SvqStatus::InvalidArgument);
    assert_eq!(unsafe { svq_dataset_get(ptr::null(), 0, ptr::null_mut(), 0, ptr::null_mut(), 0) }, SvqStatus::NullPointer);

    let missing = CString::new("/nonexistent/run").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { svq_model_load(missing.as_ptr(), &mut m) }, SvqStatus::Io);
    assert!(m.is_null());
    // success clears the message
    assert_eq!(unsafe { svq_dataset_len(ds) }, 1);
    let mut out = 0.0;
    let a = vec![0.5f32; 192];
    assert_eq!(unsafe { svq_ssim(a.as_ptr(), a.as_ptr(), 8, &mut out) }, SvqStatus::Ok);
    assert!(svq_last_error().is_null());
    unsafe { svq_dataset_free(ds) };
    unsafe { svq_dataset_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_the_library() {
    let data = generate_dataset(4, 2, 8).unwrap();
    let (a, b) = (&data[0], &data[1]);
    let mut v = 0.0;
    assert_eq!(unsafe { svq_ssim(a.image.data.as_ptr(), b.image.data.as_ptr(), 8, &mut v) }, SvqStatus::Ok);
    assert_eq!(v, svq::metrics::ssim(&a.image, &b.image).unwrap());

    let st = unsafe { svq_miou(a.semantics.classes.as_ptr(), b.semantics.classes.as_ptr(), 8, 8, 8, &mut v) };
    assert_eq!(st, SvqStatus::Ok);
    assert_eq!(v, svq::metrics::miou(&a.semantics, &b.semantics, 8).unwrap().0);

    let flat = |s: &[svq::data::PairedSample]| s.iter().flat_map(|p| p.image.data.clone()).collect::<Vec<f32>>();
    let (fa, fb) = (flat(&data[..2]), flat(&data[2..]));
    let st = unsafe { svq_frechet_distance(fa.as_ptr(), 2, fb.as_ptr(), 2, 8, &mut v) };
    assert_eq!(st, SvqStatus::Ok);
    let imgs = |s: &[svq::data::PairedSample]| s.iter().map(|p| p.image.clone()).collect::<Vec<_>>();
    assert_eq!(v, svq::metrics::frechet_distance(&imgs(&data[..2]), &imgs(&data[2..])).unwrap());
}

#[test]
fn model_encode_decode_sample() {
    let cfg = tiny();
    let data = generate_dataset(6, 1, 8).unwrap();
    let (s1, _) = train_stage1(&cfg, &data[..4], None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cfg.save(&dir.path().join(CONFIG_FILE)).unwrap();
    s1.save(dir.path()).unwrap();
    let c = CString::new(dir.path().to_str().unwrap()).unwrap();

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { svq_model_load(c.as_ptr(), &mut m) }, SvqStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { svq_model_latent_size(m) }, 2);
    assert_eq!(unsafe { svq_model_is_coupled(m) }, 1);

    let s = &data[4];
    let (mut zs, mut zx) = (vec![0u32; 4], vec![0u32; 4]);
    let st = unsafe {
        svq_model_encode(
            m,
            s.image.data.as_ptr(),
            s.image.data.len(),
            s.semantics.classes.as_ptr(),
            s.semantics.classes.len(),
            zs.as_mut_ptr(),
            zx.as_mut_ptr(),
            4,
        )
    };
    assert_eq!(st, SvqStatus::Ok, "{}", last_error());
    let (rzs, rzx) = s1.encode_pairs(&[s]).unwrap().remove(0);
    assert_eq!(zs, rzs.indices().iter().map(|&v| v as u32).collect::<Vec<_>>());
    assert_eq!(zx, rzx.indices().iter().map(|&v| v as u32).collect::<Vec<_>>());

    let mut img = vec![0f32; 192];
    assert_eq!(unsafe { svq_model_decode(m, zx.as_ptr(), zs.as_ptr(), 4, img.as_mut_ptr(), img.len()) }, SvqStatus::Ok);
    assert_eq!(img, s1.decode_images(&[(&rzx, &rzs)]).unwrap()[0].data);

    // no transformer yet
    let mut out = vec![0u32; 4];
    assert_eq!(unsafe { svq_model_sample(m, zs.as_ptr(), 4, 1.0, 8, 3, out.as_mut_ptr()) }, SvqStatus::Config);
    let bad = [99u32; 4];
    assert_eq!(unsafe { svq_model_decode(m, bad.as_ptr(), zs.as_ptr(), 4, img.as_mut_ptr(), img.len()) }, SvqStatus::Data);
    unsafe { svq_model_free(m) };

    let (s2, _) = train_stage2(&cfg, &s1, &data[..4]).unwrap();
    s2.save(&dir.path().join(STAGE2_FILE)).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { svq_model_load(c.as_ptr(), &mut m) }, SvqStatus::Ok, "{}", last_error());
    let st = unsafe { svq_model_sample(m, zs.as_ptr(), 4, 1.0, 8, 3, out.as_mut_ptr()) };
    assert_eq!(st, SvqStatus::Ok, "{}", last_error());
    let lib = s2
        .model
        .sample(&rzs, svq::transformer::SamplingParams { temperature: 1.0, top_k: 8, seed: 3 })
        .unwrap();
    assert_eq!(out, lib.indices().iter().map(|&v| v as u32).collect::<Vec<_>>());
    assert_eq!(unsafe { svq_model_sample(m, zs.as_ptr(), 4, 0.0, 8, 3, out.as_mut_ptr()) }, SvqStatus::Config);
    unsafe { svq_model_free(m) };
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/svq.h")).unwrap();
    for name in [
        "svq_last_error",
        "svq_dataset_generate",
        "svq_dataset_free",
        "svq_ssim",
        "svq_miou",
        "svq_frechet_distance",
        "svq_model_load",
        "svq_model_sample",
        "svq_model_free",
        "SVQ_STATUS_OK",
        "typedef struct SvqModel SvqModel",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}
