use std::collections::BTreeMap;
use std::path::Path;

use svq::checkpoint::{Checkpoint, Container};
use svq::config::{RunConfig, Variant};
use svq::data::{generate_dataset, read_dataset, read_image_ppm, read_semantics_pgm, write_dataset, write_image_ppm, write_semantics_pgm};
use svq::pipeline::{compare, synthesize, train_stage1, train_stage2, SynthParams};

fn tiny(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        image_size: 8,
        latent_size: 2,
        channels: 4,
        code_dim: 4,
        k_image: 8,
        k_semantic: 4,
        disc_channels: 4,
        ar_width: 8,
        ar_layers: 1,
        ar_heads: 2,
        ae_steps: 8,
        ar_steps: 5,
        batch_size: 2,
        n_samples: 8,
        n_eval: 2,
        grid_every: 4,
        ..RunConfig::default()
    }
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn full_run(dir: &Path, variant: Variant) {
    let cfg = tiny(variant);
    let data = generate_dataset(cfg.n_samples, cfg.data_seed, cfg.image_size).unwrap();
    write_dataset(&dir.join("data"), &data).unwrap();
    let (train, held) = data.split_at(6);
    let (s1, _) = train_stage1(&cfg, train, Some(&dir.join("run"))).unwrap();
    s1.save(&dir.join("run")).unwrap();
    let (s2, _) = train_stage2(&cfg, &s1, train).unwrap();
    s2.save(&dir.join("run/stage2.svqc")).unwrap();
    synthesize(&s1, &s2, held, SynthParams::from_config(&cfg), Some(&dir.join("run"))).unwrap();
}

#[test]
fn two_runs_write_identical_bytes() {
    for variant in [Variant::Svqgan, Variant::BaselineVqgan] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        full_run(a.path(), variant);
        full_run(b.path(), variant);
        let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
        assert!(sa.keys().any(|k| k.ends_with("metrics.tsv")));
        assert!(sa.keys().any(|k| k.ends_with(".svqc")));
        assert!(sa.keys().any(|k| k.contains("recon_")));
        assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
        for (k, v) in &sa {
            assert!(v == &sb[k], "{variant}: {k} differs between runs");
        }
    }
}

#[test]
fn compare_reports_are_reproducible() {
    let cfg = RunConfig { ae_steps: 3, ar_steps: 2, ..tiny(Variant::Svqvae) };
    let data = generate_dataset(8, 4, 8).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = compare(&cfg, &data, &[0, 1], Some(a.path())).unwrap();
    let cb = compare(&cfg, &data, &[0, 1], Some(b.path())).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let tsv = std::fs::read_to_string(a.path().join("compare.tsv")).unwrap();
    let labels: Vec<&str> = tsv.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, ["VQVAE-T", "sVQVAE-T", "VQGAN-T", "sVQGAN-T"]);
}

#[test]
fn image_formats_round_trip_byte_exact() {
    let data = generate_dataset(5, 9, 16).unwrap();
    for s in &data {
        let ppm = write_image_ppm(&s.image);
        let back = read_image_ppm(&ppm).unwrap();
        assert_eq!(back, s.image);
        assert_eq!(write_image_ppm(&back), ppm);
        let pgm = write_semantics_pgm(&s.semantics);
        let back = read_semantics_pgm(&pgm).unwrap();
        assert_eq!(back, s.semantics);
        assert_eq!(write_semantics_pgm(&back), pgm);
    }
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &data).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), data);
}

#[test]
fn checkpoints_round_trip_byte_exact() {
    let cfg = tiny(Variant::Svqgan);
    let data = generate_dataset(6, 0, 8).unwrap();
    let (s1, _) = train_stage1(&cfg, &data, None).unwrap();
    for ck in s1.checkpoints().unwrap() {
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"SVQC1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let c = Container::from_bytes(&bytes).unwrap();
        assert_eq!(c.to_bytes(), bytes);
        // every truncation is rejected rather than misread
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
