//! The transformer's sampler against an independent reading of its contract:
//! scale logits by 1/temperature, keep the `top_k` largest (lowest index first
//! on ties), renormalise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use svq::quantizer::{CodebookId, LatentGrid};
use svq::transformer::{SamplingParams, TokenSequence, TransformerArch, TransformerModel};

fn reference_distribution(logits: &[f64], temperature: f64, top_k: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let kept = &idx[..top_k.min(logits.len())];
    let m = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; logits.len()];
    for &i in kept {
        p[i] = ((logits[i] - m) / temperature).exp();
    }
    let z: f64 = p.iter().sum();
    p.iter().map(|v| v / z).collect()
}

fn model() -> (TransformerModel<f64>, LatentGrid) {
    let arch = TransformerArch {
        k_semantic: 3,
        k_image: 6,
        semantic_shape: (1, 2),
        image_shape: (1, 1),
        width: 8,
        layers: 1,
        heads: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = TransformerModel::<f64>::new(arch, &mut rng).unwrap();
    // spread the head so the distribution is far from uniform
    for v in m.params.get_mut("head.w").unwrap().data_mut() {
        *v *= 60.0;
    }
    let zs = LatentGrid::new(1, 2, vec![2, 0], CodebookId::Semantic, 3).unwrap();
    (m, zs)
}

#[test]
fn empirical_draws_follow_the_reference_distribution() {
    let (m, zs) = model();
    let zx = LatentGrid::new(1, 1, vec![0], CodebookId::Image, 6).unwrap();
    let seq = TokenSequence::pack(&zs, &zx).unwrap();
    let logits = m.logits(&seq).unwrap();
    // rows predict positions 1..; the single image token is predicted by the last row
    let last: Vec<f64> = logits.data()[logits.len() - 6..].to_vec();
    for (temperature, top_k) in [(1.0, 6), (0.7, 3), (2.0, 2)] {
        let want = reference_distribution(&last, temperature, top_k);
        let n = 4000;
        let mut hist = [0usize; 6];
        for seed in 0..n {
            let g = m.sample(&zs, SamplingParams { temperature, top_k, seed }).unwrap();
            hist[g.indices()[0]] += 1;
        }
        for (j, &c) in hist.iter().enumerate() {
            let p = want[j];
            let got = c as f64 / n as f64;
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((got - p).abs() <= 5.0 * sd + 1e-3, "T={temperature} k={top_k} token {j}: {got} vs {p}");
            if p == 0.0 {
                assert_eq!(c, 0, "token {j} outside top-{top_k} was drawn");
            }
        }
    }
}

#[test]
fn greedy_is_argmax_and_seed_independent() {
    let (m, zs) = model();
    let zx = LatentGrid::new(1, 1, vec![0], CodebookId::Image, 6).unwrap();
    let logits = m.logits(&TokenSequence::pack(&zs, &zx).unwrap()).unwrap();
    let last = &logits.data()[logits.len() - 6..];
    let argmax = (0..6).fold(0, |b, j| if last[j] > last[b] { j } else { b });
    for seed in 0..20 {
        let g = m.sample(&zs, SamplingParams { seed, ..SamplingParams::greedy() }).unwrap();
        assert_eq!(g.indices(), &[argmax]);
    }
}
