//! Gradient verification: exact structural checks plus central finite
//! differences at f64 against the tape's analytic gradients.
//!
//! Finite differences are taken on a frozen replay of the recorded pass: the
//! quantization indices, stop-gradient outputs and straight-through offsets of
//! the recording are substituted, so the differentiated function is the
//! surrogate the backward pass actually implements.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{d_loss, PatchDiscriminator};
use crate::autoencoder::{
    AeArch, Batch, CoupledAutoencoder, GanTerm, LossWeights, Modality, VqModel, IMAGE_CODEBOOK,
    SEMANTIC_CODEBOOK,
};
use crate::data::{generate_dataset, PairedSample};
use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::nn::{Bound, Parameterized};
use crate::quantizer::{quantize_on_tape, Codebook, CodebookId};
use crate::tensor::Tensor;
use crate::transformer::{TokenSequence, TransformerArch, TransformerModel};

type NamedGrads = BTreeMap<String, Option<Tensor<f64>>>;

/// Finite-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    /// Coordinates (or structural assertions) checked.
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// `None` for exact checks.
    pub tol: Option<f64>,
    pub passed: bool,
    pub seconds: f64,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tol = self.tol.map(|t| format!("< {t:e}")).unwrap_or_else(|| "exact".into());
        write!(
            f,
            "{:<5} {:<40} checked={:<6} max_rel_err={:.3e} ({tol}) {:.2}s",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.n_checked,
            self.max_rel_err,
            self.seconds
        )
    }
}

fn report(name: &str, n: usize, max: f64, tol: Option<f64>, start: Instant) -> SuiteReport {
    let passed = match tol {
        Some(t) => max < t,
        None => max == 0.0,
    };
    SuiteReport {
        name: name.into(),
        n_checked: n,
        max_rel_err: max,
        tol,
        passed: passed && n > 0,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Compares every parameter gradient of `loss` with central differences on a
/// frozen replay. `loss` binds the model's parameters and returns the scalar
/// loss plus the binding. Tensors longer than `max_per_tensor` are checked at
/// that many random coordinates (all coordinates when `None`).
pub fn finite_difference_check<M, F>(
    model: &M,
    loss: F,
    max_per_tensor: Option<usize>,
    rng: &mut impl Rng,
) -> Result<(usize, f64)>
where
    M: Parameterized<f64> + Clone,
    F: Fn(&M, &mut Tape<f64>) -> Result<(Var, Bound)>,
{
    let mut tape = Tape::recording();
    let (l, bound) = loss(model, &mut tape)?;
    let grads = bound.collect_grads(&tape.backward(l));
    let frozen = tape.frozen().expect("recording tape").clone();
    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let (l, _) = loss(m, &mut t)?;
        Ok(t.value(l).item())
    };
    let (mut n, mut worst) = (0, 0.0f64);
    let mut probe = model.clone();
    for (name, g) in &grads {
        let len = probe.param_mut(name).expect("bound parameter").len();
        let coords: Vec<usize> = match max_per_tensor {
            Some(k) if len > k => (0..k).map(|_| rng.random_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        for i in coords {
            let analytic = g.as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = probe.param_mut(name).unwrap().data()[i];
            probe.param_mut(name).unwrap().data_mut()[i] = orig + FD_EPS;
            let up = eval(&probe)?;
            probe.param_mut(name).unwrap().data_mut()[i] = orig - FD_EPS;
            let down = eval(&probe)?;
            probe.param_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic, numeric));
            n += 1;
        }
    }
    Ok((n, worst))
}

/// Smallest architecture that exercises every layer type.
pub fn micro_arch() -> AeArch {
    AeArch {
        image_size: 8,
        num_classes: 4,
        latent_size: 2,
        channels: 4,
        code_dim: 3,
        k_image: 6,
        k_semantic: 5,
    }
}

pub fn micro_batch(arch: &AeArch, n: usize, seed: u64) -> Result<(Vec<PairedSample>, Batch<f64>)> {
    let mut data = generate_dataset(n, seed, arch.image_size)?;
    // the generator draws from more classes than the micro model has
    for s in &mut data {
        for c in &mut s.semantics.classes {
            *c %= arch.num_classes as u8;
        }
    }
    let batch = Batch::from_samples(&data.iter().collect::<Vec<_>>(), arch.num_classes)?;
    Ok((data, batch))
}

fn max_abs(t: Option<&Tensor<f64>>) -> f64 {
    t.map_or(0.0, |t| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// A `[N, D, H, W]` pre-latent and codebook with cells assigned to rows.
struct QuantFixture {
    pre: Tensor<f64>,
    codebook: Codebook<f64>,
}

impl QuantFixture {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(QuantFixture {
            pre: Tensor::randn(&[2, 3, 3, 4], 1.0, rng),
            codebook: Codebook::random(7, 3, rng)?,
        })
    }
}

/// Straight-through: the pre-latent gradient equals the decoder-input gradient
/// bitwise, the codebook receives nothing through it, and finite differences
/// of the replayed pass agree.
pub fn straight_through_suite(seed: u64) -> Result<Vec<SuiteReport>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = QuantFixture::new(&mut rng)?;
    let target = Tensor::<f64>::randn(fx.pre.shape(), 1.0, &mut rng);
    let mut tape = Tape::new();
    let pre = tape.param(fx.pre.clone());
    let cb = tape.param(fx.codebook.entries().clone());
    let q = quantize_on_tape(&mut tape, pre, cb, &fx.codebook, CodebookId::Image)?;
    let t = tape.constant(target.clone());
    let l = tape.mse(q.passthrough, t);
    let g = tape.backward(l);
    let (gp, gq) = (g.get_or_zeros(pre), g.get_or_zeros(q.passthrough));
    let mut mismatches = gp.data().iter().zip(gq.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    mismatches += g.get(cb).is_some() as usize;
    let forward_exact = tape.value(q.passthrough).bitwise_eq(tape.value(q.quantized));
    let exact = report(
        "straight-through identity",
        gp.len() + 2,
        (mismatches + !forward_exact as usize) as f64,
        None,
        start,
    );

    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rec = Tape::recording();
    let pre_v = rec.param(fx.pre.clone());
    let cb_v = rec.constant(fx.codebook.entries().clone());
    let q = quantize_on_tape(&mut rec, pre_v, cb_v, &fx.codebook, CodebookId::Image)?;
    let t = rec.constant(target.clone());
    let l = rec.mse(q.passthrough, t);
    let analytic = rec.backward(l).get_or_zeros(pre_v);
    let frozen = rec.frozen().unwrap().clone();
    let eval = |x: &Tensor<f64>| -> Result<f64> {
        let mut tp = Tape::replaying(frozen.clone());
        let p = tp.param(x.clone());
        let c = tp.constant(fx.codebook.entries().clone());
        let q = quantize_on_tape(&mut tp, p, c, &fx.codebook, CodebookId::Image)?;
        let t = tp.constant(target.clone());
        let l = tp.mse(q.passthrough, t);
        Ok(tp.value(l).item())
    };
    let mut x = fx.pre.clone();
    for i in 0..x.len() {
        let o = x.data()[i];
        x.data_mut()[i] = o + FD_EPS;
        let up = eval(&x)?;
        x.data_mut()[i] = o - FD_EPS;
        let down = eval(&x)?;
        x.data_mut()[i] = o;
        worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_EPS)));
    }
    let fd = report("straight-through finite differences", x.len(), worst, Some(1e-4), start);
    Ok(vec![exact, fd])
}

/// Codebook loss: analytic gradient `2 (c_k - z) / N` summed over the cells
/// assigned to row `k`, against the tape and against finite differences.
pub fn codebook_loss_suite(seed: u64) -> Result<Vec<SuiteReport>> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = QuantFixture::new(&mut rng)?;
    let build = |tape: &mut Tape<f64>, entries: &Tensor<f64>| -> Result<(Var, Var, Vec<usize>)> {
        let pre = tape.constant(fx.pre.clone());
        let cb = tape.param(entries.clone());
        let q = quantize_on_tape(tape, pre, cb, &fx.codebook, CodebookId::Image)?;
        let idx: Vec<usize> = q.grids.iter().flat_map(|g| g.indices().to_vec()).collect();
        Ok((q.codebook_loss, cb, idx))
    };
    let mut rec = Tape::recording();
    let (l, cb, idx) = build(&mut rec, fx.codebook.entries())?;
    let tape_grad = rec.backward(l).get_or_zeros(cb);
    let frozen = rec.frozen().unwrap().clone();

    let [n, d, h, w] = [2usize, 3, 3, 4];
    let cells = n * h * w;
    let mut closed = vec![0.0; fx.codebook.size() * d];
    for (cell, &k) in idx.iter().enumerate() {
        let (b, p) = (cell / (h * w), cell % (h * w));
        for j in 0..d {
            let z = fx.pre.data()[b * d * h * w + j * h * w + p];
            closed[k * d + j] += 2.0 * (fx.codebook.row(k)[j] - z) / cells as f64;
        }
    }
    let mut worst_closed = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut e = fx.codebook.entries().clone();
    for (i, &c) in closed.iter().enumerate().take(e.len()) {
        worst_closed = worst_closed.max(rel_err(tape_grad.data()[i], c));
        let o = e.data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            e.data_mut()[i] = v;
            let mut tp = Tape::replaying(frozen.clone());
            let (l, _, _) = build(&mut tp, &e)?;
            Ok(tp.value(l).item())
        };
        let up = eval(o + FD_EPS)?;
        let down = eval(o - FD_EPS)?;
        e.data_mut()[i] = o;
        worst_fd = worst_fd.max(rel_err(closed[i], (up - down) / (2.0 * FD_EPS)));
    }
    Ok(vec![
        report("codebook-loss gradient vs 2(c-z)/N", closed.len(), worst_closed, Some(1e-4), start),
        report("codebook-loss finite differences", closed.len(), worst_fd, Some(1e-4), start),
    ])
}

/// Exact zeros required by the stop-gradient placement: the codebook loss
/// never reaches the encoder, the commitment loss never reaches the codebook,
/// the semantic branch never reaches the image decoder or image codebook, and
/// the image branch never reaches the semantic decoder or semantic codebook.
pub fn stop_gradient_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let arch = micro_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CoupledAutoencoder::<f64>::new(arch, LossWeights::default(), &mut rng)?;
    let (_, batch) = micro_batch(&arch, 2, seed)?;
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    let mut expect_zero = |g: Option<&Tensor<f64>>| {
        checked += 1;
        worst = worst.max(max_abs(g));
    };

    let run = |root: &dyn Fn(&crate::autoencoder::CoupledForward, &mut Tape<f64>) -> Var| -> Result<BTreeMap<String, Option<Tensor<f64>>>> {
        let mut tape = Tape::new();
        let p = model.bind_params(&mut tape);
        let f = model.forward(&mut tape, p, &batch, None)?;
        let r = root(&f, &mut tape);
        Ok(f.params.collect_grads(&tape.backward(r)))
    };
    let sem = run(&|f, _| f.semantic_branch.expect("lambda > 0"))?;
    let img = run(&|f, _| f.image_branch)?;
    for (name, g) in &sem {
        if name.starts_with("dec_image.") || name == IMAGE_CODEBOOK {
            expect_zero(g.as_ref());
        }
    }
    for (name, g) in &img {
        if name.starts_with("dec_sem.") || name == SEMANTIC_CODEBOOK {
            expect_zero(g.as_ref());
        }
    }

    let fx = QuantFixture::new(&mut rng)?;
    for (codebook_term, what_is_blocked) in [(true, "pre"), (false, "codebook")] {
        let mut tape = Tape::new();
        let pre = tape.param(fx.pre.clone());
        let cb = tape.param(fx.codebook.entries().clone());
        let q = quantize_on_tape(&mut tape, pre, cb, &fx.codebook, CodebookId::Image)?;
        let root = if codebook_term { q.codebook_loss } else { q.commitment_loss };
        let g = tape.backward(root);
        let blocked = if what_is_blocked == "pre" { pre } else { cb };
        expect_zero(g.get(blocked));
    }
    Ok(report("stop-gradient exact zeros", checked, worst, None, start))
}

/// Loss and gradients are affine in λ: λ ∈ {0, 1} predicts any other λ.
pub fn lambda_affinity(seed: u64, lambda: f64) -> Result<SuiteReport> {
    let start = Instant::now();
    let arch = micro_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = CoupledAutoencoder::<f64>::new(arch, LossWeights::default(), &mut rng)?;
    let (_, batch) = micro_batch(&arch, 2, seed)?;
    let eval = |l: f64| -> Result<(f64, NamedGrads)> {
        let mut m = base.clone();
        m.weights.lambda = l;
        let mut tape = Tape::new();
        let p = m.bind_params(&mut tape);
        let f = m.forward(&mut tape, p, &batch, None)?;
        let v = tape.value(f.total).item();
        Ok((v, f.params.collect_grads(&tape.backward(f.total))))
    };
    let (l0, g0) = eval(0.0)?;
    let (l1, g1) = eval(1.0)?;
    let (lx, gx) = eval(lambda)?;
    let mut worst = (lx - (l0 + lambda * (l1 - l0))).abs();
    let mut n = 1;
    for (name, g) in &gx {
        let z = |m: &BTreeMap<String, Option<Tensor<f64>>>| m[name].clone();
        let a = z(&g0);
        let b = z(&g1);
        let len = g.as_ref().or(a.as_ref()).or(b.as_ref()).map_or(0, |t| t.len());
        for i in 0..len {
            let at = |t: &Option<Tensor<f64>>| t.as_ref().map_or(0.0, |t| t.data()[i]);
            let predicted = at(&a) + lambda * (at(&b) - at(&a));
            worst = worst.max((at(g) - predicted).abs());
            n += 1;
        }
    }
    Ok(report(&format!("lambda affinity at {lambda}"), n, worst, Some(1e-9), start))
}

/// Finite differences of the full weighted loss on the micro coupled model,
/// with and without the adversarial term.
pub fn coupled_suite(seed: u64) -> Result<Vec<SuiteReport>> {
    let arch = micro_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CoupledAutoencoder::<f64>::new(arch, LossWeights::default(), &mut rng)?;
    let disc = PatchDiscriminator::<f64>::new(4, &mut rng);
    let (_, batch) = micro_batch(&arch, 2, seed)?;
    let mut out = Vec::new();
    for gan in [false, true] {
        let start = Instant::now();
        let (n, worst) = finite_difference_check(
            &model,
            |m, tape| {
                let p = m.bind_params(tape);
                let g = gan.then_some(GanTerm { disc: &disc, weight: 0.1 });
                let f = m.forward(tape, p, &batch, g)?;
                Ok((f.total, f.params))
            },
            None,
            &mut rng,
        )?;
        let name = if gan { "coupled loss + adversarial term" } else { "coupled loss" };
        out.push(report(name, n, worst, Some(1e-3), start));
    }
    Ok(out)
}

/// Finite differences for both decoupled baseline models.
pub fn baseline_suite(seed: u64) -> Result<Vec<SuiteReport>> {
    let arch = micro_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, batch) = micro_batch(&arch, 2, seed)?;
    let mut out = Vec::new();
    for modality in [Modality::Image, Modality::Semantic] {
        let start = Instant::now();
        let model = VqModel::<f64>::new(modality, arch, LossWeights::default(), &mut rng)?;
        let (n, worst) = finite_difference_check(
            &model,
            |m, tape| {
                let p = m.bind_params(tape);
                let f = m.forward(tape, p, &batch, None)?;
                Ok((f.total, f.params))
            },
            None,
            &mut rng,
        )?;
        out.push(report(&format!("baseline {modality:?} loss"), n, worst, Some(1e-3), start));
    }
    Ok(out)
}

/// Discriminator hinge loss. Scores of a fresh discriminator sit near zero,
/// well away from the hinge kinks at ±1.
pub fn discriminator_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let arch = micro_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = PatchDiscriminator::<f64>::new(4, &mut rng);
    let (_, batch) = micro_batch(&arch, 2, seed)?;
    let fake = Tensor::<f64>::uniform(batch.images.shape(), 0.0, 1.0, &mut rng);
    let (n, worst) = finite_difference_check(
        &disc,
        |d, tape| {
            let p = d.bind_params(tape);
            let r = tape.constant(batch.images.clone());
            let f = tape.constant(fake.clone());
            Ok((d_loss(d, tape, &p, r, f)?, p))
        },
        None,
        &mut rng,
    )?;
    Ok(report("discriminator hinge loss", n, worst, Some(1e-3), start))
}

/// Conditional NLL of a two-block transformer.
pub fn transformer_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let arch = TransformerArch {
        k_semantic: 5,
        k_image: 7,
        semantic_shape: (2, 2),
        image_shape: (2, 2),
        width: 8,
        layers: 2,
        heads: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TransformerModel::<f64>::new(arch, &mut rng)?;
    // larger weights than the 0.02 init so attention is not uniform
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let seqs: Vec<TokenSequence> = (0..2)
        .map(|_| {
            let s: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            let x: Vec<usize> = (0..4).map(|_| rng.random_range(0..7)).collect();
            TokenSequence::from_tokens([s, x.iter().map(|v| v + 5).collect()].concat(), (2, 2), (2, 2), 5, 7)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let (n, worst) = finite_difference_check(
        &model,
        |m, tape| {
            let p = m.bind_params(tape);
            Ok((m.nll_on_tape(tape, &p, &refs)?, p))
        },
        None,
        &mut rng,
    )?;
    Ok(report("transformer conditional NLL", n, worst, Some(1e-3), start))
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<SuiteReport>> {
    let mut out = straight_through_suite(seed)?;
    out.extend(codebook_loss_suite(seed)?);
    out.push(stop_gradient_suite(seed)?);
    out.push(lambda_affinity(seed, 0.1)?);
    out.extend(coupled_suite(seed)?);
    out.extend(baseline_suite(seed)?);
    out.push(discriminator_suite(seed)?);
    out.push(transformer_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn every_suite_passes() {
        for r in run_all(7).unwrap() {
            println!("{r}");
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // The extra term depends on the parameters but is computed off-tape,
        // so the analytic gradient misses it.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let disc = PatchDiscriminator::<f64>::new(2, &mut rng);
        let x = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let (_, worst) = finite_difference_check(
            &disc,
            |d, tape| {
                let p = d.bind_params(tape);
                let live = d.score_values(&x);
                let xv = tape.constant(x.clone());
                let s = d.scores(tape, &p, xv);
                let c = tape.constant(live);
                let m = tape.mean(s);
                let extra = tape.mean(c);
                Ok((tape.add(m, extra), p))
            },
            Some(8),
            &mut rng,
        )
        .unwrap();
        assert!(worst > 1e-3, "{worst}");
    }
}
