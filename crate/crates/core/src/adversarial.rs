//! Patch discriminator and hinge objectives for the (s)VQGAN variants.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::{conv, init_conv, Bound, ParamStore, Parameterized};
use crate::tensor::{Float, Tensor};

/// Small CNN mapping `[N, 3, H, W]` images to `[N, 1, H/4, W/4]` score maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDiscriminator<T> {
    pub channels: usize,
    pub net: ParamStore<T>,
}

impl<T: Float> PatchDiscriminator<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut net = ParamStore::new();
        init_conv(&mut net, "conv0", 3, channels, 3, 1.0, rng);
        init_conv(&mut net, "conv1", channels, 2 * channels, 3, 1.0, rng);
        init_conv(&mut net, "head", 2 * channels, 1, 3, 0.5, rng);
        PatchDiscriminator { channels, net }
    }

    pub fn from_params(channels: usize, net: ParamStore<T>) -> Result<Self> {
        for name in ["conv0.w", "conv0.b", "conv1.w", "conv1.b", "head.w", "head.b"] {
            if net.get(name).is_none() {
                return Err(Error::config(format!("discriminator parameter `{name}` missing")));
            }
        }
        Ok(PatchDiscriminator { channels, net })
    }

    /// Score map on the tape; `p` must come from binding `self.net`.
    pub fn scores(&self, tape: &mut Tape<T>, p: &Bound, images: Var) -> Var {
        let h = conv(tape, p, "conv0", images, 2, 1);
        let h = tape.silu(h);
        let h = conv(tape, p, "conv1", h, 2, 1);
        let h = tape.silu(h);
        conv(tape, p, "head", h, 1, 1)
    }

    /// Score map for a batch of images without recording gradients.
    pub fn score_values(&self, images: &Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let p = self.net.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let s = self.scores(&mut tape, &p, x);
        tape.value(s).clone()
    }
}

impl<T: Float> Parameterized<T> for PatchDiscriminator<T> {
    fn bind_params(&self, tape: &mut Tape<T>) -> Bound {
        self.net.bind(tape)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.net.get_mut(name)
    }
}

fn check_same(tape: &Tape<impl Float>, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::config(format!(
            "real and fake images differ in shape: {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Hinge loss on precomputed scores: `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss<T: Float>(tape: &mut Tape<T>, real_scores: Var, fake_scores: Var) -> Var {
    let r = tape.hinge_mean(real_scores, T::one());
    let f = tape.hinge_mean(fake_scores, -T::one());
    tape.add(r, f)
}

/// Discriminator hinge loss. `fake` is detached from the generator here.
pub fn d_loss<T: Float>(
    disc: &PatchDiscriminator<T>,
    tape: &mut Tape<T>,
    p: &Bound,
    real: Var,
    fake: Var,
) -> Result<Var> {
    check_same(tape, real, fake)?;
    let fake = tape.stop_gradient(fake);
    let rs = disc.scores(tape, p, real);
    let fs = disc.scores(tape, p, fake);
    Ok(hinge_d_loss(tape, rs, fs))
}

/// Generator objective `-mean(D(fake))`.
pub fn g_loss<T: Float>(disc: &PatchDiscriminator<T>, tape: &mut Tape<T>, p: &Bound, fake: Var) -> Var {
    let s = disc.scores(tape, p, fake);
    let m = tape.mean(s);
    tape.scale(m, -T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(values: &[f64]) -> (Tape<f64>, Var) {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        (tape, v)
    }

    #[test]
    fn zero_scores_give_hinge_of_two() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let f = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let l = hinge_d_loss(&mut tape, r, f);
        assert_eq!(tape.value(l).item(), 2.0);
    }

    #[test]
    fn saturated_scores_give_zero_hinge() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::full(&[4], 1e6));
        let f = tape.constant(Tensor::full(&[4], -1e6));
        let l = hinge_d_loss(&mut tape, r, f);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn generator_loss_is_negated_mean_score() {
        let (mut tape, s) = scores(&[0.0, 0.0]);
        let m = tape.mean(s);
        let g = tape.scale(m, -1.0);
        assert_eq!(tape.value(g).item(), 0.0);
        let mut last = f64::INFINITY;
        for shift in [-1.0, 0.0, 0.5, 3.0] {
            let (mut tape, s) = scores(&[shift, shift + 1.0]);
            let m = tape.mean(s);
            let g = tape.scale(m, -1.0);
            let v = tape.value(g).item();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn d_loss_rejects_shape_mismatch() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let disc = PatchDiscriminator::<f64>::new(4, &mut rng);
        let mut tape = Tape::new();
        let p = disc.net.bind(&mut tape);
        let a = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 8, 4]));
        assert!(d_loss(&disc, &mut tape, &p, a, b).is_err());
        let b = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let l = d_loss(&disc, &mut tape, &p, a, b).unwrap();
        assert!(tape.value(l).item() >= 0.0);
        assert_eq!(disc.score_values(&Tensor::zeros(&[2, 3, 8, 8])).shape(), &[2, 1, 2, 2]);
    }
}
