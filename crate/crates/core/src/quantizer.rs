//! The discrete bottleneck: codebooks, nearest-entry quantization, the
//! straight-through estimator and the codebook/commitment regularizers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{dims4, Tape, Var};
use crate::tensor::{gemm, Float, Tensor};

/// Which codebook a latent grid indexes into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodebookId {
    Image,
    Semantic,
}

/// A learned embedding table of `K` entries of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    entries: Tensor<T>,
    usage_counts: Vec<u64>,
}

impl<T: Float> Codebook<T> {
    /// Entries drawn uniformly from `[-1/K, 1/K]`.
    pub fn random(k: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if k < 2 || dim < 1 {
            return Err(Error::config(format!("codebook needs K >= 2 and D >= 1, got K={k} D={dim}")));
        }
        let bound = 1.0 / k as f64;
        Self::from_entries(Tensor::uniform(&[k, dim], -bound, bound, rng))
    }

    pub fn from_entries(entries: Tensor<T>) -> Result<Self> {
        if entries.shape().len() != 2 {
            return Err(Error::config(format!(
                "codebook entries must be K x D, got shape {:?}",
                entries.shape()
            )));
        }
        let (k, dim) = (entries.dim(0), entries.dim(1));
        if k < 2 || dim < 1 {
            return Err(Error::config(format!("codebook needs K >= 2 and D >= 1, got K={k} D={dim}")));
        }
        if !entries.all_finite() {
            return Err(Error::numeric("codebook entries must be finite"));
        }
        Ok(Codebook {
            entries,
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Tensor<T> {
        &mut self.entries
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data()[i * d..(i + 1) * d]
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn set_usage_counts(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.size() {
            return Err(Error::config("usage count length differs from codebook size"));
        }
        self.usage_counts = counts;
        Ok(())
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Number of entries used at least once since the last reset.
    pub fn active_entries(&self) -> usize {
        self.usage_counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn cast<U: Float>(&self) -> Codebook<U> {
        Codebook {
            entries: self.entries.cast(),
            usage_counts: self.usage_counts.clone(),
        }
    }

    /// Index of the nearest entry for each row of `vectors` (`n x D`, row-major).
    ///
    /// Candidates are screened with `|c|^2 - 2 z.c` computed by one matrix
    /// product, then every candidate within the rounding margin of the best
    /// score is re-scored with the exact squared distance. Ties on the exact
    /// distance go to the lowest index.
    pub fn nearest(&self, vectors: &[T]) -> Result<Vec<usize>> {
        let (k, d) = (self.size(), self.dim());
        if !vectors.len().is_multiple_of(d) {
            return Err(Error::config(format!(
                "vector buffer of length {} is not a multiple of codebook dimension {d}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("cannot quantize non-finite latents"));
        }
        let n = vectors.len() / d;
        let cb = self.entries.data();
        let norms: Vec<T> = (0..k).map(|j| sq_norm(&cb[j * d..(j + 1) * d])).collect();
        let max_norm = norms.iter().copied().fold(T::zero(), T::max);
        let mut dots = vec![T::zero(); n * k];
        gemm(false, true, n, k, d, vectors, cb, &mut dots, false);
        let two = T::from_f64_lossy(2.0);
        let eps = T::epsilon() * T::from_usize(16 * (d + 4)).unwrap();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let z = &vectors[i * d..(i + 1) * d];
            let row = &dots[i * k..(i + 1) * k];
            let mut best = T::infinity();
            for j in 0..k {
                best = best.min(norms[j] - two * row[j]);
            }
            let margin = eps * (sq_norm(z) + max_norm + best.abs());
            let mut best_idx = usize::MAX;
            let mut best_dist = T::infinity();
            for j in 0..k {
                if norms[j] - two * row[j] <= best + margin {
                    let dist = sq_dist(z, &cb[j * d..(j + 1) * d]);
                    if dist < best_dist {
                        best_dist = dist;
                        best_idx = j;
                    }
                }
            }
            out.push(best_idx);
        }
        Ok(out)
    }
}

pub(crate) fn sq_norm<T: Float>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// Squared Euclidean distance summed in index order.
pub fn sq_dist<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// A 2-D grid of codebook indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    indices: Vec<usize>,
    codebook: CodebookId,
    vocab: usize,
}

impl LatentGrid {
    pub fn new(
        height: usize,
        width: usize,
        indices: Vec<usize>,
        codebook: CodebookId,
        vocab: usize,
    ) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::config(format!(
                "latent grid {height}x{width} needs {} indices, got {}",
                height * width,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::data(format!("latent index {bad} outside codebook of size {vocab}")));
        }
        Ok(LatentGrid {
            height,
            width,
            indices,
            codebook,
            vocab,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn codebook(&self) -> CodebookId {
        self.codebook
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x]
    }

    /// Row-major indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Quantizes an `H x W x D` tensor of pre-latents against `codebook`.
pub fn quantize<T: Float>(pre_latents: &Tensor<T>, codebook: &Codebook<T>) -> Result<(LatentGrid, Tensor<T>)> {
    let shape = pre_latents.shape();
    if shape.len() != 3 || shape[2] != codebook.dim() {
        return Err(Error::config(format!(
            "pre-latents of shape {shape:?} do not match codebook dimension {}",
            codebook.dim()
        )));
    }
    let idx = codebook.nearest(pre_latents.data())?;
    let mut out = Vec::with_capacity(pre_latents.len());
    for &i in &idx {
        out.extend_from_slice(codebook.row(i));
    }
    let grid = LatentGrid::new(shape[0], shape[1], idx, CodebookId::Image, codebook.size())?;
    Ok((grid, Tensor::from_vec(shape, out)?))
}

/// Checked wrapper around [`Tape::straight_through`].
pub fn straight_through<T: Float>(tape: &mut Tape<T>, pre_latents: Var, quantized: Var) -> Result<Var> {
    if tape.shape(pre_latents) != tape.shape(quantized) {
        return Err(Error::config(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            tape.shape(pre_latents),
            tape.shape(quantized)
        )));
    }
    Ok(tape.straight_through(pre_latents, quantized))
}

/// Codebook and commitment losses for NCHW pre-latents whose cells were
/// assigned `indices`. Both are means over cells of squared L2 norms; the
/// commitment weight is applied by the caller.
pub fn vq_regularizers<T: Float>(
    tape: &mut Tape<T>,
    pre_latents: Var,
    quantized: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(pre_latents).to_vec();
    if shape.len() != 4 || shape != tape.shape(quantized) {
        return Err(Error::config("vq_regularizers expects matching NCHW tensors"));
    }
    let cells = shape[0] * shape[2] * shape[3];
    let sg_pre = tape.stop_gradient(pre_latents);
    let codebook_loss = tape.sum_sq_diff(sg_pre, quantized, cells);
    let sg_q = tape.stop_gradient(quantized);
    let commitment_loss = tape.sum_sq_diff(pre_latents, sg_q, cells);
    Ok((codebook_loss, commitment_loss))
}

/// Result of quantizing an NCHW pre-latent on the tape.
pub struct QuantizedLatent {
    /// Per-sample grids.
    pub grids: Vec<LatentGrid>,
    /// Straight-through decoder input (value equals the codebook rows).
    pub passthrough: Var,
    /// Codebook rows gathered for every cell; gradients reach the codebook.
    pub quantized: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

/// Row-major `[N*H*W, D]` vectors from an NCHW tensor.
pub fn nchw_to_rows<T: Float>(t: &Tensor<T>) -> Vec<T> {
    let [n, d, h, w] = dims4(t.shape());
    let hw = h * w;
    let mut rows = vec![T::zero(); t.len()];
    let src = t.data();
    for b in 0..n {
        for k in 0..d {
            for p in 0..hw {
                rows[(b * hw + p) * d + k] = src[b * d * hw + k * hw + p];
            }
        }
    }
    rows
}

/// Quantizes NCHW pre-latents `pre` against the bound codebook `codebook_var`
/// (whose current value is `codebook`), producing the straight-through output
/// and both regularizers.
pub fn quantize_on_tape<T: Float>(
    tape: &mut Tape<T>,
    pre: Var,
    codebook_var: Var,
    codebook: &Codebook<T>,
    id: CodebookId,
) -> Result<QuantizedLatent> {
    let [n, d, h, w] = dims4(tape.shape(pre));
    if d != codebook.dim() {
        return Err(Error::config(format!(
            "encoder emits {d} channels but codebook dimension is {}",
            codebook.dim()
        )));
    }
    let live = codebook.nearest(&nchw_to_rows(tape.value(pre)))?;
    let indices = tape.freeze_indices(live);
    let grids = indices
        .chunks(h * w)
        .map(|c| LatentGrid::new(h, w, c.to_vec(), id, codebook.size()))
        .collect::<Result<Vec<_>>>()?;
    let quantized = tape.lookup_nchw(codebook_var, &indices, n, h, w);
    let passthrough = straight_through(tape, pre, quantized)?;
    let (codebook_loss, commitment_loss) = vq_regularizers(tape, pre, quantized)?;
    Ok(QuantizedLatent {
        grids,
        passthrough,
        quantized,
        codebook_loss,
        commitment_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[[f64; 2]]) -> Codebook<f64> {
        let data = rows.iter().flatten().copied().collect();
        Codebook::from_entries(Tensor::from_vec(&[rows.len(), 2], data).unwrap()).unwrap()
    }

    #[test]
    fn nearest_row_by_inspection() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let pre = Tensor::from_vec(&[1, 1, 2], vec![0.1, 0.2]).unwrap();
        let (grid, q) = quantize(&pre, &cb).unwrap();
        assert_eq!(grid.indices(), &[0]);
        assert_eq!(q.data(), &[0.0, 0.0]);
    }

    #[test]
    fn exact_row_is_returned_unchanged() {
        let cb = book(&[[0.5, -1.0], [2.0, 3.0], [-4.0, 0.25]]);
        for j in 0..3 {
            let pre = Tensor::from_vec(&[1, 1, 2], cb.row(j).to_vec()).unwrap();
            let (grid, q) = quantize(&pre, &cb).unwrap();
            assert_eq!(grid.indices(), &[j]);
            assert!(q.bitwise_eq(&pre));
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = book(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]);
        let pre = Tensor::from_vec(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(quantize(&pre, &cb).unwrap().0.indices(), &[0]);
        let cb = book(&[[5.0, 5.0], [1.0, 0.0], [1.0, 0.0]]);
        let pre = Tensor::from_vec(&[1, 1, 2], vec![0.9, 0.0]).unwrap();
        assert_eq!(quantize(&pre, &cb).unwrap().0.indices(), &[1]);
    }

    #[test]
    fn errors_on_dimension_mismatch_and_non_finite_input() {
        let cb = book(&[[0.0, 0.0], [1.0, 1.0]]);
        let pre = Tensor::from_vec(&[1, 1, 3], vec![0.0; 3]).unwrap();
        assert!(matches!(quantize(&pre, &cb), Err(Error::Config(_))));
        let pre = Tensor::from_vec(&[1, 1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(quantize(&pre, &cb), Err(Error::Numeric(_))));
        assert!(Codebook::<f64>::random(1, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn random_init_respects_bounds() {
        let cb = Codebook::<f32>::random(64, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(cb.entries().data().iter().all(|v| v.abs() <= 1.0 / 64.0));
        assert_eq!(cb.usage_counts().iter().sum::<u64>(), 0);
    }

    #[test]
    fn usage_counts_sum_to_quantized_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cb = Codebook::<f32>::random(16, 4, &mut rng).unwrap();
        let pre = Tensor::<f32>::randn(&[3, 5, 4], 1.0, &mut rng);
        let (grid, _) = quantize(&pre, &cb).unwrap();
        cb.record_usage(grid.indices());
        assert_eq!(cb.usage_counts().iter().sum::<u64>(), 15);
        cb.reset_usage();
        assert_eq!(cb.active_entries(), 0);
    }

    #[test]
    fn regularizers_on_hand_computed_cell() {
        let mut tape = Tape::<f64>::new();
        let pre = tape.param(Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
        let q = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let (cb, commit) = vq_regularizers(&mut tape, pre, q).unwrap();
        assert_eq!(tape.value(cb).item(), 1.0);
        assert_eq!(tape.value(commit).item(), 1.0);
    }

    #[test]
    fn regularizers_vanish_at_assigned_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cb = Codebook::<f64>::random(8, 3, &mut rng).unwrap();
        let idx = [2usize, 5, 5, 0];
        let mut data = vec![0.0; 12];
        for (p, &i) in idx.iter().enumerate() {
            for k in 0..3 {
                data[k * 4 + p] = cb.row(i)[k];
            }
        }
        let mut tape = Tape::new();
        let pre = tape.param(Tensor::from_vec(&[1, 3, 2, 2], data).unwrap());
        let cbv = tape.param(cb.entries().clone());
        let out = quantize_on_tape(&mut tape, pre, cbv, &cb, CodebookId::Image).unwrap();
        assert_eq!(out.grids[0].indices(), &idx);
        assert_eq!(tape.value(out.codebook_loss).item(), 0.0);
        assert_eq!(tape.value(out.commitment_loss).item(), 0.0);
    }

    #[test]
    fn straight_through_rejects_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros(&[2, 3]));
        let b = tape.param(Tensor::zeros(&[3, 2]));
        assert!(matches!(straight_through(&mut tape, a, b), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn quantization_is_idempotent(seed in any::<u64>(), k in 2usize..40, d in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = Codebook::<f32>::random(k, d, &mut rng).unwrap();
            let pre = Tensor::<f32>::randn(&[3, 3, d], 0.05, &mut rng);
            let (grid, q) = quantize(&pre, &cb).unwrap();
            let (again, q2) = quantize(&q, &cb).unwrap();
            prop_assert_eq!(grid.indices(), again.indices());
            prop_assert!(q.bitwise_eq(&q2));
        }
    }
}
