//! Stage-2 model: a decoder-only Transformer over `[semantic | image]` token
//! sequences, trained on the likelihood of the image tokens given the full
//! semantic prefix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{attention_forward, gelu, log_sum_exp, row_stats, Tape, Var};
use crate::nn::{init_layer_norm, init_linear, layer_norm, linear, Bound, ParamStore, Parameterized};
use crate::quantizer::{CodebookId, LatentGrid};
use crate::tensor::{gemm, Float, Tensor};

const LN_EPS: f64 = 1e-5;

/// Unified-vocabulary sequence: semantic ids in `[0, K_s)` followed by image
/// ids offset into `[K_s, K_s + K_x)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    semantic_shape: (usize, usize),
    image_shape: (usize, usize),
    k_semantic: usize,
    k_image: usize,
}

impl TokenSequence {
    /// Row-major flattening of both grids, semantic tokens first.
    pub fn pack(z_s: &LatentGrid, z_x: &LatentGrid) -> Result<Self> {
        if z_s.codebook() != CodebookId::Semantic || z_x.codebook() != CodebookId::Image {
            return Err(Error::data("pack expects a semantic grid and an image grid, in that order"));
        }
        let (k_s, k_x) = (z_s.vocab(), z_x.vocab());
        let mut tokens = Vec::with_capacity(z_s.len() + z_x.len());
        tokens.extend_from_slice(z_s.indices());
        tokens.extend(z_x.indices().iter().map(|&i| i + k_s));
        Self::from_tokens(tokens, (z_s.height(), z_s.width()), (z_x.height(), z_x.width()), k_s, k_x)
    }

    pub fn from_tokens(
        tokens: Vec<usize>,
        semantic_shape: (usize, usize),
        image_shape: (usize, usize),
        k_semantic: usize,
        k_image: usize,
    ) -> Result<Self> {
        let n_s = semantic_shape.0 * semantic_shape.1;
        let n_x = image_shape.0 * image_shape.1;
        if n_s == 0 || n_x == 0 || tokens.len() != n_s + n_x {
            return Err(Error::data(format!(
                "sequence of {} tokens does not match layout {n_s} + {n_x}",
                tokens.len()
            )));
        }
        if let Some(p) = tokens[..n_s].iter().position(|&t| t >= k_semantic) {
            return Err(Error::data(format!("semantic token {} at {p} outside [0, {k_semantic})", tokens[p])));
        }
        if let Some(p) = tokens[n_s..]
            .iter()
            .position(|&t| t < k_semantic || t >= k_semantic + k_image)
        {
            return Err(Error::data(format!(
                "image token {} at {} outside [{k_semantic}, {})",
                tokens[n_s + p],
                n_s + p,
                k_semantic + k_image
            )));
        }
        Ok(TokenSequence {
            tokens,
            semantic_shape,
            image_shape,
            k_semantic,
            k_image,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_semantic(&self) -> usize {
        self.semantic_shape.0 * self.semantic_shape.1
    }

    pub fn n_image(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    /// Image codebook indices (offset removed).
    pub fn image_ids(&self) -> Vec<usize> {
        self.tokens[self.n_semantic()..].iter().map(|&t| t - self.k_semantic).collect()
    }

    pub fn unpack(&self) -> Result<(LatentGrid, LatentGrid)> {
        let n_s = self.n_semantic();
        let (hs, ws) = self.semantic_shape;
        let (hx, wx) = self.image_shape;
        Ok((
            LatentGrid::new(hs, ws, self.tokens[..n_s].to_vec(), CodebookId::Semantic, self.k_semantic)?,
            LatentGrid::new(hx, wx, self.image_ids(), CodebookId::Image, self.k_image)?,
        ))
    }
}

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerArch {
    pub k_semantic: usize,
    pub k_image: usize,
    /// Semantic grid height/width.
    pub semantic_shape: (usize, usize),
    pub image_shape: (usize, usize),
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

impl TransformerArch {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "transformer width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.n_semantic() == 0 || self.n_image() == 0 {
            return Err(Error::config("both token segments must be non-empty"));
        }
        if self.k_semantic < 2 || self.k_image < 2 {
            return Err(Error::config("vocabularies need at least two entries"));
        }
        Ok(())
    }

    pub fn n_semantic(&self) -> usize {
        self.semantic_shape.0 * self.semantic_shape.1
    }

    pub fn n_image(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    pub fn seq_len(&self) -> usize {
        self.n_semantic() + self.n_image()
    }

    /// Inputs are every token but the last.
    pub fn input_len(&self) -> usize {
        self.seq_len() - 1
    }

    pub fn vocab(&self) -> usize {
        self.k_semantic + self.k_image
    }
}

/// Sampling controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl SamplingParams {
    pub fn greedy() -> Self {
        SamplingParams {
            temperature: 1.0,
            top_k: 1,
            seed: 0,
        }
    }
}

/// Pre-LayerNorm GPT: token + learned position embeddings, `layers` blocks of
/// causal self-attention and a GELU MLP, final LayerNorm, head onto the image
/// vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T> {
    pub arch: TransformerArch,
    pub params: ParamStore<T>,
}

impl<T: Float> TransformerModel<T> {
    pub fn new(arch: TransformerArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let c = arch.width;
        let std = 0.02;
        let proj_std = std / (2.0 * arch.layers.max(1) as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("tok_emb", Tensor::randn(&[arch.vocab(), c], std, rng));
        p.insert("pos_emb", Tensor::randn(&[arch.input_len(), c], std, rng));
        for l in 0..arch.layers {
            init_layer_norm(&mut p, &format!("blk{l}.ln1"), c);
            init_linear(&mut p, &format!("blk{l}.attn.qkv"), c, 3 * c, std, rng);
            init_linear(&mut p, &format!("blk{l}.attn.proj"), c, c, proj_std, rng);
            init_layer_norm(&mut p, &format!("blk{l}.ln2"), c);
            init_linear(&mut p, &format!("blk{l}.mlp.fc"), c, 4 * c, std, rng);
            init_linear(&mut p, &format!("blk{l}.mlp.proj"), 4 * c, c, proj_std, rng);
        }
        init_layer_norm(&mut p, "ln_f", c);
        init_linear(&mut p, "head", c, arch.k_image, std, rng);
        Ok(TransformerModel { arch, params: p })
    }

    pub fn from_params(arch: TransformerArch, params: ParamStore<T>) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = TransformerModel::<T>::new(arch, &mut rng)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::config(format!(
                        "transformer parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("transformer parameter `{name}` missing"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::config("unexpected extra transformer parameters"));
        }
        Ok(TransformerModel { arch, params })
    }

    pub fn cast<U: Float>(&self) -> TransformerModel<U> {
        TransformerModel {
            arch: self.arch,
            params: self.params.cast(),
        }
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        let a = &self.arch;
        if seq.k_semantic != a.k_semantic
            || seq.k_image != a.k_image
            || seq.semantic_shape != a.semantic_shape
            || seq.image_shape != a.image_shape
        {
            return Err(Error::data(format!(
                "sequence layout ({:?}+{:?}, K={}+{}) does not match the model ({:?}+{:?}, K={}+{})",
                seq.semantic_shape,
                seq.image_shape,
                seq.k_semantic,
                seq.k_image,
                a.semantic_shape,
                a.image_shape,
                a.k_semantic,
                a.k_image
            )));
        }
        Ok(())
    }

    /// Logits for every input position, `[B * (L - 1), K_x]`; row `i` of a
    /// sequence predicts token `i + 1`.
    pub fn forward_logits(&self, tape: &mut Tape<T>, p: &Bound, seqs: &[&TokenSequence]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::data("empty sequence batch"));
        }
        for s in seqs {
            self.check(s)?;
        }
        let t_in = self.arch.input_len();
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.tokens[..t_in].iter().copied()).collect();
        let pos: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t_in).collect();
        let tok = tape.gather_rows(p.var("tok_emb"), &ids);
        let pe = tape.gather_rows(p.var("pos_emb"), &pos);
        let mut x = tape.add(tok, pe);
        for l in 0..self.arch.layers {
            let h = layer_norm(tape, p, &format!("blk{l}.ln1"), x);
            let qkv = linear(tape, p, &format!("blk{l}.attn.qkv"), h);
            let a = tape.causal_attention(qkv, seqs.len(), t_in, self.arch.heads);
            let a = linear(tape, p, &format!("blk{l}.attn.proj"), a);
            x = tape.add(x, a);
            let h = layer_norm(tape, p, &format!("blk{l}.ln2"), x);
            let h = linear(tape, p, &format!("blk{l}.mlp.fc"), h);
            let h = tape.gelu(h);
            let h = linear(tape, p, &format!("blk{l}.mlp.proj"), h);
            x = tape.add(x, h);
        }
        let x = layer_norm(tape, p, "ln_f", x);
        Ok(linear(tape, p, "head", x))
    }

    /// Mean negative log-likelihood over the image positions of every sequence.
    pub fn nll_on_tape(&self, tape: &mut Tape<T>, p: &Bound, seqs: &[&TokenSequence]) -> Result<Var> {
        let logits = self.forward_logits(tape, p, seqs)?;
        let (n_s, t_in) = (self.arch.n_semantic(), self.arch.input_len());
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            rows.extend((0..self.arch.n_image()).map(|i| b * t_in + n_s - 1 + i));
            targets.extend(s.image_ids());
        }
        let sel = tape.select_rows(logits, &rows);
        Ok(tape.cross_entropy_rows(sel, &targets))
    }

    pub fn conditional_nll(&self, seq: &TokenSequence) -> Result<f64> {
        self.mean_nll(&[seq])
    }

    pub fn mean_nll(&self, seqs: &[&TokenSequence]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in seqs.chunks(16) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let l = self.nll_on_tape(&mut tape, &p, chunk)?;
            total += tape.value(l).item().as_f64() * chunk.len() as f64;
        }
        Ok(total / seqs.len().max(1) as f64)
    }

    /// All input-position logits `[L - 1, K_x]` for one sequence.
    pub fn logits(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let l = self.forward_logits(&mut tape, &p, &[seq])?;
        Ok(tape.value(l).clone())
    }

    /// `-log p(z_i | prefix)` for each image position `i`.
    pub fn per_position_nll(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let logits = self.logits(seq)?;
        let k = self.arch.k_image;
        let n_s = self.arch.n_semantic();
        Ok(seq
            .image_ids()
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &logits.data()[(n_s - 1 + i) * k..][..k];
                (log_sum_exp(row) - row[t]).as_f64()
            })
            .collect())
    }

    /// Ancestral sampling of the image grid given the semantic grid.
    pub fn sample(&self, z_s: &LatentGrid, params: SamplingParams) -> Result<LatentGrid> {
        let a = self.arch;
        if z_s.codebook() != CodebookId::Semantic || z_s.vocab() != a.k_semantic || (z_s.height(), z_s.width()) != a.semantic_shape {
            return Err(Error::config("conditioning grid does not match the transformer's semantic layout"));
        }
        if !params.temperature.is_finite() || params.temperature <= 0.0 {
            return Err(Error::config(format!("temperature must be > 0, got {}", params.temperature)));
        }
        if params.top_k == 0 {
            return Err(Error::config("top_k must be at least 1"));
        }
        let top_k = if params.top_k > a.k_image {
            log::warn!("top_k {} exceeds image vocabulary {}; clipping", params.top_k, a.k_image);
            a.k_image
        } else {
            params.top_k
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut cache = KvCache::new(self);
        let mut logits = Vec::new();
        for &t in z_s.indices() {
            logits = cache.push(t);
        }
        let mut out = Vec::with_capacity(a.n_image());
        for i in 0..a.n_image() {
            let id = draw(&logits, params.temperature, top_k, &mut rng);
            out.push(id);
            if i + 1 < a.n_image() {
                logits = cache.push(a.k_semantic + id);
            }
        }
        LatentGrid::new(a.image_shape.0, a.image_shape.1, out, CodebookId::Image, a.k_image)
    }
}

impl<T: Float> Parameterized<T> for TransformerModel<T> {
    fn bind_params(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape)
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }
}

/// Softmax of every `width`-long row.
pub fn softmax_rows<T: Float>(logits: &[T], width: usize) -> Vec<f64> {
    logits
        .chunks(width)
        .flat_map(|row| {
            let lse = log_sum_exp(row);
            row.iter().map(move |&v| (v - lse).exp().as_f64())
        })
        .collect()
}

/// Top-k truncated, temperature-scaled draw. Ties rank the lower index first,
/// so `top_k == 1` is argmax regardless of temperature.
fn draw<T: Float>(logits: &[T], temperature: f64, top_k: usize, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(top_k);
    if top_k == 1 {
        return order[0];
    }
    let scaled: Vec<f64> = order.iter().map(|&i| logits[i].as_f64() / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * z;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().unwrap()
}

/// Incremental inference: one token at a time with cached keys and values.
struct KvCache<'a, T> {
    model: &'a TransformerModel<T>,
    /// Per layer, `[pos, 3C]` rows of q|k|v (queries kept for layout reuse).
    qkv: Vec<Vec<T>>,
    pos: usize,
}

impl<'a, T: Float> KvCache<'a, T> {
    fn new(model: &'a TransformerModel<T>) -> Self {
        KvCache {
            model,
            qkv: vec![Vec::new(); model.arch.layers],
            pos: 0,
        }
    }

    fn p(&self, name: &str) -> &[T] {
        self.model.params.get(name).expect("transformer parameter").data()
    }

    fn linear(&self, name: &str, x: &[T]) -> Vec<T> {
        let w = self.model.params.get(&format!("{name}.w")).expect("weight");
        let (k, n) = (w.dim(0), w.dim(1));
        let mut out = self.p(&format!("{name}.b")).to_vec();
        gemm(false, false, 1, n, k, x, w.data(), &mut out, true);
        out
    }

    fn layer_norm(&self, name: &str, x: &[T]) -> Vec<T> {
        let (g, b) = (self.p(&format!("{name}.g")), self.p(&format!("{name}.b")));
        let (mu, is) = row_stats(x, T::from_f64_lossy(LN_EPS));
        x.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mu) * is * g + b).collect()
    }

    /// Feeds `token` at the next position; returns image-vocabulary logits for
    /// the following position.
    fn push(&mut self, token: usize) -> Vec<T> {
        let a = self.model.arch;
        let c = a.width;
        assert!(self.pos < a.input_len(), "kv cache overflow");
        let tok = &self.p("tok_emb")[token * c..][..c];
        let pe = &self.p("pos_emb")[self.pos * c..][..c];
        let mut x: Vec<T> = tok.iter().zip(pe).map(|(&a, &b)| a + b).collect();
        let len = self.pos + 1;
        for l in 0..a.layers {
            let h = self.layer_norm(&format!("blk{l}.ln1"), &x);
            let row = self.linear(&format!("blk{l}.attn.qkv"), &h);
            self.qkv[l].extend_from_slice(&row);
            // Only the last query row matters; earlier rows reproduce cached work.
            let att = last_row_attention(&self.qkv[l], len, a.heads, c);
            let att = self.linear(&format!("blk{l}.attn.proj"), &att);
            x.iter_mut().zip(&att).for_each(|(x, &v)| *x += v);
            let h = self.layer_norm(&format!("blk{l}.ln2"), &x);
            let h: Vec<T> = self.linear(&format!("blk{l}.mlp.fc"), &h).into_iter().map(gelu).collect();
            let h = self.linear(&format!("blk{l}.mlp.proj"), &h);
            x.iter_mut().zip(&h).for_each(|(x, &v)| *x += v);
        }
        self.pos += 1;
        let x = self.layer_norm("ln_f", &x);
        self.linear("head", &x)
    }
}

/// Attention output for the last row of a `[len, 3C]` qkv block.
fn last_row_attention<T: Float>(qkv: &[T], len: usize, heads: usize, width: usize) -> Vec<T> {
    if len == 1 {
        // A single position attends only to itself.
        return attention_forward(qkv, 1, 1, heads, width).0;
    }
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let stride = 3 * width;
    let i = len - 1;
    let mut out = vec![T::zero(); width];
    let mut scores = vec![T::zero(); len];
    for hd in 0..heads {
        let q = &qkv[i * stride + hd * dh..][..dh];
        let mut m = T::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &qkv[j * stride + width + hd * dh..][..dh];
            *s = crate::graph::dot(q, k) * scale;
            m = m.max(*s);
        }
        let mut z = T::zero();
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            z += *s;
        }
        let o = &mut out[hd * dh..][..dh];
        for (j, &s) in scores.iter().enumerate() {
            let p = s / z;
            let v = &qkv[j * stride + 2 * width + hd * dh..][..dh];
            for (o, &v) in o.iter_mut().zip(v) {
                *o += p * v;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> TransformerArch {
        TransformerArch {
            k_semantic: 5,
            k_image: 7,
            semantic_shape: (2, 2),
            image_shape: (2, 3),
            width: 16,
            layers: 2,
            heads: 2,
        }
    }

    fn random_seq(rng: &mut impl Rng, a: &TransformerArch) -> TokenSequence {
        let s: Vec<usize> = (0..a.n_semantic()).map(|_| rng.random_range(0..a.k_semantic)).collect();
        let x: Vec<usize> = (0..a.n_image()).map(|_| rng.random_range(0..a.k_image)).collect();
        let zs = LatentGrid::new(a.semantic_shape.0, a.semantic_shape.1, s, CodebookId::Semantic, a.k_semantic).unwrap();
        let zx = LatentGrid::new(a.image_shape.0, a.image_shape.1, x, CodebookId::Image, a.k_image).unwrap();
        TokenSequence::pack(&zs, &zx).unwrap()
    }

    #[test]
    fn pack_offsets_image_ids() {
        let zs = LatentGrid::new(2, 2, vec![0, 1, 2, 3], CodebookId::Semantic, 64).unwrap();
        let zx = LatentGrid::new(2, 2, vec![0, 0, 1, 5], CodebookId::Image, 512).unwrap();
        let seq = TokenSequence::pack(&zs, &zx).unwrap();
        assert_eq!(seq.tokens(), &[0, 1, 2, 3, 64, 64, 65, 69]);
        assert_eq!(seq.unpack().unwrap(), (zs.clone(), zx.clone()));
        assert!(TokenSequence::pack(&zx, &zs).is_err());
        assert!(TokenSequence::from_tokens(vec![0, 1, 2, 3, 64, 64, 65], (2, 2), (2, 2), 64, 512).is_err());
        assert!(TokenSequence::from_tokens(vec![0, 1, 2, 64, 64, 64, 65, 69], (2, 2), (2, 2), 64, 512).is_err());
    }

    #[test]
    fn kv_cache_matches_full_forward() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = TransformerModel::<f64>::new(a, &mut rng).unwrap();
        let seq = random_seq(&mut rng, &a);
        let full = m.logits(&seq).unwrap();
        let mut cache = KvCache::new(&m);
        for (i, &t) in seq.tokens()[..a.input_len()].iter().enumerate() {
            let row = cache.push(t);
            let expect = &full.data()[i * a.k_image..][..a.k_image];
            for (x, y) in row.iter().zip(expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_decomposes_into_positions() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TransformerModel::<f64>::new(a, &mut rng).unwrap();
        let seq = random_seq(&mut rng, &a);
        let per = m.per_position_nll(&seq).unwrap();
        let mean = m.conditional_nll(&seq).unwrap();
        assert!((per.iter().sum::<f64>() - mean * a.n_image() as f64).abs() < 1e-6);
    }

    #[test]
    fn uniform_head_gives_log_vocab() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = TransformerModel::<f64>::new(a, &mut rng).unwrap();
        m.params.get_mut("head.w").unwrap().data_mut().fill(0.0);
        let seq = random_seq(&mut rng, &a);
        assert!((m.conditional_nll(&seq).unwrap() - (a.k_image as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn sampling_contract() {
        let a = arch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TransformerModel::<f64>::new(a, &mut rng).unwrap();
        let (zs, _) = random_seq(&mut rng, &a).unpack().unwrap();
        let p = SamplingParams {
            temperature: 1.0,
            top_k: 4,
            seed: 9,
        };
        assert_eq!(m.sample(&zs, p).unwrap(), m.sample(&zs, p).unwrap());
        let g1 = m.sample(&zs, SamplingParams { temperature: 0.1, top_k: 1, seed: 1 }).unwrap();
        let g2 = m.sample(&zs, SamplingParams { temperature: 5.0, top_k: 1, seed: 2 }).unwrap();
        assert_eq!(g1, g2);
        assert!(m.sample(&zs, SamplingParams { temperature: 0.0, ..p }).is_err());
        assert!(m.sample(&zs, SamplingParams { top_k: 100, ..p }).is_ok());
    }

    #[test]
    fn draw_prefers_lowest_index_on_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw(&[1.0f64, 3.0, 3.0, 0.0], 1.0, 1, &mut rng), 1);
    }
}
