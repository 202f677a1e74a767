//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and, when any
//! input requires a gradient, a closure that pushes the output gradient back
//! to its inputs. Nodes never reached from the loss keep a `None` gradient,
//! which is an exact zero.
//!
//! The tape also supports a *frozen replay* mode used by finite-difference
//! checks: a recording pass stores the values produced by `stop_gradient`,
//! the offsets introduced by `straight_through`, and every quantization index
//! vector; a replay pass substitutes those stored values, so perturbed forward
//! evaluations differentiate exactly the function the backward pass does.

use crate::tensor::{gemm, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[Node<T>], &mut GradSink<T>)>;

pub struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Values captured by a recording pass and replayed by later passes.
#[derive(Debug, Clone, Default)]
pub struct Frozen<T> {
    values: Vec<Tensor<T>>,
    indices: Vec<Vec<usize>>,
}

enum Mode<T> {
    Live,
    Record(Frozen<T>),
    Replay {
        frozen: Frozen<T>,
        next_value: usize,
        next_indices: usize,
    },
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<T> {
    grads: Vec<Option<Tensor<T>>>,
    wants: Vec<bool>,
}

impl<T: Float> GradSink<T> {
    fn slot(&mut self, var: usize, shape: &[usize]) -> Option<&mut [T]> {
        if !self.wants[var] {
            return None;
        }
        let entry = self.grads[var].get_or_insert_with(|| Tensor::zeros(shape));
        Some(entry.data_mut())
    }

    pub fn wants(&self, var: usize) -> bool {
        self.wants[var]
    }

    /// Accumulates into the gradient of `var` if it requires one.
    pub fn with(&mut self, var: usize, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if let Some(g) = self.slot(var, shape) {
            f(g);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// `None` means no path from the loss reaches `var`: an exact zero.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn get_or_zeros(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].take()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mode: Mode<T>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::Live,
        }
    }

    /// A tape that records frozen values for later replay.
    pub fn recording() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::Record(Frozen {
                values: Vec::new(),
                indices: Vec::new(),
            }),
        }
    }

    /// A tape that substitutes values captured by a recording tape.
    pub fn replaying(frozen: Frozen<T>) -> Self {
        Tape {
            nodes: Vec::new(),
            mode: Mode::Replay {
                frozen,
                next_value: 0,
                next_indices: 0,
            },
        }
    }

    /// Frozen values captured so far (recording tapes only).
    pub fn frozen(&self) -> Option<&Frozen<T>> {
        match &self.mode {
            Mode::Record(f) => Some(f),
            _ => None,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = self.nodes.len();
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward() needs a scalar loss");
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            wants: self.nodes.iter().map(|node| node.requires_grad).collect(),
        };
        if self.nodes[loss.0].requires_grad {
            sink.grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(backward) = &self.nodes[i].backward else {
                continue;
            };
            let Some(grad) = sink.grads[i].take() else {
                continue;
            };
            backward(&grad, &self.nodes, &mut sink);
            sink.grads[i] = Some(grad);
        }
        Gradients {
            grads: sink.grads,
            shapes: self.nodes.iter().map(|node| node.value.shape().to_vec()).collect(),
        }
    }

    // ---- frozen-replay hooks -------------------------------------------------

    fn freeze_value(&mut self, live: Tensor<T>) -> Tensor<T> {
        match &mut self.mode {
            Mode::Live => live,
            Mode::Record(f) => {
                f.values.push(live.clone());
                live
            }
            Mode::Replay {
                frozen, next_value, ..
            } => {
                let v = frozen.values[*next_value].clone();
                *next_value += 1;
                assert_eq!(v.shape(), live.shape(), "frozen replay diverged from recording");
                v
            }
        }
    }

    /// Quantization indices: recorded, or substituted during replay.
    pub fn freeze_indices(&mut self, live: Vec<usize>) -> Vec<usize> {
        match &mut self.mode {
            Mode::Live => live,
            Mode::Record(f) => {
                f.indices.push(live.clone());
                live
            }
            Mode::Replay {
                frozen,
                next_indices,
                ..
            } => {
                let v = frozen.indices[*next_indices].clone();
                *next_indices += 1;
                v
            }
        }
    }

    // ---- elementwise -----------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data).unwrap();
        let shape = out.shape().to_vec();
        self.push(
            out,
            &[a, b],
            Box::new(move |g, _, sink| {
                for p in [a, b] {
                    sink.with(p.0, &shape, |d| {
                        d.iter_mut().zip(g.data()).for_each(|(d, &g)| *d += g)
                    });
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let shape = out.shape().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, sink| {
                sink.with(a.0, &shape, |d| {
                    d.iter_mut().zip(g.data()).for_each(|(d, &g)| *d += g * s)
                });
            }),
        )
    }

    /// Sum of several same-shaped nodes.
    pub fn sum_all(&mut self, terms: &[Var]) -> Var {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var {
        let out = self.value(a).map(f);
        let shape = out.shape().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, nodes, sink| {
                let x = nodes[a.0].value.data();
                sink.with(a.0, &shape, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g.data()).zip(x) {
                        *d += g * df(x);
                    }
                });
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            silu,
            |x| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |x| {
            let s = sigmoid(x);
            s * (T::one() - s)
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, gelu_grad)
    }

    /// Forwards the value; contributes no gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let live = self.value(a).clone();
        let value = self.freeze_value(live);
        self.constant(value)
    }

    /// Forward value is `quantized`; the backward Jacobian with respect to
    /// `pre` is the identity and `quantized` receives nothing.
    ///
    /// During frozen replay the value is `pre + (quantized - pre)` with the
    /// offset taken from the recording pass.
    pub fn straight_through(&mut self, pre: Var, quantized: Var) -> Var {
        let (vp, vq) = (self.value(pre).clone(), self.value(quantized).clone());
        assert_eq!(vp.shape(), vq.shape(), "straight_through: shape mismatch");
        let out = match self.mode {
            Mode::Live => vq,
            Mode::Record(_) => {
                let offset: Vec<T> = vq.data().iter().zip(vp.data()).map(|(&q, &p)| q - p).collect();
                self.freeze_value(Tensor::from_vec(vq.shape(), offset).unwrap());
                vq
            }
            Mode::Replay { .. } => {
                let offset = self.freeze_value(vq);
                let data = vp.data().iter().zip(offset.data()).map(|(&p, &o)| p + o).collect();
                Tensor::from_vec(vp.shape(), data).unwrap()
            }
        };
        let shape = out.shape().to_vec();
        self.push(
            out,
            &[pre],
            Box::new(move |g, _, sink| {
                sink.with(pre.0, &shape, |d| {
                    d.iter_mut().zip(g.data()).for_each(|(d, &g)| *d += g)
                });
            }),
        )
    }

    // ---- reductions and losses -------------------------------------------------

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = T::from_usize(va.len()).unwrap();
        let out = Tensor::scalar(va.sum() / n);
        let shape = va.shape().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, sink| {
                let gv = g.item() / n;
                sink.with(a.0, &shape, |d| d.iter_mut().for_each(|d| *d += gv));
            }),
        )
    }

    /// `sum((a - b)^2) / divisor`.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var, divisor: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sum_sq_diff: shape mismatch");
        let div = T::from_usize(divisor).unwrap();
        let total: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(total / div),
            &[a, b],
            Box::new(move |g, nodes, sink| {
                let two = T::from_f64_lossy(2.0) * g.item() / div;
                let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                sink.with(a.0, &shape, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(xa).zip(xb) {
                        *d += two * (x - y);
                    }
                });
                sink.with(b.0, &shape, |d| {
                    for ((d, &x), &y) in d.iter_mut().zip(xa).zip(xb) {
                        *d -= two * (x - y);
                    }
                });
            }),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.value(a).len();
        self.sum_sq_diff(a, b, n)
    }

    /// `mean(relu(1 - sign * a))`; `sign` is `+1` for real scores, `-1` for fake.
    pub fn hinge_mean(&mut self, a: Var, sign: T) -> Var {
        let va = self.value(a);
        let n = T::from_usize(va.len()).unwrap();
        let total: T = va
            .data()
            .iter()
            .map(|&x| (T::one() - sign * x).max(T::zero()))
            .sum();
        let shape = va.shape().to_vec();
        self.push(
            Tensor::scalar(total / n),
            &[a],
            Box::new(move |g, nodes, sink| {
                let gv = g.item() / n;
                let x = nodes[a.0].value.data();
                sink.with(a.0, &shape, |d| {
                    for (d, &x) in d.iter_mut().zip(x) {
                        if T::one() - sign * x > T::zero() {
                            *d -= sign * gv;
                        }
                    }
                });
            }),
        )
    }

    /// Mean cross-entropy of NCHW logits against per-pixel class targets.
    pub fn cross_entropy_nchw(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        let [n, c, h, w] = dims4(v.shape());
        let hw = h * w;
        assert_eq!(targets.len(), n * hw, "cross_entropy_nchw: target size");
        let mut probs = vec![T::zero(); v.len()];
        let mut total = T::zero();
        let x = v.data();
        for b in 0..n {
            for p in 0..hw {
                let base = b * c * hw + p;
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(x[base + k * hw]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (x[base + k * hw] - m).exp();
                    probs[base + k * hw] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[base + k * hw] /= z;
                }
                let t = targets[b * hw + p];
                total += m + z.ln() - x[base + t * hw];
            }
        }
        let count = T::from_usize(n * hw).unwrap();
        let targets = targets.to_vec();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::scalar(total / count),
            &[logits],
            Box::new(move |g, _, sink| {
                let gv = g.item() / count;
                sink.with(logits.0, &shape, |d| {
                    for (d, &p) in d.iter_mut().zip(&probs) {
                        *d += gv * p;
                    }
                    for b in 0..n {
                        for p in 0..hw {
                            let t = targets[b * hw + p];
                            d[b * c * hw + t * hw + p] -= gv;
                        }
                    }
                });
            }),
        )
    }

    /// Mean cross-entropy of row logits `[rows, classes]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let v = self.value(logits);
        let (rows, c) = (v.dim(0), v.dim(1));
        assert_eq!(targets.len(), rows, "cross_entropy_rows: target size");
        let mut probs = vec![T::zero(); v.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let x = &v.data()[r * c..(r + 1) * c];
            let (lse, pr) = (log_sum_exp(x), &mut probs[r * c..(r + 1) * c]);
            for (p, &xv) in pr.iter_mut().zip(x) {
                *p = (xv - lse).exp();
            }
            total += lse - x[targets[r]];
        }
        let count = T::from_usize(rows).unwrap();
        let targets = targets.to_vec();
        let shape = v.shape().to_vec();
        self.push(
            Tensor::scalar(total / count),
            &[logits],
            Box::new(move |g, _, sink| {
                let gv = g.item() / count;
                sink.with(logits.0, &shape, |d| {
                    for (d, &p) in d.iter_mut().zip(&probs) {
                        *d += gv * p;
                    }
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * c + t] -= gv;
                    }
                });
            }),
        )
    }

    // ---- layout ----------------------------------------------------------------

    /// Concatenates two NCHW tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let [n, ca, h, w] = dims4(va.shape());
        let [nb, cb, hb, wb] = dims4(vb.shape());
        assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: spatial mismatch");
        let hw = h * w;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * ca * hw..(i + 1) * ca * hw]);
            data.extend_from_slice(&vb.data()[i * cb * hw..(i + 1) * cb * hw]);
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data).unwrap();
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            &[a, b],
            Box::new(move |g, _, sink| {
                let gd = g.data();
                let ct = ca + cb;
                sink.with(a.0, &sa, |d| {
                    for i in 0..n {
                        let src = &gd[i * ct * hw..i * ct * hw + ca * hw];
                        d[i * ca * hw..(i + 1) * ca * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                });
                sink.with(b.0, &sb, |d| {
                    for i in 0..n {
                        let src = &gd[i * ct * hw + ca * hw..(i + 1) * ct * hw];
                        d[i * cb * hw..(i + 1) * cb * hw]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }),
        )
    }

    /// Channels `[start, start + len)` of an NCHW tensor.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = dims4(va.shape());
        assert!(start + len <= c, "slice_channels: out of range");
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for i in 0..n {
            let off = i * c * hw + start * hw;
            data.extend_from_slice(&va.data()[off..off + len * hw]);
        }
        let out = Tensor::from_vec(&[n, len, h, w], data).unwrap();
        let shape = va.shape().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, sink| {
                sink.with(a.0, &shape, |d| {
                    for i in 0..n {
                        let off = i * c * hw + start * hw;
                        d[off..off + len * hw]
                            .iter_mut()
                            .zip(&g.data()[i * len * hw..(i + 1) * len * hw])
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let [n, c, h, w] = dims4(va.shape());
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        {
            let (src, dst) = (va.data(), out.data_mut());
            for plane in 0..n * c {
                for y in 0..h2 {
                    for x in 0..w2 {
                        dst[plane * h2 * w2 + y * w2 + x] = src[plane * h * w + (y / 2) * w + x / 2];
                    }
                }
            }
        }
        let shape = va.shape().to_vec();
        self.push(
            out,
            &[a],
            Box::new(move |g, _, sink| {
                sink.with(a.0, &shape, |d| {
                    let gd = g.data();
                    for plane in 0..n * c {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                d[plane * h * w + (y / 2) * w + x / 2] += gd[plane * h2 * w2 + y * w2 + x];
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (vocab, dim) = (vt.dim(0), vt.dim(1));
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < vocab, "gather_rows: id {id} out of range {vocab}");
            data.extend_from_slice(&vt.data()[id * dim..(id + 1) * dim]);
        }
        let out = Tensor::from_vec(&[ids.len(), dim], data).unwrap();
        let ids = ids.to_vec();
        let shape = vt.shape().to_vec();
        self.push(
            out,
            &[table],
            Box::new(move |g, _, sink| {
                sink.with(table.0, &shape, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        d[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g.data()[r * dim..(r + 1) * dim])
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }),
        )
    }

    /// Codebook rows laid out as an NCHW latent: `out[n, d, y, x] = table[ids[n, y, x], d]`.
    pub fn lookup_nchw(&mut self, table: Var, ids: &[usize], n: usize, h: usize, w: usize) -> Var {
        let vt = self.value(table);
        let (vocab, dim) = (vt.dim(0), vt.dim(1));
        let hw = h * w;
        assert_eq!(ids.len(), n * hw, "lookup_nchw: id count");
        let mut out = Tensor::zeros(&[n, dim, h, w]);
        {
            let (src, dst) = (vt.data(), out.data_mut());
            for b in 0..n {
                for p in 0..hw {
                    let id = ids[b * hw + p];
                    assert!(id < vocab, "lookup_nchw: id {id} out of range {vocab}");
                    for k in 0..dim {
                        dst[b * dim * hw + k * hw + p] = src[id * dim + k];
                    }
                }
            }
        }
        let ids = ids.to_vec();
        let shape = vt.shape().to_vec();
        self.push(
            out,
            &[table],
            Box::new(move |g, _, sink| {
                sink.with(table.0, &shape, |d| {
                    let gd = g.data();
                    for b in 0..n {
                        for p in 0..hw {
                            let id = ids[b * hw + p];
                            for k in 0..dim {
                                d[id * dim + k] += gd[b * dim * hw + k * hw + p];
                            }
                        }
                    }
                });
            }),
        )
    }

    /// Selected rows of a `[rows, dim]` node.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        self.gather_rows(a, rows)
    }

    // ---- layers ----------------------------------------------------------------

    /// 2-D convolution. `x`: `[N, C, H, W]`, `w`: `[O, C, k, k]`, `b`: `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, nodes, sink| {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                conv2d_backward(vx, vw, g, stride, pad, sink, (x.0, &sx), (w.0, &sw), (b.0, &sb));
            }),
        )
    }

    /// `x @ w + b` with `x`: `[M, K]`, `w`: `[K, N]`, `b`: `[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (m, k) = (vx.dim(0), vx.dim(1));
        let n = vw.dim(1);
        assert_eq!(vw.dim(0), k, "linear: inner dim");
        assert_eq!(vb.len(), n, "linear: bias");
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            out[r * n..(r + 1) * n].copy_from_slice(vb.data());
        }
        gemm(false, false, m, n, k, vx.data(), vw.data(), &mut out, true);
        let out = Tensor::from_vec(&[m, n], out).unwrap();
        let (sx, sw, sb) = (vx.shape().to_vec(), vw.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            &[x, w, b],
            Box::new(move |g, nodes, sink| {
                let gd = g.data();
                let (xd, wd) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                sink.with(x.0, &sx, |d| gemm(false, true, m, k, n, gd, wd, d, true));
                sink.with(w.0, &sw, |d| gemm(true, false, k, n, m, xd, gd, d, true));
                sink.with(b.0, &sb, |d| {
                    for r in 0..m {
                        d.iter_mut()
                            .zip(&gd[r * n..(r + 1) * n])
                            .for_each(|(d, &g)| *d += g);
                    }
                });
            }),
        )
    }

    /// Layer normalization over the last axis of `[M, C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, c) = (vx.dim(0), vx.dim(1));
        let mut out = vec![T::zero(); m * c];
        let mut xhat = vec![T::zero(); m * c];
        let mut inv_std = vec![T::zero(); m];
        for r in 0..m {
            let row = &vx.data()[r * c..(r + 1) * c];
            let (mu, is) = row_stats(row, eps);
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::from_vec(&[m, c], out).unwrap();
        let (sx, sg) = (vx.shape().to_vec(), vg.shape().to_vec());
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, nodes, sink| {
                let gd = g.data();
                let gam = nodes[gamma.0].value.data();
                sink.with(gamma.0, &sg, |d| {
                    for r in 0..m {
                        for j in 0..c {
                            d[j] += gd[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                sink.with(beta.0, &sg, |d| {
                    for r in 0..m {
                        for j in 0..c {
                            d[j] += gd[r * c + j];
                        }
                    }
                });
                sink.with(x.0, &sx, |d| {
                    let cf = T::from_usize(c).unwrap();
                    for r in 0..m {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..c {
                            let dxh = gd[r * c + j] * gam[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * c + j];
                        }
                        mean_dxh /= cf;
                        mean_dxh_xh /= cf;
                        for j in 0..c {
                            let dxh = gd[r * c + j] * gam[j];
                            d[r * c + j] +=
                                inv_std[r] * (dxh - mean_dxh - xhat[r * c + j] * mean_dxh_xh);
                        }
                    }
                });
            }),
        )
    }

    /// Multi-head causal self-attention.
    ///
    /// `qkv` is `[batch * len, 3 * width]` holding queries, keys and values
    /// side by side; the result is `[batch * len, width]`. Position `i` only
    /// reads keys and values at positions `<= i`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, len: usize, heads: usize) -> Var {
        let v = self.value(qkv);
        let width = v.dim(1) / 3;
        assert_eq!(v.dim(0), batch * len, "causal_attention: rows");
        assert_eq!(width % heads, 0, "causal_attention: width not divisible by heads");
        let (out, probs) = attention_forward(v.data(), batch, len, heads, width);
        let shape = v.shape().to_vec();
        self.push(
            Tensor::from_vec(&[batch * len, width], out).unwrap(),
            &[qkv],
            Box::new(move |g, nodes, sink| {
                let x = nodes[qkv.0].value.data();
                sink.with(qkv.0, &shape, |d| {
                    attention_backward(x, &probs, g.data(), d, batch, len, heads, width)
                });
            }),
        )
    }
}

// ---- kernels shared with tape-free inference ---------------------------------

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn log_sum_exp<T: Float>(x: &[T]) -> T {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Mean and inverse standard deviation (biased variance) of a row.
pub(crate) fn row_stats<T: Float>(row: &[T], eps: T) -> (T, T) {
    let c = T::from_usize(row.len()).unwrap();
    let mu = row.iter().copied().sum::<T>() / c;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / c;
    (mu, T::one() / (var + eps).sqrt())
}

pub(crate) fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected an NCHW tensor, got shape {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[C, H, W]` image into `[C * k * k, Ho * Wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..ch * h * w + (iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain convolution forward, also used outside the tape.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, c, h, wd] = dims4(x.shape());
    let [o, ci, k, k2] = dims4(w.shape());
    assert_eq!(ci, c, "conv2d: input channels {c} vs weight {ci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    assert_eq!(b.len(), o, "conv2d: bias length");
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let plane = ho * wo;
    let ck = c * k * k;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ck * plane] };
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for i in 0..n {
        let xi = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let yi = &mut out.data_mut()[i * o * plane..(i + 1) * o * plane];
        for (oc, row) in yi.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        let src = if direct {
            xi
        } else {
            im2col(xi, c, h, wd, k, stride, pad, &mut cols);
            &cols
        };
        gemm(false, false, o, plane, ck, w.data(), src, yi, true);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    sink: &mut GradSink<T>,
    (xi, sx): (usize, &[usize]),
    (wi, sw): (usize, &[usize]),
    (bi, sb): (usize, &[usize]),
) {
    let [n, c, h, wd] = dims4(x.shape());
    let [o, _, k, _] = dims4(w.shape());
    let (ho, wo) = (out_size(h, k, stride, pad), out_size(wd, k, stride, pad));
    let plane = ho * wo;
    let ck = c * k * k;
    let direct = k == 1 && stride == 1 && pad == 0;
    let gd = g.data();

    sink.with(bi, sb, |d| {
        for i in 0..n {
            for oc in 0..o {
                let s: T = gd[(i * o + oc) * plane..(i * o + oc + 1) * plane].iter().copied().sum();
                d[oc] += s;
            }
        }
    });

    let want_w = sink.wants(wi);
    let want_x = sink.wants(xi);
    if !want_w && !want_x {
        return;
    }
    let mut cols = if direct { Vec::new() } else { vec![T::zero(); ck * plane] };
    let mut dcols = if direct { Vec::new() } else { vec![T::zero(); ck * plane] };
    for i in 0..n {
        let gi = &gd[i * o * plane..(i + 1) * o * plane];
        let xin = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        if want_w {
            let src = if direct {
                xin
            } else {
                im2col(xin, c, h, wd, k, stride, pad, &mut cols);
                &cols
            };
            sink.with(wi, sw, |d| gemm(false, true, o, ck, plane, gi, src, d, true));
        }
        if want_x {
            sink.with(xi, sx, |d| {
                let dx = &mut d[i * c * h * wd..(i + 1) * c * h * wd];
                if direct {
                    gemm(true, false, ck, plane, o, w.data(), gi, dx, true);
                } else {
                    gemm(true, false, ck, plane, o, w.data(), gi, &mut dcols, false);
                    col2im(&dcols, c, h, wd, k, stride, pad, dx);
                }
            });
        }
    }
}

pub(crate) fn attention_forward<T: Float>(
    x: &[T],
    batch: usize,
    len: usize,
    heads: usize,
    width: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let stride = 3 * width;
    let mut out = vec![T::zero(); batch * len * width];
    let mut probs = vec![T::zero(); batch * heads * len * len];
    let mut scores = vec![T::zero(); len];
    for b in 0..batch {
        for hd in 0..heads {
            let pbase = (b * heads + hd) * len * len;
            for i in 0..len {
                let q = &x[(b * len + i) * stride + hd * dh..][..dh];
                let mut m = T::neg_infinity();
                for j in 0..=i {
                    let kv = &x[(b * len + j) * stride + width + hd * dh..][..dh];
                    let s = dot(q, kv) * scale;
                    scores[j] = s;
                    m = m.max(s);
                }
                let mut z = T::zero();
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let o = &mut out[(b * len + i) * width + hd * dh..][..dh];
                for j in 0..=i {
                    let p = scores[j] / z;
                    probs[pbase + i * len + j] = p;
                    let vv = &x[(b * len + j) * stride + 2 * width + hd * dh..][..dh];
                    for (o, &v) in o.iter_mut().zip(vv) {
                        *o += p * v;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Float>(
    x: &[T],
    probs: &[T],
    g: &[T],
    d: &mut [T],
    batch: usize,
    len: usize,
    heads: usize,
    width: usize,
) {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let stride = 3 * width;
    let mut dp = vec![T::zero(); len];
    for b in 0..batch {
        for hd in 0..heads {
            let pbase = (b * heads + hd) * len * len;
            for i in 0..len {
                let go = &g[(b * len + i) * width + hd * dh..][..dh];
                let mut weighted = T::zero();
                for j in 0..=i {
                    let vv = &x[(b * len + j) * stride + 2 * width + hd * dh..][..dh];
                    dp[j] = dot(go, vv);
                    weighted += dp[j] * probs[pbase + i * len + j];
                }
                let qoff = (b * len + i) * stride + hd * dh;
                for j in 0..=i {
                    let p = probs[pbase + i * len + j];
                    let koff = (b * len + j) * stride + width + hd * dh;
                    let voff = koff + width;
                    for t in 0..dh {
                        d[voff + t] += p * go[t];
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    for t in 0..dh {
                        let (qv, kv) = (x[qoff + t], x[koff + t]);
                        d[qoff + t] += ds * kv;
                        d[koff + t] += ds * qv;
                    }
                }
            }
        }
    }
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
