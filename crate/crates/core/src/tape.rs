//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Ops record a backward closure as they execute; `backward()` replays the
//! tape in reverse recording order, which is reverse-topological because a
//! node's parents always carry smaller ids. A tape is confined to one thread
//! for the duration of a forward/backward pair.
//!
//! Straight-through nodes are first-class: forward passes one value, backward
//! routes gradient to a different (differentiable) parent. In
//! [`StMode::Surrogate`] they forward the differentiable branch instead, so
//! the evaluated function is exactly the one the tape differentiates; the
//! finite-difference oracle runs in that mode when checking gated paths.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Forward behaviour of straight-through nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StMode {
    /// Forward the hard value, backward through the surrogate (training).
    #[default]
    Hard,
    /// Forward the surrogate too; makes the tape's gradient equal the true
    /// gradient of the evaluated function (finite-difference checks).
    Surrogate,
}

/// Reduction applied by fused loss ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

type BackFn<S> = Box<dyn Fn(&[S], &mut GradSink<S>)>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    back: Option<BackFn<S>>,
}

/// Accumulates gradient contributions into per-node buffers during backward.
pub struct GradSink<'a, S: Scalar> {
    grads: &'a mut [Option<Vec<S>>],
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// Hands the caller the (zero-initialized) gradient buffer of `target`.
    pub fn accum(&mut self, target: NodeId, numel: usize, f: impl FnOnce(&mut [S])) {
        let slot = &mut self.grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![S::zero(); numel]);
        f(buf);
    }
}

/// Gradients produced by one backward pass.
pub struct Grads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss w.r.t. the node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros of the node's shape.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

pub struct Tape<S: Scalar> {
    mode: StMode,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels ──────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[k,n] = Aᵀ · B with A[m,k], B[m,n]
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m,k] = A · Bᵀ with A[m,n], B[k,n]
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            mode: StMode::Hard,
            nodes: Vec::new(),
        }
    }

    pub fn with_mode(mode: StMode) -> Self {
        Tape {
            mode,
            nodes: Vec::new(),
        }
    }

    pub fn mode(&self) -> StMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, back: Option<BackFn<S>>) -> NodeId {
        self.nodes.push(Node { value, back });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an input. Leaves have no backward of their own but do collect
    /// gradient, which callers fetch after `backward()`.
    pub fn leaf(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, None)
    }

    /// Alias for leaves that are constants (noise, masks, targets).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.leaf(value)
    }

    // ── elementwise ────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        fwd: impl Fn(S, S) -> S,
        back: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::Shape {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<S> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let (ad, bd) = (va.data().to_vec(), vb.data().to_vec());
        let n = data.len();
        let value = Tensor::new(shape, data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, n, |buf| {
                    for i in 0..n {
                        buf[i] += back(ad[i], bd[i], g[i]).0;
                    }
                });
                sink.accum(b, n, |buf| {
                    for i in 0..n {
                        buf[i] += back(ad[i], bd[i], g[i]).1;
                    }
                });
            })),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    fn unary(
        &mut self,
        a: NodeId,
        fwd: impl Fn(S) -> S,
        back: impl Fn(S, S) -> S + 'static,
    ) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data: Vec<S> = va.data().iter().map(|&x| fwd(x)).collect();
        let shape = va.shape().to_vec();
        let ad = va.data().to_vec();
        let n = data.len();
        let value = Tensor::new(shape, data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, n, |buf| {
                    for i in 0..n {
                        buf[i] += back(ad[i], g[i]);
                    }
                });
            })),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, |_, g| -g)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        self.unary(a, move |x| x * c, move |_, g| g * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: S) -> NodeId {
        self.unary(a, move |x| x + c, |_, g| g)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let sig = |x: S| S::one() / (S::one() + (-x).exp());
        self.unary(
            a,
            move |x| x * sig(x),
            move |x, g| {
                let sg = sig(x);
                g * sg * (S::one() + x * (S::one() - sg))
            },
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), |x, g| {
            let t = x.tanh();
            g * (S::one() - t * t)
        })
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.abs(), |x, g| {
            if x > S::zero() {
                g
            } else if x < S::zero() {
                -g
            } else {
                S::zero()
            }
        })
    }

    /// Forward copy with no gradient path (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, None)
    }

    // ── broadcast helpers ──────────────────────────────────────────

    /// x[m,n] + r[n] broadcast over rows (bias add).
    pub fn add_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[r.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        if vr.numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vx.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        let rd = vr.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += rd[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(x, m * n, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += *gi;
                    }
                });
                sink.accum(r, n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            })),
        ))
    }

    /// x[m,n] ⊙ r[n] broadcast over rows (per-channel scale).
    pub fn mul_row(&mut self, x: NodeId, r: NodeId) -> Result<NodeId> {
        let (vx, vr) = (&self.nodes[x.0].value, &self.nodes[r.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        if vr.numel() != n {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: vx.shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let xd = vx.data().to_vec();
        let rd = vr.data().to_vec();
        let mut data = xd.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= rd[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(x, m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * rd[j];
                        }
                    }
                });
                sink.accum(r, n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * xd[i * n + j];
                        }
                    }
                });
            })),
        ))
    }

    /// x[m,n] ⊙ c[m] broadcast over columns (per-row scale).
    pub fn mul_col(&mut self, x: NodeId, c: NodeId) -> Result<NodeId> {
        let (vx, vc) = (&self.nodes[x.0].value, &self.nodes[c.0].value);
        let (m, n) = (vx.rows(), vx.cols());
        if vc.numel() != m {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: vx.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        let xd = vx.data().to_vec();
        let cd = vc.data().to_vec();
        let mut data = xd.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= cd[i];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(x, m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * cd[i];
                        }
                    }
                });
                sink.accum(c, m, |buf| {
                    for i in 0..m {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * xd[i * n + j];
                        }
                        buf[i] += acc;
                    }
                });
            })),
        ))
    }

    // ── linear algebra ─────────────────────────────────────────────

    /// Standard matrix product; gradient contract da = g·bᵀ, db = aᵀ·g.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, ka) = (va.rows(), va.cols());
        let (kb, n) = (vb.rows(), vb.cols());
        if ka != kb || va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let ad = va.data().to_vec();
        let bd = vb.data().to_vec();
        let data = mm_nn(&ad, &bd, m, ka, n);
        let value = Tensor::new(vec![m, n], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                let da = mm_nt(g, &bd, m, n, ka);
                sink.accum(a, m * ka, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(&da) {
                        *bi += *gi;
                    }
                });
                let db = mm_tn(&ad, g, m, ka, n);
                sink.accum(b, ka * n, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(&db) {
                        *bi += *gi;
                    }
                });
            })),
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j * m + i];
                        }
                    }
                });
            })),
        )
    }

    // ── reductions ─────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let total: S = va.data().iter().copied().sum();
        let n = va.numel();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, sink| {
                let gv = g[0];
                sink.accum(a, n, |buf| {
                    for b in buf.iter_mut() {
                        *b += gv;
                    }
                });
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let summed = self.sum_all(a);
        self.scale(summed, S::one() / s::<S>(n as f64))
    }

    /// Column means of a matrix: [m,n] → [1,n].
    pub fn mean_axis0(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let inv = S::one() / s::<S>(m as f64);
        let mut data = vec![S::zero(); n];
        for i in 0..m {
            for j in 0..n {
                data[j] += va.data()[i * n + j];
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let value = Tensor::new(vec![1, n], data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j] * inv;
                        }
                    }
                });
            })),
        )
    }

    // ── normalizations & softmax ───────────────────────────────────

    /// Softmax along the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId, temperature: S) -> Result<NodeId> {
        if !(temperature > S::zero()) {
            return Err(Error::Config(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let va = &self.nodes[a.0].value;
        if !va.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let shape = va.shape().to_vec();
        let n = *shape.last().ok_or_else(|| {
            Error::Config("softmax needs at least one axis".into())
        })?;
        let rows = va.numel() / n;
        let mut data = vec![S::zero(); va.numel()];
        for r in 0..rows {
            let xs = &va.data()[r * n..(r + 1) * n];
            let mx = xs.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..n {
                let e = ((xs[j] - mx) / temperature).exp();
                data[r * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                data[r * n + j] /= denom;
            }
        }
        let y = data.clone();
        let value = Tensor::new(shape, data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, rows * n, |buf| {
                    for r in 0..rows {
                        let o = r * n;
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += g[o + j] * y[o + j];
                        }
                        for j in 0..n {
                            buf[o + j] += y[o + j] * (g[o + j] - dot) / temperature;
                        }
                    }
                });
            })),
        ))
    }

    /// Per-row normalization to mean 0 / variance 1 (before affine).
    pub fn layer_norm(&mut self, a: NodeId, eps: S) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        let invn = S::one() / s::<S>(n as f64);
        let mut data = vec![S::zero(); m * n];
        let mut inv_std = vec![S::zero(); m];
        for i in 0..m {
            let xs = &va.data()[i * n..(i + 1) * n];
            let mu: S = xs.iter().copied().sum::<S>() * invn;
            let var: S = xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<S>() * invn;
            let r = (var + eps).sqrt();
            inv_std[i] = S::one() / r;
            for j in 0..n {
                data[i * n + j] = (xs[j] - mu) / r;
            }
        }
        let y = data.clone();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, m * n, |buf| {
                    for i in 0..m {
                        let o = i * n;
                        let mut gm = S::zero();
                        let mut gym = S::zero();
                        for j in 0..n {
                            gm += g[o + j];
                            gym += g[o + j] * y[o + j];
                        }
                        gm *= invn;
                        gym *= invn;
                        for j in 0..n {
                            buf[o + j] += inv_std[i] * (g[o + j] - gm - y[o + j] * gym);
                        }
                    }
                });
            })),
        )
    }

    /// Group normalization over `[rows, channels]` data: each group slab
    /// (all rows × the group's channel block) is normalized to mean 0,
    /// variance 1. Affine scale/shift is applied by the caller.
    pub fn group_norm(&mut self, a: NodeId, groups: usize, eps: S) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (m, c) = (va.rows(), va.cols());
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        let gc = c / groups;
        let slab = m * gc;
        let inv = S::one() / s::<S>(slab as f64);
        let mut data = vec![S::zero(); m * c];
        let mut inv_std = vec![S::zero(); groups];
        for gidx in 0..groups {
            let c0 = gidx * gc;
            let mut mu = S::zero();
            for i in 0..m {
                for j in 0..gc {
                    mu += va.data()[i * c + c0 + j];
                }
            }
            mu *= inv;
            let mut var = S::zero();
            for i in 0..m {
                for j in 0..gc {
                    let d = va.data()[i * c + c0 + j] - mu;
                    var += d * d;
                }
            }
            var *= inv;
            let r = (var + eps).sqrt();
            inv_std[gidx] = S::one() / r;
            for i in 0..m {
                for j in 0..gc {
                    data[i * c + c0 + j] = (va.data()[i * c + c0 + j] - mu) / r;
                }
            }
        }
        let y = data.clone();
        let value = Tensor::new(va.shape().to_vec(), data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, m * c, |buf| {
                    for gidx in 0..groups {
                        let c0 = gidx * gc;
                        let mut gm = S::zero();
                        let mut gym = S::zero();
                        for i in 0..m {
                            for j in 0..gc {
                                let idx = i * c + c0 + j;
                                gm += g[idx];
                                gym += g[idx] * y[idx];
                            }
                        }
                        gm *= inv;
                        gym *= inv;
                        for i in 0..m {
                            for j in 0..gc {
                                let idx = i * c + c0 + j;
                                buf[idx] += inv_std[gidx] * (g[idx] - gm - y[idx] * gym);
                            }
                        }
                    }
                });
            })),
        ))
    }

    // ── spatial ops on [h*w, c] grids ──────────────────────────────

    /// Average pooling by `factor` over an `[h*w, c]` grid.
    pub fn avg_pool(&mut self, a: NodeId, h: usize, w: usize, factor: usize) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let c = va.cols();
        if va.rows() != h * w || h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape {
                op: "avg_pool",
                lhs: va.shape().to_vec(),
                rhs: vec![h, w, factor],
            });
        }
        let (ho, wo) = (h / factor, w / factor);
        let inv = S::one() / s::<S>((factor * factor) as f64);
        let mut data = vec![S::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = (oy * wo + ox) * c;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let irow = ((oy * factor + dy) * w + (ox * factor + dx)) * c;
                        for ch in 0..c {
                            data[orow + ch] += va.data()[irow + ch];
                        }
                    }
                }
                for ch in 0..c {
                    data[orow + ch] *= inv;
                }
            }
        }
        let value = Tensor::new(vec![ho * wo, c], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, h * w * c, |buf| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let orow = (oy * wo + ox) * c;
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    let irow =
                                        ((oy * factor + dy) * w + (ox * factor + dx)) * c;
                                    for ch in 0..c {
                                        buf[irow + ch] += g[orow + ch] * inv;
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// Nearest-neighbour upsampling by `factor` over an `[h*w, c]` grid.
    pub fn upsample_nearest(
        &mut self,
        a: NodeId,
        h: usize,
        w: usize,
        factor: usize,
    ) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let c = va.cols();
        if va.rows() != h * w {
            return Err(Error::Shape {
                op: "upsample_nearest",
                lhs: va.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut data = vec![S::zero(); ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let irow = ((oy / factor) * w + ox / factor) * c;
                let orow = (oy * wo + ox) * c;
                data[orow..orow + c].copy_from_slice(&va.data()[irow..irow + c]);
            }
        }
        let value = Tensor::new(vec![ho * wo, c], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, h * w * c, |buf| {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let irow = ((oy / factor) * w + ox / factor) * c;
                            let orow = (oy * wo + ox) * c;
                            for ch in 0..c {
                                buf[irow + ch] += g[orow + ch];
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// Extracts k×k patches (zero-padded) from an `[h*w, c]` grid into
    /// `[h'·w', c·k·k]` rows, so convolution becomes a matmul.
    pub fn im2col(
        &mut self,
        a: NodeId,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let c = va.cols();
        if va.rows() != h * w {
            return Err(Error::Shape {
                op: "im2col",
                lhs: va.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
        if stride == 0 || (h + 2 * pad) < k || (w + 2 * pad) < k {
            return Err(Error::Config(format!(
                "im2col: grid {h}x{w} incompatible with k={k} stride={stride} pad={pad}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let width = c * k * k;
        let mut data = vec![S::zero(); ho * wo * width];
        // (out row, patch slot) -> input row; usize::MAX marks zero padding
        let mut src = vec![usize::MAX; ho * wo * k * k];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = oy * wo + ox;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let irow = iy as usize * w + ix as usize;
                        src[orow * k * k + ky * k + kx] = irow;
                        let dst = orow * width + (ky * k + kx) * c;
                        data[dst..dst + c]
                            .copy_from_slice(&va.data()[irow * c..irow * c + c]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![ho * wo, width], data).unwrap();
        let kk = k * k;
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(a, h * w * c, |buf| {
                    for orow in 0..ho * wo {
                        for slot in 0..kk {
                            let irow = src[orow * kk + slot];
                            if irow == usize::MAX {
                                continue;
                            }
                            let gofs = orow * width + slot * c;
                            for ch in 0..c {
                                buf[irow * c + ch] += g[gofs + ch];
                            }
                        }
                    }
                });
            })),
        ))
    }

    // ── gathers, scatters, concatenation ───────────────────────────

    /// Gathers rows of `src` by index (embedding lookup, selection,
    /// replication). Backward scatter-adds into the source rows.
    pub fn rows(&mut self, src: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vs = &self.nodes[src.0].value;
        let (n, d) = (vs.rows(), vs.cols());
        for (cell, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::Index {
                    what: "row",
                    index: idx,
                    len: n,
                    cell,
                });
            }
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            data.extend_from_slice(&vs.data()[idx * d..(idx + 1) * d]);
        }
        let idx = indices.to_vec();
        let m = idx.len();
        let value = Tensor::new(vec![m, d], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(src, n * d, |buf| {
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] += g[i * d + j];
                        }
                    }
                });
            })),
        ))
    }

    /// Per-row element pick: x[m,n], idx[m] → [m,1].
    pub fn gather_last(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        if indices.len() != m {
            return Err(Error::Shape {
                op: "gather_last",
                lhs: vx.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        for (cell, &idx) in indices.iter().enumerate() {
            if idx >= n {
                return Err(Error::Index {
                    what: "column",
                    index: idx,
                    len: n,
                    cell,
                });
            }
        }
        let data: Vec<S> = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| vx.data()[i * n + j])
            .collect();
        let idx = indices.to_vec();
        let value = Tensor::new(vec![m, 1], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(x, m * n, |buf| {
                    for (i, &j) in idx.iter().enumerate() {
                        buf[i * n + j] += g[i];
                    }
                });
            })),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows of zero parts".into()));
        }
        let d = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![d],
                    rhs: v.shape().to_vec(),
                });
            }
            sizes.push(v.numel());
            data.extend_from_slice(v.data());
        }
        let m = data.len() / d;
        let owned: Vec<NodeId> = parts.to_vec();
        let value = Tensor::new(vec![m, d], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut ofs = 0;
                for (&p, &sz) in owned.iter().zip(&sizes) {
                    sink.accum(p, sz, |buf| {
                        for (bi, gi) in buf.iter_mut().zip(&g[ofs..ofs + sz]) {
                            *bi += *gi;
                        }
                    });
                    ofs += sz;
                }
            })),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of zero parts".into()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![S::zero(); m * total];
        let mut ofs = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for i in 0..m {
                data[i * total + ofs..i * total + ofs + wd]
                    .copy_from_slice(&v.data()[i * wd..(i + 1) * wd]);
            }
            ofs += wd;
        }
        let owned: Vec<NodeId> = parts.to_vec();
        let value = Tensor::new(vec![m, total], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut ofs = 0;
                for (&p, &wd) in owned.iter().zip(&widths) {
                    sink.accum(p, m * wd, |buf| {
                        for i in 0..m {
                            for j in 0..wd {
                                buf[i * wd + j] += g[i * total + ofs + j];
                            }
                        }
                    });
                    ofs += wd;
                }
            })),
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        if start + width > n {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vx.shape().to_vec(),
                rhs: vec![start, width],
            });
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&vx.data()[i * n + start..i * n + start + width]);
        }
        let value = Tensor::new(vec![m, width], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(x, m * n, |buf| {
                    for i in 0..m {
                        for j in 0..width {
                            buf[i * n + start + j] += g[i * width + j];
                        }
                    }
                });
            })),
        ))
    }

    // ── straight-through primitives ────────────────────────────────

    /// Forward `hard` (or `soft` in surrogate mode); backward routes the
    /// gradient to `soft` unchanged. `hard` never receives gradient.
    pub fn straight_through(&mut self, hard: NodeId, soft: NodeId) -> Result<NodeId> {
        let (vh, vs) = (&self.nodes[hard.0].value, &self.nodes[soft.0].value);
        if vh.shape() != vs.shape() {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: vh.shape().to_vec(),
                rhs: vs.shape().to_vec(),
            });
        }
        let value = match self.mode {
            StMode::Hard => vh.clone(),
            StMode::Surrogate => vs.clone(),
        };
        let n = value.numel();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(soft, n, |buf| {
                    for (bi, gi) in buf.iter_mut().zip(g) {
                        *bi += *gi;
                    }
                });
            })),
        ))
    }

    /// Hard one-hot routing weights over `probs[m,k]` with winners `argmax`:
    /// forward is the exact one-hot (surrogate mode: the winning probability
    /// at the winning slot, zero elsewhere); backward routes the winning
    /// slot's gradient into `probs` at that slot.
    pub fn st_onehot(&mut self, probs: NodeId, winners: &[usize]) -> Result<NodeId> {
        let vp = &self.nodes[probs.0].value;
        let (m, k) = (vp.rows(), vp.cols());
        if winners.len() != m {
            return Err(Error::Shape {
                op: "st_onehot",
                lhs: vp.shape().to_vec(),
                rhs: vec![winners.len()],
            });
        }
        for (cell, &wdx) in winners.iter().enumerate() {
            if wdx >= k {
                return Err(Error::Index {
                    what: "winner",
                    index: wdx,
                    len: k,
                    cell,
                });
            }
        }
        let mut data = vec![S::zero(); m * k];
        match self.mode {
            StMode::Hard => {
                for (i, &wdx) in winners.iter().enumerate() {
                    data[i * k + wdx] = S::one();
                }
            }
            StMode::Surrogate => {
                for (i, &wdx) in winners.iter().enumerate() {
                    data[i * k + wdx] = vp.data()[i * k + wdx];
                }
            }
        }
        let win = winners.to_vec();
        let value = Tensor::new(vec![m, k], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(probs, m * k, |buf| {
                    for (i, &wdx) in win.iter().enumerate() {
                        buf[i * k + wdx] += g[i * k + wdx];
                    }
                });
            })),
        ))
    }

    // ── fused losses ───────────────────────────────────────────────

    /// Negative log-likelihood of `targets` under row softmax of `logits`.
    /// Targets whose value appears in `ignore` contribute nothing to the
    /// value or the gradient.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let vl = &self.nodes[logits.0].value;
        let (t, v) = (vl.rows(), vl.cols());
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let active: Vec<bool> = targets.iter().map(|tv| !ignore.contains(tv)).collect();
        for (cell, (&tv, &a)) in targets.iter().zip(&active).enumerate() {
            if a && tv >= v {
                return Err(Error::Index {
                    what: "target",
                    index: tv,
                    len: v,
                    cell,
                });
            }
        }
        let count = active.iter().filter(|&&a| a).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![S::zero(); t * v];
        let mut total = S::zero();
        for i in 0..t {
            if !active[i] {
                continue;
            }
            let xs = &vl.data()[i * v..(i + 1) * v];
            let mx = xs.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..v {
                let e = (xs[j] - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] /= denom;
            }
            total -= probs[i * v + targets[i]].ln();
        }
        let norm = match reduction {
            Reduction::Mean => S::one() / s::<S>(count as f64),
            Reduction::Sum => S::one(),
        };
        let tg = targets.to_vec();
        let value = Tensor::scalar(total * norm);
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gv = g[0] * norm;
                sink.accum(logits, t * v, |buf| {
                    for i in 0..t {
                        if !active[i] {
                            continue;
                        }
                        for j in 0..v {
                            let ind = if j == tg[i] { S::one() } else { S::zero() };
                            buf[i * v + j] += gv * (probs[i * v + j] - ind);
                        }
                    }
                });
            })),
        ))
    }

    /// Row-wise softmax over the causal prefix j ≤ i of an [L,L] score
    /// matrix; entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        let vsc = &self.nodes[scores.0].value;
        let (l, l2) = (vsc.rows(), vsc.cols());
        if l != l2 {
            return Err(Error::Shape {
                op: "causal_softmax",
                lhs: vsc.shape().to_vec(),
                rhs: vec![l, l],
            });
        }
        let mut data = vec![S::zero(); l * l];
        for i in 0..l {
            let xs = &vsc.data()[i * l..i * l + i + 1];
            let mx = xs.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for j in 0..=i {
                let e = (xs[j] - mx).exp();
                data[i * l + j] = e;
                denom += e;
            }
            for j in 0..=i {
                data[i * l + j] /= denom;
            }
        }
        let y = data.clone();
        let value = Tensor::new(vec![l, l], data).unwrap();
        Ok(self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink.accum(scores, l * l, |buf| {
                    for i in 0..l {
                        let o = i * l;
                        let mut dot = S::zero();
                        for j in 0..=i {
                            dot += g[o + j] * y[o + j];
                        }
                        for j in 0..=i {
                            buf[o + j] += y[o + j] * (g[o + j] - dot);
                        }
                    }
                });
            })),
        ))
    }

    // ── backward ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. Visits nodes in reverse
    /// recording order (reverse topological by construction).
    pub fn backward(&self, loss: NodeId) -> Result<Grads<S>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: lv.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(back) = self.nodes[id].back.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).unwrap())
            })
            .collect();
        Ok(Grads { grads: tensors })
    }
}
