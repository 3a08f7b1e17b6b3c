//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! constants (never receive gradient) or variables. Every derived node
//! records whether any ancestor is a variable; backward only visits those.

use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        transpose_b: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    Scale {
        a: NodeId,
        factor: S,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    SelectRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        base: NodeId,
        src: NodeId,
        idx: Vec<usize>,
    },
    StraightThrough(NodeId),
    Attention(Box<AttentionCache<S>>),
    Sum(NodeId),
}

struct AttentionCache<S> {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    seq_len: usize,
    scale: S,
    /// `[seq][head][i][j]` probabilities, zero at masked keys.
    probs: Vec<S>,
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul shape mismatch");
        let out = av.matmul(bv);
        let rg = self.rg(&[a, b]);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            rg,
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt shape mismatch");
        let mut out = Tensor::zeros(av.rows(), bv.rows());
        let n = bv.rows();
        gemm(
            S::one(),
            av.view(),
            bv.view().t(),
            S::zero(),
            out.data_mut(),
            0,
            n,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a row vector");
        assert_eq!(av.cols(), rv.cols(), "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow { a, row }, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::softmax(av.row(r)));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            out.row_mut(r)
                .copy_from_slice(&crate::tensor::log_softmax(av.row(r)));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (rows, cols) = xv.shape();
        assert_eq!(g.len(), cols, "layer_norm gamma width");
        assert_eq!(b.len(), cols, "layer_norm beta width");
        let n = S::of(cols as f64);
        let eps = S::of(LN_EPS);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Gathers rows `idx` of `a` (repeats allowed).
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut out = Tensor::zeros(idx.len(), av.cols());
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        let rg = self.rg(&[a]);
        self.push(
            out,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Copy of `base` whose rows `idx[i]` are replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: NodeId, src: NodeId, idx: &[usize]) -> NodeId {
        let (bv, sv) = (self.value(base), self.value(src));
        assert_eq!(sv.rows(), idx.len(), "scatter_rows row count");
        assert_eq!(sv.cols(), bv.cols(), "scatter_rows width");
        let mut out = bv.clone();
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        let rg = self.rg(&[base, src]);
        self.push(
            out,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Forward: one-hot of each row's argmax. Backward: identity.
    pub fn straight_through(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = Tensor::one_hot(&av.argmax_rows(), av.cols());
        let rg = self.rg(&[a]);
        self.push(out, Op::StraightThrough(a), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// Multi-head scaled dot-product self-attention over a batch of
    /// equal-length sequences stacked row-wise. `key_valid[row]` is false
    /// for keys (padding) that must receive zero attention.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        key_valid: &[bool],
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        assert_eq!(d % heads, 0, "hidden size must divide into heads");
        assert_eq!(n % seq_len, 0, "rows must be a whole number of sequences");
        assert_eq!(key_valid.len(), n);
        let dh = d / heads;
        let batch = n / seq_len;
        let scale = S::one() / S::of(dh as f64).sqrt();
        let ll = seq_len * seq_len;
        let mut probs = vec![S::zero(); batch * heads * ll];
        let mut out = Tensor::zeros(n, d);
        for b in 0..batch {
            let base = b * seq_len;
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * ll..(b * heads + h + 1) * ll];
                let qb = head_view(qv.data(), base, h * dh, seq_len, dh, d);
                let kb = head_view(kv.data(), base, h * dh, seq_len, dh, d);
                gemm(scale, qb, kb.t(), S::zero(), p, 0, seq_len);
                for i in 0..seq_len {
                    let row = &mut p[i * seq_len..(i + 1) * seq_len];
                    let mut m = S::neg_infinity();
                    for j in 0..seq_len {
                        if key_valid[base + j] {
                            m = m.max(row[j]);
                        }
                    }
                    let mut z = S::zero();
                    for j in 0..seq_len {
                        row[j] = if key_valid[base + j] {
                            (row[j] - m).exp()
                        } else {
                            S::zero()
                        };
                        z += row[j];
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                let vb = head_view(vv.data(), base, h * dh, seq_len, dh, d);
                gemm(
                    S::one(),
                    MatRef::new(p, seq_len, seq_len),
                    vb,
                    S::zero(),
                    out.data_mut(),
                    base * d + h * dh,
                    d,
                );
            }
        }
        let rg = self.rg(&[q, k, v]);
        let cache = AttentionCache {
            q,
            k,
            v,
            heads,
            seq_len,
            scale,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)), rg)
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(1, 1, S::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let bview = if *transpose_b {
                        bv.view()
                    } else {
                        bv.view().t()
                    };
                    gemm(
                        S::one(),
                        g.view(),
                        bview,
                        S::zero(),
                        ga.data_mut(),
                        0,
                        av.cols(),
                    );
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    if *transpose_b {
                        gemm(
                            S::one(),
                            g.view().t(),
                            av.view(),
                            S::zero(),
                            gb.data_mut(),
                            0,
                            bv.cols(),
                        );
                    } else {
                        gemm(
                            S::one(),
                            av.view().t(),
                            g.view(),
                            S::zero(),
                            gb.data_mut(),
                            0,
                            bv.cols(),
                        );
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, g.clone());
                if self.wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &x) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.acc(grads, *a, g.map(|x| x * f));
            }
            Op::Gelu(a) => {
                self.acc(
                    grads,
                    *a,
                    self.value(*a).zip_map(g, |x, gy| gelu_grad(x) * gy),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: S = y.row(r).iter().zip(g.row(r)).map(|(&p, &d)| p * d).sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: S = g.row(r).iter().copied().sum();
                    for c in 0..y.cols() {
                        ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * total);
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let (rows, cols) = xhat.shape();
                if self.wants(*x) {
                    let n = S::of(cols as f64);
                    let mut gx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..cols {
                            let d = g.get(r, c) * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = g.get(r, c) * gv[c];
                            gx.set(r, c, rstd[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    let mut gg = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.acc(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        for (acc, &d) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += d;
                        }
                    }
                    self.acc(grads, *beta, gb);
                }
            }
            Op::SelectRows { a, idx } => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (i, &r) in idx.iter().enumerate() {
                    for (acc, &d) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                        *acc += d;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::ScatterRows { base, src, idx } => {
                if self.wants(*base) {
                    let mut gb = g.clone();
                    for &r in idx {
                        gb.row_mut(r).iter_mut().for_each(|x| *x = S::zero());
                    }
                    self.acc(grads, *base, gb);
                }
                if self.wants(*src) {
                    let mut gs = Tensor::zeros(idx.len(), g.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        gs.row_mut(i).copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *src, gs);
                }
            }
            Op::StraightThrough(a) => self.acc(grads, *a, g.clone()),
            Op::Sum(a) => {
                let av = self.value(*a);
                self.acc(grads, *a, Tensor::full(av.rows(), av.cols(), g.scalar()));
            }
            Op::Attention(cache) => self.attention_backward(cache, g, grads),
        }
    }

    fn attention_backward(
        &self,
        c: &AttentionCache<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (n, d) = qv.shape();
        let (l, heads) = (c.seq_len, c.heads);
        let dh = d / heads;
        let ll = l * l;
        let mut gq = Tensor::zeros(n, d);
        let mut gk = Tensor::zeros(n, d);
        let mut gv = Tensor::zeros(n, d);
        let mut dp = vec![S::zero(); ll];
        for b in 0..n / l {
            let base = b * l;
            for h in 0..heads {
                let p = &c.probs[(b * heads + h) * ll..(b * heads + h + 1) * ll];
                let pm = MatRef::new(p, l, l);
                let go = head_view(g.data(), base, h * dh, l, dh, d);
                let off = base * d + h * dh;
                gemm(S::one(), pm.t(), go, S::zero(), gv.data_mut(), off, d);
                let vb = head_view(vv.data(), base, h * dh, l, dh, d);
                gemm(S::one(), go, vb.t(), S::zero(), &mut dp, 0, l);
                for i in 0..l {
                    let prow = &p[i * l..(i + 1) * l];
                    let drow = &mut dp[i * l..(i + 1) * l];
                    let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..l {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                }
                let ds = MatRef::new(&dp, l, l);
                let kb = head_view(kv.data(), base, h * dh, l, dh, d);
                let qb = head_view(qv.data(), base, h * dh, l, dh, d);
                gemm(c.scale, ds, kb, S::zero(), gq.data_mut(), off, d);
                gemm(c.scale, ds.t(), qb, S::zero(), gk.data_mut(), off, d);
            }
        }
        self.acc(grads, c.q, gq);
        self.acc(grads, c.k, gk);
        self.acc(grads, c.v, gv);
    }
}

fn head_view<S: Scalar>(
    data: &[S],
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
    width: usize,
) -> MatRef<'_, S> {
    MatRef {
        data,
        offset: row0 * width + col0,
        rows,
        cols,
        rs: width,
        cs: 1,
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let k = S::of(0.044715);
    let half = S::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::of(3.0) * k * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}
