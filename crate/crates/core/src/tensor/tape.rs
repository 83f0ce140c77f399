use super::kernels::{gemm_nn, gemm_nt, gemm_tn, log_sum_exp, softmax_row};
use super::{check_finite, Tensor};
use crate::error::{dim, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    CausalAttention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<S>,
    },
    Sum(Var),
}

struct Node<S> {
    value: Vec<S>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    op: Op<S>,
}

/// Wengert list for reverse-mode differentiation over matrices.
///
/// Nodes are appended in evaluation order, so a reverse sweep is a valid
/// topological order. Gradients are only propagated into nodes that
/// (transitively) depend on a leaf registered with `requires_grad`.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    check_finite: bool,
    flops: u64,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    /// A tape that rejects non-finite op outputs.
    pub fn new() -> Self {
        Self::with_checks(true)
    }

    pub fn with_checks(check_finite: bool) -> Self {
        Self {
            nodes: Vec::new(),
            check_finite,
            flops: 0,
        }
    }

    /// Floating-point operations spent in forward evaluation so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push_raw(t.data().to_vec(), t.rows(), t.cols(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::from_parts(vec![n.rows, n.cols], n.value.clone())
    }

    pub fn values(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, value: Vec<S>, rows: usize, cols: usize, requires_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Vec<S>, rows: usize, cols: usize, rg: bool, op: Op<S>) -> Result<Var> {
        if self.check_finite {
            check_finite(&value, name)?;
        }
        Ok(self.push_raw(value, rows, cols, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(dim(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nn(m, k, n, self.values(a), self.values(b), &mut out);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, m, n, rg, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(dim(format!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_nt(m, k, n, self.values(a), self.values(b), &mut out);
        self.flops += 2 * (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul_nt", out, m, n, rg, Op::MatMulNt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(dim(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x + y).collect();
        self.flops += (r * c) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push("add", out, r, c, rg, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(dim(format!("add_row: {:?} onto {r}x{c}", self.shape(row))));
        }
        let bias = self.values(row);
        let out = self
            .values(a)
            .chunks(c)
            .flat_map(|xs| xs.iter().zip(bias).map(|(&x, &b)| x + b))
            .collect();
        self.flops += (r * c) as u64;
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", out, r, c, rg, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = self.values(a).iter().zip(self.values(b)).map(|(&x, &y)| x * y).collect();
        self.flops += (r * c) as u64;
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", out, r, c, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.values(a).iter().map(|&x| x * s).collect();
        self.flops += (r * c) as u64;
        let rg = self.rg(a);
        self.push("scale", out, r, c, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.values(a).iter().map(|&x| if x > S::zero() { x } else { S::zero() }).collect();
        self.flops += (r * c) as u64;
        let rg = self.rg(a);
        self.push("relu", out, r, c, rg, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (k, q) = (S::of(GELU_C), S::of(GELU_A));
        let half = S::of(0.5);
        let out = self
            .values(a)
            .iter()
            .map(|&x| half * x * (S::one() + (k * (x + q * x * x * x)).tanh()))
            .collect();
        self.flops += 8 * (r * c) as u64;
        let rg = self.rg(a);
        self.push("gelu", out, r, c, rg, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        check_finite(self.values(a), "softmax input")?;
        let mut out = vec![S::zero(); r * c];
        for (xs, os) in self.values(a).chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(xs, os);
        }
        self.flops += 3 * (r * c) as u64;
        let rg = self.rg(a);
        self.push("softmax", out, r, c, rg, Op::Softmax(a))
    }

    /// Row-wise layer normalisation with learned gain and bias (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(dim(format!("layer_norm params for width {c}")));
        }
        let inv_c = S::one() / S::of(c as f64);
        let eps = S::of(LN_EPS);
        let mut xhat = vec![S::zero(); r * c];
        let mut rstd = vec![S::zero(); r];
        let mut out = vec![S::zero(); r * c];
        let g = self.values(gain);
        let b = self.values(bias);
        for (i, xs) in self.values(x).chunks(c).enumerate() {
            let mut mean = S::zero();
            for &v in xs {
                mean += v;
            }
            mean *= inv_c;
            let mut var = S::zero();
            for &v in xs {
                var += (v - mean) * (v - mean);
            }
            var *= inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (xs[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.flops += 8 * (r * c) as u64;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            out,
            r,
            c,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`. Input rows hold `[q | k | v]` (width `3·d`); output width `d`.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (r, c3) = self.shape(qkv);
        if r != batch * seq || c3 % 3 != 0 || (c3 / 3) % heads != 0 {
            return Err(dim(format!(
                "attention input {r}x{c3} for batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let d = c3 / 3;
        let hd = d / heads;
        let scale = S::one() / S::of(hd as f64).sqrt();
        let src = self.values(qkv);
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); r * d];
        let mut scores = vec![S::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let q = &src[(b * seq + t) * c3 + h * hd..][..hd];
                    for (s, sc) in scores.iter_mut().enumerate().take(t + 1) {
                        let k = &src[(b * seq + s) * c3 + d + h * hd..][..hd];
                        let mut acc = S::zero();
                        for (&x, &y) in q.iter().zip(k) {
                            acc += x * y;
                        }
                        *sc = acc * scale;
                    }
                    let p = &mut probs[pbase + t * seq..][..t + 1];
                    softmax_row(&scores[..t + 1], p);
                    let o = &mut out[(b * seq + t) * d + h * hd..][..hd];
                    for (s, &w) in p.iter().enumerate() {
                        let v = &src[(b * seq + s) * c3 + 2 * d + h * hd..][..hd];
                        for (ov, &vv) in o.iter_mut().zip(v) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        self.flops += (batch * heads * seq * (seq + 1) * 2 * hd) as u64;
        let rg = self.rg(qkv);
        self.push(
            "attention",
            out,
            r,
            d,
            rg,
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
        )
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::Index(format!("row {bad} of a {rows}-row table")));
        }
        let t = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i as usize * c..(i as usize + 1) * c]);
        }
        let rg = self.rg(table);
        self.push(
            "gather",
            out,
            ids.len(),
            c,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`, in nats.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (n, v) = self.shape(logits);
        if targets.len() != n {
            return Err(dim(format!("{} targets for {n} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Index(format!("target {bad} outside vocabulary of {v}")));
        }
        let x = self.values(logits);
        let mut probs = vec![S::zero(); n * v];
        let mut total = S::zero();
        for (i, (row, &t)) in x.chunks(v).zip(targets).enumerate() {
            let lse = log_sum_exp(row);
            total += lse - row[t as usize];
            for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let loss = total / S::of(n as f64);
        self.flops += 4 * (n * v) as u64;
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![loss],
            1,
            1,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &v in self.values(a) {
            acc += v;
        }
        self.flops += self.values(a).len() as u64;
        let rg = self.rg(a);
        self.push("sum", vec![acc], 1, 1, rg, Op::Sum(a))
    }

    /// Reverse sweep from `root`, seeded with ones. Returns per-node gradients;
    /// read them with [`Gradients::get`].
    pub fn backward(&self, root: Var) -> Gradients<S> {
        let mut grads: Vec<Option<Vec<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one(); self.nodes[root.0].value.len()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(m, n, k, g, self.values(*b), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(m, k, n, self.values(*a), g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nn(m, n, k, g, self.values(*b), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(m, n, k, g, self.values(*a), gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for gs in g.chunks(cols) {
                        add_into(gr, gs);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(self.values(*b)) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(self.values(*a)) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * *s;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(self.values(*a)) {
                        if x > S::zero() {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let (k, q) = (S::of(GELU_C), S::of(GELU_A));
                    let half = S::of(0.5);
                    let three = S::of(3.0);
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(self.values(*a)) {
                        let th = (k * (x + q * x * x * x)).tanh();
                        let d = half * (S::one() + th)
                            + half * x * (S::one() - th * th) * k * (S::one() + three * q * x * x);
                        *o += gv * d;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gs, ys), os) in g.chunks(cols).zip(node.value.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let mut dot = S::zero();
                        for (&gv, &y) in gs.iter().zip(ys) {
                            dot += gv * y;
                        }
                        for ((o, &gv), &y) in os.iter_mut().zip(gs).zip(ys) {
                            *o += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = cols;
                if let Some(gg) = self.acc(grads, *gain) {
                    for (gs, hs) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &gv), &h) in gg.iter_mut().zip(gs).zip(hs) {
                            *o += gv * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for gs in g.chunks(c) {
                        add_into(gb, gs);
                    }
                }
                let gain_v = self.values(*gain);
                if let Some(gx) = self.acc(grads, *x) {
                    let inv_c = S::one() / S::of(c as f64);
                    let mut dh = vec![S::zero(); c];
                    for i in 0..rows {
                        let gs = &g[i * c..(i + 1) * c];
                        let hs = &xhat[i * c..(i + 1) * c];
                        let mut mean_dh = S::zero();
                        let mut mean_dh_h = S::zero();
                        for j in 0..c {
                            dh[j] = gs[j] * gain_v[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hs[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        let out = &mut gx[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[i] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CausalAttention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let Some(gq) = self.acc(grads, *qkv) else { return };
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = cols;
                let c3 = 3 * d;
                let hd = d / heads;
                let scale = S::one() / S::of(hd as f64).sqrt();
                let src = self.values(*qkv);
                let mut dp = vec![S::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for t in 0..seq {
                            let go = &g[(b * seq + t) * d + h * hd..][..hd];
                            let p = &probs[pbase + t * seq..][..t + 1];
                            let mut dot = S::zero();
                            for s in 0..=t {
                                let v = &src[(b * seq + s) * c3 + 2 * d + h * hd..][..hd];
                                let mut acc = S::zero();
                                for (&x, &y) in go.iter().zip(v) {
                                    acc += x * y;
                                }
                                dp[s] = acc;
                                dot += acc * p[s];
                            }
                            let qoff = (b * seq + t) * c3 + h * hd;
                            for s in 0..=t {
                                // value gradient
                                let voff = (b * seq + s) * c3 + 2 * d + h * hd;
                                for j in 0..hd {
                                    gq[voff + j] += p[s] * go[j];
                                }
                                let ds = p[s] * (dp[s] - dot) * scale;
                                let koff = (b * seq + s) * c3 + d + h * hd;
                                for j in 0..hd {
                                    gq[qoff + j] += ds * src[koff + j];
                                    gq[koff + j] += ds * src[qoff + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.acc(grads, *table) {
                    for (gs, &i) in g.chunks(cols).zip(ids) {
                        add_into(&mut gt[i as usize * cols..(i as usize + 1) * cols], gs);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    let (n, v) = self.shape(*logits);
                    let w = g[0] / S::of(n as f64);
                    for (i, &t) in targets.iter().enumerate() {
                        let ps = &probs[i * v..(i + 1) * v];
                        let os = &mut gl[i * v..(i + 1) * v];
                        for (o, &p) in os.iter_mut().zip(ps) {
                            *o += w * p;
                        }
                        os[t as usize] -= w;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`; `None` when `v` did not
    /// require gradients or did not influence the root.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
