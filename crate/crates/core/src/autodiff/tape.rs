use rand::Rng;

use super::{gemm, AutodiffError, Result, Scalar, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Gelu { a: Var },
    Softmax { a: Var },
    MaskKeys { a: Var, key_mask: Vec<u8> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, ids: Vec<u32> },
    Dropout { a: Var, mask: Vec<T> },
    SplitHeads { a: Var, heads: usize },
    MergeHeads { a: Var, heads: usize },
    Gather { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<u32>, mask: Vec<u8>, probs: Vec<T>, count: usize },
    Sum { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::MaskKeys { .. } => "mask_keys",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order; gradients flow back in exact
/// reverse order and accumulate from every consumer.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Scalar> Tape<T> {
    /// Finite checks default to on for `f64` and off for `f32`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), check_finite: T::CHECK_FINITE }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Takes the gradient buffer out of the tape (zeros if none flowed).
    pub fn take_grad(&mut self, v: Var) -> Vec<T> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !matches!(op, Op::MaskKeys { .. }) && value.data().iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a · b` where `a` is `[.., M, K]` and `b` is either a shared `[K, N]`
    /// matrix or a batch `[.., K, N]` with the same leading dims as `a`.
    /// With `trans_b` the last two dims of `b` are read as `[N, K]`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let shape_err = || AutodiffError::Shape { op: "matmul", detail: format!("{ash:?} x {bsh:?} (trans_b={trans_b})") };
        if ash.is_empty() || bsh.len() < 2 {
            return Err(shape_err());
        }
        let k = ash[ash.len() - 1];
        let (kb, n) = {
            let (r, c) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            if trans_b { (c, r) } else { (r, c) }
        };
        if k != kb {
            return Err(shape_err());
        }
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = Tensor::zeros(&out_shape);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        if bsh.len() == 2 {
            let rows = av.len() / k.max(1);
            gemm(false, trans_b, rows, k, n, av, bv, out.data_mut(), false);
        } else {
            if ash.len() != bsh.len() || ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(shape_err());
            }
            let m = ash[ash.len() - 2];
            let batch: usize = ash[..ash.len() - 2].iter().product();
            let od = out.data_mut();
            for i in 0..batch {
                gemm(
                    false,
                    trans_b,
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut od[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.push(out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (broadcast over the
    /// leading dims of `a`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(AutodiffError::Shape { op: "add", detail: format!("{ash:?} + {bsh:?}") });
        }
        let mut out = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.data();
        let bn = bv.len().max(1);
        for chunk in out.data_mut().chunks_mut(bn) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Element-wise product of two same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape {
                op: "mul",
                detail: format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= x;
        }
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            *o *= factor;
        }
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(1.0 / SQRT_2);
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data_mut() {
            let x = *o;
            *o = half * x * (T::one() + (x * inv_sqrt2).erf());
        }
        self.push(out, Op::Gelu { a }, &[a])
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let mut out = self.nodes[a.0].value.clone();
        let c = out.last_dim().max(1);
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Sets attention scores `[B, H, Lq, Lk]` to −∞ wherever
    /// `key_mask[b * Lk + j] == 0`.
    pub fn mask_keys(&mut self, a: Var, key_mask: &[u8]) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 4 || key_mask.len() != sh[0] * sh[3] {
            return Err(AutodiffError::Shape {
                op: "mask_keys",
                detail: format!("scores {sh:?}, mask len {}", key_mask.len()),
            });
        }
        let (h, lq, lk) = (sh[1], sh[2], sh[3]);
        let mut out = self.nodes[a.0].value.clone();
        let ninf = T::neg_infinity();
        for (r, row) in out.data_mut().chunks_mut(lk).enumerate() {
            let b = r / (h * lq);
            let m = &key_mask[b * lk..(b + 1) * lk];
            for (o, &keep) in row.iter_mut().zip(m) {
                if keep == 0 {
                    *o = ninf;
                }
            }
        }
        self.push(out, Op::MaskKeys { a, key_mask: key_mask.to_vec() }, &[a])
    }

    /// Layer normalisation over the last dimension with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.nodes[x.0].value.last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(AutodiffError::Shape {
                op: "layer_norm",
                detail: format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bta = self.nodes[beta.0].value.data();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(self.shape(x));
        let od = out.data_mut();
        let dn = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                od[r * d + j] = g[j] * xh + bta[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, shaped `prefix ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], prefix: &[usize]) -> Result<Var> {
        let tsh = self.shape(table).to_vec();
        if tsh.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(AutodiffError::Shape {
                op: "embedding",
                detail: format!("table {tsh:?}, {} ids, prefix {prefix:?}", ids.len()),
            });
        }
        let (rows, d) = (tsh[0], tsh[1]);
        let mut shape = prefix.to_vec();
        shape.push(d);
        let mut out = Tensor::zeros(&shape);
        let tv = self.nodes[table.0].value.data();
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: id, rows });
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Inverted dropout. `p == 0` returns `a` unchanged without recording.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let mut out = self.nodes[a.0].value.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { a, mask }, &[a])
    }

    /// `[B, L, H*dh] -> [B, H, L, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || heads == 0 || !sh[2].is_multiple_of(heads) {
            return Err(AutodiffError::Shape { op: "split_heads", detail: format!("{sh:?} into {heads} heads") });
        }
        let (b, l, d) = (sh[0], sh[1], sh[2]);
        let dh = d / heads;
        let mut out = Tensor::zeros(&[b, heads, l, dh]);
        let src = self.nodes[a.0].value.data();
        let od = out.data_mut();
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let s = (bi * l + li) * d + h * dh;
                    let t = ((bi * heads + h) * l + li) * dh;
                    od[t..t + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(out, Op::SplitHeads { a, heads }, &[a])
    }

    /// `[B, H, L, dh] -> [B, L, H*dh]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 4 {
            return Err(AutodiffError::Shape { op: "merge_heads", detail: format!("{sh:?}") });
        }
        let (b, heads, l, dh) = (sh[0], sh[1], sh[2], sh[3]);
        let d = heads * dh;
        let mut out = Tensor::zeros(&[b, l, d]);
        let src = self.nodes[a.0].value.data();
        let od = out.data_mut();
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let t = (bi * l + li) * d + h * dh;
                    let s = ((bi * heads + h) * l + li) * dh;
                    od[t..t + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        self.push(out, Op::MergeHeads { a, heads }, &[a])
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`; result `[n, last_dim]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let d = self.nodes[a.0].value.last_dim();
        let total = self.nodes[a.0].value.numel() / d.max(1);
        let mut out = Tensor::zeros(&[rows.len(), d]);
        let src = self.nodes[a.0].value.data();
        for (i, &r) in rows.iter().enumerate() {
            if r >= total {
                return Err(AutodiffError::IndexOutOfRange { index: r, rows: total });
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        self.push(out, Op::Gather { a, rows: rows.to_vec() }, &[a])
    }

    /// Hidden state at sequence position `pos` for every batch row:
    /// `[B, L, d] -> [B, d]`.
    pub fn select_position(&mut self, a: Var, pos: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 || pos >= sh[1] {
            return Err(AutodiffError::Shape { op: "select_position", detail: format!("{sh:?} at {pos}") });
        }
        let rows: Vec<usize> = (0..sh[0]).map(|b| b * sh[1] + pos).collect();
        self.gather_rows(a, &rows)
    }

    /// Mean negative log-likelihood over positions with a nonzero mask:
    /// `-(1/M) Σ log softmax(logits)[label]`.
    pub fn cross_entropy_masked(&mut self, logits: Var, labels: &[u32], mask: &[u8]) -> Result<Var> {
        let c = self.nodes[logits.0].value.last_dim();
        let rows = self.nodes[logits.0].value.numel() / c.max(1);
        if labels.len() != rows || mask.len() != rows {
            return Err(AutodiffError::Shape {
                op: "cross_entropy",
                detail: format!("{rows} rows, {} labels, {} mask entries", labels.len(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(AutodiffError::EmptyLossMask);
        }
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if mask[r] == 0 {
                continue;
            }
            let label = labels[r];
            if label as usize >= c {
                return Err(AutodiffError::LabelOutOfRange { label, classes: c });
            }
            let row = &lv[r * c..(r + 1) * c];
            let p = &mut probs[r * c..(r + 1) * c];
            p.copy_from_slice(row);
            let lse = softmax_in_place(p);
            total += (lse - row[label as usize]).to_f64();
        }
        let loss = Tensor::scalar(T::from_f64(total / count as f64));
        self.push(
            loss,
            Op::CrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Populates gradients of every node `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lsh = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lsh.to_vec()));
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad || matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Stable in-place softmax; returns log-sum-exp of the original row.
fn softmax_in_place<T: Scalar>(row: &mut [T]) -> T {
    let mut mx = T::neg_infinity();
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
    mx + s.ln()
}

fn grad_buf<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            let ash = nodes[a.0].value.shape();
            let bsh = nodes[b.0].value.shape();
            let k = ash[ash.len() - 1];
            let n = node.value.last_dim();
            if bsh.len() == 2 {
                let rows = av.len() / k.max(1);
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    gemm(false, !trans_b, rows, n, k, g, bv, ga, true);
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    if *trans_b {
                        gemm(true, false, n, rows, k, g, av, gb, true);
                    } else {
                        gemm(true, false, k, rows, n, av, g, gb, true);
                    }
                }
            } else {
                let m = ash[ash.len() - 2];
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let (sa, sb, sc) = (m * k, k * n, m * n);
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    for t in 0..batch {
                        gemm(
                            false,
                            !trans_b,
                            m,
                            n,
                            k,
                            &g[t * sc..(t + 1) * sc],
                            &bv[t * sb..(t + 1) * sb],
                            &mut ga[t * sa..(t + 1) * sa],
                            true,
                        );
                    }
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    for t in 0..batch {
                        let gs = &g[t * sc..(t + 1) * sc];
                        let as_ = &av[t * sa..(t + 1) * sa];
                        let out = &mut gb[t * sb..(t + 1) * sb];
                        if *trans_b {
                            gemm(true, false, n, m, k, gs, as_, out, true);
                        } else {
                            gemm(true, false, k, m, n, as_, gs, out, true);
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let bn = gb.len().max(1);
                for chunk in g.chunks(bn) {
                    for (x, &y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, &y), &o) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * o;
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for ((x, &y), &o) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * o;
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *factor;
                }
            }
        }
        Op::Gelu { a } => {
            let av = nodes[a.0].value.data();
            let half = T::from_f64(0.5);
            let inv_sqrt2 = T::from_f64(1.0 / SQRT_2);
            let c = T::from_f64(INV_SQRT_2PI);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                    let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = c * (-(half * v * v)).exp();
                    *x += y * (cdf + v * pdf);
                }
            }
        }
        Op::Softmax { a } => {
            let yv = node.value.data();
            let c = node.value.last_dim().max(1);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((gr, yr), out) in g.chunks(c).zip(yv.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                    for ((o, &gy), &y) in out.iter_mut().zip(gr).zip(yr) {
                        *o += y * (gy - dot);
                    }
                }
            }
        }
        Op::MaskKeys { a, key_mask } => {
            let sh = node.value.shape();
            let (h, lq, lk) = (sh[1], sh[2], sh[3]);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (r, (out, gr)) in ga.chunks_mut(lk).zip(g.chunks(lk)).enumerate() {
                    let b = r / (h * lq);
                    let m = &key_mask[b * lk..(b + 1) * lk];
                    for ((o, &gy), &keep) in out.iter_mut().zip(gr).zip(m) {
                        if keep != 0 {
                            *o += gy;
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let d = node.value.last_dim();
            let gv = nodes[gamma.0].value.data();
            if let Some(gb) = grad_buf(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    for (o, &y) in gb.iter_mut().zip(gr) {
                        *o += y;
                    }
                }
            }
            if let Some(gg) = grad_buf(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &y), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                        *o += y * xh;
                    }
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let dn = T::from_f64(d as f64);
                for (r, ((gr, xr), out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                    }
                    let scale = inv_std[r] / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        out[j] += scale * (dn * dxh - s1 - xr[j] * s2);
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.last_dim();
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    for (o, &y) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += y;
                    }
                }
            }
        }
        Op::Dropout { a, mask } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for ((o, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *o += y * m;
                }
            }
        }
        Op::SplitHeads { a, heads } => {
            let sh = node.value.shape();
            let (b, l, dh) = (sh[0], sh[2], sh[3]);
            let d = heads * dh;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let s = (bi * l + li) * d + h * dh;
                            let t = ((bi * heads + h) * l + li) * dh;
                            for e in 0..dh {
                                ga[s + e] += g[t + e];
                            }
                        }
                    }
                }
            }
        }
        Op::MergeHeads { a, heads } => {
            let sh = nodes[a.0].value.shape();
            let (b, l, dh) = (sh[0], sh[2], sh[3]);
            let d = heads * dh;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for bi in 0..b {
                    for li in 0..l {
                        for h in 0..*heads {
                            let t = (bi * l + li) * d + h * dh;
                            let s = ((bi * heads + h) * l + li) * dh;
                            for e in 0..dh {
                                ga[s + e] += g[t + e];
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { a, rows } => {
            let d = node.value.last_dim();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &y) in ga[r * d..(r + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o += y;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, mask, probs, count } => {
            let c = nodes[logits.0].value.last_dim();
            let scale = g[0] / T::from_f64(*count as f64);
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (r, &m) in mask.iter().enumerate() {
                    if m == 0 {
                        continue;
                    }
                    let out = &mut gl[r * c..(r + 1) * c];
                    for (o, &p) in out.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                        *o += scale * p;
                    }
                    out[labels[r] as usize] -= scale;
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
        }
    }
}
