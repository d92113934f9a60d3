//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its nodes in creation order,
//! which is already a topological order, so [`Graph::backward`] is a single
//! reverse sweep. Reductions run sequentially in row-major order, which keeps
//! results bit-reproducible on a single thread.

use super::float::{gemm_into, MatRef};
use super::{Float, NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    Gelu { x: Var, th: Vec<T> },
    Exp(Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Gather { table: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, denom: T },
    LogSumExp { x: Var, probs: Vec<T> },
    WeightedMean { x: Var, weights: Vec<T>, denom: T },
    Sum(Var),
    Mean(Var),
    Cosine { a: Var, b: Var, na: Vec<T>, nb: Vec<T> },
    Normalize { x: Var, norms: Vec<T> },
    Patchify { x: Var, dims: [usize; 5] },
    Unpatchify { x: Var, dims: [usize; 5] },
    QuantizeSt { x: Var },
    SwapAxes12 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    ConcatCols { a: Var, b: Var },
    MeanRows { x: Var, groups: usize, rows: usize },
    MaxPoolCols { x: Var, argmax: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Recording of a computation over tensors.
#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err<T>(op: &'static str, l: &[usize], r: &[usize]) -> Result<T> {
    Err(NumericsError::ShapeMismatch { op, left: l.to_vec(), right: r.to_vec() })
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Stops gradient flow: same value, no backward edge.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return shape_err(op, s, &[0, 0]);
        }
        Ok((s[0], s[1]))
    }

    /// 2-D matrix product `op(a) op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let av = MatRef::stored(self.value(a).data(), ar, ac, ta);
            let bv = MatRef::stored(self.value(b).data(), br, bc, tb);
            gemm_into(av, bv, &mut out, n, 1, false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product over 3-D tensors `[batch, rows, cols]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return shape_err("bmm", &sa, &sb);
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return shape_err("bmm", &sa, &sb);
        }
        let batch = sa[0];
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
            for i in 0..batch {
                let av = MatRef::stored(&ad[i * asz..(i + 1) * asz], sa[1], sa[2], ta);
                let bv = MatRef::stored(&bd[i * bsz..(i + 1) * bsz], sb[1], sb[2], tb);
                gemm_into(av, bv, &mut out[i * m * n..(i + 1) * m * n], n, 1, false);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, ta, tb }, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a row vector `bias` (length = last dim of `x`) to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(bias).numel() != c {
            return shape_err("add_row", self.shape(x), self.shape(bias));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v + b[i % c]).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Multiplies `x` by the one-element node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("scale_by", self.shape(x), self.shape(s));
        }
        let c = self.value(s).item();
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy { x, s }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let th: Vec<T> = xv.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::of(0.5);
        let data = xv.data().iter().zip(&th).map(|(&v, &t)| half * v * (T::one() + t)).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x, th }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false, None)
    }

    /// Attention softmax over scores `[batch * heads, T, T]`.
    ///
    /// `causal` hides keys after the query; `key_pad` (`[batch * T]`, true = padding)
    /// hides padded keys. Rows with no visible key produce zeros.
    pub fn attention_softmax(&mut self, x: Var, causal: bool, key_pad: Option<(&[bool], usize)>) -> Result<Var> {
        self.softmax_impl(x, causal, key_pad.map(|(m, h)| (m.to_vec(), h)))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool, key_pad: Option<(Vec<bool>, usize)>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let rows_per_mat = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if causal && rows_per_mat != cols {
            return shape_err("attention_softmax", &shape, &[rows_per_mat, rows_per_mat]);
        }
        if let Some((mask, heads)) = &key_pad {
            let mats = self.value(x).numel() / (rows_per_mat * cols).max(1);
            if shape.len() != 3 || *heads == 0 || mats % heads != 0 || mask.len() != (mats / heads) * cols {
                return shape_err("attention_softmax", &shape, &[mask.len()]);
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let nrows = if cols == 0 { 0 } else { xv.len() / cols };
        for r in 0..nrows {
            let mat = r / rows_per_mat;
            let q = r % rows_per_mat;
            let visible = |j: usize| -> bool {
                if causal && j > q {
                    return false;
                }
                if let Some((mask, heads)) = &key_pad {
                    let b = mat / heads;
                    if mask[b * cols + j] {
                        return false;
                    }
                }
                true
            };
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if visible(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for j in 0..cols {
                if visible(j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    sum += e;
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("layer_norm", self.shape(x), self.shape(gamma));
        }
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = if c == 0 { 0 } else { xv.len() / c };
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        let cn = T::of(c as f64);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, rstd }, rg))
    }

    /// Gathers rows of a `[n, d]` table (embedding lookup / row selection).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return shape_err("gather_rows", &s, &[0, 0]);
        }
        let (n, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: i, bound: n });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[idx.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(t, Op::Gather { table, idx: idx.to_vec() }, rg))
    }

    /// Weighted mean cross-entropy of `[n, v]` logits against integer targets.
    ///
    /// Positions with weight 0 are excluded. If every weight is 0 the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != weights.len() {
            return shape_err("cross_entropy", &s, &[targets.len(), weights.len()]);
        }
        let (n, v) = (s[0], s[1]);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut denom = T::zero();
        for i in 0..n {
            let t = targets[i];
            if t >= v {
                return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let (lse, p) = log_softmax_row(row);
            probs[i * v..(i + 1) * v].copy_from_slice(&p);
            if weights[i] != T::zero() {
                total += weights[i] * (lse - row[t]);
                denom += weights[i];
            }
        }
        let loss = if denom > T::zero() { total / denom } else { T::zero() };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, denom },
            rg,
        ))
    }

    /// Row-wise `log sum exp` of a `[n, v]` matrix, giving `[n]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("logsumexp_rows", &s, &[0, 0]);
        }
        let (n, v) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut probs = vec![T::zero(); n * v];
        for i in 0..n {
            let (lse, p) = log_softmax_row(&xv[i * v..(i + 1) * v]);
            out.push(lse);
            probs[i * v..(i + 1) * v].copy_from_slice(&p);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n], out)?, Op::LogSumExp { x, probs }, rg))
    }

    /// `sum(w * x) / sum(w)` over a flat node with constant weights.
    pub fn weighted_mean(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        if self.value(x).numel() != weights.len() {
            return shape_err("weighted_mean", self.shape(x), &[weights.len()]);
        }
        let denom: T = weights.iter().copied().sum();
        let num: T = self.value(x).data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let v = if denom != T::zero() { num / denom } else { T::zero() };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::WeightedMean { x, weights: weights.to_vec(), denom }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).numel().max(1) as f64);
        let v: T = self.value(x).data().iter().copied().sum::<T>() / n;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::Mean(x), rg)
    }

    /// Row-wise cosine similarity of two `[n, d]` matrices, giving `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa != self.shape(b) {
            return shape_err("cosine_rows", &sa, self.shape(b));
        }
        let (n, d) = (sa[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n);
        let mut na = Vec::with_capacity(n);
        let mut nb = Vec::with_capacity(n);
        let eps = T::of(1e-12);
        for i in 0..n {
            let x = &av[i * d..(i + 1) * d];
            let y = &bv[i * d..(i + 1) * d];
            let nx = norm(x).max(eps);
            let ny = norm(y).max(eps);
            out.push(dot(x, y) / (nx * ny));
            na.push(nx);
            nb.push(ny);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n], out)?, Op::Cosine { a, b, na, nb }, rg))
    }

    /// L2-normalizes each row of a `[n, d]` matrix.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err("normalize_rows", &s, &[0, 0]);
        }
        let (n, d) = (s[0], s[1]);
        let xv = self.value(x).data();
        let eps = T::of(1e-12);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let r = &xv[i * d..(i + 1) * d];
            let nr = norm(r).max(eps);
            norms.push(nr);
            out.extend(r.iter().map(|&v| v / nr));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&s, out)?, Op::Normalize { x, norms }, rg))
    }

    /// `[b, h, w, c]` images to `[b * (h/p) * (w/p), p * p * c]` patches in raster order.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || p == 0 || s[1] % p != 0 || s[2] % p != 0 {
            return shape_err("patchify", &s, &[p, p]);
        }
        let dims = [s[0], s[1], s[2], s[3], p];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (o, i) in patch_index_pairs(dims) {
            out[o] = src[i];
        }
        let (gh, gw) = (s[1] / p, s[2] / p);
        let t = Tensor::new(&[s[0] * gh * gw, p * p * s[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Patchify { x, dims }, rg))
    }

    /// Inverse of [`Graph::patchify`] for images of shape `[b, h, w, c]`.
    pub fn unpatchify(&mut self, x: Var, b: usize, h: usize, w: usize, c: usize, p: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if p == 0 || h % p != 0 || w % p != 0 || s.len() != 2 || s[0] != b * (h / p) * (w / p) || s[1] != p * p * c {
            return shape_err("unpatchify", &s, &[b, h, w, c]);
        }
        let dims = [b, h, w, c, p];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (o, i) in patch_index_pairs(dims) {
            out[i] = src[o];
        }
        let t = Tensor::new(&[b, h, w, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Unpatchify { x, dims }, rg))
    }

    /// Nearest-neighbour quantization of `[n, d]` rows against a `[k, d]` codebook.
    ///
    /// The forward value is exactly the selected code vector; the backward pass
    /// copies the incoming gradient to `x` unchanged (straight-through) and gives
    /// the codebook nothing. Ties resolve to the lowest index.
    pub fn quantize_st(&mut self, x: Var, codebook: &Tensor<T>) -> Result<(Var, Vec<usize>)> {
        let s = self.shape(x).to_vec();
        let cs = codebook.shape();
        if s.len() != 2 || cs.len() != 2 || s[1] != cs[1] || cs[0] == 0 {
            return shape_err("quantize_st", &s, cs);
        }
        let d = s[1];
        let idx = nearest_codes(self.value(x).data(), d, codebook.data());
        let mut out = Vec::with_capacity(s[0] * d);
        for &k in &idx {
            out.extend_from_slice(codebook.row(k));
        }
        let rg = self.rg(x);
        let v = self.push(Tensor::new(&s, out)?, Op::QuantizeSt { x }, rg);
        Ok((v, idx))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor (`[b, t, h, d] <-> [b, h, t, d]`).
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("swap_axes12", &s, &[0, 0, 0, 0]);
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x).data(), dims);
        let t = Tensor::new(&[s[0], s[2], s[1], s[3]], out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SwapAxes12 { x, dims }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return shape_err("concat_cols", &sa, &sb);
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, ca + cb], out)?, Op::ConcatCols { a, b }, rg))
    }

    /// Mean over axis 1 of `[groups, rows, cols]`, giving `[groups, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return shape_err("mean_rows", &s, &[0, 0, 0]);
        }
        let (g, r, c) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let rn = T::of(r as f64);
        let mut out = vec![T::zero(); g * c];
        for gi in 0..g {
            for ri in 0..r {
                let row = &xv[(gi * r + ri) * c..(gi * r + ri + 1) * c];
                for (o, &v) in out[gi * c..(gi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in &mut out[gi * c..(gi + 1) * c] {
                *o /= rn;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[g, c], out)?, Op::MeanRows { x, groups: g, rows: r }, rg))
    }

    /// Max over non-overlapping column windows of `[n, c]`, giving `[n, c / window]`.
    pub fn max_pool_cols(&mut self, x: Var, window: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || window == 0 || s[1] % window != 0 {
            return shape_err("max_pool_cols", &s, &[window]);
        }
        let (n, c) = (s[0], s[1]);
        let oc = c / window;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * oc);
        let mut argmax = Vec::with_capacity(n * oc);
        for i in 0..n {
            for o in 0..oc {
                let base = i * c + o * window;
                let mut best = base;
                for j in base + 1..base + window {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, oc], out)?, Op::MaxPoolCols { x, argmax }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err("backward", self.shape(loss), &[1]);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let dc = MatRef::row_major(g, m, n);
                if self.rg(*a) {
                    let opb = MatRef::stored(self.value(*b).data(), sb[0], sb[1], *tb);
                    let (ar, ac) = (sa[0], sa[1]);
                    let buf = acc(grads, *a, ar * ac);
                    // d op(A) = dC op(B)^T, written through op's strides
                    let (rs, cs) = if *ta { (1, ac) } else { (ac, 1) };
                    gemm_into(dc, opb.t(), buf, rs, cs, true);
                }
                if self.rg(*b) {
                    let opa = MatRef::stored(self.value(*a).data(), sa[0], sa[1], *ta);
                    let (br, bc) = (sb[0], sb[1]);
                    let buf = acc(grads, *b, br * bc);
                    let (rs, cs) = if *tb { (1, bc) } else { (bc, 1) };
                    gemm_into(opa.t(), dc, buf, rs, cs, true);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let so = node.value.shape();
                let (batch, m, n) = (so[0], so[1], so[2]);
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                if self.rg(*a) {
                    let bd = self.value(*b).data();
                    let buf = acc(grads, *a, batch * asz);
                    let (rs, cs) = if *ta { (1, sa[2]) } else { (sa[2], 1) };
                    for bi in 0..batch {
                        let dc = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let opb = MatRef::stored(&bd[bi * bsz..(bi + 1) * bsz], sb[1], sb[2], *tb);
                        gemm_into(dc, opb.t(), &mut buf[bi * asz..(bi + 1) * asz], rs, cs, true);
                    }
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data();
                    let buf = acc(grads, *b, batch * bsz);
                    let (rs, cs) = if *tb { (1, sb[2]) } else { (sb[2], 1) };
                    for bi in 0..batch {
                        let dc = MatRef::row_major(&g[bi * m * n..(bi + 1) * m * n], m, n);
                        let opa = MatRef::stored(&ad[bi * asz..(bi + 1) * asz], sa[1], sa[2], *ta);
                        gemm_into(opa.t(), dc, &mut buf[bi * bsz..(bi + 1) * bsz], rs, cs, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.rg(v) {
                        let buf = acc(grads, v, g.len());
                        for (o, &d) in buf.iter_mut().zip(g) {
                            *o += sign * d;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.rg(v) {
                        let buf = acc(grads, v, g.len());
                        for (o, &d) in buf.iter_mut().zip(g) {
                            *o += sign * d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let buf = acc(grads, *a, g.len());
                    for ((o, &d), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let buf = acc(grads, *b, g.len());
                    for ((o, &d), &x) in buf.iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if self.rg(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (o, &d) in buf.iter_mut().zip(g) {
                        *o += d;
                    }
                }
                if self.rg(*bias) {
                    let c = self.value(*bias).numel();
                    let buf = acc(grads, *bias, c);
                    for (k, &d) in g.iter().enumerate() {
                        buf[k % c] += d;
                    }
                }
            }
            Op::Scale { x, c } => {
                let buf = acc(grads, *x, g.len());
                for (o, &d) in buf.iter_mut().zip(g) {
                    *o += d * *c;
                }
            }
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).item();
                if self.rg(*x) {
                    let buf = acc(grads, *x, g.len());
                    for (o, &d) in buf.iter_mut().zip(g) {
                        *o += d * c;
                    }
                }
                if self.rg(*s) {
                    let xv = self.value(*x).data();
                    let ds: T = g.iter().zip(xv).map(|(&d, &v)| d * v).sum();
                    acc(grads, *s, 1)[0] += ds;
                }
            }
            Op::Gelu { x, th } => {
                let xv = self.value(*x).data();
                let buf = acc(grads, *x, g.len());
                for (((o, &d), &v), &t) in buf.iter_mut().zip(g).zip(xv).zip(th) {
                    *o += d * gelu_grad(v, t);
                }
            }
            Op::Exp(x) => {
                let buf = acc(grads, *x, g.len());
                for ((o, &d), &y) in buf.iter_mut().zip(g).zip(out) {
                    *o += d * y;
                }
            }
            Op::Softmax { x } => {
                let cols = node.value.last_dim();
                let buf = acc(grads, *x, g.len());
                for r in 0..(out.len() / cols.max(1)) {
                    let p = &out[r * cols..(r + 1) * cols];
                    let dp = &g[r * cols..(r + 1) * cols];
                    let inner: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        buf[r * cols + j] += p[j] * (dp[j] - inner);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let c = node.value.last_dim();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let rows = rstd.len();
                let cn = T::of(c as f64);
                let mut xhat = vec![T::zero(); c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let want_x = self.rg(*x);
                let mut dx_all = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let mean = row.iter().copied().sum::<T>() / cn;
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd[r];
                    }
                    let dy = &g[r * c..(r + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        dgamma[j] += dy[j] * xhat[j];
                        dbeta[j] += dy[j];
                        let dxh = dy[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xhat[j];
                    }
                    if want_x {
                        m1 /= cn;
                        m2 /= cn;
                        for j in 0..c {
                            let dxh = dy[j] * gv[j];
                            dx_all[r * c + j] = rstd[r] * (dxh - m1 - xhat[j] * m2);
                        }
                    }
                }
                if want_x {
                    add_into(acc(grads, *x, xv.len()), &dx_all);
                }
                if self.rg(*gamma) {
                    add_into(acc(grads, *gamma, c), &dgamma);
                }
                if self.rg(*beta) {
                    add_into(acc(grads, *beta, c), &dbeta);
                }
            }
            Op::Gather { table, idx } => {
                let d = node.value.last_dim();
                let n = self.value(*table).numel();
                let buf = acc(grads, *table, n);
                for (r, &k) in idx.iter().enumerate() {
                    for j in 0..d {
                        buf[k * d + j] += g[r * d + j];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, denom } => {
                if *denom == T::zero() {
                    return;
                }
                let v = self.value(*logits).last_dim();
                let buf = acc(grads, *logits, probs.len());
                let g0 = g[0];
                for (i, &t) in targets.iter().enumerate() {
                    let w = weights[i];
                    if w == T::zero() {
                        continue;
                    }
                    let s = g0 * w / *denom;
                    for j in 0..v {
                        let mut d = probs[i * v + j];
                        if j == t {
                            d -= T::one();
                        }
                        buf[i * v + j] += s * d;
                    }
                }
            }
            Op::LogSumExp { x, probs } => {
                let v = self.value(*x).last_dim();
                let buf = acc(grads, *x, probs.len());
                for (i, &d) in g.iter().enumerate() {
                    for j in 0..v {
                        buf[i * v + j] += d * probs[i * v + j];
                    }
                }
            }
            Op::WeightedMean { x, weights, denom } => {
                if *denom == T::zero() {
                    return;
                }
                let buf = acc(grads, *x, weights.len());
                for (o, &w) in buf.iter_mut().zip(weights) {
                    *o += g[0] * w / *denom;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                for o in acc(grads, *x, n) {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let s = g[0] / T::of(n.max(1) as f64);
                for o in acc(grads, *x, n) {
                    *o += s;
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let d = self.value(*a).last_dim();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                for (this, other, nt, no) in [(*a, bv, na, nb), (*b, av, nb, na)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let tv = self.value(this).data();
                    let buf = acc(grads, this, tv.len());
                    for i in 0..out.len() {
                        let c = out[i];
                        let (nti, noi) = (nt[i], no[i]);
                        for j in 0..d {
                            let k = i * d + j;
                            buf[k] += g[i] * (other[k] / (nti * noi) - c * tv[k] / (nti * nti));
                        }
                    }
                }
            }
            Op::Normalize { x, norms } => {
                let d = node.value.last_dim();
                let buf = acc(grads, *x, out.len());
                for (i, &nr) in norms.iter().enumerate() {
                    let y = &out[i * d..(i + 1) * d];
                    let dy = &g[i * d..(i + 1) * d];
                    let inner: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        buf[i * d + j] += (dy[j] - y[j] * inner) / nr;
                    }
                }
            }
            Op::Patchify { x, dims } => {
                let buf = acc(grads, *x, g.len());
                for (o, i) in patch_index_pairs(*dims) {
                    buf[i] += g[o];
                }
            }
            Op::Unpatchify { x, dims } => {
                let buf = acc(grads, *x, g.len());
                for (o, i) in patch_index_pairs(*dims) {
                    buf[o] += g[i];
                }
            }
            Op::QuantizeSt { x } => {
                add_into(acc(grads, *x, g.len()), g);
            }
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                add_into(acc(grads, *x, g.len()), &back);
            }
            Op::Reshape(x) => {
                add_into(acc(grads, *x, g.len()), g);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let n = node.value.shape()[0];
                if self.rg(*a) {
                    let buf = acc(grads, *a, n * ca);
                    for i in 0..n {
                        add_into(&mut buf[i * ca..(i + 1) * ca], &g[i * (ca + cb)..i * (ca + cb) + ca]);
                    }
                }
                if self.rg(*b) {
                    let buf = acc(grads, *b, n * cb);
                    for i in 0..n {
                        add_into(&mut buf[i * cb..(i + 1) * cb], &g[i * (ca + cb) + ca..(i + 1) * (ca + cb)]);
                    }
                }
            }
            Op::MeanRows { x, groups, rows } => {
                let c = node.value.last_dim();
                let rn = T::of(*rows as f64);
                let buf = acc(grads, *x, groups * rows * c);
                for gi in 0..*groups {
                    for ri in 0..*rows {
                        for j in 0..c {
                            buf[(gi * rows + ri) * c + j] += g[gi * c + j] / rn;
                        }
                    }
                }
            }
            Op::MaxPoolCols { x, argmax } => {
                let n = self.value(*x).numel();
                let buf = acc(grads, *x, n);
                for (&k, &d) in argmax.iter().zip(g) {
                    buf[k] += d;
                }
            }
        }
    }
}

fn acc<T: Float>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm<T: Float>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Returns `(logsumexp, softmax)` of one row.
pub(crate) fn log_softmax_row<T: Float>(row: &[T]) -> (T, Vec<T>) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut p: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = p.iter().copied().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    (mx + s.ln(), p)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) (x + 0.044715 x^3))`, evaluated through one `exp`.
#[inline]
fn gelu_tanh<T: Float>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

/// GELU with the tanh approximation.
pub(crate) fn gelu_fwd<T: Float>(x: T) -> T {
    T::of(0.5) * x * (T::one() + gelu_tanh(x))
}

#[inline]
fn gelu_grad<T: Float>(x: T, th: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// Lowest-index nearest code for every `d`-wide row of `x`.
pub fn nearest_codes<T: Float>(x: &[T], d: usize, codebook: &[T]) -> Vec<usize> {
    let k = codebook.len() / d;
    x.chunks(d)
        .map(|row| {
            let mut best = 0;
            let mut best_d = T::infinity();
            for c in 0..k {
                let code = &codebook[c * d..(c + 1) * d];
                let dist: T = row.iter().zip(code).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// `(patch-major index, image index)` pairs for `[b, h, w, c]` with patch side `p`.
fn patch_index_pairs(dims: [usize; 5]) -> impl Iterator<Item = (usize, usize)> {
    let [b, h, w, c, p] = dims;
    let (gh, gw) = (h / p, w / p);
    (0..b * h * w * c).map(move |o| {
        let ch = o % c;
        let rest = o / c;
        let px = rest % p;
        let rest = rest / p;
        let py = rest % p;
        let rest = rest / p;
        let gx = rest % gw;
        let rest = rest / gw;
        let gy = rest % gh;
        let bi = rest / gh;
        let y = gy * p + py;
        let x = gx * p + px;
        (o, ((bi * h + y) * w + x) * c + ch)
    })
}

fn swap12<T: Float>(src: &[T], dims: [usize; 4]) -> Vec<T> {
    let [a, b, c, d] = dims;
    let mut out = vec![T::zero(); src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let o = ((i * c + k) * b + j) * d;
                out[o..o + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}
