use super::{ArError, ArModel};
use crate::nn::LN_EPS;
use crate::numerics::{gelu_fwd, gemm_into, Float, MatRef, Tensor};

/// Incremental decoding with a key/value cache, outside the autodiff tape.
///
/// All sequences in the batch advance one position per [`Decoder::step`].
pub struct Decoder<'a, T: Float> {
    model: &'a ArModel<T>,
    batch: usize,
    len: usize,
    /// Per layer, `[batch][pos * dim]` keys and values.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    pad: Vec<Vec<bool>>,
}

impl<'a, T: Float> Decoder<'a, T> {
    pub fn new(model: &'a ArModel<T>, batch: usize) -> Self {
        let depth = model.config.depth;
        Decoder {
            model,
            batch,
            len: 0,
            keys: vec![vec![Vec::new(); batch]; depth],
            values: vec![vec![Vec::new(); batch]; depth],
            pad: vec![Vec::new(); batch],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn param(&self, name: &str) -> Result<&Tensor<T>, ArError> {
        Ok(self.model.params.get(name)?)
    }

    /// `x [rows, in] W [in, out] + b`.
    fn affine(&self, x: &[T], rows: usize, name: &str) -> Result<Vec<T>, ArError> {
        let w = self.param(&format!("{name}.w"))?;
        let b = self.param(&format!("{name}.b"))?;
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![T::zero(); rows * fout];
        gemm_into(MatRef::row_major(x, rows, fin), MatRef::row_major(w.data(), fin, fout), &mut out, fout, 1, false);
        for r in 0..rows {
            for (o, &bb) in out[r * fout..(r + 1) * fout].iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        Ok(out)
    }

    fn layer_norm(&self, x: &[T], name: &str) -> Result<Vec<T>, ArError> {
        let g = self.param(&format!("{name}.g"))?.data();
        let b = self.param(&format!("{name}.b"))?.data();
        let c = g.len();
        let cn = T::of(c as f64);
        let eps = T::of(LN_EPS);
        let mut out = vec![T::zero(); x.len()];
        for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..c {
                o[j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        Ok(out)
    }

    /// Feeds one token per sequence and returns `[batch, |V|]` next-token logits.
    /// `pad[b]` marks the fed token as padding (hidden from later queries).
    pub fn step(&mut self, ids: &[u32], pad: &[bool]) -> Result<Tensor<T>, ArError> {
        let cfg = self.model.config;
        let (bsz, d, heads) = (self.batch, cfg.dim, cfg.heads);
        if ids.len() != bsz || pad.len() != bsz {
            return Err(ArError::Shape(format!("step needs {bsz} ids and pad flags")));
        }
        if self.len >= cfg.max_len {
            return Err(ArError::TooLong { len: self.len + 1, max: cfg.max_len });
        }
        self.model.check_ids(ids)?;
        let tok = self.param("tok_emb")?.data();
        let pos = self.param("pos_emb")?.row(self.len);
        let mut x = Vec::with_capacity(bsz * d);
        for &id in ids {
            let row = &tok[id as usize * d..(id as usize + 1) * d];
            x.extend(row.iter().zip(pos).map(|(&a, &p)| a + p));
        }
        for (b, &p) in pad.iter().enumerate() {
            self.pad[b].push(p);
        }
        let t = self.len + 1;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for l in 0..cfg.depth {
            let pre = format!("b{l}");
            let n = self.layer_norm(&x, &format!("{pre}.ln1"))?;
            let q = self.affine(&n, bsz, &format!("{pre}.attn.q"))?;
            let k = self.affine(&n, bsz, &format!("{pre}.attn.k"))?;
            let v = self.affine(&n, bsz, &format!("{pre}.attn.v"))?;
            let mut ctx = vec![T::zero(); bsz * d];
            for b in 0..bsz {
                self.keys[l][b].extend_from_slice(&k[b * d..(b + 1) * d]);
                self.values[l][b].extend_from_slice(&v[b * d..(b + 1) * d]);
                let (kc, vc, mask) = (&self.keys[l][b], &self.values[l][b], &self.pad[b]);
                for h in 0..heads {
                    let qh = &q[b * d + h * dh..b * d + (h + 1) * dh];
                    let mut scores = vec![T::neg_infinity(); t];
                    let mut mx = T::neg_infinity();
                    for j in (0..t).filter(|&j| !mask[j]) {
                        let kh = &kc[j * d + h * dh..j * d + (h + 1) * dh];
                        let s = qh.iter().zip(kh).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[j] = s;
                        mx = mx.max(s);
                    }
                    if mx == T::neg_infinity() {
                        continue;
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = if *s == T::neg_infinity() { T::zero() } else { (*s - mx).exp() };
                        z += *s;
                    }
                    let out = &mut ctx[b * d + h * dh..b * d + (h + 1) * dh];
                    for (j, &w) in scores.iter().enumerate().filter(|(_, &w)| w != T::zero()) {
                        let vh = &vc[j * d + h * dh..j * d + (h + 1) * dh];
                        for (o, &vv) in out.iter_mut().zip(vh) {
                            *o += w / z * vv;
                        }
                    }
                }
            }
            let attn = self.affine(&ctx, bsz, &format!("{pre}.attn.o"))?;
            x.iter_mut().zip(&attn).for_each(|(a, &o)| *a += o);
            let n = self.layer_norm(&x, &format!("{pre}.ln2"))?;
            let mut m = self.affine(&n, bsz, &format!("{pre}.mlp.fc"))?;
            m.iter_mut().for_each(|v| *v = gelu_fwd(*v));
            let m = self.affine(&m, bsz, &format!("{pre}.mlp.proj"))?;
            x.iter_mut().zip(&m).for_each(|(a, &o)| *a += o);
        }
        self.len = t;
        let n = self.layer_norm(&x, "ln_f")?;
        let logits = self.affine(&n, bsz, "head")?;
        Ok(Tensor::new(&[bsz, cfg.vocab.len()], logits)?)
    }
}
