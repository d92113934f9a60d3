use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TokenizerError;
use crate::image::{batch_tensor, Image};
use crate::nn::{init_linear, linear};
use crate::numerics::{collect_grads, nearest_codes, AdamW, Container, Float, Graph, ParamStore, ParamVars, Tensor, Var};

type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    /// Compression factor `c`: side of the square patch mapped to one code.
    pub patch: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub hidden: usize,
    pub beta: f64,
    /// Steps per usage epoch; unused codes are re-seeded at the end of each.
    pub reseed_interval: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig { patch: 8, code_dim: 16, codebook_size: 64, hidden: 256, beta: 0.25, reseed_interval: 100 }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(TokenizerError::Config("codebook_size must be at least 2".into()));
        }
        if self.patch == 0 || self.code_dim == 0 || self.hidden == 0 {
            return Err(TokenizerError::Config("patch, code_dim and hidden must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(TokenizerError::Config("beta must be nonnegative".into()));
        }
        if self.reseed_interval == 0 {
            return Err(TokenizerError::Config("reseed_interval must be positive".into()));
        }
        Ok(())
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * 3
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub recon_loss: f64,
    pub codebook_loss: f64,
    pub commit_loss: f64,
    pub total: f64,
    /// Codes re-seeded at this step.
    pub reseeded: usize,
}

/// Patch-MLP encoder, codebook and patch-MLP decoder.
#[derive(Clone, Debug)]
pub struct VqTokenizer<T: Float> {
    pub config: VqConfig,
    pub params: ParamStore<T>,
    usage: Vec<u64>,
    steps: u64,
}

impl<T: Float> VqTokenizer<T> {
    pub fn new<R: Rng + ?Sized>(config: VqConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (pl, h, d) = (config.patch_len(), config.hidden, config.code_dim);
        init_linear(&mut params, "enc.fc1", pl, h, (1.0 / pl as f64).sqrt(), rng);
        init_linear(&mut params, "enc.fc2", h, d, (1.0 / h as f64).sqrt(), rng);
        init_linear(&mut params, "dec.fc1", d, h, (1.0 / d as f64).sqrt(), rng);
        init_linear(&mut params, "dec.fc2", h, pl, (1.0 / h as f64).sqrt(), rng);
        params.insert("codebook", Tensor::randn(&[config.codebook_size, d], 1.0, rng));
        Ok(VqTokenizer { config, params, usage: vec![0; config.codebook_size], steps: 0 })
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.params.get("codebook").expect("codebook present")
    }

    /// Per-code assignment counts in the current epoch.
    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Grid size `(h, w)` for an image of the given size.
    pub fn grid_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let c = self.config.patch;
        if height == 0 || width == 0 || height % c != 0 || width % c != 0 {
            return Err(TokenizerError::Shape(format!("image {height}x{width} is not divisible by patch size {c}")));
        }
        Ok((height / c, width / c))
    }

    /// `[b, H, W, 3]` → `[b * h * w, d]`.
    pub fn encode_graph(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let patches = g.patchify(x, self.config.patch)?;
        let h = linear(g, p, "enc.fc1", patches)?;
        let h = g.gelu(h);
        Ok(linear(g, p, "enc.fc2", h)?)
    }

    /// `[b * h * w, d]` → `[b, H, W, 3]` (unclamped).
    pub fn decode_graph(&self, g: &mut Graph<T>, p: &ParamVars, z: Var, b: usize, height: usize, width: usize) -> Result<Var> {
        let h = linear(g, p, "dec.fc1", z)?;
        let h = g.gelu(h);
        let out = linear(g, p, "dec.fc2", h)?;
        Ok(g.unpatchify(out, b, height, width, 3, self.config.patch)?)
    }

    /// Feature grid `f = E(I)` with shape `[h, w, d]`.
    pub fn vq_encode(&self, image: &Image) -> Result<Tensor<T>> {
        let (gh, gw) = self.grid_size(image.height, image.width)?;
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let x = g.constant(batch_tensor(&[image]).map_err(|e| TokenizerError::Shape(e.to_string()))?);
        let z = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z).clone().reshape(&[gh, gw, self.config.code_dim])?)
    }

    /// Nearest-code indices (lowest index on ties) and the quantized grid.
    pub fn quantize(&self, f: &Tensor<T>) -> Result<(Vec<Vec<usize>>, Tensor<T>)> {
        let d = self.config.code_dim;
        let shape = f.shape();
        if shape.len() != 3 || shape[2] != d {
            return Err(TokenizerError::Shape(format!("feature grid must be [h, w, {d}], got {shape:?}")));
        }
        let (gh, gw) = (shape[0], shape[1]);
        let z = self.codebook().data();
        let codes = nearest_codes(f.data(), d, z);
        let mut zq = Vec::with_capacity(f.numel());
        for &k in &codes {
            zq.extend_from_slice(&z[k * d..(k + 1) * d]);
        }
        let grid = codes.chunks(gw).map(|r| r.to_vec()).collect();
        Ok((grid, Tensor::new(&[gh, gw, d], zq)?))
    }

    /// `Q(E(I))` as a code grid.
    pub fn encode_codes(&self, image: &Image) -> Result<Vec<Vec<usize>>> {
        Ok(self.quantize(&self.vq_encode(image)?)?.0)
    }

    /// Decodes a code grid to pixels, clamped to `[0, 1]`.
    pub fn vq_decode(&self, grid: &[Vec<usize>]) -> Result<Image> {
        let gh = grid.len();
        let gw = grid.first().map_or(0, |r| r.len());
        if gh == 0 || gw == 0 || grid.iter().any(|r| r.len() != gw) {
            return Err(TokenizerError::Shape("code grid must be a non-empty rectangle".into()));
        }
        let k = self.config.codebook_size;
        let d = self.config.code_dim;
        let z = self.codebook().data();
        let mut zq = Vec::with_capacity(gh * gw * d);
        for &c in grid.iter().flatten() {
            if c >= k {
                return Err(TokenizerError::CodeOutOfRange { code: c, size: k });
            }
            zq.extend_from_slice(&z[c * d..(c + 1) * d]);
        }
        let (hh, ww) = (gh * self.config.patch, gw * self.config.patch);
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let zv = g.constant(Tensor::new(&[gh * gw, d], zq)?);
        let out = self.decode_graph(&mut g, &p, zv, 1, hh, ww)?;
        Image::from_values(hh, ww, g.value(out).data()).map_err(|e| TokenizerError::Shape(e.to_string()))
    }

    /// Round trip `D(Q(E(I)))`.
    pub fn reconstruct(&self, image: &Image) -> Result<Image> {
        self.vq_decode(&self.encode_codes(image)?)
    }

    /// Records the training objective on `g`; returns `(total, recon, codebook, commit, codes)`.
    fn objective(&self, g: &mut Graph<T>, p: &ParamVars, x: &Tensor<T>) -> Result<([Var; 4], Vec<usize>)> {
        let s = x.shape();
        let (b, hh, ww) = (s[0], s[1], s[2]);
        let xv = g.constant(x.clone());
        let ze = self.encode_graph(g, p, xv)?;
        let (zq_st, codes) = g.quantize_st(ze, self.codebook())?;
        let out = self.decode_graph(g, p, zq_st, b, hh, ww)?;
        let diff = g.sub(out, xv)?;
        let sq = g.mul(diff, diff)?;
        let recon = g.mean(sq);

        let zq = g.gather_rows(p.get("codebook")?, &codes)?;
        let ze_sg = g.detach(ze);
        let cb_diff = g.sub(zq, ze_sg)?;
        let cb_sq = g.mul(cb_diff, cb_diff)?;
        let codebook = g.mean(cb_sq);

        let zq_sg = g.detach(zq);
        let cm_diff = g.sub(ze, zq_sg)?;
        let cm_sq = g.mul(cm_diff, cm_diff)?;
        let commit = g.mean(cm_sq);

        let partial = g.add(recon, codebook)?;
        let weighted = g.scale(commit, T::of(self.config.beta));
        let total = g.add(partial, weighted)?;
        Ok(([total, recon, codebook, commit], codes))
    }

    /// Loss terms on a batch without updating anything.
    pub fn losses(&self, images: &[&Image]) -> Result<VqLosses> {
        let x = batch_tensor::<T>(images).map_err(|e| TokenizerError::Shape(e.to_string()))?;
        self.grid_size(x.shape()[1], x.shape()[2])?;
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let ([total, recon, codebook, commit], _) = self.objective(&mut g, &p, &x)?;
        let v = |var: Var| g.value(var).item().as_f64();
        Ok(VqLosses { recon_loss: v(recon), codebook_loss: v(codebook), commit_loss: v(commit), total: v(total), reseeded: 0 })
    }

    /// One optimizer step on `images`. Unused codes are re-seeded from random
    /// encoder outputs before the first step and at the end of every usage epoch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, images: &[&Image], opt: &mut AdamW<T>, rng: &mut R) -> Result<VqLosses> {
        let x = batch_tensor::<T>(images).map_err(|e| TokenizerError::Shape(e.to_string()))?;
        self.grid_size(x.shape()[1], x.shape()[2])?;
        let mut reseeded = 0;
        if self.steps == 0 {
            self.usage.iter_mut().for_each(|u| *u = 0);
            reseeded = self.reseed_unused(&x, rng)?;
        }

        let mut g = Graph::new();
        let p = self.params.attach(&mut g);
        let ([total, recon, codebook, commit], codes) = self.objective(&mut g, &p, &x)?;
        let gstore = collect_grads(&g, &p, total)?;
        let v = |var: Var| g.value(var).item().as_f64();
        let mut losses =
            VqLosses { recon_loss: v(recon), codebook_loss: v(codebook), commit_loss: v(commit), total: v(total), reseeded };
        opt.update(&mut self.params, &gstore)?;

        for &c in &codes {
            self.usage[c] += 1;
        }
        self.steps += 1;
        if self.steps % self.config.reseed_interval == 0 {
            losses.reseeded += self.reseed_unused(&x, rng)?;
            self.usage.iter_mut().for_each(|u| *u = 0);
        }
        Ok(losses)
    }

    fn reseed_unused<R: Rng + ?Sized>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<usize> {
        let dead: Vec<usize> = (0..self.config.codebook_size).filter(|&k| self.usage[k] == 0).collect();
        if dead.is_empty() {
            return Ok(0);
        }
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let xv = g.constant(x.clone());
        let ze = self.encode_graph(&mut g, &p, xv)?;
        let ze = g.value(ze);
        let rows = ze.rows();
        let d = self.config.code_dim;
        let picks: Vec<usize> = if rows >= dead.len() {
            sample(rng, rows, dead.len()).into_vec()
        } else {
            (0..dead.len()).map(|_| rng.random_range(0..rows)).collect()
        };
        let src = ze.data().to_vec();
        let cb = self.params.get_mut("codebook")?.data_mut();
        for (&k, &r) in dead.iter().zip(&picks) {
            cb[k * d..(k + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
        }
        Ok(dead.len())
    }

    pub fn to_container(&self) -> Container<T> {
        let meta = serde_json::json!({
            "kind": "vq_tokenizer",
            "config": self.config,
            "steps": self.steps,
            "usage": self.usage,
        });
        let mut c = Container::new(meta);
        for (n, t) in self.params.iter() {
            c.push(n, t.clone());
        }
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("vq_tokenizer") {
            return Err(TokenizerError::Checkpoint("not a VQ tokenizer checkpoint".into()));
        }
        let parse = |key: &str| c.meta.get(key).cloned().ok_or_else(|| TokenizerError::Checkpoint(format!("missing `{key}`")));
        let config: VqConfig =
            serde_json::from_value(parse("config")?).map_err(|e| TokenizerError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let steps: u64 = serde_json::from_value(parse("steps")?).map_err(|e| TokenizerError::Checkpoint(e.to_string()))?;
        let usage: Vec<u64> = serde_json::from_value(parse("usage")?).map_err(|e| TokenizerError::Checkpoint(e.to_string()))?;
        let params: ParamStore<T> = c.entries.iter().cloned().collect();
        let cb = params.get("codebook")?;
        if cb.shape() != [config.codebook_size, config.code_dim] || usage.len() != config.codebook_size {
            return Err(TokenizerError::Checkpoint("codebook shape does not match config".into()));
        }
        if !cb.is_finite() {
            return Err(TokenizerError::Checkpoint("codebook has non-finite rows".into()));
        }
        Ok(VqTokenizer { config, params, usage, steps })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
