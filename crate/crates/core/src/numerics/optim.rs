use serde::{Deserialize, Serialize};

use super::{Container, Float, NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps (0 disables warmup).
    pub warmup_steps: u64,
    /// Global gradient-norm clip (`None` disables clipping).
    pub clip_norm: Option<f64>,
    /// Cosine decay to `lr / 10` over this many steps after warmup (`None` keeps `lr`).
    pub decay_steps: Option<u64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 100,
            clip_norm: Some(1.0),
            decay_steps: None,
        }
    }
}

/// AdamW with decoupled weight decay, linear warmup, optional cosine decay and
/// global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: ParamStore<T>,
    v: ParamStore<T>,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, m: ParamStore::new(), v: ParamStore::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let (lr, w) = (self.config.lr, self.config.warmup_steps);
        if step < w {
            return lr * (step + 1) as f64 / w as f64;
        }
        match self.config.decay_steps {
            Some(n) if n > 0 => {
                let t = ((step - w) as f64 / n as f64).min(1.0);
                let floor = 0.1 * lr;
                floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => lr,
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(grads: &ParamStore<T>) -> f64 {
        let mut s = 0.0f64;
        for (_, g) in grads.iter() {
            for &v in g.data() {
                let x = v.as_f64();
                s += x * x;
            }
        }
        s.sqrt()
    }

    /// Applies one update. Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<f64, NumericsError> {
        let norm = Self::grad_norm(grads);
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => T::of(c / norm),
            _ => T::one(),
        };
        let lr = T::of(self.lr_at(self.step));
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let wd = T::of(self.config.weight_decay);
        let eps = T::of(self.config.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if !self.m.contains(name) {
                self.m.insert(name, Tensor::zeros(p.shape()));
                self.v.insert(name, Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (T::one() - b1) * gi * clip;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                let gc = gi * clip;
                *vi = b2 * *vi + (T::one() - b2) * gc * gc;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get(name)?.data();
            for ((w, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mh = mi / bc1;
                let vh = vi / bc2;
                *w -= lr * (mh / (vh.sqrt() + eps) + wd * *w);
            }
        }
        Ok(norm)
    }

    /// Writes moment estimates under `prefix` and returns the step counter.
    pub fn export(&self, out: &mut Container<T>, prefix: &str) -> u64 {
        for (n, t) in self.m.iter() {
            out.push(format!("{prefix}m/{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            out.push(format!("{prefix}v/{n}"), t.clone());
        }
        self.step
    }

    pub fn restore(config: AdamWConfig, step: u64, c: &Container<T>, prefix: &str) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, t) in &c.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                if let Some(k) = rest.strip_prefix("m/") {
                    m.insert(k, t.clone());
                } else if let Some(k) = rest.strip_prefix("v/") {
                    v.insert(k, t.clone());
                }
            }
        }
        AdamW { config, step, m, v }
    }
}
