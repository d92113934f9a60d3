use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Float, Graph, NumericsError, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var, NumericsError> {
        self.vars.get(name).copied().ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.tensors.get(name).ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, NumericsError> {
        self.tensors.get_mut(name).ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Adds every tensor to `g` as a trainable leaf.
    pub fn attach(&self, g: &mut Graph<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect();
        ParamVars { vars }
    }

    /// Adds every tensor to `g` as a constant (frozen) leaf.
    pub fn attach_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect();
        ParamVars { vars }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect() }
    }

    /// Prefixes every name with `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamStore<T> {
        ParamStore { tensors: self.tensors.iter().map(|(k, t)| (format!("{prefix}{k}"), t.clone())).collect() }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.tensors.extend(other.tensors);
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.tensors {
            h.update(k.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Largest absolute elementwise difference; `None` if names or shapes differ.
    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> Option<f64> {
        if self.tensors.len() != other.tensors.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for ((ka, a), (kb, b)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || a.shape() != b.shape() {
                return None;
            }
            for (&x, &y) in a.data().iter().zip(b.data()) {
                worst = worst.max((x - y).abs().as_f64());
            }
        }
        Some(worst)
    }
}

impl<T: Float> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore { tensors: iter.into_iter().collect() }
    }
}

/// Records `graph_fn` over `params`, then returns the scalar loss and a gradient
/// for every parameter (zeros for parameters the loss does not touch).
pub fn forward_backward<T, F>(params: &ParamStore<T>, graph_fn: F) -> Result<(T, ParamStore<T>), NumericsError>
where
    T: Float,
    F: FnOnce(&mut Graph<T>, &ParamVars) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let loss = graph_fn(&mut g, &vars)?;
    let value = g.value(loss).clone();
    if value.numel() != 1 {
        return Err(NumericsError::ShapeMismatch { op: "forward_backward", left: value.shape().to_vec(), right: vec![1] });
    }
    Ok((value.item(), collect_grads(&g, &vars, loss)?))
}

/// Gradients of `loss` for every attached parameter (zeros where untouched).
pub fn collect_grads<T: Float>(g: &Graph<T>, p: &ParamVars, loss: Var) -> Result<ParamStore<T>, NumericsError> {
    let mut grads = g.backward(loss)?;
    let mut out = ParamStore::new();
    for (name, var) in p.iter() {
        out.insert(name, grads.take(var).unwrap_or_else(|| Tensor::zeros(g.shape(var))));
    }
    Ok(out)
}
