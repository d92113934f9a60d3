//! Global visual alignment: which positions are aligned, the projection head,
//! the alignment loss and the composite training objective.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::armodel::Mechanism;
use crate::armodel::{Role, TokenSequence};
use crate::foundation::{AggMode, EncoderKind};
use crate::nn::{init_linear, linear};
use crate::numerics::{Float, Graph, NumericsError, ParamStore, ParamVars, Tensor, Var};

type Result<T> = std::result::Result<T, AlignError>;

/// Weight of the z-loss term in the composite objective.
pub const Z_LOSS_WEIGHT: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid alignment config: {0}")]
    Config(String),
    #[error("sequence has no <REP> slot to align")]
    MissingRep,
    #[error("no alignment positions for mechanism {0:?}")]
    NoPositions(Mechanism),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Cosine,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Mlp2,
    #[serde(rename = "maxpool")]
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub mechanism: Mechanism,
    pub aggregation: AggMode,
    pub encoder: EncoderKind,
    /// Transformer layer whose hidden state is aligned (1-based).
    pub depth: usize,
    pub lambda: f64,
    pub objective: Objective,
    pub projection: Projection,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            mechanism: Mechanism::HybNext,
            aggregation: AggMode::Cls,
            encoder: EncoderKind::CrossModal,
            depth: 1,
            lambda: 1.0,
            objective: Objective::Cosine,
            projection: Projection::Mlp2,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self, model_depth: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(AlignError::Config(format!("lambda must be a nonnegative number, got {}", self.lambda)));
        }
        if self.depth < 1 || self.depth > model_depth {
            return Err(AlignError::Config(format!("depth {} outside 1..={model_depth}", self.depth)));
        }
        if self.encoder == EncoderKind::VisionOnly && self.aggregation != AggMode::AvgPool {
            return Err(AlignError::Config("the vision-only encoder has no CLS row; use avgpool".into()));
        }
        Ok(())
    }

    /// Weight actually applied to the alignment term.
    pub fn effective_lambda(&self) -> f64 {
        match self.mechanism {
            Mechanism::None => 0.0,
            _ => self.lambda,
        }
    }
}

/// Positions whose hidden state is aligned to `f_GF`.
pub fn select_alignment_positions(seq: &TokenSequence, mechanism: Mechanism) -> Result<Vec<usize>> {
    match mechanism {
        Mechanism::HybNext => Ok((0..seq.len()).filter(|&t| seq.target_role(t) == Some(Role::Image)).collect()),
        Mechanism::Rep => seq.position_of(Role::Rep).map(|p| vec![p]).ok_or(AlignError::MissingRep),
        Mechanism::None => Ok(Vec::new()),
    }
}

/// Projection head `A_phi` from `in_dim` hidden width to `out_dim`.
#[derive(Clone, Debug)]
pub struct ProjectionHead<T: Float> {
    pub kind: Projection,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `align.fc1.*`, `align.fc2.*` for the MLP; empty for max pooling.
    pub params: ParamStore<T>,
}

impl<T: Float> ProjectionHead<T> {
    pub fn new<R: Rng + ?Sized>(kind: Projection, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        match kind {
            Projection::Mlp2 => {
                init_linear(&mut params, "align.fc1", in_dim, in_dim, (1.0 / in_dim as f64).sqrt(), rng);
                init_linear(&mut params, "align.fc2", in_dim, out_dim, (1.0 / in_dim as f64).sqrt(), rng);
            }
            Projection::MaxPool => {
                if out_dim == 0 || in_dim % out_dim != 0 {
                    return Err(AlignError::Config(format!("maxpool needs {out_dim} to divide {in_dim}")));
                }
            }
        }
        Ok(ProjectionHead { kind, in_dim, out_dim, params })
    }

    /// `[n, in_dim]` → `[n, out_dim]`.
    pub fn project(&self, g: &mut Graph<T>, p: &ParamVars, h: Var) -> Result<Var> {
        let s = g.shape(h);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(AlignError::Shape(format!("projection expects width {}, got {:?}", self.in_dim, s)));
        }
        match self.kind {
            Projection::Mlp2 => {
                let a = linear(g, p, "align.fc1", h)?;
                let a = g.gelu(a);
                Ok(linear(g, p, "align.fc2", a)?)
            }
            Projection::MaxPool => Ok(g.max_pool_cols(h, self.in_dim / self.out_dim)?),
        }
    }

    /// Projects plain rows without recording gradients.
    pub fn project_rows(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let h = g.constant(rows.clone());
        let out = self.project(&mut g, &p, h)?;
        Ok(g.value(out).clone())
    }
}

/// Alignment loss between projected rows `f_a` `[m, D]` and targets `[m, D]`.
pub fn gva_objective<T: Float>(g: &mut Graph<T>, f_a: Var, target: Var, objective: Objective) -> Result<Var> {
    match objective {
        Objective::Cosine => {
            let cos = g.cosine_rows(f_a, target)?;
            let m = g.mean(cos);
            let neg = g.scale(m, -T::one());
            let one = g.constant(Tensor::scalar(T::one()));
            Ok(g.add(one, neg)?)
        }
        Objective::Mse => {
            let d = g.sub(f_a, target)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean(sq))
        }
    }
}

/// Recorded alignment term with the projected rows and their targets.
#[derive(Clone, Copy, Debug)]
pub struct GvaVars {
    pub loss: Var,
    pub f_a: Var,
    pub target: Var,
}

/// GVA loss over a batch. `hidden` is the chosen layer's `[batch * len, h]`
/// state, `positions[b]` the aligned positions of sample `b`, and `f_gf[b]` its target.
pub fn gva_loss<T: Float>(
    g: &mut Graph<T>,
    p: &ParamVars,
    head: &ProjectionHead<T>,
    hidden: Var,
    len: usize,
    positions: &[Vec<usize>],
    f_gf: &[Vec<T>],
    objective: Objective,
) -> Result<GvaVars> {
    if positions.len() != f_gf.len() {
        return Err(AlignError::Shape(format!("{} position sets for {} targets", positions.len(), f_gf.len())));
    }
    let mut rows = Vec::new();
    let mut target = Vec::new();
    for (b, (pos, f)) in positions.iter().zip(f_gf).enumerate() {
        if f.len() != head.out_dim {
            return Err(AlignError::Shape(format!("target width {} but head emits {}", f.len(), head.out_dim)));
        }
        for &t in pos {
            if t >= len {
                return Err(AlignError::Shape(format!("position {t} outside length {len}")));
            }
            rows.push(b * len + t);
            target.extend_from_slice(f);
        }
    }
    if rows.is_empty() {
        return Err(AlignError::Shape("no positions to align".into()));
    }
    let h = g.gather_rows(hidden, &rows)?;
    let f_a = head.project(g, p, h)?;
    let tv = g.constant(Tensor::new(&[rows.len(), head.out_dim], target)?);
    let loss = gva_objective(g, f_a, tv, objective)?;
    Ok(GvaVars { loss, f_a, target: tv })
}

/// `L_AR + lambda * L_GVA + Z_LOSS_WEIGHT * L_z`; a missing alignment term counts as 0.
pub fn composite_loss<T: Float>(g: &mut Graph<T>, ar: Var, gva: Option<Var>, z: Var, lambda: f64) -> Result<Var> {
    let mut total = ar;
    if let Some(gv) = gva {
        let w = g.scale(gv, T::of(lambda));
        total = g.add(total, w)?;
    }
    let zw = g.scale(z, T::of(Z_LOSS_WEIGHT));
    Ok(g.add(total, zw)?)
}

/// Mean row-wise cosine between two `[m, D]` matrices.
pub fn mean_cosine<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let rows = a.rows().min(b.rows());
    let mut total = 0.0;
    for r in 0..rows {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p.as_f64() * q.as_f64()).sum();
        let nx = x.iter().map(|p| p.as_f64().powi(2)).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q.as_f64().powi(2)).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(1e-12);
    }
    total / rows.max(1) as f64
}
