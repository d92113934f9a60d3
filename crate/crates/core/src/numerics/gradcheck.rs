use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward_backward, Graph, NumericsError, ParamStore, ParamVars, Var};

/// Element count above which [`finite_difference_check`] subsamples.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Relative errors below this magnitude of both gradients are measured against it.
const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamError {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub per_parameter: BTreeMap<String, ParamError>,
}

impl GradReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

/// Checks analytic gradients of `graph_fn` against central differences with step `eps`.
///
/// Runs in 64-bit. Every element is checked when the parameters hold at most
/// [`FULL_CHECK_LIMIT`] elements; otherwise a subsample of that size is drawn
/// with a generator seeded from `seed`.
pub fn finite_difference_check<F>(
    graph_fn: F,
    params: &ParamStore<f64>,
    eps: f64,
    seed: u64,
) -> Result<GradReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var, NumericsError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NumericsError::InvalidArgument { op: "finite_difference_check", msg: format!("eps = {eps}") });
    }
    let (_, analytic) = forward_backward(params, &graph_fn)?;

    let mut slots: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        slots.extend((0..t.numel()).map(|i| (name.to_string(), i)));
    }
    let chosen: Vec<usize> = if slots.len() <= FULL_CHECK_LIMIT {
        (0..slots.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, slots.len(), FULL_CHECK_LIMIT).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |p: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars = p.attach(&mut g);
        let loss = graph_fn(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradReport::default();
    let mut probe = params.clone();
    for k in chosen {
        let (name, i) = &slots[k];
        let orig = params.get(name)?.data()[*i];
        probe.get_mut(name)?.data_mut()[*i] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(name)?.data_mut()[*i] = orig;

        let numeric = (up - down) / (2.0 * eps);
        let exact = analytic.get(name)?.data()[*i];
        let abs = (numeric - exact).abs();
        let rel = abs / exact.abs().max(numeric.abs()).max(REL_FLOOR);
        let entry = report.per_parameter.entry(name.clone()).or_default();
        entry.max_abs_err = entry.max_abs_err.max(abs);
        entry.max_rel_err = entry.max_rel_err.max(rel);
        entry.checked += 1;
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
    }
    Ok(report)
}
