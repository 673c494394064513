use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, NumError, ParamStore, Var};

/// Central-difference step.
pub const GRAD_CHECK_EPS: f64 = 1e-4;

/// Upper bound on sampled coordinates per parameter.
pub const MAX_CHECKED_COORDS: usize = 64;

/// Absolute floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// Coordinates whose gradient is below this fraction of the parameter's
/// largest sampled gradient are compared against that scaled magnitude.
const REL_SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_err < tol)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Relative discrepancy between an analytic and a numeric derivative, with
/// the denominator floored at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(REL_FLOOR)
}

fn eval_loss<F>(store: &ParamStore<f64>, program: &F) -> Result<f64, NumError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, NumError>,
{
    let mut graph = Graph::new(store);
    let loss = program(&mut graph)?;
    let v = graph.value(loss).item();
    if !v.is_finite() {
        return Err(NumError::GradCheck(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `program` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on up to [`MAX_CHECKED_COORDS`] random coordinates
/// of every parameter in `store`.
///
/// `prepare` can configure each analytic graph before `program` runs
/// (e.g. to inject a backward fault).
pub fn grad_check<F, R>(
    store: &mut ParamStore<f64>,
    eps: f64,
    rng: &mut R,
    prepare: impl Fn(&mut Graph<'_, f64>),
    program: F,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var, NumError>,
    R: Rng,
{
    let grads = {
        let mut graph = Graph::new(store);
        prepare(&mut graph);
        let loss = program(&mut graph).map_err(|e| NumError::GradCheck(e.to_string()))?;
        let v = graph.value(loss).item();
        if !v.is_finite() {
            return Err(NumError::GradCheck(format!("non-finite loss {v}")));
        }
        graph.backward(loss)?
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).value.numel();
        let coords = sample(rng, n, n.min(MAX_CHECKED_COORDS)).into_vec();
        let analytic = grads.get(id).cloned();
        let mut pairs = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + eps;
            let plus = eval_loss(store, &program);
            store.get_mut(id).value.data_mut()[c] = orig - eps;
            let minus = eval_loss(store, &program);
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[c]);
            pairs.push((a, numeric));
        }
        let scale = pairs.iter().map(|(a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
        let floor = REL_SCALE_FLOOR * scale;
        let max_rel = pairs.iter().map(|&(a, n)| relative_error(a, n, floor)).fold(0.0, f64::max);
        let max_abs = pairs.iter().map(|&(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.push(ParamCheck {
            name: store.get(id).name.clone(),
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradCheckReport { params: report })
}
