use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// Worst disagreement found for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central-difference check of `f` with respect to every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_grads(&f, inputs)?;
    compare_gradients(f, inputs, &analytic, eps, tol)
}

/// Analytic gradients of `f` at `inputs`, one flat vector per input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect())
}

/// Compares supplied analytic gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: F,
    inputs: &[Tensor],
    analytic: &[Vec<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || tol <= 0.0 {
        return Err(Error::contract("grad_check needs eps > 0 and tol > 0"));
    }
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).is_scalar() {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(g.scalar(out))
    };
    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = (0..input.numel()).collect();
        let check = check_coords(i, &coords, &analytic[i], eps, |c, delta| {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + delta;
            let v = eval(&work);
            work[i].data_mut()[c] = orig;
            v
        })?;
        report.push(check);
    }
    Ok(GradCheckReport { inputs: report, tol })
}

/// Central-difference check of a parameterized loss with respect to stored
/// parameters. At most `max_coords` evenly spaced coordinates are probed per
/// parameter when given.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        ids.iter()
            .map(|&id| {
                g.param_grad(id)
                    .map_or_else(|| vec![0.0; store.tensor(id).numel()], <[f64]>::to_vec)
            })
            .collect()
    };
    let mut work = store.clone();
    let mut report = Vec::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        let n = store.tensor(id).numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        let check = check_coords(i, &coords, &analytic[i], eps, |c, delta| {
            let orig = work.tensor(id).data()[c];
            work.tensor_mut(id).data_mut()[c] = orig + delta;
            let v = {
                let mut g = Graph::inference(&work);
                f(&mut g).map(|out| g.scalar(out))
            };
            work.tensor_mut(id).data_mut()[c] = orig;
            v
        })?;
        report.push(check);
    }
    Ok(GradCheckReport { inputs: report, tol })
}

fn check_coords(
    input: usize,
    coords: &[usize],
    analytic: &[f64],
    eps: f64,
    mut eval_at: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<InputCheck> {
    let mut worst = InputCheck {
        input,
        coords_checked: coords.len(),
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for &c in coords {
        let plus = eval_at(c, eps)?;
        let minus = eval_at(c, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic[c], numeric);
        if err > worst.max_rel_error || !err.is_finite() {
            worst.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
            worst.worst_coord = c;
            worst.analytic = analytic[c];
            worst.numeric = numeric;
        }
    }
    Ok(worst)
}
