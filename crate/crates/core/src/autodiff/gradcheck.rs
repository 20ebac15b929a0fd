use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Outcome of comparing backward gradients against central differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub coords_checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Cap on perturbed coordinates per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    Ok(g.value(out).item())
}

/// Checks `d f / d inputs` with central differences of step `1e-6 * max(1, |x|)`.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic: Vec<f64> = match g.grad(v) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(cap) if cap < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let x = inputs[k].data()[i];
            let h = 1e-6 * x.abs().max(1.0);
            work[k].data_mut()[i] = x + h;
            let plus = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = x - h;
            let minus = eval_scalar(&f, &work)?;
            work[k].data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "{name}: non-finite gradient at input {k} coordinate {i} (analytic {a}, numeric {numeric})"
                )));
            }
            max_rel = max_rel.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op_name: name.to_string(),
        max_relative_error: max_rel,
        tolerance: opts.tolerance,
        passed: max_rel <= opts.tolerance,
        coords_checked: checked,
    })
}

/// Gradient check with respect to the trainable parameters of a store. The
/// closure must obtain parameters through `Graph::param`.
pub fn grad_check_params<F>(
    name: &str,
    store: &ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    grad_check(
        name,
        &inputs,
        |g, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind(id, v);
            }
            f(g, store)
        },
        opts,
    )
}
