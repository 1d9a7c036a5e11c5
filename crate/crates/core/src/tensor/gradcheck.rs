//! Central finite-difference checks of reverse-mode gradients in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding do not inflate it.
pub const REL_FLOOR: f64 = 1e-6;

/// Worst disagreement found by a check.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Location of the worst relative error.
    pub worst: String,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs);
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = at();
        }
    }
}

/// Reduces a non-scalar output to `Σ y ⊙ r` with a fixed random `r`, so
/// every output element contributes.
fn scalarize(g: &mut Graph<'_, f64>, y: Var) -> Result<Var> {
    if g.shape(y).is_empty() {
        return Ok(y);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = Tensor::from_fn(g.shape(y), |_| rng.gen_range(-1.0..1.0));
    let r = g.input(r, false);
    let prod = g.mul(y, r)?;
    g.sum(prod)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
    let y = f(&mut g, &vars)?;
    let s = scalarize(&mut g, y)?;
    g.value(s).item()
}

/// Compares `∂f/∂input` for every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let y = f(&mut g, &vars)?;
    let s = scalarize(&mut g, y)?;
    g.backward(s)?;
    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[which].data()[i];
            probe[which].data_mut()[i] = x0 + h;
            let plus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = x0 - h;
            let minus = eval(&probe, &f)?;
            probe[which].data_mut()[i] = x0;
            report.record(a, (plus - minus) / (2.0 * h), || format!("input {which}[{i}]"));
        }
    }
    Ok(report)
}

/// Compares `∂f/∂θ` for every element of every parameter in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let y = f(&mut g)?;
        let out = scalarize(&mut g, y)?;
        g.value(out).item()
    };
    let grads = {
        let mut g = Graph::with_params(store);
        let y = f(&mut g)?;
        let s = scalarize(&mut g, y)?;
        g.backward(s)?;
        g.param_grads()?
    };
    let mut report = GradCheck::default();
    let mut probe = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + h;
            let plus = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - h;
            let minus = value(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            report.record(a, (plus - minus) / (2.0 * h), || format!("{}[{i}]", store.name(id)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // x·x has gradient 2x; a "square" built as x·stop(x) only sees half
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let good = check_inputs(std::slice::from_ref(&x), 1e-5, |g, v| g.mul(v[0], v[0])).unwrap();
        assert!(good.max_rel_err < 1e-8);
        let bad = check_inputs(std::slice::from_ref(&x), 1e-5, |g, v| {
            let frozen = g.input(g.value(v[0]).clone(), false);
            g.mul(v[0], frozen)
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.4);
    }
}
