//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { rtol: 1e-4, atol: 1e-6, step: 1e-6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    fn record(&mut self, label: &str, analytic: f64, numeric: f64, tol: &Tolerance) {
        self.checked += 1;
        let err = (analytic - numeric).abs();
        self.max_abs_err = self.max_abs_err.max(err);
        if err > tol.atol + tol.rtol * numeric.abs().max(analytic.abs()) {
            self.failures.push(format!("{label}: analytic {analytic:.10e} vs numeric {numeric:.10e}"));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.failures.extend(other.failures);
    }
}

fn pick(len: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(n) if n < len => {
            let mut v = sample(rng, len, n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Check the gradient of `f(inputs)` (a scalar) with respect to each input tensor.
pub fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph<'_>, &[Var]) -> Var,
    tol: Tolerance,
) -> GradCheckReport {
    check_inputs_with_params(&ParamStore::new(), inputs, f, tol)
}

/// Like [`check_inputs`] with fixed parameters available to `f`.
pub fn check_inputs_with_params(
    store: &ParamStore,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph<'_>, &[Var]) -> Var,
    tol: Tolerance,
) -> GradCheckReport {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[ti].shape()));
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + tol.step;
            let fp = eval(&work);
            work[ti].data_mut()[i] = orig - tol.step;
            let fm = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * tol.step);
            report.record(&format!("input{ti}[{i}]"), analytic.data()[i], numeric, &tol);
        }
    }
    report
}

/// Check the gradient of a scalar built from `store` with respect to its parameters.
///
/// `per_tensor` caps how many entries of each tensor are probed (sampled
/// deterministically); `None` probes all of them.
pub fn check_params(
    store: &ParamStore,
    f: impl Fn(&mut Graph<'_>) -> Var,
    per_tensor: Option<usize>,
    tol: Tolerance,
) -> GradCheckReport {
    let eval = |s: &ParamStore| {
        let mut g = Graph::with_params(s);
        let out = f(&mut g);
        g.value(out).item()
    };
    let mut g = Graph::with_params(store);
    let out = f(&mut g);
    let grads = g.backward(out).params(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (name, analytic) in &grads {
        for i in pick(analytic.len(), per_tensor, &mut rng) {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + tol.step;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - tol.step;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * tol.step);
            report.record(&format!("{name}[{i}]"), analytic.data()[i], numeric, &tol);
        }
    }
    report
}
