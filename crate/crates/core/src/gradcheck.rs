//! Central finite-difference checks for tape gradients (64-bit only).

use std::fmt;

use crate::error::Result;
use crate::params::{Params, WeightStore};
use crate::prng::Prng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is at round-off level are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.inputs {
            writeln!(
                f,
                "{:<32} n={:<5} max_rel={:.3e} at [{}] (analytic {:.6e}, numeric {:.6e})",
                r.name, r.checked, r.max_rel_error, r.worst_index, r.analytic, r.numeric
            )?;
        }
        Ok(())
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences. With `sample = Some(m)`, only `m` seeded-random entries per
/// input are perturbed; otherwise every entry is.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    sample: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    check_named(&names, inputs, sample, seed, f)
}

pub fn check_named<F>(
    names: &[String],
    inputs: &[Tensor<f64>],
    sample: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<Var<f64>> = ins.iter().map(|x| t.constant(x.clone())).collect();
        Ok(f(&t, &vs)?.value().data()[0])
    };

    let mut rng = Prng::new(seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport::default();
    for (i, var) in vars.iter().enumerate() {
        let g = grads.wrt(var);
        let n = inputs[i].len();
        let idx: Vec<usize> = match sample {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let mut r = InputReport {
            name: names[i].clone(),
            checked: idx.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &j in &idx {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            let analytic = g.data()[j];
            let e = rel_error(analytic, numeric);
            if e > r.max_rel_error || r.checked == 0 {
                r = InputReport { max_rel_error: e, worst_index: j, analytic, numeric, ..r };
            }
        }
        report.inputs.push(r);
    }
    Ok(report)
}

/// Checks the gradient of `f` with respect to every tensor of `store`.
/// The tensors named in `store` are followed by `extra` inputs, which `f`
/// receives as plain variables.
pub fn check_params<F>(
    store: &WeightStore<f64>,
    extra: &[(String, Tensor<f64>)],
    sample: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&Tape<f64>, &Params<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut names: Vec<String> = store.names().map(str::to_string).collect();
    let np = names.len();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    for (n, t) in extra {
        names.push(n.clone());
        inputs.push(t.clone());
    }
    let pnames = names[..np].to_vec();
    check_named(&names, &inputs, sample, seed, |tape, vars| {
        let params = Params::from_vars(&pnames, &vars[..np]);
        f(tape, &params, &vars[np..])
    })
}
