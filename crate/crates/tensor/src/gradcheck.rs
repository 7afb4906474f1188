//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Denominator floor for the relative error, so that near-zero gradients
    /// are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (seeded subset).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negative control: perturb one analytic gradient entry before comparing.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of the scalar `f(inputs)` with
/// `(f(x + h) - f(x - h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut rng = Rng::stream(opts.seed, "grad_check");
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for &j in &coords {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + opts.h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - opts.h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let mut a = analytic[i].data()[j];
            if opts.corrupt && report.checked == 0 {
                a = a * 1.5 + 0.1;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Fixed random projection used to reduce a tensor-valued output to a scalar.
pub fn projection_weights(shape: &[usize], seed: u64) -> Tensor {
    Rng::stream(seed, "grad_check_projection").uniform_tensor(shape, 1.0)
}
