//! Finite-difference gradient verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{Tape, Var};
use crate::error::{DreamError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-7, 1e-3]`.
    pub h: f64,
    pub stencil: Stencil,
    /// Check each coordinate with this probability (1.0 checks all). A
    /// tensor left without a sampled coordinate gets one at random.
    pub fraction: f64,
    pub seed: u64,
    /// Precision of the analytic pass. The finite-difference reference is
    /// always evaluated in f64.
    pub precision: Precision,
    /// Negative-control hook: perturbs the analytic gradient before
    /// comparison so a correct checker must report failure.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            stencil: Stencil::Central,
            fraction: 1.0,
            seed: 0,
            precision: Precision::F64,
            corrupt_analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let opts = GradCheckOptions {
        h,
        ..GradCheckOptions::default()
    };
    let report = grad_check_inputs(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), &opts)?;
    Ok(report.max_rel_error)
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(DreamError::config("h", format!("step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new(opts.precision);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        if loss.value().numel() != 1 {
            return Err(DreamError::Contract("grad_check needs a scalar-valued function".into()));
        }
        if !loss.item().is_finite() {
            return Err(DreamError::NonFinite {
                what: "grad_check base loss".into(),
                index: 0,
            });
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new(Precision::F64);
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let y = f(&tape, &vars)?.item();
        if !y.is_finite() {
            return Err(DreamError::NonFinite {
                what: format!("grad_check loss with input {which} perturbed"),
                index: coord,
            });
        }
        Ok(y)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (which, (input, grad)) in inputs.iter().zip(&analytic).enumerate() {
        let mut coords: Vec<usize> = (0..input.numel())
            .filter(|_| opts.fraction >= 1.0 || rng.random::<f64>() < opts.fraction)
            .collect();
        // every tensor gets at least one probe
        if coords.is_empty() && input.numel() > 0 {
            coords.push(rng.random_range(0..input.numel()));
        }
        for coord in coords {
            let h = opts.h;
            let numeric = match opts.stencil {
                Stencil::Central => (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    let near = eval(which, coord, h)? - eval(which, coord, -h)?;
                    let far = eval(which, coord, 2.0 * h)? - eval(which, coord, -2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let mut a = grad.data()[coord];
            if opts.corrupt_analytic {
                a = a * 1.5 + 1e-3;
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = which;
                report.worst_coord = coord;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Gradient check over every tensor of `store` followed by `extra`.
/// `worst_input` indexes that combined list.
pub fn grad_check_params<F>(store: &ParamStore, extra: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Bound<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let n = store.len();
    let inputs: Vec<Tensor> = store.tensors().iter().chain(extra).cloned().collect();
    grad_check_inputs(
        |tape, vars| {
            let p = Bound::from_vars(tape, vars[..n].to_vec());
            f(&p, &vars[n..])
        },
        &inputs,
        opts,
    )
}
