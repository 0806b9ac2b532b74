//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per input (chosen at random).
    /// `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// `(input, coordinate)` achieving the maximum.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&tape, &vars)?;
    tape.check_finite()?;
    scalar_of(out)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    if v.numel() != 1 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: format!("function must return a scalar, got {:?}", v.shape()),
        });
    }
    Ok(v.item())
}

/// Checks every coordinate of every input with the default step `1e-5`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor]) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    gradcheck_with(f, inputs, &GradcheckOptions::default())
}

pub fn gradcheck_with<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&tape, &vars)?;
        tape.check_finite()?;
        scalar_of(out)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.wrt_or_zeros(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ii, grad) in analytic.iter().enumerate() {
        let n = inputs[ii].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = work[ii].data()[c];
            work[ii].data_mut()[c] = orig + opts.step;
            let plus = eval(&f, &work)?;
            work[ii].data_mut()[c] = orig - opts.step;
            let minus = eval(&f, &work)?;
            work[ii].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = (grad[c] - numeric).abs() / grad[c].abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ii, c));
            }
        }
    }
    Ok(report)
}
