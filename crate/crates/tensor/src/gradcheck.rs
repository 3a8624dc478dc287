//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only evaluates forward passes, so it is independent of
//! every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Perturbation size of the central difference.
    pub eps: f64,
    /// Coordinates checked; every coordinate when the inputs hold fewer.
    pub samples: usize,
    /// Lower bound of the relative-error denominator, which keeps
    /// near-zero gradients from amplifying rounding noise.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: 32,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
}

fn projected<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let w = out.tape().constant(weights.clone().reshape(out.shape())?);
    Ok(out.mul(w)?.sum())
}

/// Compares the backward pass of `f` against central differences.
///
/// A non-scalar output is reduced with fixed random weights, so the check
/// covers a random vector-Jacobian product rather than one output entry.
pub fn check_gradients<F, R>(inputs: &[Tensor<f64>], f: F, opts: &GradCheck, rng: &mut R) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    R: Rng + ?Sized,
{
    let eval = |values: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        match weights {
            Some(w) => projected(out, w)?.item(),
            None => out.item(),
        }
    };

    // Analytic pass; also fixes the projection weights.
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let weights = (out.value().numel() != 1).then(|| Tensor::uniform(out.shape(), -1.0, 1.0, rng));
    let loss = match &weights {
        Some(w) => projected(out, w)?,
        None => out,
    };
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let picks: Vec<usize> = if total <= opts.samples {
        (0..total).collect()
    } else {
        let mut v = sample(rng, total, opts.samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: (0, 0, 0.0, 0.0),
    };
    let mut work = inputs.to_vec();
    for flat in picks {
        let input = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[input];
        let orig = work[input].data()[idx];
        work[input].data_mut()[idx] = orig + opts.eps;
        let plus = eval(&work, weights.as_ref())?;
        work[input].data_mut()[idx] = orig - opts.eps;
        let minus = eval(&work, weights.as_ref())?;
        work[input].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[input].data()[idx];
        let denom = a.abs().max(numeric.abs()).max(opts.floor);
        let rel = (a - numeric).abs() / denom;
        if report.checked == 0 || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (input, idx, a, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
