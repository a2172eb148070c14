//! Finite-difference gradient checking. The checker compares tape gradients
//! against central differences `(f(x+h) − f(x−h)) / 2h` computed with
//! non-recording forward passes, reporting the worst relative error
//! `|analytic − numeric| / max(1, |numeric|)` over all checked coordinates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PhantomError, Result};

use super::{Tape, Tensor};

/// Outcome of a gradient check, pointing at the worst coordinate.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Checks every coordinate of every grad-requiring input.
///
/// `f` must be a pure function of the input tensors (and any constants it
/// captures): it is re-evaluated many times under perturbation.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    Ok(run(f, inputs, h, None)?.max_rel_err)
}

/// Like [`gradcheck`], but probes at most `max_per_tensor` seeded-random
/// coordinates of each input. Intended for whole-model objectives where the
/// full coordinate sweep would need one forward pass per parameter.
pub fn gradcheck_sampled<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    max_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    Ok(run(f, inputs, h, Some((max_per_tensor, seed)))?.max_rel_err)
}

/// Full-detail variant of [`gradcheck`].
pub fn gradcheck_report<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    sample: Option<(usize, u64)>,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    run(f, inputs, h, sample)
}

fn run<F>(f: F, inputs: &[Tensor], h: f64, sample: Option<(usize, u64)>) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(PhantomError::Config(format!(
            "gradcheck step must be positive, got {h}"
        )));
    }
    // Analytic gradients from one recorded episode.
    for x in inputs {
        x.zero_grad();
    }
    let tape = Tape::new();
    let y = f(&tape, inputs)?;
    if y.numel() != 1 {
        return Err(PhantomError::NonScalarRoot { shape: y.dims() });
    }
    tape.backward(&y)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::no_grad();
        Ok(f(&tape, xs)?.item())
    };

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut rng = sample.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));

    for (i, x) in inputs.iter().enumerate() {
        if !x.requires_grad() {
            continue;
        }
        let n = x.numel();
        let coords: Vec<usize> = match (&mut rng, sample) {
            (Some(rng), Some((cap, _))) if n > cap => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(rng);
                all.truncate(cap);
                all.sort_unstable();
                all
            }
            _ => (0..n).collect(),
        };
        for &j in &coords {
            let saved = {
                let inner = x.borrow();
                inner.data[j]
            };
            {
                x.borrow_mut().data[j] = saved + h;
            }
            let plus = eval(inputs)?;
            {
                x.borrow_mut().data[j] = saved - h;
            }
            let minus = eval(inputs)?;
            {
                x.borrow_mut().data[j] = saved;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = i;
                report.worst_coord = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
