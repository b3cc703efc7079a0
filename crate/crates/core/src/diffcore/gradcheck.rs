//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{DiffError, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step; must lie in `[1e-7, 1e-4]`.
    pub perturbation: f64,
    /// Check at most this many entries per input (chosen at random).
    pub max_entries_per_input: Option<usize>,
    /// Relative jump between one-sided slopes that marks a kink.
    pub kink_rtol: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { perturbation: 1e-6, max_entries_per_input: None, kink_rtol: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// (input, flat index) of the worst entry.
    pub worst: Option<(usize, usize)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GradcheckError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("perturbation {0} outside [1e-7, 1e-4]")]
    BadPerturbation(f64),
    #[error("non-differentiable point at input {input}, entry {index}")]
    NonDifferentiable { input: usize, index: usize },
}

/// |a − n| / max(|a|, |n|, 1e-8)
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn projection(len: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(&[len], |_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

/// Scalar objective: the output itself if scalar, else a fixed random
/// projection of it.
fn objective<F>(f: &F, inputs: &[Tensor], with_grad: bool, seed: u64) -> Result<(Tape, Vec<Var>, Var), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| if with_grad { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    let n = tape.value(out).len();
    let loss = if n == 1 {
        tape.sum_all(out)?
    } else {
        let flat = tape.reshape(out, &[n])?;
        let r = tape.constant(projection(n, seed))?;
        let prod = tape.mul(flat, r)?;
        tape.sum_all(prod)?
    };
    Ok((tape, vars, loss))
}

/// Compares reverse-mode gradients of `f` against central differences at
/// `inputs`; returns the maximum relative error over checked entries.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport, GradcheckError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let h = opts.perturbation;
    if !(1e-7..=1e-4).contains(&h) {
        return Err(GradcheckError::BadPerturbation(h));
    }
    let (tape, vars, loss) = objective(&f, inputs, true, opts.seed)?;
    let f0 = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let eval = |probe: &[Tensor]| -> Result<f64, DiffError> {
        let (t, _, l) = objective(&f, probe, false, opts.seed)?;
        Ok(t.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport { max_rel_error: 0.0, entries_checked: 0, worst: None };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(cap) if cap < input.len() => sample(&mut rng, input.len(), cap).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for idx in entries {
            let x = input.data()[idx];
            probe[k].data_mut()[idx] = x + h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[idx] = x - h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[idx] = x;

            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            if (right - left).abs() > opts.kink_rtol * right.abs().max(left.abs()) + 1e-7 {
                return Err(GradcheckError::NonDifferentiable { input: k, index: idx });
            }
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, idx));
            }
        }
    }
    Ok(report)
}
