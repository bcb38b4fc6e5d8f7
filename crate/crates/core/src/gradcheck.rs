//! Central finite differences against tape gradients, in `f64`.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this magnitude errors are measured absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

/// Relative disagreement between one-sided quotients that marks a kink.
const KINK_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Random coordinates to check; `None` checks every element.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            samples: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates rejected because the function is not smooth there
    /// (ReLU kink or max-pool tie within the probe interval).
    pub skipped: usize,
}

/// Relative error with an absolute floor.
pub fn error_metric(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale > ABS_FLOOR {
        diff / scale
    } else {
        diff
    }
}

/// Compares d`f`/d`inputs` from one backward pass with central differences.
///
/// `f` receives fresh gradient-requiring leaves for `inputs` (same order)
/// and must return a scalar. A coordinate whose forward and backward
/// one-sided quotients disagree has a non-differentiable point within `eps`;
/// it is replaced by another random draw (or skipped when checking every
/// element).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() || inputs.iter().all(|t| t.numel() == 0) {
        return Err(invalid("grad_check needs at least one non-empty input"));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.leaf(x.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.leaf(x.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let base = tape.value(out).item();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut probe = |t: usize, i: usize, report: &mut GradCheckReport| -> Result<bool> {
        let h = cfg.eps;
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + h;
        let up = eval(&work)?;
        work[t].data_mut()[i] = orig - h;
        let down = eval(&work)?;
        work[t].data_mut()[i] = orig;
        let (fwd, bwd) = ((up - base) / h, (base - down) / h);
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(1e-3) {
            report.skipped += 1;
            return Ok(false);
        }
        let e = error_metric(analytic[t].data()[i], (up - down) / (2.0 * h));
        report.max_error = report.max_error.max(e);
        report.checked += 1;
        Ok(true)
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    match cfg.samples {
        None => {
            for (t, x) in inputs.iter().enumerate() {
                for i in 0..x.numel() {
                    probe(t, i, &mut report)?;
                }
            }
        }
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let nonempty: Vec<usize> = (0..inputs.len()).filter(|&t| inputs[t].numel() > 0).collect();
            let mut attempts = 0;
            while report.checked < n && attempts < 50 * n.max(1) {
                attempts += 1;
                let t = nonempty[rng.gen_range(0..nonempty.len())];
                let i = rng.gen_range(0..inputs[t].numel());
                probe(t, i, &mut report)?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[3], alloc::vec![0.3, -1.2, 2.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let sq = tape.mse(v[0], &Tensor::zeros(&[3]))?;
                Ok(sq)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_error < 1e-8, "{r:?}");
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(&[2], alloc::vec![0.0, 1.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let y = tape.relu(v[0])?;
                tape.sum(y)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
    }

    #[test]
    fn error_metric_floors_small_values() {
        assert_eq!(error_metric(2.0, 1.0), 0.5);
        assert!((error_metric(1e-8, 3e-8) - 2e-8).abs() < 1e-20);
    }
}
