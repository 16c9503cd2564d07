//! Central finite-difference gradient oracle.
//!
//! The check is only meaningful in 64-bit mode, so the API is pinned to
//! `Tensor<f64>`. The relative error of coordinate i is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.

use crate::error::{Error, Result};
use crate::rng::RngPool;

use super::tape::Tape;
use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub coords_checked: usize,
    /// (flat coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Check the analytic gradient of the scalar-valued `f` at `x` against
/// central differences `(f(x+he) − f(x−he)) / 2h`. At most `max_coords`
/// coordinates are probed (a seeded sample when x is larger).
pub fn grad_check<F>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("grad_check step must be positive, got {step}")));
    }

    let tape = Tape::new();
    let mut watched = x.detach();
    watched.watch(&tape)?;
    let loss = f(&watched)?;
    if loss.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.get(&watched).expect("watched leaf has a gradient").data().to_vec();

    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut s = RngPool::new(seed).stream("grad_check.coords");
        (0..max_coords).map(|_| s.below(n)).collect()
    };

    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = None;
    for &i in &coords {
        let base = x.data().to_vec();
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base;
        minus[i] -= step;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus)?)?.item();
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus)?)?.item();
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        sum_rel += rel;
        if rel > max_rel {
            max_rel = rel;
            worst = Some((i, a, numeric));
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        mean_rel_err: if coords.is_empty() { 0.0 } else { sum_rel / coords.len() as f64 },
        coords_checked: coords.len(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::<f64>::randn(&[6], 1).unwrap();
        let report = grad_check(|x| x.sum(), &x, 1e-3, 64, 0).unwrap();
        assert!(report.max_rel_err < 1e-10, "{report:?}");
    }

    #[test]
    fn zero_step_rejected() {
        let x = Tensor::<f64>::randn(&[2], 1).unwrap();
        assert!(grad_check(|x| x.sum(), &x, 0.0, 8, 0).is_err());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = Tensor::<f64>::randn(&[4, 5], 2).unwrap();
        let b = Tensor::<f64>::randn(&[5, 6], 3).unwrap();
        let target = Tensor::<f64>::randn(&[4, 6], 4).unwrap();
        // d/dA of mse(A·B, target)
        let report = grad_check(
            |x| x.matmul(&b).and_then(|y| y.mse(&target)),
            &a,
            1e-3,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
        // d/dB
        let report = grad_check(
            |x| a.matmul(x).and_then(|y| y.mse(&target)),
            &b,
            1e-3,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn two_layer_composite_matches_finite_differences() {
        let w1 = Tensor::<f64>::randn(&[3, 4], 11).unwrap();
        let w2 = Tensor::<f64>::randn(&[4, 2], 12).unwrap();
        let x = Tensor::<f64>::randn(&[5, 3], 13).unwrap();
        let t = Tensor::<f64>::randn(&[5, 2], 14).unwrap();
        let f = |w: &Tensor<f64>| {
            let h = x.matmul(w)?.silu()?;
            h.matmul(&w2)?.mse(&t)
        };
        let report = grad_check(f, &w1, 1e-3, 64, 0).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
