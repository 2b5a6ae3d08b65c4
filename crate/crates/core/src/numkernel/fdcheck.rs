use crate::error::{Error, Result};
use crate::numkernel::tape::{Tape, Var};
use crate::numkernel::tensor::Tensor;

/// Rounding error of the extrapolated difference, in units of `ε·|f| / step`.
const ROUNDING_SLACK: f64 = 16.0;

#[derive(Debug, Clone, Copy)]
pub struct FdConfig {
    /// Coarse central-difference half width; the estimate extrapolates from
    /// this and half of it, leaving an O(step⁴) truncation error.
    pub step: f64,
    pub tolerance: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`,
    /// so coordinates with near-zero gradient are judged in absolute terms.
    /// The floor is raised when the function's own rounding noise exceeds it.
    pub floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives one trainable [`Var`] per tensor in `point`, in order, and
/// must return a scalar node. Coordinates are reported flattened in the
/// same order.
pub fn finite_difference_check<F>(f: F, point: &[Tensor], cfg: &FdConfig) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], want_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), want_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(out)?;
        let mut flat = Vec::new();
        for (v, t) in vars.iter().zip(inputs) {
            match grads.get(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        Ok((value, flat))
    };

    if cfg.step <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let (value, analytic) = eval(point, true)?;

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor> = point.to_vec();
    for ti in 0..work.len() {
        for ci in 0..work[ti].len() {
            let orig = work[ti].data()[ci];
            let mut central = |h: f64| -> Result<f64> {
                work[ti].data_mut()[ci] = orig + h;
                let (plus, _) = eval(&work, false)?;
                work[ti].data_mut()[ci] = orig - h;
                let (minus, _) = eval(&work, false)?;
                work[ti].data_mut()[ci] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            // Richardson extrapolation cancels the h² error term.
            let (coarse, fine) = (central(cfg.step)?, central(cfg.step / 2.0)?);
            numeric.push((4.0 * fine - coarse) / 3.0);
        }
    }

    // Differences below the rounding noise of the estimate are not gradient errors.
    let noise = ROUNDING_SLACK * f64::EPSILON * value.abs() / cfg.step;
    let floor = cfg.floor.max(noise / cfg.tolerance);
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(FdReport {
        passed: max_rel_error < cfg.tolerance && analytic.iter().all(|v| v.is_finite()),
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::seeded;

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = seeded(4);
        let q = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let x = Tensor::randn(&[1, 5], 1.0, &mut rng);
        let report = finite_difference_check(
            |tape, v| {
                let qv = tape.constant(q.clone());
                let xq = tape.matmul(v[0], qv)?;
                let prod = tape.mul(xq, v[0])?;
                Ok(tape.sum(prod))
            },
            &[x],
            &FdConfig {
                tolerance: 1e-8,
                ..FdConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn constant_function_both_zero() {
        let report = finite_difference_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(3.0))),
            &[Tensor::full(&[3], 0.5)],
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.analytic.iter().all(|&v| v == 0.0));
        assert!(report.numeric.iter().all(|&v| v == 0.0));
        assert!(report.passed);
    }

    #[test]
    fn softmax_crossentropy_composite() {
        let mut rng = seeded(8);
        let logits = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut onehot = Tensor::zeros(&[3, 4]);
        onehot.set(0, 1, 1.0);
        onehot.set(1, 3, 1.0);
        onehot.set(2, 0, 1.0);
        let report = finite_difference_check(
            |tape, v| {
                let p = tape.softmax_rows(v[0])?;
                let logp = tape.ln(p)?;
                let t = tape.constant(onehot.clone());
                let picked = tape.mul(logp, t)?;
                let total = tape.sum(picked);
                Ok(tape.scale(total, -1.0))
            },
            &[logits],
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }
}
