//! Central finite-difference verification of analytic gradients.
//!
//! Runs in f64 only. The forward closure is rebuilt from scratch for every
//! probe, so any operation recorded on the tape is covered, including fused
//! backward rules.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Outcome of a gradient check over a set of inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all probed elements.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst probe.
    pub worst: (usize, usize),
    /// Number of probed elements.
    pub probes: usize,
}

/// Relative error metric used throughout: |a - f| / max(|a|, |f|, 1e-8).
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Compare analytic gradients of a scalar-valued computation against central
/// finite differences with step `h`, for every element of every input.
///
/// The builder must be deterministic: it is evaluated twice up front and
/// rejected if the two values differ (e.g. active drop path).
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(Error::arg("grad_check", "output must be scalar"));
        }
        Ok(g.value(out).item())
    };

    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base != again {
        return Err(Error::arg(
            "grad_check",
            "non-deterministic forward pass (is drop path active?)",
        ));
    }

    // analytic gradients
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        probes: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[ti].0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic.data()[e], fd);
            report.probes += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (ti, e);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        // f(x) = sum(x * x), df/dx = 2x
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let report = grad_check(&[x], DEFAULT_FD_STEP, |g, vars| {
            let sq = g.mul(vars[0], vars[0])?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn rejects_nondeterministic_forward() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let counter = AtomicUsize::new(0);
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let res = grad_check(&[x], DEFAULT_FD_STEP, |g, vars| {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            Ok(g.scale(vars[0], 1.0 + n as f64))
        });
        assert!(res.is_err());
    }
}
