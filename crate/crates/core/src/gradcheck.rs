//! Central finite-difference gradient verification.
//!
//! Used by test suites to check every differentiable op and whole
//! micro-models at 64-bit precision. The numeric side rebuilds the forward
//! pass from scratch per perturbation, so it is independent of the
//! backward implementation it is checking.

use crate::tape::{NodeId, Tape};
use crate::tensor::PTensor;
use crate::Result;

pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Cap on checked indices per parameter; evenly spaced when the
    /// parameter is larger.
    pub max_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            max_per_param: 64,
        }
    }
}

#[derive(Debug)]
pub struct GradFailure {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradFailure>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

impl GradCheck {
    /// Compare analytic gradients of `loss_fn` w.r.t. every param against
    /// central finite differences. `loss_fn` is handed a tape plus the leaf
    /// ids of the staged params, in order, and must return a scalar node.
    pub fn run<F>(&self, params: &mut [PTensor<f64>], loss_fn: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    {
        // Analytic pass.
        let mut tape = Tape::<f64>::new(true);
        let leaf_ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = loss_fn(&mut tape, &leaf_ids)?;
        let mut grads = tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaf_ids
            .iter()
            .zip(params.iter())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        drop(tape);

        let eval = |params: &[PTensor<f64>]| -> Result<f64> {
            let mut t = Tape::<f64>::new(false);
            let ids: Vec<NodeId> = params.iter().map(|p| t.leaf(p)).collect();
            let l = loss_fn(&mut t, &ids)?;
            Ok(t.scalar(l))
        };

        let mut report = GradReport::default();
        for (pi, grad) in analytic.iter().enumerate() {
            if !params[pi].trainable {
                continue;
            }
            let n = params[pi].numel();
            let step = (n / self.max_per_param).max(1);
            let mut idx = 0;
            while idx < n {
                let orig = params[pi].data[idx];
                params[pi].values_mut()[idx] = orig + self.h;
                let lp = eval(params)?;
                params[pi].values_mut()[idx] = orig - self.h;
                let lm = eval(params)?;
                params[pi].values_mut()[idx] = orig;

                let numeric = (lp - lm) / (2.0 * self.h);
                let a = grad[idx];
                let e = rel_err(a, numeric);
                report.checked += 1;
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= self.tol {
                    report.failures.push(GradFailure {
                        param: pi,
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: e,
                    });
                }
                idx += step;
            }
        }
        Ok(report)
    }
}
