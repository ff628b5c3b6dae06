//! Central-finite-difference verification of analytic gradients.

use crate::graph::{Graph, TensorId};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tol: f64,
    /// (parameter index, element index) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Relative error with an absolute floor, so near-zero gradients compare on
/// absolute terms.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares analytic gradients of `build`'s scalar output against central
/// differences with step `h`, for every element of every parameter.
/// `build` must be deterministic given the parameter values.
pub fn grad_check<F>(
    build: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<(f64, Vec<Option<Vec<f64>>>), TensorError> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        g.backward(loss)?;
        let grads = ids.iter().map(|&id| g.grad(id).map(<[f64]>::to_vec)).collect();
        Ok((g.data(loss)[0], grads))
    };

    let (_, analytic) = eval(params)?;

    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut work: Vec<Tensor> = params.to_vec();
    for p in 0..params.len() {
        let analytic_p = analytic[p].as_deref();
        for e in 0..params[p].numel() {
            let orig = work[p].data[e];
            work[p].data[e] = orig + h;
            let (loss_plus, _) = eval(&work)?;
            work[p].data[e] = orig - h;
            let (loss_minus, _) = eval(&work)?;
            work[p].data[e] = orig;
            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic_p.map_or(0.0, |g| g[e]);
            let err = rel_err(a, numeric);
            if err > max_rel_err {
                max_rel_err = err;
                worst = Some((p, e));
            }
        }
    }
    Ok(GradCheckReport { max_rel_err, tol, worst })
}
