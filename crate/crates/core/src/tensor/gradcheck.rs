use super::{Graph, ParamStore, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and element index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences.
///
/// Tensors with more than `max_per_tensor` elements are checked on an evenly
/// strided subset. Relative error is `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    loss_fn: F,
    epsilon: f64,
    max_per_tensor: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let eval = |params: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(params);
        let loss = loss_fn(&mut g)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let stride = n.div_ceil(max_per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + epsilon;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig - epsilon;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), j));
            }
        }
    }
    Ok(report)
}
