use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterSet, Var};

/// Compares tape gradients against central differences on every coordinate
/// of every parameter and returns the worst
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// `loss` must build a scalar on the supplied graph from `params`.
pub fn grad_check<F>(loss: F, params: &ParameterSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("eps {eps} outside (0, 1e-2]"),
        });
    }
    let mut graph = Graph::new();
    let l = loss(&mut graph, params)?;
    let analytic = graph.backward(l)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(&mut g, p)?;
        Ok(g.value(v).item())
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
