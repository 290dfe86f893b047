//! Central finite-difference gradient checks for graph computations.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed entries.
    pub rel_error: f64,
    pub probed: usize,
    pub analytic_norm: f64,
}

/// Compare analytic gradients of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_probes` entries per input are
/// perturbed, spread evenly.
pub fn check<F>(inputs: &[Tensor], h: f64, max_probes: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut diff2 = 0.0;
    let mut an2 = 0.0;
    let mut nu2 = 0.0;
    let mut probed = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let zero = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*v).unwrap_or(&zero);
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let an = analytic.data()[i];
            diff2 += (an - num) * (an - num);
            an2 += an * an;
            nu2 += num * num;
            probed += 1;
        }
    }
    let denom = an2.sqrt().max(nu2.sqrt());
    let rel_error = if denom == 0.0 {
        0.0
    } else {
        diff2.sqrt() / denom
    };
    Ok(GradCheck {
        rel_error,
        probed,
        analytic_norm: an2.sqrt(),
    })
}
