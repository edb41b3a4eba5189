//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Max over all input coordinates of
/// `|autodiff - central difference| / (|central difference| + 1e-12)`.
///
/// `f` must build a single-element loss from the given input nodes.
/// `h` is the central-difference step, restricted to `[1e-7, 1e-3]`
/// where double precision keeps truncation and rounding balanced.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Input(format!("step {h} outside [1e-7, 1e-3]")));
    }

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new_unchecked();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &ids);
        if let Some((_, op)) = g.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite intermediate in op `{op}`")));
        }
        Ok(g.value(loss).item())
    };

    // analytic gradients
    let mut g = Graph::new_unchecked();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &ids);
    if let Some((_, op)) = g.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite intermediate in op `{op}`")));
    }
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.of(id, &g)).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[i].data()[j];
            let rel = (ad - fd).abs() / (fd.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
