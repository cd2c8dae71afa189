//! Finite-difference gradient checking for graph fragments.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst element discrepancy divided by the largest gradient magnitude
    /// of the same tensor.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compare analytic gradients of `fragment` (which must return a scalar
/// node) with central differences of step `eps`, over every parameter
/// element of `store` and every element of each input that requires grad.
pub fn gradient_check<F>(store: &ParamStore, inputs: &[Tensor], eps: f32, fragment: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new(store);
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = fragment(&mut g, &ids);
        g.value(out).item() as f64
    };

    let mut g = Graph::new(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = fragment(&mut g, &ids);
    let grads = g.backward(out).expect("backward");

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    let mut work = store.clone();
    for id in store.ids() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let analytic = grads.param(id).data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.get(id).data()[k];
            let (hi, lo) = (orig + eps, orig - eps);
            work.get_mut(id).data_mut()[k] = hi;
            let fp = eval(&work, inputs);
            work.get_mut(id).data_mut()[k] = lo;
            let fm = eval(&work, inputs);
            work.get_mut(id).data_mut()[k] = orig;
            numeric.push((fp - fm) / (hi as f64 - lo as f64));
        }
        fold(&mut report, &analytic, &numeric);
    }
    let mut work_in = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let analytic = grads.node(ids[i]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; t.len()]);
        let mut numeric = Vec::with_capacity(t.len());
        for k in 0..t.len() {
            let orig = t.data()[k];
            let (hi, lo) = (orig + eps, orig - eps);
            work_in[i].data_mut()[k] = hi;
            let fp = eval(store, &work_in);
            work_in[i].data_mut()[k] = lo;
            let fm = eval(store, &work_in);
            work_in[i].data_mut()[k] = orig;
            numeric.push((fp - fm) / (hi as f64 - lo as f64));
        }
        fold(&mut report, &analytic, &numeric);
    }
    report
}

fn fold(report: &mut GradCheckReport, analytic: &[f32], numeric: &[f64]) {
    let scale = analytic
        .iter()
        .map(|&a| (a as f64).abs())
        .chain(numeric.iter().map(|n| n.abs()))
        .fold(0.0, f64::max);
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a as f64 - n).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        if scale > 0.0 {
            report.max_rel_error = report.max_rel_error.max(abs / scale);
        }
        report.checked += 1;
    }
}
