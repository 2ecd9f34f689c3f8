//! Finite-difference checking for tape gradients.
//!
//! Used by unit and acceptance tests to validate every backward rule against
//! central differences on freshly built tapes. Lives in the library (rather
//! than a test module) so integration tests can drive it against the full
//! estimator loss as well.

use super::{NodeId, Tape, Tensor};

/// Builds a scalar loss from parameter nodes; called once per evaluation on
/// a fresh tape, so it must be deterministic in its inputs.
pub trait LossFn: Fn(&mut Tape, &[NodeId]) -> NodeId {}
impl<F: Fn(&mut Tape, &[NodeId]) -> NodeId> LossFn for F {}

fn eval(inputs: &[Tensor], f: &impl LossFn) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    tape.scalar(loss)
}

/// Analytic gradients of `f` with respect to every input, via one
/// forward/backward pass. Inputs the loss never reaches get zero gradients.
pub fn analytic_grads(inputs: &[Tensor], f: &impl LossFn) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    tape.backward(loss).expect("backward failed during gradient check");
    ids.iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
        .collect()
}

/// Worst relative disagreement between analytic gradients and central finite
/// differences over every coordinate of every input.
///
/// The relative error of a coordinate is |a − fd| / max(|a|, |fd|, `floor`);
/// the floor keeps near-zero gradients from amplifying rounding noise.
pub fn max_rel_err(inputs: &[Tensor], f: impl LossFn, h: f64, floor: f64) -> f64 {
    let analytic = analytic_grads(inputs, &f);
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        for k in 0..inputs[ti].data.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data[k] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data[k] -= h;
            let fd = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
            let a = analytic[ti][k];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}
