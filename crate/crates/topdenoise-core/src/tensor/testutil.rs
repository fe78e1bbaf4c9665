//! Gradient checking against central finite differences.
//!
//! The oracle knows nothing about the tape: it only re-evaluates the loss
//! with one weight nudged up and down. Check points must sit away from
//! kinks (relu, abs, pool ties); the tests choose generic random inputs
//! where a tie or an exact zero activation has probability zero.

use alloc::vec::Vec;

use crate::tensor::{ParamId, ParamSet, Tape, Var};
use crate::Result;

/// Assert that tape gradients match (loss(w+h) - loss(w-h)) / 2h for every
/// scalar weight in `params`, to relative tolerance `tol`.
pub(crate) fn finite_diff_check(
    params: &mut ParamSet,
    mut build: impl FnMut(&mut Tape, &ParamSet) -> Result<Var>,
    h: f64,
    tol: f64,
) {
    params.zero_grads();
    let tape_grads: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params).expect("forward build failed");
        tape.backward(loss, params).expect("backward failed");
        params
            .iter()
            .map(|(_, p)| p.tensor.grad().unwrap().to_vec())
            .collect()
    };
    let eval = |tape_params: &ParamSet, build: &mut dyn FnMut(&mut Tape, &ParamSet) -> Result<Var>| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, tape_params).expect("forward build failed");
        tape.values(loss)[0]
    };
    for pi in 0..params.len() {
        let id = ParamId(pi);
        for j in 0..params.get(id).tensor.numel() {
            let orig = params.get(id).tensor.values()[j];
            params.get_mut(id).tensor.values_mut()[j] = orig + h;
            let up = eval(params, &mut build);
            params.get_mut(id).tensor.values_mut()[j] = orig - h;
            let down = eval(params, &mut build);
            params.get_mut(id).tensor.values_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = tape_grads[pi][j];
            let denom = ad.abs().max(fd.abs()).max(1e-6);
            assert!(
                (ad - fd).abs() / denom < tol,
                "param {} [{}]: tape grad {} vs finite diff {}",
                params.get(id).name,
                j,
                ad,
                fd
            );
        }
    }
}
