use stfm_tensor::{ParamId, ParamStore, Tape, Var};

/// Finite-difference step of the five-point stencil.
pub const FD_STEP: f64 = 1e-4;

/// Largest relative disagreement between analytic and five-point
/// central-difference gradients over every scalar of every trainable parameter.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// near-zero gradients from dividing round-off by round-off.
pub fn finite_difference_gradcheck<F>(store: &mut ParamStore, loss: F, floor: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let l = loss(&tape, store);
        tape.backward(l, store)
    };
    let eval = |store: &ParamStore| {
        let tape = Tape::new();
        loss(&tape, store).value().data()[0]
    };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = store.value(id).numel();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            let mut at = |k: f64| {
                store.value_mut(id).data_mut()[i] = orig + k * FD_STEP;
                eval(store)
            };
            let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
