//! Central finite-difference verification of reverse-mode gradients.

use super::{Data, Tape, Var};

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
/// `f` must rebuild its computation from the leaf it is handed.
pub fn finite_diff_check<F>(f: F, x: &Data, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "step size must be positive");
    let eval = |point: &Data| -> f64 {
        let tape = Tape::new();
        let leaf = tape.leaf(point.clone());
        f(&tape, leaf).scalar_value()
    };

    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&tape, leaf);
    let grads = loss.backward().expect("loss must be scalar");
    let analytic = grads.get(leaf);

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.values[i] += h;
        let mut minus = x.clone();
        minus.values[i] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic.values[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    worst
}
