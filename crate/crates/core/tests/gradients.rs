//! Analytic gradients against central finite differences on random policies.

mod common;

use common::{check_all, TOL};

#[test]
fn analytic_gradients_match_finite_differences() {
    let worst = check_all(100);
    println!("max relative error pg {:e} kl {:e} cal {:e}", worst[0], worst[1], worst[2]);
    for (name, w) in ["pg", "kl", "cal"].iter().zip(worst) {
        assert!(w < TOL, "{name}: max relative error {w:e}");
    }
}
