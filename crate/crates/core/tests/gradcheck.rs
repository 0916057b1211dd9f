//! Full-parameter central finite differences for every training objective.

mod common;

use common::{fd_all_objectives, TOL};

#[test]
fn every_objective_matches_finite_differences() {
    // 100 probes in each of W1, b1, W2, b2, W3 plus all 13 of b3.
    for (name, worst, probed) in fd_all_objectives() {
        println!("{name}: worst relative error {worst:.2e} over {probed} coordinates");
        assert_eq!(probed, 5 * 100 + 13, "{name}");
        assert!(worst < TOL, "{name}: worst relative error {worst:e}");
    }
}
