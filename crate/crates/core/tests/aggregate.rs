//! Cross-seed aggregation on a three-run fixture, checked against values
//! worked out by hand.

use std::fs;

use sgl_core::expcli::aggregate::{self, cmd_aggregate};
use sgl_core::expcli::records::{self, StepWriter};
use sgl_core::trainloop::{Mode, RunConfig, RunSummary, StepRecord};

fn summary(seed: u64, acc: f64, frac: f64, cos: f64) -> RunSummary {
    RunSummary {
        run_id: format!("control-seed{seed}"),
        mode: Mode::Control,
        seed,
        steps: 2,
        teacher_test_accuracy: 0.96,
        final_test_accuracy: acc,
        epoch_test_accuracy: vec![acc],
        frac_positive_alignment: frac,
        mean_cosine: cos,
        epoch1_mean_cosine: cos,
        final_ce: 2.0,
        final_kl: 1e-3,
        applied_steps: 0,
        max_abs_cosine_after_proj: 0.0,
        max_first_order_rel_err: 0.0,
        min_first_order_term: 0.0,
    }
}

fn step(seed: u64, step: usize, kl: f64) -> StepRecord {
    StepRecord {
        run_id: format!("control-seed{seed}"),
        seed,
        mode: Mode::Control,
        epoch: 1,
        step,
        kl,
        ce: 2.0,
        dot: 0.1,
        cosine: 0.01,
        cosine_before_proj: 0.01,
        cosine_after_proj: 0.01,
        cosine_total: 0.01,
        lambda_kl: 0.0,
        projection_applied: false,
        norm_trait: 1.0,
        norm_distill: 1.0,
        first_order_term: 0.0,
    }
}

#[test]
fn three_run_headline_matches_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = [(0, 0.55, 0.8, 0.006, 0.3), (1, 0.40, 0.7, 0.008, 0.2), (2, 0.70, 0.9, 0.010, 0.1)];
    for &(seed, acc, frac, cos, kl) in &runs {
        let dir = tmp.path().join(format!("control-seed{seed}"));
        fs::create_dir(&dir).unwrap();
        let mut w = StepWriter::new(fs::File::create(dir.join("steps.csv")).unwrap()).unwrap();
        w.write(&step(seed, 1, kl)).unwrap();
        w.write(&step(seed, 2, kl / 2.0)).unwrap();
        w.finish().unwrap();
        let text = records::summary_text(&summary(seed, acc, frac, cos), &RunConfig::new(Mode::Control, seed));
        fs::write(dir.join("summary.txt"), text).unwrap();
    }
    let h = cmd_aggregate(tmp.path(), &[Mode::Control, Mode::Projection]).unwrap();
    assert_eq!(h.len(), 1);
    let h = &h[0];
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    // acc: mean 0.55; deviations 0, -0.15, 0.15 → SD sqrt(0.045 / 2) = 0.15.
    close(h.final_test_accuracy.mean, 0.55);
    close(h.final_test_accuracy.sd.unwrap(), 0.15);
    close(h.min_final_test_accuracy, 0.40);
    close(h.max_final_test_accuracy, 0.70);
    // frac: mean 0.8, SD sqrt(0.02 / 2) = 0.1.
    close(h.frac_positive_alignment.mean, 0.8);
    close(h.frac_positive_alignment.sd.unwrap(), 0.1);
    // cosine: mean 0.008, SD sqrt(8e-6 / 2) = 0.002.
    close(h.mean_cosine.mean, 0.008);
    close(h.mean_cosine.sd.unwrap(), 0.002);
    close(h.teacher_test_accuracy.sd.unwrap(), 0.0);

    let agg = aggregate::read_aggregate_csv(&tmp.path().join("aggregate-control.csv")).unwrap();
    assert_eq!(agg.steps, vec![1, 2]);
    assert_eq!(agg.n, vec![3, 3]);
    close(agg.columns["kl"].mean[0], 0.2);
    close(agg.columns["kl"].sd[0].unwrap(), 0.1);
    close(agg.columns["kl"].mean[1], 0.1);
    close(agg.columns["kl"].sd[1].unwrap(), 0.05);
    let text = fs::read_to_string(tmp.path().join("headline-control.txt")).unwrap();
    assert!(text.contains("runs=3") && text.contains("final_test_accuracy_min=4e-1"), "{text}");
}
