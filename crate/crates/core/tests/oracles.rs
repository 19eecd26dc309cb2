mod common;

use common::*;

#[test]
fn every_loss_gradient_matches_central_differences() {
    for check in loss_gradient_suite() {
        assert_eq!(check.failures, 0, "{check:?}");
    }
}

#[test]
fn vc_matches_naive_patch_enumeration() {
    let sweep = vc_sweep();
    let valid = (1..=4usize)
        .flat_map(|h| (1..=4usize).flat_map(move |w| (1..=4usize).map(move |s| (h, w, s))))
        .filter(|&(h, w, s)| ((6 - h) / s + 1) * ((6 - w) / s + 1) >= 2)
        .count();
    assert_eq!(valid, 59);
    assert_eq!(sweep.configurations, valid);
    assert!(sweep.max_abs_err <= 1e-6, "{sweep:?}");
    assert_eq!(sweep.nonzero_constants, 0);
}

#[test]
fn tpr_at_far_matches_threshold_scan() {
    assert_eq!(tpr_oracle_mismatches(200), 0);
}

#[test]
fn cmc_and_map_match_ranking_oracle() {
    assert_eq!(cmc_oracle_mismatches(100), 0);
}

#[test]
fn ssim_constant_images_closed_form() {
    assert!(ssim_constant_max_err() <= 1e-6);
}

#[test]
fn scan_oracle_hand_cases() {
    assert_eq!(tpr_scan_oracle(&[0.9; 4], &[0.1; 100], 0.01), 1.0);
    assert_eq!(tpr_scan_oracle(&[0.5, 0.2], &[0.4, 0.3], 0.5), 0.5);
}

#[test]
fn cmc_oracle_hand_case() {
    let g: Vec<Vec<f64>> = [0.9, 0.8, 0.7, 0.6, 0.5]
        .iter()
        .map(|&c: &f64| vec![c, (1.0 - c * c).sqrt()])
        .collect();
    let (r1, r5, map) = cmc_oracle(&[vec![1.0, 0.0]], &g, &[7], &[0, 1, 7, 2, 3]).unwrap();
    assert_eq!((r1, r5), (0.0, 1.0));
    assert!((map - 1.0 / 3.0).abs() < 1e-12);
}
