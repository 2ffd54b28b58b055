mod common;

use common::*;
use millie_core::imaging::{histogram, otsu_cut, otsu_threshold, segmentation_score};
use millie_core::metrics::{pca_project, roc_auc};
use rand::Rng;

#[test]
fn otsu_cut_matches_rational_brute_force() {
    let mut r = rng(21);
    for _ in 0..200 {
        let bins = r.gen_range(2..40);
        let hist: Vec<u64> = (0..bins).map(|_| if r.gen_bool(0.5) { 0 } else { r.gen_range(1..100) }).collect();
        assert_eq!(otsu_cut(&hist).ok(), otsu_brute(&hist), "{hist:?}");
    }
}

#[test]
fn otsu_breaks_ties_towards_the_lower_cut() {
    // Two equal spikes with an empty middle: every cut between them ties.
    let hist = [5, 0, 0, 0, 5];
    assert_eq!(otsu_cut(&hist).unwrap(), 0);
    assert_eq!(otsu_brute(&hist), Some(0));
}

#[test]
fn single_occupied_bin_has_no_threshold() {
    assert!(otsu_cut(&[0, 7, 0]).is_err());
    assert!(otsu_threshold(&[0.5; 10], 256).is_err());
}

#[test]
fn histogram_binning_is_right_closed() {
    let mut r = rng(22);
    let channel: Vec<f32> = (0..5000)
        .map(|i| if i % 7 == 0 { (r.gen_range(0..=256) as f32) / 256.0 } else { r.gen() })
        .collect();
    assert_eq!(histogram(&channel, 256), histogram_of(&channel, 256));
    assert_eq!(histogram(&[0.0, 1.0 / 256.0, 1.0], 256)[0], 2);
}

#[test]
fn threshold_separates_two_levels() {
    let mut channel = vec![0.1f32; 300];
    channel.extend(vec![0.8f32; 100]);
    let t = otsu_threshold(&channel, 256).unwrap();
    assert!((0.1..0.8).contains(&t));
    assert_eq!(channel.iter().filter(|&&v| v > t).count(), 100);
}

#[test]
fn auc_matches_pair_counting_with_ties() {
    let mut r = rng(23);
    for _ in 0..50 {
        let n = r.gen_range(2..120);
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        labels[0] = true;
        labels[1] = false;
        let auc = roc_auc(&scores, &labels).unwrap().auc;
        assert!((auc - pair_auc(&scores, &labels)).abs() <= 1e-12);
    }
}

#[test]
fn auc_of_constant_scores_is_one_half() {
    let labels = [true, false, true, false, false];
    assert_eq!(roc_auc(&[0.3; 5], &labels).unwrap().auc, 0.5);
}

#[test]
fn auc_needs_both_labels() {
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn pca_axes_match_jacobi() {
    let mut r = rng(24);
    for _ in 0..10 {
        let data = anisotropic_dataset(&mut r, 80);
        let proj = pca_project(&data, 3).unwrap();
        let (values, vectors) = jacobi_eigen(&sample_covariance(&data));
        for k in 0..3 {
            assert!(axis_distance(&proj.axes[k], &vectors[k]) <= 1e-6);
            assert!((proj.explained_variance[k] - values[k]).abs() <= 1e-9 * values[0]);
        }
        let total: f64 = values.iter().sum();
        assert!((proj.explained_variance_ratio[0] - values[0] / total).abs() < 1e-9);
    }
}

#[test]
fn pca_of_identical_vectors_is_degenerate() {
    assert!(pca_project(&vec![vec![1.0, 2.0, 3.0]; 5], 2).is_err());
}

#[test]
fn jacobi_recovers_a_diagonal_matrix() {
    let m = vec![vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 2.0]];
    let (values, vectors) = jacobi_eigen(&m);
    assert_eq!(values, vec![3.0, 2.0, 1.0]);
    assert_eq!(axis_distance(&vectors[0], &[0.0, 1.0, 0.0]), 0.0);
}

#[test]
fn matcher_is_one_to_one() {
    // Two detections near one glyph: one match, one false positive.
    let s = segmentation_score(&[(0.0, 1.0), (0.0, 2.0)], &[(0.0, 0.0)], 10.0);
    assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (1, 1, 0));
    let s = segmentation_score(&[(0.0, 11.0)], &[(0.0, 0.0)], 10.0);
    assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (0, 1, 1));
}
