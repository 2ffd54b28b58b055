use millie_core::dataio::synth::{generate_synthetic, SyntheticConfig};
use millie_core::imaging::{segment_field, segmentation_score, SegmentationParams, PATCH_SIDE};

#[test]
fn synthetic_fields_are_recovered() {
    let cfg = SyntheticConfig {
        samples_per_class: 1,
        field_side: 800,
        glyphs_per_field: 20,
        seed: 41,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let params = SegmentationParams::default();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for f in data.samples.iter().flat_map(|s| &s.fields) {
        let patches = segment_field(&f.image, &f.id, &params);
        assert!(patches.iter().all(|p| p.image().width() == PATCH_SIDE && p.image().height() == PATCH_SIDE));
        let pred: Vec<(f64, f64)> = patches.iter().map(|p| p.centroid).collect();
        let truth: Vec<(f64, f64)> = f.glyphs.iter().map(|g| g.center).collect();
        let s = segmentation_score(&pred, &truth, 10.0);
        tp += s.true_positives;
        fp += s.false_positives;
        fn_ += s.false_negatives;
    }
    let recall = tp as f64 / (tp + fn_) as f64;
    let precision = tp as f64 / (tp + fp) as f64;
    assert!(recall >= 0.95 && precision >= 0.95, "recall {recall}, precision {precision}");
}

#[test]
fn segmentation_is_deterministic() {
    let cfg = SyntheticConfig {
        samples_per_class: 1,
        field_side: 500,
        glyphs_per_field: 8,
        seed: 42,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg).unwrap();
    let f = &data.samples[0].fields[0];
    let params = SegmentationParams::default();
    let a = segment_field(&f.image, &f.id, &params);
    let b = segment_field(&f.image, &f.id, &params);
    assert_eq!(a, b);
}
