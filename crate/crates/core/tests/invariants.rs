mod common;

use millie_core::dataio::checkpoint::{decode_checkpoint, encode_checkpoint};
use millie_core::metrics::{kfold, roc_auc};
use millie_core::model::{fuse, predict_inputs, BackboneConfig, FeatureVector, ModelInput, ModelParams};
use proptest::prelude::*;

fn tiny_model(seed: u64) -> ModelParams {
    let backbone = BackboneConfig {
        input_side: 8,
        channels: vec![3],
    };
    ModelParams::init(backbone, vec!["x".into(), "y".into()], &mut common::rng(seed)).unwrap()
}

fn input(bytes: &[u8]) -> ModelInput {
    ModelInput::from_rgb_bytes(bytes, 8, 8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bag_prediction_ignores_order_and_repeats(
        seed in 0u64..1000,
        bags in prop::collection::vec(prop::collection::vec(any::<u8>(), 192), 1..5),
        rot in 0usize..5,
        dup in 0usize..5,
    ) {
        let model = tiny_model(seed);
        let inputs: Vec<ModelInput> = bags.iter().map(|b| input(b)).collect();
        let base = predict_inputs(&inputs, &model).unwrap().probabilities;
        let mut other = inputs.clone();
        other.rotate_left(rot % inputs.len());
        other.push(inputs[dup % inputs.len()].clone());
        let again = predict_inputs(&other, &model).unwrap().probabilities;
        prop_assert_eq!(base, again);
    }

    #[test]
    fn fusion_is_the_elementwise_max(rows in prop::collection::vec(prop::collection::vec(-5i32..5, 6), 1..6)) {
        let feats: Vec<FeatureVector> = rows.iter().map(|r| FeatureVector::new(r.iter().map(|&v| v as f32).collect())).collect();
        let (fused, winners) = fuse(&feats).unwrap();
        for j in 0..6 {
            let col: Vec<i32> = rows.iter().map(|r| r[j]).collect();
            let max = *col.iter().max().unwrap();
            prop_assert_eq!(fused.as_slice()[j], max as f32);
            prop_assert_eq!(winners[j], col.iter().position(|&v| v == max).unwrap());
        }
    }

    #[test]
    fn reversing_labels_complements_auc(
        scores in prop::collection::vec(0u8..6, 4..60),
        labels in prop::collection::vec(any::<bool>(), 60),
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let mut l = labels[..s.len()].to_vec();
        l[0] = true;
        l[1] = false;
        let auc = roc_auc(&s, &l).unwrap().auc;
        let flipped: Vec<bool> = l.iter().map(|b| !b).collect();
        prop_assert_eq!(roc_auc(&s, &flipped).unwrap().auc, 1.0 - auc);
        prop_assert!((0.0..=1.0).contains(&auc));
    }

    #[test]
    fn folds_partition_and_stratify(per_class in prop::collection::vec(3usize..12, 2..4), k in 2usize..4, seed in 0u64..100) {
        let mut labels = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("s{i}")).collect();
        let split = kfold(&ids, &labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for f in 0..k {
            for i in split.test_indices(f) {
                seen[i] += 1;
            }
            let test = split.test_indices(f);
            prop_assert_eq!(test.len() + split.train_indices(f).len(), labels.len());
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        for c in 0..per_class.len() {
            let counts: Vec<usize> = (0..k)
                .map(|f| split.test_indices(f).iter().filter(|&&i| labels[i] == c).count())
                .collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(kfold(&ids, &labels, k, seed).unwrap().folds, split.folds);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in 0u64..1000, note in "[a-z ]{0,12}") {
        let model = tiny_model(seed);
        let extra = vec![("note".to_string(), note)];
        let bytes = encode_checkpoint(&model, &extra).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.model, &model);
        prop_assert_eq!(encode_checkpoint(&back.model, &extra).unwrap(), bytes);
    }
}
