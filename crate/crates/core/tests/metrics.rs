mod support;

use ndarray::Array2;
use proptest::prelude::*;
use visuomotor_core::metrics::{weighted_fbeta, BinaryMask, MetricConfig};

const GT: [bool; 16] = [
    false, true, true, false, //
    false, true, true, true, //
    false, false, true, false, //
    false, false, false, false,
];

fn pred_from_bits(bits: u32) -> Vec<f64> {
    (0..16).map(|i| f64::from((bits >> i) & 1)).collect()
}

fn gt_mask(gt: &[bool], h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn((h, w), |(r, c)| gt[r * w + c])
}

fn production(pred: &[f64], gt: &BinaryMask) -> f64 {
    let (h, w) = gt.dim();
    let p = Array2::from_shape_vec((h, w), pred.to_vec()).unwrap();
    weighted_fbeta(p.view(), gt, &MetricConfig::default()).unwrap()
}

#[test]
fn oracle_hand_case_perfect() {
    let gt = gt_mask(&GT, 4, 4);
    let perfect: Vec<f64> = GT.iter().map(|&g| f64::from(u8::from(g))).collect();
    assert_eq!(
        support::fbeta::weighted_fbeta(&perfect, &GT, 4, 4, 1.0),
        1.0
    );
    assert_eq!(production(&perfect, &gt), 1.0);
}

#[test]
fn exhaustive_agreement_and_monotone_improvement() {
    let gt = gt_mask(&GT, 4, 4);
    let gt_bits: u32 = (0..16).filter(|&i| GT[i]).map(|i| 1 << i).sum();
    let mut scores = vec![0.0; 1 << 16];
    for bits in 0..1u32 << 16 {
        let pred = pred_from_bits(bits);
        let fast = production(&pred, &gt);
        let slow = support::fbeta::weighted_fbeta(&pred, &GT, 4, 4, 1.0);
        assert!(
            (fast - slow).abs() <= 1e-10,
            "bits {bits:#06x}: {fast} vs {slow}"
        );
        scores[bits as usize] = fast;
    }
    for bits in 0..1u32 << 16 {
        let wrong = bits ^ gt_bits;
        for i in 0..16 {
            if wrong & (1 << i) != 0 {
                let better = scores[(bits ^ (1 << i)) as usize];
                assert!(
                    better >= scores[bits as usize] - 1e-12,
                    "bits {bits:#06x}, pixel {i}"
                );
            }
        }
    }
    assert_eq!(scores[gt_bits as usize], 1.0);
}

proptest! {
    #[test]
    fn random_maps_agree_with_oracle(
        (h, w, gt, pred) in (2usize..9, 2usize..9).prop_flat_map(|(h, w)| (
            Just(h),
            Just(w),
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(0.0f64..=1.0, h * w),
        ))
    ) {
        let mask = gt_mask(&gt, h, w);
        let fast = production(&pred, &mask);
        let slow = support::fbeta::weighted_fbeta(&pred, &gt, h, w, 1.0);
        prop_assert!((fast - slow).abs() <= 1e-10, "{} vs {}", fast, slow);
    }
}
