use proptest::prelude::*;

use semaforge::branches::{decide, fake_score, fuse, fuse_masked, PossibilityMatrix, WeightMatrix, NUM_FRAGMENTS};
use semaforge::eval::roc_auc;
use semaforge::mfss::{group_landmarks, rasterize_masks, segment, extract_fragments, Fragment, MfssConfig};
use semaforge::synthetic::{apply_manipulation, sample_face, FamilyKind, ManipulationFamily};

fn pmat() -> impl Strategy<Value = PossibilityMatrix> {
    prop::array::uniform6(0.0f64..=1.0).prop_map(|a| PossibilityMatrix {
        cols: a.map(|v| [v, 1.0 - v]),
    })
}

fn wmat() -> impl Strategy<Value = WeightMatrix> {
    prop::array::uniform6(0.0f64..=1.0).prop_map(|w| WeightMatrix { w })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_is_linear_in_weights(p in pmat(), a in wmat(), b in wmat()) {
        let sum = WeightMatrix { w: std::array::from_fn(|i| a.w[i] + b.w[i]) };
        let (sa, sb, ss) = (fuse(&p, &a), fuse(&p, &b), fuse(&p, &sum));
        for y in 0..2 {
            prop_assert!((ss[y] - sa[y] - sb[y]).abs() < 1e-12);
        }
    }

    #[test]
    fn fused_scores_sum_to_total_weight(p in pmat(), w in wmat()) {
        let s = fuse(&p, &w);
        prop_assert!((s[0] + s[1] - w.w.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn decision_invariant_under_positive_scaling(p in pmat(), w in wmat(), c in 1e-3f64..1e3) {
        let s = fuse(&p, &w);
        prop_assume!((s[0] - s[1]).abs() > 1e-9);
        prop_assert_eq!(decide(fuse(&p, &w.scaled(c))), decide(s));
        prop_assert!((fake_score(fuse(&p, &w.scaled(c))) - fake_score(s)).abs() < 1e-12);
    }

    #[test]
    fn masking_a_fragment_equals_zero_weight(p in pmat(), w in wmat(), drop in 0usize..NUM_FRAGMENTS) {
        let mut keep = [true; NUM_FRAGMENTS];
        keep[drop] = false;
        let mut zeroed = w;
        zeroed.w[drop] = 0.0;
        prop_assert_eq!(fuse_masked(&p, &w, &keep), fuse(&p, &zeroed));
    }

    #[test]
    fn auc_symmetric_under_label_flip(
        data in prop::collection::vec((0u8..8, any::<bool>()), 2..50)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
        let labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let (_, a) = roc_auc(&scores, &labels).unwrap();
        let (_, b) = roc_auc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        let squashed: Vec<f64> = scores.iter().map(|s| (s * 0.3).tanh()).collect();
        let (_, c) = roc_auc(&squashed, &labels).unwrap();
        prop_assert!((a - c).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_faces_partition_exactly(seed in any::<u64>(), dx in -8i32..=8, dy in -8i32..=8) {
        let (img, lm) = sample_face(seed).unwrap();
        let cfg = MfssConfig::default();
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let m = rasterize_masks(&group_landmarks(&lm, &cfg).unwrap(), h, w).unwrap();
        let (p, b, f) = (m.get(Fragment::Pic), m.get(Fragment::Background), m.get(Fragment::Face));
        prop_assert_eq!(&b.or(f), p);
        prop_assert!(b.and(f).is_empty());
        for r in [Fragment::Eyes, Fragment::Nose, Fragment::Mouth] {
            prop_assert!(!m.get(r).is_empty());
            prop_assert!(m.get(r).is_subset_of(f));
        }
        let moved = rasterize_masks(&group_landmarks(&lm.translate(dx as f64, dy as f64), &cfg).unwrap(), h, w).unwrap();
        let face = m.get(Fragment::Face);
        let face_moved = moved.get(Fragment::Face);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let (tx, ty) = (x + dx, y + dy);
                if (0..w as i32).contains(&tx) && (0..h as i32).contains(&ty) {
                    prop_assert_eq!(face.get(x as usize, y as usize), face_moved.get(tx as usize, ty as usize));
                }
            }
        }
    }

    #[test]
    fn crops_have_requested_size_and_unit_range(seed in any::<u64>(), size in prop::sample::select(vec![32usize, 48, 64])) {
        let (img, lm) = sample_face(seed).unwrap();
        let cfg = MfssConfig { fragment_size: size, ..MfssConfig::default() };
        let seg = segment(&img, &lm, &cfg).unwrap();
        let frags = extract_fragments(&img, &seg.masks, size, "x").unwrap();
        for f in Fragment::ALL {
            let c = frags.get(f);
            prop_assert_eq!(c.shape(), &[size, size, 3]);
            prop_assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn local_families_stay_inside_their_region(seed in any::<u64>(), strength in 0.3f64..=1.0, mouth in any::<bool>()) {
        let (img, lm) = sample_face(seed).unwrap();
        let kind = if mouth { FamilyKind::LocalMouth } else { FamilyKind::LocalEyes };
        let region = if mouth { Fragment::Mouth } else { Fragment::Eyes };
        let fake = apply_manipulation(&img, &lm, &ManipulationFamily::new(kind, strength, seed).unwrap()).unwrap();
        let seg = segment(&img, &lm, &MfssConfig::default()).unwrap();
        let mask = seg.masks.get(region);
        let w = img.shape()[1];
        let mut changed = 0;
        for (k, (a, b)) in img.data().chunks(3).zip(fake.data().chunks(3)).enumerate() {
            if a != b {
                changed += 1;
                prop_assert!(mask.get(k % w, k / w));
            }
        }
        prop_assert!(changed > 0);
    }
}
