mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use graffmap::detection::{
    area_fraction, average_precision, decode_mask, emit_annotation_file, emit_detection_file, mask_iou,
    parse_annotation_file, parse_detection_file, AnnotationSet, DetectionError, DetectionSet, Instance, RleMask,
};

fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Up to 4 images with up to 5 detections and up to 5 annotations each.
fn random_ap_case(rng: &mut ChaCha8Rng) -> (Vec<DetectionSet>, Vec<AnnotationSet>) {
    loop {
        let images = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let mut dets = Vec::new();
        let mut anns = Vec::new();
        for i in 0..images {
            let id = format!("img{i}");
            let truth: Vec<RleMask> = (0..rng.random_range(0..=5)).map(|_| random_mask(rng, h, w)).collect();
            // Detections perturb some of the truth masks so matches happen.
            let n_det = rng.random_range(0..=5);
            let instances = (0..n_det)
                .map(|_| {
                    let mask = match truth.get(rng.random_range(0..truth.len().max(1))) {
                        Some(t) if rng.random_bool(0.6) => {
                            let mut bits = decode_counts(t.counts());
                            for b in &mut bits {
                                if rng.random_bool(0.15) {
                                    *b = !*b;
                                }
                            }
                            RleMask::new(h, w, encode_bits(&bits)).unwrap()
                        }
                        _ => random_mask(rng, h, w),
                    };
                    let conf = if rng.random_bool(0.2) {
                        0.5
                    } else {
                        random_confidence(rng)
                    };
                    Instance::new(mask, conf).unwrap()
                })
                .collect();
            anns.push(AnnotationSet::new(id.clone(), w, h, truth).unwrap());
            if rng.random_bool(0.85) {
                dets.push(DetectionSet::new(id, w, h, instances).unwrap());
            }
        }
        if anns.iter().any(|a| !a.masks().is_empty()) {
            return (dets, anns);
        }
    }
}

#[test]
fn ap_matches_exhaustive_oracle() {
    let mut rng = rng_from(11);
    for case in 0..500 {
        let (dets, anns) = random_ap_case(&mut rng);
        for thr in [0.5, 0.3, 0.75] {
            let got = average_precision(&dets, &anns, thr).unwrap();
            let want = oracle_ap(&dets, &anns, thr);
            assert!((got - want).abs() <= 1e-12, "case {case} thr {thr}: {got} vs {want}");
        }
    }
}

#[test]
fn union_area_matches_pixel_count() {
    let mut rng = rng_from(12);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let set = random_detection_set(&mut rng, "x", h, w, 6);
        for thr in [0.0, 0.25, 0.5, 0.9, 1.0] {
            assert_eq!(area_fraction(&set, thr), oracle_area_fraction(&set, thr));
        }
    }
}

#[test]
fn mask_iou_matches_pixel_count() {
    let mut rng = rng_from(13);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        assert_eq!(mask_iou(&a, &b).unwrap(), oracle_iou(&a, &b));
    }
}

#[test]
fn overlap_example_is_unioned() {
    // 30 and 40 pixels sharing 10 on a 10 x 10 image.
    let mut a = vec![false; 100];
    let mut b = vec![false; 100];
    a[..30].iter_mut().for_each(|x| *x = true);
    b[20..60].iter_mut().for_each(|x| *x = true);
    let set = DetectionSet::new(
        "o",
        10,
        10,
        vec![
            Instance::new(RleMask::new(10, 10, encode_bits(&a)).unwrap(), 0.9).unwrap(),
            Instance::new(RleMask::new(10, 10, encode_bits(&b)).unwrap(), 0.8).unwrap(),
        ],
    )
    .unwrap();
    assert_eq!(area_fraction(&set, 0.5), 0.6);
}

#[test]
fn perfect_detector_scores_one() {
    let mut rng = rng_from(14);
    for _ in 0..50 {
        let (_, anns) = random_ap_case(&mut rng);
        let dets: Vec<DetectionSet> = anns
            .iter()
            .map(|a| {
                let inst = a
                    .masks()
                    .iter()
                    .map(|m| Instance::new(m.clone(), 1.0).unwrap())
                    .collect();
                DetectionSet::new(a.image_id(), a.width(), a.height(), inst).unwrap()
            })
            .collect();
        // Empty truth masks cannot be matched (IoU is 0), so keep only
        // cases where every annotation is non-empty.
        if anns.iter().flat_map(|a| a.masks()).any(|m| m.area() == 0) {
            continue;
        }
        assert_eq!(average_precision(&dets, &anns, 0.5).unwrap(), 1.0);
    }
}

#[test]
fn wrong_sum_names_the_instance() {
    let text = r#"{"format_version":1,"images":[{"image_id":"a","width":2,"height":2,"instances":[
        {"label":"graffiti","confidence":0.9,"rle":{"size":[2,2],"counts":[4]}},
        {"label":"graffiti","confidence":0.8,"rle":{"size":[2,2],"counts":[1,2]}}]}]}"#;
    match parse_detection_file(text.as_bytes()) {
        Err(DetectionError::SchemaViolation { pointer, .. }) => {
            assert!(pointer.starts_with("/images/0/instances/1"), "{pointer}")
        }
        other => panic!("expected schema violation, got {other:?}"),
    }
}

fn arb_mask() -> impl Strategy<Value = RleMask> {
    (1u32..8, 1u32..8).prop_flat_map(|(h, w)| {
        prop::collection::vec(any::<bool>(), (h * w) as usize)
            .prop_map(move |bits| RleMask::new(h, w, encode_bits(&bits)).unwrap())
    })
}

fn arb_set() -> impl Strategy<Value = DetectionSet> {
    (1u32..6, 1u32..6, "[a-f0-9]{1,12}").prop_flat_map(|(h, w, id)| {
        prop::collection::vec(
            (prop::collection::vec(any::<bool>(), (h * w) as usize), 0u32..=100),
            0..5,
        )
        .prop_map(move |raw| {
            let inst = raw
                .into_iter()
                .map(|(bits, c)| {
                    Instance::new(RleMask::new(h, w, encode_bits(&bits)).unwrap(), c as f64 / 100.0).unwrap()
                })
                .collect();
            DetectionSet::new(id.clone(), w, h, inst).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn encode_decode_round_trip(m in arb_mask()) {
        let grid = decode_mask(&m);
        prop_assert_eq!(RleMask::encode(&grid).unwrap(), m.clone());
        prop_assert_eq!(grid.bits().to_vec(), decode_counts(m.counts()));
    }

    #[test]
    fn iou_symmetric_and_reflexive(a in arb_mask(), seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let b = random_mask(&mut rng, a.height(), a.width());
        prop_assert_eq!(mask_iou(&a, &b).unwrap(), mask_iou(&b, &a).unwrap());
        if a.area() > 0 {
            prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn area_fraction_monotone_in_threshold(set in arb_set(), t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(area_fraction(&set, hi) <= area_fraction(&set, lo));
    }

    #[test]
    fn wire_round_trip(sets in prop::collection::vec(arb_set(), 0..4)) {
        let mut seen = std::collections::HashSet::new();
        let sets: Vec<DetectionSet> = sets.into_iter().filter(|s| seen.insert(s.image_id().to_string())).collect();
        let bytes = emit_detection_file(&sets);
        prop_assert_eq!(parse_detection_file(&bytes).unwrap(), sets.clone());
        let anns: Vec<AnnotationSet> = sets
            .iter()
            .map(|s| AnnotationSet::new(s.image_id(), s.width(), s.height(), s.instances().iter().map(|i| i.mask().clone()).collect()).unwrap())
            .collect();
        prop_assert_eq!(parse_annotation_file(&emit_annotation_file(&anns)).unwrap(), anns);
    }

    #[test]
    fn ap_invariant_under_rescaling(seed in any::<u64>(), pick in 0usize..6) {
        let factor = [1.0, 0.5, 0.25, 0.125, 0.37, 0.9][pick];
        let mut rng = rng_from(seed);
        let (dets, anns) = random_ap_case(&mut rng);
        let scaled: Vec<DetectionSet> = dets.iter().map(|d| d.with_scaled_confidences(factor).unwrap()).collect();
        prop_assert_eq!(
            average_precision(&dets, &anns, 0.5).unwrap(),
            average_precision(&scaled, &anns, 0.5).unwrap()
        );
    }
}
