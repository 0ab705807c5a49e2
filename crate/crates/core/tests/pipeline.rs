use std::collections::HashSet;

use proptest::prelude::*;

use uncertflow::datagen::{generate_dataset, generate_sample, sample_rng, target_cell, GenConfig};
use uncertflow::geometry::{compose_with_homography, homography_to_flow, warp_bilinear};
use uncertflow::inference::{
    cyclic_filter, extract_matches, infer_direct, infer_multiscale_ms, infer_multistage_h, sparse_match,
    InferenceConfig, MatchSet,
};
use uncertflow::io::{read_manifest, MatchRecord};
use uncertflow::model::train::load_dataset;
use uncertflow::model::{ModelConfig, ModelWeights};
use uncertflow::{FlowField, Homography, Image};

fn small_config() -> GenConfig {
    let mut g = GenConfig::default();
    g.base.width = 24;
    g.base.height = 24;
    g.base.margin = 6;
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_samples_are_well_formed(seed in 0u64..1_000, index in 0u64..1_000) {
        let pack = generate_sample(&small_config(), &[], &mut sample_rng(seed, index)).unwrap();
        prop_assert!(pack.inj_mask.is_subset_of(&pack.occ_mask));
        prop_assert!(pack.gt_flow.is_finite());
        for im in [&pack.query, &pack.reference] {
            prop_assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut seen = HashSet::new();
        for y in 0..pack.height() {
            for x in 0..pack.width() {
                if !pack.inj_mask.get(x, y) {
                    if let Some(c) = target_cell(&pack.gt_flow, x, y) {
                        prop_assert!(seen.insert(c));
                    }
                }
            }
        }
    }

    #[test]
    fn match_count_equals_thresholded_pixels(
        w in 1usize..12, h in 1usize..12, gamma in 0.05f64..0.95,
        vals in proptest::collection::vec(0.0f64..1.0, 144),
    ) {
        let pr = Image::from_fn(w, h, 1, |x, y, _| vals[y * w + x]);
        let flow = FlowField::zeros(w, h);
        let want = (0..w * h).filter(|&i| vals[i] >= gamma).count();
        prop_assert_eq!(extract_matches(&flow, &pr, gamma).unwrap().len(), want);
    }
}

#[test]
fn extremes_of_the_confidence_map() {
    let flow = FlowField::zeros(6, 5);
    assert!(extract_matches(&flow, &Image::new(6, 5, 1), 0.1).unwrap().is_empty());
    let mut partly = flow.clone();
    partly.set_valid(2, 2, false);
    assert_eq!(extract_matches(&partly, &Image::filled(6, 5, 1, 1.0), 0.1).unwrap().len(), 29);
}

#[test]
fn dataset_layout_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = small_config();
    generate_dataset(&g, &[], 3, 42, dir.path()).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!((m.count, m.seed, m.width), (3, 42, 24));
    assert_eq!(m.config_hash, g.hash());
    let samples = load_dataset(dir.path()).unwrap();
    assert_eq!(samples.len(), 3);
    let fresh = generate_sample(&g, &[], &mut sample_rng(42, 1)).unwrap();
    assert_eq!(samples[1].flow.valid(), fresh.gt_flow.valid());
    assert_eq!(samples[1].excluded, fresh.inj_mask);
    for (a, b) in samples[1].flow.vectors().iter().zip(fresh.gt_flow.vectors()) {
        assert!((a[0] - b[0]).abs() < 1e-3 && (a[1] - b[1]).abs() < 1e-3);
    }
}

#[test]
fn homography_flow_warps_query_onto_reference() {
    let pack = generate_sample(&small_config(), &[], &mut sample_rng(3, 3)).unwrap();
    let flow = homography_to_flow(&Homography::translation(2.0, -1.0), 24, 24).unwrap();
    let (warped, out_of_view) = warp_bilinear(&pack.query, &flow).unwrap();
    assert_eq!(out_of_view.count(), 24 * 24 - 22 * 23);
    for y in 1..24 {
        for x in 0..22 {
            assert!(!out_of_view.get(x, y));
            assert!((warped.get(x, y, 1) - pack.query.get(x + 2, y - 1, 1)).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_composition_keeps_the_flow() {
    let f = FlowField::from_fn(9, 7, |x, y| [0.3 * x as f64, -0.2 * y as f64]);
    let out = compose_with_homography(&Homography::identity(), &f);
    for (a, b) in out.vectors().iter().zip(f.vectors()) {
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }
}

#[test]
fn inference_modes_are_deterministic_and_well_shaped() {
    let pack = generate_sample(&GenConfig::default(), &[], &mut sample_rng(5, 0)).unwrap();
    let w = ModelWeights::init(ModelConfig::for_image(64, 64), 2).unwrap();
    let cfg = InferenceConfig::default();
    let d = infer_direct(&pack.query, &pack.reference, &w, &cfg).unwrap();
    assert_eq!((d.flow.width(), d.flow.height()), (64, 64));
    assert!(d.flow.is_finite());
    let h1 = infer_multistage_h(&pack.query, &pack.reference, &w, &cfg).unwrap();
    let h2 = infer_multistage_h(&pack.query, &pack.reference, &w, &cfg).unwrap();
    assert_eq!(h1.flow, h2.flow);
    let ms = infer_multiscale_ms(
        &pack.query,
        &pack.reference,
        &w,
        &InferenceConfig {
            ms_ratios: vec![1.0],
            ..cfg.clone()
        },
    )
    .unwrap();
    assert_eq!(ms.flow, h1.flow);
    assert!(ms.confidence.data().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn sparse_matching_pairs_nearest_keypoints() {
    let flow = FlowField::constant(20, 20, [2.0, 1.0]);
    let pr = Image::filled(20, 20, 1, 0.9);
    let kr = vec![[3.0, 3.0], [10.0, 4.0], [15.0, 15.0]];
    let kq = vec![[5.5, 4.0], [12.0, 5.0], [12.4, 5.2], [1.0, 1.0]];
    let cfg = InferenceConfig::default();
    let m = sparse_match(&flow, &pr, &kr, &kq, &cfg).unwrap();
    for rec in &m.entries {
        let mapped = [rec.reference[0] + 2.0, rec.reference[1] + 1.0];
        let best = kq
            .iter()
            .min_by(|a, b| {
                let da = (a[0] - mapped[0]).hypot(a[1] - mapped[1]);
                let db = (b[0] - mapped[0]).hypot(b[1] - mapped[1]);
                da.total_cmp(&db)
            })
            .unwrap();
        assert_eq!(rec.query, *best);
        assert!((best[0] - mapped[0]).hypot(best[1] - mapped[1]) < cfg.keypoint_dist);
    }
    assert_eq!(m.len(), 2);

    let back = MatchSet {
        entries: vec![MatchRecord {
            reference: [5.5, 4.0],
            query: [3.2, 3.1],
            confidence: 1.0,
        }],
    };
    let kept = cyclic_filter(&m, &back, cfg.cyclic_thresh);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept.entries[0].reference, [3.0, 3.0]);
}
