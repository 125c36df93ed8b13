use std::collections::BTreeMap;

use autograd::{Tape, Tensor};
use proptest::prelude::*;

use refertrack::chook::{build_grid, SegmentGrids, augment_grids, AugmentConfig, GRID_SHAPES};
use refertrack::domain::{segment_label, window_segments, BoundingBox, MatchingRelation, RelationRecord, Trajectory, TrajectorySet, TrajectorySegment};
use refertrack::evalkit::{assemble_tracks, hota, roc_auc, Aggregation, PairScores};
use refertrack::ingest::{parse_tracker_str, tokenize, tracker_to_string, Vocab};
use refertrack::objective::{barrier_term, boundary_penalty, ObjectiveConfig};
use refertrack::pcd::build_mask;
use refertrack::synthdata::{evaluate_oracle, grammar, grammar_vocab, generate_scene, predicate_holds, SceneConfig};
use refertrack::temporal::{fused_channels, pool_time};

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..600.0f64, 0.0..200.0f64, 0.5..70.0f64, 0.5..24.0f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h).unwrap())
}

fn trajectory(id: u32, max_frame: u32) -> impl Strategy<Value = Trajectory> {
    prop::collection::btree_map(0..max_frame, bbox(), 1..12).prop_map(move |boxes| Trajectory { target_id: id, boxes })
}

fn track_set(max_tracks: usize, max_frame: u32) -> impl Strategy<Value = TrajectorySet> {
    prop::collection::vec(trajectory(0, max_frame), 0..=max_tracks).prop_map(|ts| TrajectorySet {
        video_id: "v".into(),
        trajectories: ts.into_iter().enumerate().map(|(i, t)| Trajectory { target_id: i as u32 + 1, ..t }).collect(),
    })
}

/// Concordant positive/negative pairs (ties count half) over all such pairs.
fn brute_auc(scored: &[(f64, u8)]) -> Option<f64> {
    let (mut twice_concordant, mut pairs) = (0u64, 0u64);
    for &(sp, lp) in scored {
        for &(sn, ln) in scored {
            if lp == 1 && ln == 0 {
                pairs += 1;
                twice_concordant += if sp > sn { 2 } else if sp == sn { 1 } else { 0 };
            }
        }
    }
    (pairs > 0).then(|| twice_concordant as f64 / 2.0 / pairs as f64)
}

proptest! {
    #[test]
    fn grid_corners_are_box_corners(b in bbox(), h in 2usize..20, w in 2usize..60) {
        let g = build_grid(&b, h, w).unwrap();
        let at = |y: usize, x: usize| (g.data()[(y * w + x) * 2], g.data()[(y * w + x) * 2 + 1]);
        prop_assert_eq!(at(0, 0), (b.x0, b.y0));
        prop_assert_eq!(at(0, w - 1), (b.x0 + b.w, b.y0));
        prop_assert_eq!(at(h - 1, 0), (b.x0, b.y0 + b.h));
        prop_assert_eq!(at(h - 1, w - 1), (b.x0 + b.w, b.y0 + b.h));
    }

    #[test]
    fn zero_augmentation_is_identity(boxes in prop::collection::vec(bbox(), 1..6), seed: u64) {
        let present = vec![true; boxes.len()];
        let grids = SegmentGrids::new(&boxes, &present, &GRID_SHAPES).unwrap();
        let mut batch = vec![grids.clone(), grids.clone()];
        let zero = AugmentConfig { drop_prob: 0.0, noise_sigma: 0.0, swap_prob: 0.0, enabled: true };
        augment_grids(&mut batch, &zero, seed);
        prop_assert_eq!(&batch[0], &grids);
        prop_assert_eq!(&batch[1], &grids);
    }

    #[test]
    fn labels_ignore_record_order(
        recs in prop::collection::vec((0u32..3, 0u32..12, 0u32..12), 0..10),
        start in 0u32..10,
        p in 1usize..6,
        seed: u64,
    ) {
        let records: Vec<RelationRecord> = recs
            .iter()
            .map(|&(e, a, b)| RelationRecord { expr_id: e, target_id: 1, frame_start: a.min(b), frame_end: a.max(b) })
            .collect();
        let mut shuffled = records.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = MatchingRelation::new(records, 0..3, [1]).unwrap();
        let b = MatchingRelation::new(shuffled, 0..3, [1]).unwrap();
        let present: Vec<bool> = (0..p).map(|k| k % 3 != 2).collect();
        let seg = TrajectorySegment { target_id: 1, start_frame: start, boxes: vec![BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(); p], present };
        for e in 0..3 {
            prop_assert_eq!(segment_label(&a, &seg, e).unwrap(), segment_label(&b, &seg, e).unwrap());
        }
    }

    #[test]
    fn window_count_matches_formula(first in 0u32..20, span in 1usize..40, p in 1usize..8, stride in 1usize..6) {
        let mut t = Trajectory::new(3);
        for f in first..first + span as u32 {
            t.boxes.insert(f, BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap());
        }
        let segs = window_segments(&t, p, stride).unwrap();
        let expected = if span >= p { (span - p) / stride + 1 } else { 1 };
        prop_assert_eq!(segs.len(), expected);
        for s in &segs {
            prop_assert_eq!(s.len(), p);
            prop_assert_eq!(s.present.len(), p);
            prop_assert!(s.present.iter().any(|&x| x));
        }
    }

    #[test]
    fn windows_have_length_p_with_gaps(t in trajectory(1, 30), p in 1usize..6, stride in 1usize..5) {
        for s in window_segments(&t, p, stride).unwrap() {
            prop_assert_eq!(s.boxes.len(), p);
            for (f, &present) in s.frames().zip(&s.present) {
                prop_assert_eq!(present, t.boxes.contains_key(&f));
            }
        }
    }

    #[test]
    fn tracker_file_round_trip(set in track_set(5, 40)) {
        let text = tracker_to_string(&set);
        let (back, warnings) = parse_tracker_str(&text, "v", (224, 672)).unwrap();
        prop_assert_eq!(warnings.dropped_boxes + warnings.duplicates, 0);
        prop_assert_eq!(back, set);
    }

    #[test]
    fn tokenization_is_total_and_deterministic(text in "\\PC{0,80}", len in 1usize..30) {
        let vocab = Vocab::build(["red car moving left", "blue"]);
        let a = tokenize(&text, &vocab, len);
        prop_assert_eq!(a.0.len(), len);
        prop_assert_eq!(a.1.len(), len);
        prop_assert_eq!(a, tokenize(&text, &vocab, len));
    }

    #[test]
    fn mask_rows_open_exactly_their_keys(
        hw in 1usize..40,
        slots in 1usize..8,
        refs in 0usize..5,
        tokens in 1usize..8,
        pad_bits in prop::collection::vec(any::<bool>(), 64),
    ) {
        let pad = &pad_bits[..slots * tokens];
        let mask = build_mask(hw, slots, refs, tokens, pad);
        for i in 0..slots {
            let pads = pad[i * tokens..(i + 1) * tokens].iter().filter(|&&x| x).count();
            prop_assert_eq!(mask.open_keys(i).len(), hw + refs + tokens - pads);
        }
    }

    #[test]
    fn fused_width_formula(p in 1usize..10, c in 1usize..200) {
        prop_assert_eq!(fused_channels(p, c), p * c + (p - 1) * 2);
    }

    #[test]
    fn time_pooling_ignores_frame_order(vals in prop::collection::vec(-10.0..10.0f64, 24), seed: u64) {
        let x = Tensor::new(&[4, 3, 2], vals);
        let mut order: Vec<usize> = (0..4).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let permuted = Tensor::from_fn(&[4, 3, 2], |i| x.data()[order[i / 6] * 6 + i % 6]);
        let tape = Tape::<f64>::detached(false);
        let a = pool_time(tape.constant(x)).value();
        let b = pool_time(tape.constant(permuted)).value();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn barrier_never_increases_with_margin(a in (-1.0..1.0f64, -1.0..1.0f64), b in (-1.0..1.0f64, -1.0..1.0f64)) {
        let cfg = ObjectiveConfig::default();
        let d = |(u, v): (f64, f64)| (1.0 - u.abs()).min(1.0 - v.abs());
        let (lo, hi) = if d(a) <= d(b) { (a, b) } else { (b, a) };
        prop_assert!(barrier_term(hi.0, hi.1, &cfg) <= barrier_term(lo.0, lo.1, &cfg));
        let tape = Tape::<f64>::detached(false);
        let pen = |pt: (f64, f64)| boundary_penalty(tape.constant(Tensor::new(&[1, 2], vec![pt.0, pt.1])), &cfg).value().item();
        prop_assert!(pen(hi) <= pen(lo));
        prop_assert!((pen(hi) - barrier_term(hi.0, hi.1, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn auc_equals_concordance_count(scored in prop::collection::vec((0u8..6, 0u8..2), 0..=20)) {
        let scored: Vec<(f64, u8)> = scored.into_iter().map(|(s, l)| (s as f64 / 5.0, l)).collect();
        prop_assert_eq!(roc_auc(&scored), brute_auc(&scored));
    }

    #[test]
    fn lower_threshold_keeps_every_frame(
        set in track_set(3, 16),
        probs in prop::collection::vec(0.0..1.0f64, 64),
        t_lo in 0.0..1.0f64,
        dt in 0.0..0.5f64,
        max in any::<bool>(),
    ) {
        let p = 4;
        let mut scores = PairScores::new();
        let mut k = 0;
        for e in 0..2u32 {
            for t in &set.trajectories {
                for start in (t.first_frame().unwrap()..=t.last_frame().unwrap()).step_by(2) {
                    scores.insert((e, t.target_id, start), probs[k % probs.len()]);
                    k += 1;
                }
            }
        }
        let agg = if max { Aggregation::Max } else { Aggregation::Mean };
        let lo = assemble_tracks(&scores, &set, 0..2, p, t_lo, agg);
        let hi = assemble_tracks(&scores, &set, 0..2, p, t_lo + dt, agg);
        for (e, hs) in &hi {
            for ht in &hs.trajectories {
                let lt = lo[e].get(ht.target_id).expect("trajectory kept");
                for f in ht.boxes.keys() {
                    prop_assert!(lt.boxes.contains_key(f));
                }
            }
        }
    }

    #[test]
    fn hota_ignores_prediction_labels(gt in track_set(3, 8), pred in track_set(3, 8), shift in 1u32..50) {
        let n = pred.trajectories.len() as u32;
        let relabeled = TrajectorySet {
            video_id: pred.video_id.clone(),
            trajectories: pred
                .trajectories
                .iter()
                .rev()
                .map(|t| Trajectory { target_id: (n - t.target_id) * 7 + shift, boxes: t.boxes.clone() })
                .collect(),
        };
        let a = hota(&pred, &gt);
        let b = hota(&relabeled, &gt);
        prop_assert!((a.hota - b.hota).abs() < 1e-12, "{:?} vs {:?}", a, b);
        prop_assert!((a.deta - b.deta).abs() < 1e-12);
        prop_assert!((a.assa - b.assa).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn oracle_ranges_are_maximal(seed in 0u64..10_000) {
        let vocab = grammar_vocab();
        let cfg = SceneConfig { seed, ..Default::default() };
        let scene = generate_scene(&cfg, &vocab, 25).unwrap();
        let truth = scene.truth();
        for template in grammar() {
            for traj in &scene.tracks.trajectories {
                let ranges = evaluate_oracle(&template, traj, &truth);
                let mut covered = BTreeMap::new();
                for &(s, e) in &ranges {
                    prop_assert!(s <= e);
                    for f in s..=e {
                        prop_assert!(predicate_holds(template.predicate, traj, f, &truth));
                        covered.insert(f, ());
                    }
                    for f in [s.checked_sub(1), Some(e + 1)].into_iter().flatten() {
                        if traj.boxes.contains_key(&f) {
                            prop_assert!(!predicate_holds(template.predicate, traj, f, &truth));
                        }
                    }
                }
                for &f in traj.boxes.keys() {
                    prop_assert_eq!(covered.contains_key(&f), predicate_holds(template.predicate, traj, f, &truth));
                }
            }
        }
    }
}

#[test]
fn perturbed_seed_changes_scene() {
    let vocab = grammar_vocab();
    let a = generate_scene(&SceneConfig { seed: 1, ..Default::default() }, &vocab, 25).unwrap();
    let b = generate_scene(&SceneConfig { seed: 2, ..Default::default() }, &vocab, 25).unwrap();
    assert_ne!(a.clip.frames, b.clip.frames);
    assert_ne!(a.tracks.trajectories, b.tracks.trajectories);
}
