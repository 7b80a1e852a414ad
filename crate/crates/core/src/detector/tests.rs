use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eval::{ap_suite, FrameDetection, FrameTruth};
use crate::world::{generate_scene, render_canonical, WorldProfile};

fn grid() -> Grid {
    Grid { channels: 16, ..Grid::default() }
}

fn rand_field(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureField {
    FeatureField::new(0, Tensor::randn(&[c, h, w], 1.0, rng)).unwrap()
}

#[test]
fn singleton_fusion_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = rand_field(&mut rng, 4, 5, 6);
    for kind in [FusionKind::Max, FusionKind::Weighted] {
        let out = FusionModule::new(kind, 4).fuse_fields(&f, &[]).unwrap();
        assert_eq!(out, f);
    }
}

#[test]
fn max_fusion_of_shifted_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = rand_field(&mut rng, 4, 5, 6);
    let g = FeatureField::new(1, f.values.map(|x| x - 1.0)).unwrap();
    let out = FusionModule::new(FusionKind::Max, 4).fuse_fields(&f, &[&g]).unwrap();
    assert_eq!(out.values, f.values);
}

#[test]
fn weighted_fusion_with_equal_scores_is_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut a = rand_field(&mut rng, 4, 5, 6);
    let mut b = rand_field(&mut rng, 4, 5, 6);
    // the scorer reads channel 0 only
    let occ: Vec<f64> = a.plane(0).to_vec();
    b.values.data_mut()[..30].copy_from_slice(&occ);
    a.agent_id = 0;
    let out = FusionModule::new(FusionKind::Weighted, 4).fuse_fields(&a, &[&b]).unwrap();
    for ((o, x), y) in out.values.data().iter().zip(a.values.data()).zip(b.values.data()) {
        assert!((o - 0.5 * (x + y)).abs() <= 1e-9);
    }
}

#[test]
fn fusion_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = rand_field(&mut rng, 3, 4, 4);
    let n1 = rand_field(&mut rng, 3, 4, 4);
    let n2 = rand_field(&mut rng, 3, 4, 4);
    for kind in [FusionKind::Max, FusionKind::Weighted] {
        let m = FusionModule::new(kind, 3);
        let a = m.fuse_fields(&e, &[&n1, &n2]).unwrap();
        let b = m.fuse_fields(&e, &[&n2, &n1]).unwrap();
        assert!(a.values.max_abs_diff(&b.values).unwrap() <= 1e-12, "{kind}");
    }
}

#[test]
fn fusion_shape_mismatch_names_agent() {
    let e = FeatureField::zeros(0, 3, 4, 4);
    let ok = FeatureField::zeros(1, 3, 4, 4);
    let bad = FeatureField::zeros(2, 3, 4, 5);
    let err = FusionModule::new(FusionKind::Max, 3).fuse_fields(&e, &[&ok, &bad]).unwrap_err();
    assert!(matches!(err, Error::Interface { agent: 2, .. }), "{err}");
}

#[test]
fn zero_head_on_zero_field() {
    let head = DetectionHead::zeros(8);
    let p = head.predict(&FeatureField::zeros(0, 8, 4, 4)).unwrap();
    assert_eq!(p.anchors(), 16);
    assert!(p.cls_logits.data().iter().all(|&x| x == 0.0));
    assert!(p.reg.data().iter().all(|&x| x == 0.0));
    assert_eq!(p.reg.shape(), [16, 6]);
    assert_eq!(p.dir_logits.shape(), [16, 2]);
    assert_eq!(sigmoid(p.cls_logits.data()[0]), 0.5);
}

#[test]
fn head_channel_mismatch() {
    let head = DetectionHead::hand_set(8).unwrap();
    assert!(matches!(head.predict(&FeatureField::zeros(0, 9, 4, 4)), Err(Error::Interface { .. })));
    assert!(matches!(DetectionHead::hand_set(5), Err(Error::Config(_))));
}

#[test]
fn single_box_argmax_at_its_anchor() {
    let g = grid();
    let head = DetectionHead::hand_set(g.channels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let b = OrientedBox::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), 2.0, 4.5, rng.random_range(-3.0..3.0)).unwrap();
        let f = render_canonical(&Scene::open(0, vec![b], vec![]), 0, &g).unwrap();
        let p = head.predict(&f).unwrap();
        let c = p.cls_logits.data();
        let arg = (0..c.len()).max_by(|&i, &j| c[i].total_cmp(&c[j])).unwrap();
        assert_eq!(arg, g.cell_of(b.x, b.y).unwrap());
    }
}

#[test]
fn head_gradient_follows_readout() {
    let head = DetectionHead::hand_set(8).unwrap();
    let mut tape = Tape::new();
    let f = tape.param(0, Tensor::zeros(&[8, 3, 3]));
    let out = head.forward(&mut tape, f).unwrap();
    let cls = tape.gather(out.raw, (0..9).map(|a| out.index(0, a)).collect()).unwrap();
    let s = tape.sum(cls);
    let g = tape.backward(s).unwrap();
    let g = g.get(0).unwrap();
    for ch in 0..8 {
        let nonzero = g.data()[ch * 9..(ch + 1) * 9].iter().all(|&x| x != 0.0);
        assert_eq!(nonzero, head.weight.data()[ch] != 0.0, "channel {ch}");
    }
}

#[test]
fn encode_decode_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let b = OrientedBox::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(0.5..5.0),
            rng.random_range(0.5..9.0),
            rng.random_range(-3.1..3.1),
        )
        .unwrap();
        let (ax, ay) = (b.x.round() + 0.5, b.y.round() - 0.5);
        let d = decode_box(&encode_box(&b, ax, ay), ax, ay);
        for (u, v) in [(d.x, b.x), (d.y, b.y), (d.w, b.w), (d.l, b.l), (d.yaw, b.yaw)] {
            assert!((u - v).abs() <= 1e-9, "{d:?} vs {b:?}");
        }
    }
}

#[test]
fn hand_set_head_recovers_boxes() {
    let g = grid();
    let head = DetectionHead::hand_set(g.channels).unwrap();
    let cells = head.anchor_cells(g.height, g.width);
    let profile = WorldProfile { ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, ..WorldProfile::default() };
    for seed in 0..100 {
        let s = generate_scene(seed, &profile).unwrap();
        let f = render_canonical(&s, 0, &g).unwrap();
        let dets = decode_and_nms(&head.predict(&f).unwrap(), &g, &cells, &DecodeConfig::default());
        for b in &s.boxes {
            let hit = dets.iter().find(|d| (d.bbox.x - b.x).hypot(d.bbox.y - b.y) <= g.cell);
            let d = hit.unwrap_or_else(|| panic!("seed {seed}: no detection near {b:?}"));
            assert!(wrap_angle(d.bbox.yaw - b.yaw).abs() <= 0.15, "seed {seed}: yaw {} vs {}", d.bbox.yaw, b.yaw);
            assert!((d.bbox.w - b.w).abs() < 1e-6 && (d.bbox.l - b.l).abs() < 1e-6);
        }
    }
}

#[test]
fn decode_drops_low_scores() {
    let g = Grid { channels: 8, height: 4, width: 4, ..Grid::default() };
    let p = AnchorPredictions {
        cls_logits: Tensor::full(&[16], -20.0),
        reg: Tensor::zeros(&[16, 6]),
        dir_logits: Tensor::zeros(&[16, 2]),
    };
    let cells: Vec<usize> = (0..16).collect();
    assert!(decode_and_nms(&p, &g, &cells, &DecodeConfig::default()).is_empty());
}

#[test]
fn identical_boxes_self_suppress() {
    let b = OrientedBox::new(0.0, 0.0, 2.0, 4.0, 0.2).unwrap();
    let kept = nms(vec![Detection { bbox: b, score: 0.8 }, Detection { bbox: b, score: 0.9 }], 0.5);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].score, 0.9);
}

/// Keep a candidate iff no higher-scored kept candidate overlaps it, checked
/// by re-scanning the full candidate list.
fn nms_reference(cands: &[Detection], thr: f64) -> Vec<Detection> {
    let n = cands.len();
    let rank = |i: usize| (0..n).filter(|&j| cands[j].score > cands[i].score || (cands[j].score == cands[i].score && j < i)).count();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| rank(i));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = (0..n).any(|j| kept.contains(&j) && rotated_iou(&cands[i].bbox, &cands[j].bbox) > thr);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| cands[i]).collect()
}

#[test]
fn nms_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let cands: Vec<Detection> = (0..20)
            .map(|_| Detection {
                bbox: OrientedBox::new(
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(1.0..3.0),
                    rng.random_range(2.0..5.0),
                    rng.random_range(-3.0..3.0),
                )
                .unwrap(),
                score: (rng.random_range(0..10) as f64) / 10.0,
            })
            .collect();
        assert_eq!(nms(cands.clone(), 0.15), nms_reference(&cands, 0.15));
    }
}

#[test]
fn head_checkpoint_round_trip() {
    let head = DetectionHead::hand_set(8).unwrap();
    let mut buf = Vec::new();
    head.save(&mut buf).unwrap();
    assert_eq!(DetectionHead::load(buf.as_slice()).unwrap(), head);
    assert!(matches!(DetectionHead::load(&buf[..10]), Err(_)));
}

#[test]
fn dir_bins_split_at_offset() {
    assert_eq!(dir_bin(DIR_OFFSET + 0.1), 0);
    assert_eq!(dir_bin(DIR_OFFSET - 0.1), 1);
    let head = DetectionHead::hand_set(8).unwrap();
    for k in 0..24 {
        let yaw = wrap_angle(0.27 * k as f64 + 0.01);
        let b = OrientedBox::new(0.5, 0.5, 2.0, 4.0, yaw).unwrap();
        let g = Grid { channels: 8, height: 8, width: 8, ..Grid::default() };
        let f = render_canonical(&Scene::open(0, vec![b], vec![]), 0, &g).unwrap();
        let p = head.predict(&f).unwrap();
        let a = g.cell_of(0.5, 0.5).unwrap();
        let d = p.dir_logits.data();
        assert_eq!(usize::from(d[2 * a] < d[2 * a + 1]), dir_bin(yaw), "yaw {yaw}");
    }
}

#[test]
fn pretraining_approaches_hand_set_head() {
    let g = Grid { channels: 8, height: 32, width: 32, ..Grid::default() };
    let profile = WorldProfile { extent: 12.0, ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, max_boxes: 6, ..WorldProfile::default() };
    let train: Vec<Scene> = (0..200).map(|s| generate_scene(s, &profile).unwrap()).collect();
    let held: Vec<Scene> = (1000..1050).map(|s| generate_scene(s, &profile).unwrap()).collect();
    let mut start = DetectionHead::zeros(g.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    start.weight = Tensor::randn(start.weight.shape(), 0.01, &mut rng);
    let cfg = PretrainConfig::default();
    let (trained, report) = toy_pretrain(&start, &train, &g, &cfg).unwrap();
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0], "{:?}", report.epoch_losses);
    let ap = |head: &DetectionHead| {
        let cells = head.anchor_cells(g.height, g.width);
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for (i, s) in held.iter().enumerate() {
            let f = render_canonical(s, 0, &g).unwrap();
            for d in decode_and_nms(&head.predict(&f).unwrap(), &g, &cells, &DecodeConfig::default()) {
                preds.push(FrameDetection { frame: i, bbox: d.bbox, score: d.score });
            }
            truth.extend(s.boxes.iter().map(|&b| FrameTruth { frame: i, bbox: b }));
        }
        ap_suite(&preds, &truth).ap50.unwrap()
    };
    let (a_hand, a_toy) = (ap(&DetectionHead::hand_set(g.channels).unwrap()), ap(&trained));
    assert!(a_toy >= a_hand - 0.05, "toy {a_toy} vs hand {a_hand}");
}

#[test]
fn pretraining_divergence_is_reported() {
    let g = Grid { channels: 8, height: 16, width: 16, ..Grid::default() };
    let profile = WorldProfile { extent: 5.0, min_boxes: 1, max_boxes: 1, ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, ..WorldProfile::default() };
    let scenes = vec![generate_scene(0, &profile).unwrap()];
    let mut head = DetectionHead::zeros(8);
    head.bias.data_mut()[0] = f64::NAN;
    assert!(matches!(toy_pretrain(&head, &scenes, &g, &PretrainConfig::default()), Err(Error::Divergence(_))));
}
