use super::*;
use crate::distill::OptimConfig;
use crate::eval::ap_suite;
use crate::world::OrientedBox;

fn small() -> RunManifest {
    RunManifest {
        scenario: "small".into(),
        seed: 3,
        samples: 16,
        grid: Grid { channels: 16, height: 24, width: 24, clutter_amplitude: 0.05, ..Grid::default() },
        world: WorldProfile { extent: 8.0, min_separation: 5.0, max_boxes: 5, neighbor_range: [6.0, 10.0], ..WorldProfile::default() },
        distortions: vec![DistortionRecipe::LogGain { spread: 0.5, seed: 1 }],
        plugin: PluginConfig { channels: 16, hidden: 8, blocks: 1, gn_groups: 4, ..PluginConfig::default() },
        ttt: TttConfig { optim: OptimConfig { lr: 3e-3, ..OptimConfig::default() }, ..TttConfig::default() },
        metrics_window: 8,
        ..RunManifest::default()
    }
}

#[test]
fn passthrough_student_is_baseline() {
    let r = run_stream(&RunManifest { passthrough: true, ..small() }).unwrap();
    for rec in &r.records {
        assert_eq!(rec.student_dets_preupdate, rec.baseline_dets);
        assert!(rec.collab.is_empty());
    }
    assert_eq!(r.summary.adapted, r.summary.unadapted);
}

#[test]
fn no_collaborators_student_is_teacher() {
    let mut m = small();
    m.world.neighbors = 0;
    m.world.ego_blind = 0.0;
    m.world.ego_only = 0.0;
    let r = run_stream(&m).unwrap();
    for rec in &r.records {
        assert_eq!(rec.student_dets_preupdate, rec.teacher_dets);
    }
    assert_eq!(r.summary.adapted, r.summary.ego);
}

#[test]
fn benign_stream_stays_near_ego() {
    let mut m = small();
    m.samples = 30;
    m.distortions = vec![DistortionRecipe::None];
    m.world = WorldProfile { ego_blind: 0.0, ego_partial: 0.0, ego_only: 0.0, extra_occluders: 0, ..m.world };
    for passthrough in [false, true] {
        let r = run_stream(&RunManifest { passthrough, ..m.clone() }).unwrap();
        let (a, e) = (r.summary.adapted.ap50.unwrap(), r.summary.ego.ap50.unwrap());
        assert!((a - e).abs() <= 0.01, "passthrough={passthrough}: {a} vs {e}");
    }
}

#[test]
fn predictions_precede_updates() {
    let m = small();
    let full = run_stream(&m).unwrap();
    for freeze in [0, 5, 11] {
        let frozen = run_stream_with(&m, RunHooks { freeze_from: Some(freeze), ..RunHooks::default() }).unwrap();
        for t in 0..=freeze {
            assert_eq!(frozen.records[t].student_dets_preupdate, full.records[t].student_dets_preupdate, "freeze {freeze} sample {t}");
        }
        assert!(frozen.records[freeze].collab.iter().all(|c| c.step.is_none()));
    }
}

#[test]
fn stream_visits_each_sample_once() {
    let m = RunManifest { order: StreamOrder::Shuffled { seed: 9 }, ..small() };
    let r = run_stream(&m).unwrap();
    let mut frames: Vec<usize> = r.records.iter().map(|x| x.frame).collect();
    assert_ne!(frames, (0..m.samples).collect::<Vec<_>>());
    frames.sort();
    assert_eq!(frames, (0..m.samples).collect::<Vec<_>>());
    assert!(r.records.iter().enumerate().all(|(i, x)| x.sample_index == i));
}

#[test]
fn final_params_replay_per_sample_steps() {
    let m = RunManifest { samples: 6, ..small() };
    let r = run_stream(&m).unwrap();
    let specs = m.resolved_distortions().unwrap();
    let stack = Stack::new(&m).unwrap();
    let mut p = init_plugins(&m).unwrap().remove(0);
    let mut opt = Optimizer::new(&p.tensors());
    for frame in m.stream_order() {
        let scene = generate_scene(m.scene_seed(frame), &m.world).unwrap();
        let f = sample_fields(&m, &scene, frame, &specs).unwrap();
        let teacher = stack.head.predict(&f.ego).unwrap();
        let masks = build_masks(&teacher, &m.ttt);
        let mut tape = Tape::new();
        let a = plugin_forward(&p, &m.plugin, &f.neighbors[0], &f.ego, &mut tape, true).unwrap();
        let e = tape.constant(f.ego.values.clone());
        let fused = stack.fusion.fuse(&mut tape, e, &[a]).unwrap();
        let out = stack.head.forward(&mut tape, fused).unwrap();
        let l = total_loss(&mut tape, &out, &teacher, &masks, &m.ttt).unwrap();
        let g = tape.backward(l.total).unwrap();
        opt.step(&mut p.tensors_mut(), &g, &m.ttt.optim);
    }
    assert_eq!(p, r.plugins[0]);
}

#[test]
fn collaborators_adapt_independently() {
    let mut m = RunManifest { samples: 8, ..small() };
    m.world.neighbors = 2;
    m.distortions.push(DistortionRecipe::Mix { leak: 0.3, fan_in: 2, seed: 4 });
    let both = run_stream(&m).unwrap();
    let solo = run_stream_with(&m, RunHooks { frozen_collab: Some(1), ..RunHooks::default() }).unwrap();
    assert_eq!(both.plugins[0], solo.plugins[0]);
    assert_ne!(both.plugins[1], solo.plugins[1]);
    assert_eq!(solo.plugins[1], init_plugins(&m).unwrap()[1]);
}

#[test]
fn runs_are_deterministic() {
    let m = small();
    let a = run_stream(&m).unwrap();
    let b = run_stream(&m).unwrap();
    assert_eq!(summary_json(&a.summary).unwrap(), summary_json(&b.summary).unwrap());
    assert_eq!(a.plugins, b.plugins);
}

#[test]
fn stream_errors_carry_sample_index() {
    let m = small();
    let err = run_stream_with(&m, RunHooks { mismatch_at: Some(9), ..RunHooks::default() }).unwrap_err();
    let Error::Stream { index, source } = &err else { panic!("{err}") };
    assert_eq!(*index, 9);
    assert!(matches!(**source, Error::Interface { agent: 1, .. }), "{source}");
    assert_eq!(err.exit_code(), 3);
}

fn record(frame: usize, dets: Vec<Detection>) -> StreamRecord {
    StreamRecord {
        sample_index: frame,
        frame,
        teacher_dets: dets.clone(),
        student_dets_preupdate: dets.clone(),
        baseline_dets: dets,
        m_hi: 0,
        m_boost: 0,
        collab: Vec::new(),
        timing: Timing::default(),
    }
}

#[test]
fn prefix_of_one_perfect_frame() {
    let b = OrientedBox::new(1.0, 2.0, 2.0, 4.0, 0.3).unwrap();
    let recs = vec![record(0, vec![Detection { bbox: b, score: 0.9 }])];
    let truth = vec![FrameTruth { frame: 0, bbox: b }];
    let t = prefix_ap_trace(&recs, &truth, 1).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].adapted, Some(1.0));
    assert!(prefix_ap_trace(&recs, &truth, 0).is_err());
}

#[test]
fn prefix_trace_matches_recomputation() {
    let r = run_stream(&RunManifest { order: StreamOrder::Shuffled { seed: 2 }, ..small() }).unwrap();
    let trace = prefix_ap_trace(&r.records, &r.truth, 5).unwrap();
    assert_eq!(trace.iter().map(|p| p.prefix).collect::<Vec<_>>(), [5, 10, 15, 16]);
    let last = trace.last().unwrap();
    assert_eq!(last.adapted, r.summary.adapted.ap50);
    assert_eq!(last.unadapted, r.summary.unadapted.ap50);
    assert_eq!(last.ego, r.summary.ego.ap50);
    for p in &trace {
        let recs = &r.records[..p.prefix];
        let frames: Vec<usize> = recs.iter().map(|x| x.frame).collect();
        let truth: Vec<FrameTruth> = r.truth.iter().filter(|t| frames.contains(&t.frame)).copied().collect();
        assert_eq!(p.adapted, ap_suite(&frame_dets(recs, Curve::Adapted), &truth).ap50);
        assert_eq!(p.ego, ap_suite(&frame_dets(recs, Curve::Ego), &truth).ap50);
    }
}

#[test]
fn identical_order_seeds_have_zero_spread() {
    let m = RunManifest { samples: 6, ..small() };
    let rep = ordering_sweep_with_seeds(&m, &[5, 5]).unwrap();
    assert_eq!(rep.shuffled[0], rep.shuffled[1]);
    assert_eq!(rep.ap50.std, 0.0);
    assert!(ordering_sweep_with_seeds(&m, &[5]).is_err());
    assert_eq!(order_seeds(&m, 5).len(), 5);
}

#[test]
fn spread_uses_sample_std() {
    let s = Spread::of(&[1.0, 2.0, 3.0, 4.0]);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!((s.mean, s.min, s.max), (2.5, 1.0, 4.0));
}

#[test]
fn timing_report_replays_from_log() {
    let r = run_stream(&small()).unwrap();
    let rep = timing_report(&r.records);
    assert!(rep.forward_without_plugin.median <= rep.forward_with_plugin.median);
    assert!(rep.online_step.median > rep.forward_with_plugin.median);
    let lines: Vec<LogLine> = r.records.iter().map(|x| serde_json::from_str(&serde_json::to_string(&x.log_line()).unwrap()).unwrap()).collect();
    let total: f64 = lines.iter().map(|l| l.timing.step_ms).sum();
    assert!((total - rep.online_step.total).abs() <= 1e-9 * total.max(1.0));
}

#[test]
fn latency_quantiles() {
    let l = Latency::of(&(1..=100).map(f64::from).collect::<Vec<_>>());
    assert_eq!((l.median, l.p95, l.total), (51.0, 95.0, 5050.0));
}

#[test]
fn artifacts_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_stream(&RunManifest { samples: 4, ..small() }).unwrap();
    write_artifacts(&r, dir.path(), 2).unwrap();
    for f in ["manifest.toml", "summary.json", "log.jsonl", "prefix_ap.csv", "pr_adapted.csv", "detections_ego.jsonl", "truth.jsonl", "plugin_0.ntsr"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let echoed = crate::scenario::ScenarioFile::load(&dir.path().join("manifest.toml")).unwrap().run;
    assert_eq!(echoed, r.manifest);
    let again = run_stream(&echoed).unwrap();
    assert_eq!(summary_json(&again.summary).unwrap(), std::fs::read_to_string(dir.path().join("summary.json")).unwrap());
}

#[test]
fn worker_pool_preserves_order() {
    let xs: Vec<u64> = (0..37).collect();
    assert_eq!(par_map(&xs, |x| x * x), xs.iter().map(|x| x * x).collect::<Vec<_>>());
}
