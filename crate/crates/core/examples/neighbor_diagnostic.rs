//! What adaptation did to the collaborator on its own: detections from the
//! collaborator's features alone, before and after the stream, scored
//! against the boxes it can see. Also reports fusion with the undistorted
//! render as an upper bound.

use coopadapt::eval::{ap_suite, FrameDetection, FrameTruth};
use coopadapt::detector::decode_and_nms;
use coopadapt::plugin::apply;
use coopadapt::runner::{run_stream, sample_fields, Stack};
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::generate_scene;

fn main() -> anyhow::Result<()> {
    let mut m = ScenarioFile::bundled("transition_gap")?.run;
    if let Some(n) = std::env::args().nth(1) {
        m.samples = n.parse()?;
        m.metrics_window = m.metrics_window.min(m.samples);
    }
    let r = run_stream(&m)?;
    let specs = m.resolved_distortions()?;
    let stack = Stack::new(&m)?;
    let tail = &r.records[m.samples - m.samples / 5..];
    let (mut raw, mut canon, mut adapted, mut seen, mut oracle, mut truth) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for rec in tail {
        let frame = rec.frame;
        let scene = generate_scene(m.scene_seed(frame), &m.world)?;
        let f = sample_fields(&m, &scene, frame, &specs)?;
        let a = apply(&r.plugins[0], &m.plugin, &f.neighbors[0], &f.ego)?;
        for (field, out) in [(&f.neighbors[0], &mut raw), (&f.canonical[0], &mut canon), (&a, &mut adapted)] {
            for d in decode_and_nms(&stack.head.predict(field)?, &m.grid, &stack.cells, &m.decode) {
                out.push(FrameDetection { frame, bbox: d.bbox, score: d.score });
            }
        }
        let c: Vec<_> = f.canonical.iter().collect();
        for d in stack.detect(&f.ego, &c, &m.grid, &m.decode)? {
            oracle.push(FrameDetection { frame, bbox: d.bbox, score: d.score });
        }
        for (i, b) in scene.boxes.iter().enumerate() {
            truth.push(FrameTruth { frame, bbox: *b });
            if scene.visibility[1][i] > 0.0 {
                seen.push(FrameTruth { frame, bbox: *b });
            }
        }
    }
    println!("last {} samples", tail.len());
    println!("collaborator alone, distorted      {:?}", ap_suite(&raw, &seen).ap50);
    println!("collaborator alone, undistorted    {:?}", ap_suite(&canon, &seen).ap50);
    println!("collaborator alone, final plugin   {:?}", ap_suite(&adapted, &seen).ap50);
    println!("fusion with undistorted render     {:?}", ap_suite(&oracle, &truth).ap50);
    println!("summary: adapted {:?} unadapted {:?} ego {:?}", r.summary.adapted.ap50, r.summary.unadapted.ap50, r.summary.ego.ap50);
    Ok(())
}
