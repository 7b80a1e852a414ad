//! The frozen hand-set detector: ego-only versus fusion with an undistorted
//! collaborator.

use coopadapt::eval::{ap_suite, FrameDetection, FrameTruth};
use coopadapt::runner::{sample_fields, Stack};
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::generate_scene;

fn main() -> anyhow::Result<()> {
    let m = ScenarioFile::bundled("transition_gap")?.run;
    let specs = m.resolved_distortions()?;
    let stack = Stack::new(&m)?;
    let (mut ego, mut fused, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for frame in 0..100 {
        let scene = generate_scene(m.scene_seed(frame), &m.world)?;
        let f = sample_fields(&m, &scene, frame, &specs)?;
        let canon: Vec<_> = f.canonical.iter().collect();
        for d in stack.detect(&f.ego, &[], &m.grid, &m.decode)? {
            ego.push(FrameDetection { frame, bbox: d.bbox, score: d.score });
        }
        for d in stack.detect(&f.ego, &canon, &m.grid, &m.decode)? {
            fused.push(FrameDetection { frame, bbox: d.bbox, score: d.score });
        }
        truth.extend(scene.boxes.iter().map(|&bbox| FrameTruth { frame, bbox }));
    }
    println!("{} frames, {} boxes", 100, truth.len());
    println!("ego only             {:?}", ap_suite(&ego, &truth));
    println!("fused, undistorted   {:?}", ap_suite(&fused, &truth));
    Ok(())
}
