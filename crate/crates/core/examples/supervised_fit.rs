//! Capacity check: fit the plugin directly to the undistorted render with a
//! squared-error loss. If this recovers the collaborator, the adapter can
//! represent the inverse distortion.

use coopadapt::bev::linear_cka;
use coopadapt::detector::decode_and_nms;
use coopadapt::distill::{OptimConfig, Optimizer};
use coopadapt::eval::{ap_suite, FrameDetection, FrameTruth};
use coopadapt::grad::Tape;
use coopadapt::plugin::{apply, plugin_forward};
use coopadapt::runner::{init_plugins, sample_fields, Stack};
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::generate_scene;

fn main() -> anyhow::Result<()> {
    let m = ScenarioFile::bundled("transition_gap")?.run;
    let oc = OptimConfig { lr: 1e-3, ..OptimConfig::default() };
    let specs = m.resolved_distortions()?;
    let stack = Stack::new(&m)?;
    let mut p = init_plugins(&m)?.remove(0);
    let mut opt = Optimizer::new(&p.tensors());
    for i in 0..200 {
        let scene = generate_scene(m.scene_seed(i), &m.world)?;
        let f = sample_fields(&m, &scene, i, &specs)?;
        let mut tape = Tape::new();
        let a = plugin_forward(&p, &m.plugin, &f.neighbors[0], &f.ego, &mut tape, true)?;
        let c = tape.constant(f.canonical[0].values.clone());
        let d = tape.sub(a, c)?;
        let sq = tape.mul(d, d)?;
        let l = tape.sum(sq);
        let loss = tape.value(l).item();
        let g = tape.backward(l)?;
        opt.step(&mut p.tensors_mut(), &g, &oc);
        if i % 25 == 0 || i == 199 {
            let out = apply(&p, &m.plugin, &f.neighbors[0], &f.ego)?;
            let dets: Vec<_> = decode_and_nms(&stack.head.predict(&out)?, &m.grid, &stack.cells, &m.decode)
                .into_iter()
                .map(|d| FrameDetection { frame: 0, bbox: d.bbox, score: d.score })
                .collect();
            let truth: Vec<_> = (0..scene.boxes.len())
                .filter(|&j| scene.visibility[1][j] > 0.0)
                .map(|j| FrameTruth { frame: 0, bbox: scene.boxes[j] })
                .collect();
            println!(
                "step {i:>3}: loss {loss:10.3}  collaborator-alone AP50 {:?}  CKA to canonical {:.3}",
                ap_suite(&dets, &truth).ap50,
                linear_cka(&out, &f.canonical[0])?.value
            );
        }
    }
    Ok(())
}
