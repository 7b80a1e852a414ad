//! A single adaptation step by hand: teacher masks, the two loss terms, and
//! what the optimizer did with the gradient.

use coopadapt::distill::{build_masks, total_loss, Optimizer};
use coopadapt::grad::Tape;
use coopadapt::plugin::plugin_forward;
use coopadapt::runner::{init_plugins, sample_fields, Stack};
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::generate_scene;

fn main() -> anyhow::Result<()> {
    let m = ScenarioFile::bundled("transition_gap")?.run;
    let specs = m.resolved_distortions()?;
    let stack = Stack::new(&m)?;
    let mut plugin = init_plugins(&m)?.remove(0);
    let mut opt = Optimizer::new(&plugin.tensors());
    for frame in 0..5 {
        let scene = generate_scene(m.scene_seed(frame), &m.world)?;
        let f = sample_fields(&m, &scene, frame, &specs)?;
        let teacher = stack.head.predict(&f.ego)?;
        let masks = build_masks(&teacher, &m.ttt);
        let mut tape = Tape::new();
        let adapted = plugin_forward(&plugin, &m.plugin, &f.neighbors[0], &f.ego, &mut tape, true)?;
        let ego = tape.constant(f.ego.values.clone());
        let fused = stack.fusion.fuse(&mut tape, ego, &[adapted])?;
        let out = stack.head.forward(&mut tape, fused)?;
        let l = total_loss(&mut tape, &out, &teacher, &masks, &m.ttt)?;
        let (pres, enh) = (l.pres, l.enh);
        let g = tape.backward(l.total)?;
        let step = opt.step(&mut plugin.tensors_mut(), &g, &m.ttt.optim);
        println!(
            "sample {frame}: |m_hi|={:<4} |m_boost|={:<3} L_pres={pres:.4} L_enh={enh:.4} grad norm {:.3e} -> {:.3e}{}",
            masks.m_hi.len(),
            masks.m_boost.len(),
            step.norm_pre_clip,
            step.norm_post_clip,
            if step.skipped { " (skipped)" } else { "" }
        );
    }
    Ok(())
}
