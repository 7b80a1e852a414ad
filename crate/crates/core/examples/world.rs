//! One synthetic scene: who sees what, and how far the distorted collaborator
//! features drift from the canonical render.

use coopadapt::bev::{feature_scale, linear_cka, scale_alignment};
use coopadapt::runner::sample_fields;
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::{generate_scene, BoxCategory};

fn main() -> anyhow::Result<()> {
    let m = ScenarioFile::bundled("transition_gap")?.run;
    let specs = m.resolved_distortions()?;
    for frame in 0..3 {
        let scene = generate_scene(m.scene_seed(frame), &m.world)?;
        let count = |c: BoxCategory| scene.categories.iter().filter(|&&x| x == c).count();
        println!(
            "frame {frame}: {} boxes (both {}, neighbor only {}, ego partial {}, ego only {}), {} occluders",
            scene.boxes.len(),
            count(BoxCategory::Both),
            count(BoxCategory::NeighborOnly),
            count(BoxCategory::EgoPartial),
            count(BoxCategory::EgoOnly),
            scene.occluders.len()
        );
        let f = sample_fields(&m, &scene, frame, &specs)?;
        let (n, c) = (&f.neighbors[0], &f.canonical[0]);
        println!(
            "  neighbor vs canonical: CKA {:.3}, scale alignment {:.3}, scales {:.3} / {:.3}",
            linear_cka(n, c)?.value,
            scale_alignment(n, c)?.value,
            feature_scale(n),
            feature_scale(c)
        );
    }
    Ok(())
}
