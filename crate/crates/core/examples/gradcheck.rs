//! Tape gradients of the adaptation loss against central finite differences.

use coopadapt::verify::plugin_gradient_check;

fn main() -> anyhow::Result<()> {
    for seed in [3, 4, 5] {
        let r = plugin_gradient_check(seed)?;
        println!(
            "seed {seed}: {} scalars, |m_hi|={} |m_boost|={}, max rel err {:.2e} at {}",
            r.params, r.m_hi, r.m_boost, r.max_rel_err, r.worst
        );
    }
    Ok(())
}
