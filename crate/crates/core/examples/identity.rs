//! A fresh plugin passes the neighbor features through almost unchanged.

use coopadapt::plugin::{alpha, identity_check, PluginConfig, PluginParams};

fn main() -> anyhow::Result<()> {
    let default = PluginConfig::default();
    let testbed = PluginConfig { hidden: 32, blocks: 1, gn_groups: 8, ..default };
    for (name, cfg, grid) in [("default", default, (24, 24)), ("testbed", testbed, (48, 48))] {
        let p = PluginParams::init(&cfg, 0)?;
        let r = identity_check(&p, &cfg, grid, 10, 1e-3, 1)?;
        println!(
            "{name:8} h={:<3} b={} params={:>7}  alpha={:.2e}  max rel dev over {} pairs: {:.2e} ({})",
            cfg.hidden,
            cfg.blocks,
            cfg.param_count(),
            alpha(&p)[0],
            r.trials,
            r.max_rel_dev,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
