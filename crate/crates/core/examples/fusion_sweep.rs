//! With and without the plugin under each fusion kind.

use coopadapt::experiments::{fusion_csv, sweep_fusion};
use coopadapt::scenario::ScenarioFile;

fn main() -> anyhow::Result<()> {
    let mut m = ScenarioFile::bundled("transition_gap")?.run;
    m.samples = std::env::args().nth(1).map_or(Ok(100), |n| n.parse())?;
    m.metrics_window = m.metrics_window.min(m.samples);
    print!("{}", fusion_csv(&sweep_fusion(&m)?));
    Ok(())
}
