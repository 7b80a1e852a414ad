//! Component knockouts on a shortened transition-gap stream.
//!
//! Usage: `cargo run --release --example ablation [axis] [samples]`

use coopadapt::experiments::{ablate, ablation_csv, AblationAxis};
use coopadapt::scenario::ScenarioFile;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis: AblationAxis = args.next().as_deref().unwrap_or("components").parse()?;
    let mut s = ScenarioFile::bundled("transition_gap")?;
    s.run.samples = args.next().map_or(Ok(100), |n| n.parse())?;
    s.run.metrics_window = s.run.metrics_window.min(s.run.samples);
    print!("{}", ablation_csv(&ablate(&s.run, axis, &s.sweep)?));
    Ok(())
}
