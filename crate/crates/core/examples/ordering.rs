//! Final AP under the default order and a few shuffled stream orders.

use coopadapt::runner::ordering_sweep;
use coopadapt::scenario::ScenarioFile;

fn main() -> anyhow::Result<()> {
    let mut m = ScenarioFile::bundled("transition_gap")?.run;
    m.samples = std::env::args().nth(1).map_or(Ok(100), |n| n.parse())?;
    m.metrics_window = m.metrics_window.min(m.samples);
    let rep = ordering_sweep(&m, 3)?;
    println!("default order  {:?}", rep.default_order);
    for (seed, ap) in rep.seeds.iter().zip(&rep.shuffled) {
        println!("seed {seed:>20}  {ap:?}");
    }
    println!("AP50 spread    {:?}", rep.ap50);
    Ok(())
}
