//! Per-sample latency of the teacher, plain fusion, plugin forward and the
//! full online step.

use coopadapt::runner::{run_stream, timing_report};
use coopadapt::scenario::ScenarioFile;

fn main() -> anyhow::Result<()> {
    let mut m = ScenarioFile::bundled("transition_gap")?.run;
    m.samples = 50;
    m.metrics_window = 50;
    let rep = timing_report(&run_stream(&m)?.records);
    println!("{} samples, milliseconds", rep.samples);
    for (name, l) in [
        ("teacher", rep.teacher),
        ("fusion, no plugin", rep.forward_without_plugin),
        ("fusion with plugin", rep.forward_with_plugin),
        ("online step", rep.online_step),
    ] {
        println!("{name:20} median {:8.2}  p95 {:8.2}  total {:9.1}", l.median, l.p95, l.total);
    }
    Ok(())
}
