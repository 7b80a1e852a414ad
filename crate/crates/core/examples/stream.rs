//! Streams a bundled scenario once and prints the summary and prefix-AP trace.
//!
//! Usage: `cargo run --release --example stream [scenario] [samples]`

use coopadapt::runner::{prefix_ap_trace, run_stream, summary_json};
use coopadapt::scenario::ScenarioFile;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "transition_gap".into());
    let mut m = ScenarioFile::bundled(&name)?.run;
    if let Some(n) = args.next() {
        m.samples = n.parse()?;
        m.metrics_window = m.metrics_window.min(m.samples);
    }
    let r = run_stream(&m)?;
    print!("{}", summary_json(&r.summary)?);
    println!("prefix  adapted  unadapted  ego");
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    for p in prefix_ap_trace(&r.records, &r.truth, (m.samples / 10).max(1))? {
        println!("{:>6}  {:>7}  {:>9}  {:>5}", p.prefix, f(p.adapted), f(p.unadapted), f(p.ego));
    }
    Ok(())
}
