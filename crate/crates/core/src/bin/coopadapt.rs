use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use coopadapt::experiments::{ablate, ablation_csv, fusion_csv, sweep_fusion, AblationAxis};
use coopadapt::runner::{ordering_sweep, run_stream, summary_json, timing_report, write_artifacts, write_atomic};
use coopadapt::scenario::ScenarioFile;
use coopadapt::verify::{run_suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "coopadapt", version, about = "Online feature adaptation for cooperative BEV detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Stream a scenario once and write its artifacts.
    Run(Common),
    /// Run one ablation grid and write a CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// loss, plugin-size, components or tau-hi
        #[arg(long)]
        axis: String,
    },
    /// Repeat the scenario under every fusion kind.
    SweepFusion(Common),
    /// Final AP spread across shuffled stream orders.
    Ordering {
        #[command(flatten)]
        common: Common,
        /// Number of shuffled orders (defaults to the scenario's sweep setting).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Run the property and oracle suite.
    Verify {
        /// Test hook: start every plugin with a nonzero output projection.
        #[arg(long, hide = true)]
        corrupt_w_out: bool,
    },
    /// Forward and update latency of one run.
    Timing(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or the name of a bundled scenario.
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Fuse raw collaborator features; no adaptation.
    #[arg(long)]
    passthrough: bool,
    /// Drop the enhancement term (lambda = 0).
    #[arg(long)]
    no_boost: bool,
    #[arg(long)]
    tau_hi: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Output directory (defaults to the scenario's, then out/<scenario>).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(ScenarioFile, PathBuf)> {
        let mut s = ScenarioFile::load(&self.scenario)?;
        let m = &mut s.run;
        if let Some(seed) = self.seed {
            m.seed = seed;
        }
        m.passthrough |= self.passthrough;
        if let Some(t) = self.tau_hi {
            m.ttt.tau_hi = t;
            m.ttt.tau_lo = m.ttt.tau_lo.min(t);
        }
        if let Some(l) = self.lambda {
            m.ttt.lambda = l;
        }
        if self.no_boost {
            m.ttt.lambda = 0.0;
        }
        m.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| s.output_dir.clone())
            .unwrap_or_else(|| Path::new("out").join(&s.run.scenario));
        Ok((s, out))
    }
}

fn save(out: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    write_atomic(&path, |w| Ok(w.write_all(text.as_bytes())?)).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<coopadapt::Error>()).map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run(c) => {
            let (s, out) = c.load()?;
            let r = run_stream(&s.run)?;
            write_artifacts(&r, &out, s.sweep.prefix_every).with_context(|| format!("writing artifacts to {}", out.display()))?;
            print!("{}", summary_json(&r.summary)?);
        }
        Cmd::Ablate { common, axis } => {
            let axis: AblationAxis = axis.parse()?;
            let (s, out) = common.load()?;
            let csv = ablation_csv(&ablate(&s.run, axis, &s.sweep)?);
            save(&out, &format!("ablation_{axis}.csv"), &csv)?;
            print!("{csv}");
        }
        Cmd::SweepFusion(c) => {
            let (s, out) = c.load()?;
            let csv = fusion_csv(&sweep_fusion(&s.run)?);
            save(&out, "fusion.csv", &csv)?;
            print!("{csv}");
        }
        Cmd::Ordering { common, runs } => {
            let (s, out) = common.load()?;
            let rep = ordering_sweep(&s.run, runs.unwrap_or(s.sweep.ordering_runs))?;
            let json = serde_json::to_string_pretty(&rep)? + "\n";
            save(&out, "ordering.json", &json)?;
            print!("{json}");
        }
        Cmd::Verify { corrupt_w_out } => {
            let results = run_suite(&VerifyOptions { corrupt_w_out });
            for r in &results {
                println!("{} {:<22} {:>7.2}s  {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.secs, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(ExitCode::from(coopadapt::Error::Verification(String::new()).exit_code() as u8));
            }
        }
        Cmd::Timing(c) => {
            let (s, out) = c.load()?;
            let r = run_stream(&s.run)?;
            let json = serde_json::to_string_pretty(&timing_report(&r.records))? + "\n";
            save(&out, "timing.json", &json)?;
            print!("{json}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
