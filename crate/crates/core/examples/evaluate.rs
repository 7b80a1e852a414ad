//! Evaluation from serialized detections: JSONL out, JSONL back in, then AP
//! and a PR point, checked against the run's own summary.

use std::io::BufReader;

use coopadapt::eval::{ap_suite, export_pr, greedy_match, read_detections_jsonl, rotated_iou, write_detections_jsonl};
use coopadapt::runner::{frame_dets, run_stream, Curve};
use coopadapt::scenario::ScenarioFile;
use coopadapt::world::OrientedBox;

fn main() -> anyhow::Result<()> {
    let a = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)?;
    let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4)?;
    println!("unit square vs itself at 45 degrees: IoU {:.6}", rotated_iou(&a, &b));

    let mut m = ScenarioFile::bundled("benign")?.run;
    m.samples = 40;
    m.metrics_window = 40;
    let r = run_stream(&m)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("detections_adapted.jsonl");
    write_detections_jsonl(std::fs::File::create(&path)?, &frame_dets(&r.records, Curve::Adapted))?;
    let dets = read_detections_jsonl(BufReader::new(std::fs::File::open(&path)?))?;
    let ap = ap_suite(&dets, &r.truth);
    println!("{} detections read back, {} truth boxes", dets.len(), r.truth.len());
    println!("recomputed {ap:?}");
    println!("summary    {:?}", r.summary.adapted);
    let pr = export_pr(&greedy_match(&dets, &r.truth, 0.5));
    println!("precision at recall 0.5: {:.4}, max recall {:.4}", pr.precision_at_recall(0.5), pr.max_recall());
    Ok(())
}
