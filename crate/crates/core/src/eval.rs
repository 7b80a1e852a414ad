//! Rotated BEV IoU, greedy confidence-ordered matching, pooled PR curves and
//! VOC2010-interpolated AP.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::OrientedBox;

/// IoU thresholds reported by [`ap_suite`].
pub const AP_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

fn shoelace(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Clips a polygon against the left side of each edge of a CCW convex
/// `clip` polygon.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Intersection-over-union of two oriented rectangles; 0 for degenerate boxes.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if !(aa > 0.0 && ab > 0.0) || !aa.is_finite() || !ab.is_finite() {
        return 0.0;
    }
    let inter = shoelace(&clip_convex(&a.corners(), &b.corners())).abs();
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A detection tagged with the frame (sample) it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameDetection {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
}

/// Ranked TP/FP labels for a pooled prediction set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    /// `(score, is_tp)` in descending score order.
    pub ranked: Vec<(f64, bool)>,
    pub n_truth: usize,
}

/// Sweeps predictions by descending score (stable for ties); each takes its
/// highest-IoU still-unmatched truth in the same frame and is a TP iff that
/// IoU exceeds `iou_thresh`.
pub fn greedy_match(preds: &[FrameDetection], truth: &[FrameTruth], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| preds[j].score.total_cmp(&preds[i].score));
    let max_frame = truth.iter().map(|t| t.frame + 1).max().unwrap_or(0);
    let mut by_frame: Vec<Vec<usize>> = vec![Vec::new(); max_frame];
    for (i, t) in truth.iter().enumerate() {
        by_frame[t.frame].push(i);
    }
    let mut used = vec![false; truth.len()];
    let mut ranked = Vec::with_capacity(preds.len());
    for i in order {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_frame.get(p.frame) {
            for &t in cands {
                if used[t] {
                    continue;
                }
                let iou = rotated_iou(&p.bbox, &truth[t].bbox);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((t, iou));
                }
            }
        }
        let tp = match best {
            Some((t, iou)) if iou > iou_thresh => {
                used[t] = true;
                true
            }
            _ => false,
        };
        ranked.push((p.score, tp));
    }
    MatchResult { ranked, n_truth: truth.len() }
}

/// Cumulative `(precision, recall)` after each ranked prediction.
fn cumulative_pr(m: &MatchResult) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    let n = m.n_truth.max(1) as f64;
    m.ranked
        .iter()
        .enumerate()
        .map(|(k, &(_, is_tp))| {
            tp += is_tp as usize;
            (tp as f64 / (k + 1) as f64, tp as f64 / n)
        })
        .collect()
}

/// Area under the right-to-left precision envelope over all recall points.
/// `None` when there is no ground truth.
pub fn voc2010_ap(m: &MatchResult) -> Option<f64> {
    if m.n_truth == 0 {
        return None;
    }
    let pr = cumulative_pr(m);
    let mut prec: Vec<f64> = pr.iter().map(|p| p.0).collect();
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (i, &(_, r)) in pr.iter().enumerate() {
        if r > last_r {
            ap += (r - last_r) * prec[i];
            last_r = r;
        }
    }
    Some(ap)
}

/// AP at IoU 0.3 / 0.5 / 0.7.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApTriple {
    pub ap30: Option<f64>,
    pub ap50: Option<f64>,
    pub ap70: Option<f64>,
}

pub fn ap_suite(preds: &[FrameDetection], truth: &[FrameTruth]) -> ApTriple {
    let [a, b, c] = AP_THRESHOLDS.map(|t| voc2010_ap(&greedy_match(preds, truth, t)));
    ApTriple { ap30: a, ap50: b, ap70: c }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Pooled precision-recall curve, one point per ranked prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_truth: usize,
}

pub fn export_pr(m: &MatchResult) -> PrCurve {
    let points = m
        .ranked
        .iter()
        .zip(cumulative_pr(m))
        .map(|(&(s, _), (p, r))| PrPoint { threshold: s, precision: p, recall: if m.n_truth == 0 { 0.0 } else { r } })
        .collect();
    PrCurve { points, n_truth: m.n_truth }
}

impl PrCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# n_truth={}", self.n_truth)?;
        writeln!(out, "threshold,precision,recall")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.precision, p.recall)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut n_truth = 0;
        let mut points = Vec::new();
        for line in input.lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# n_truth=") {
                n_truth = rest.trim().parse().map_err(|_| Error::contract("bad n_truth header"))?;
                continue;
            }
            if line.starts_with("threshold") || line.trim().is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::contract(format!("bad PR row {line:?}")))?;
            if v.len() != 3 {
                return Err(Error::contract(format!("bad PR row {line:?}")));
            }
            points.push(PrPoint { threshold: v[0], precision: v[1], recall: v[2] });
        }
        Ok(PrCurve { points, n_truth })
    }

    /// Interpolated AP from the stored points (same rule as [`voc2010_ap`]).
    pub fn integrate(&self) -> Option<f64> {
        if self.n_truth == 0 {
            return None;
        }
        let mut env = 0.0f64;
        let mut prec: Vec<f64> = vec![0.0; self.points.len()];
        for i in (0..self.points.len()).rev() {
            env = env.max(self.points[i].precision);
            prec[i] = env;
        }
        let mut ap = 0.0;
        let mut last_r = 0.0;
        for (i, p) in self.points.iter().enumerate() {
            if p.recall > last_r {
                ap += (p.recall - last_r) * prec[i];
                last_r = p.recall;
            }
        }
        Some(ap)
    }

    /// Envelope precision at recall `r`: best precision among points with
    /// recall at least `r` (0 if unreachable).
    pub fn precision_at_recall(&self, r: f64) -> f64 {
        self.points.iter().filter(|p| p.recall >= r).map(|p| p.precision).fold(0.0, f64::max)
    }

    pub fn max_recall(&self) -> f64 {
        self.points.iter().map(|p| p.recall).fold(0.0, f64::max)
    }
}

/// One JSON object per line: `{"frame":..,"box":{..},"score":..}`.
pub fn write_detections_jsonl<W: Write>(mut out: W, dets: &[FrameDetection]) -> Result<()> {
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<FrameDetection>> {
    let mut v = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            v.push(serde_json::from_str(&line)?);
        }
    }
    Ok(v)
}
