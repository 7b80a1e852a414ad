//! Online test-time adaptation over a sample stream: predict, record, then
//! take one step per collaborator plugin.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{linear_cka, scale_alignment, FeatureField};
use crate::detector::{decode_and_nms, DecodeConfig, Detection, DetectionHead, FusionKind, FusionModule};
use crate::distill::{build_masks, total_loss, Optimizer, StepReport, TttConfig};
use crate::error::{Error, Result};
use crate::eval::{
    ap_suite, export_pr, greedy_match, voc2010_ap, write_detections_jsonl, ApTriple, FrameDetection, FrameTruth,
    PrCurve,
};
use crate::grad::Tape;
use crate::plugin::{plugin_forward, PluginConfig, PluginParams};
use crate::world::{
    apply_distortion, derive_seed, generate_scene, render_canonical, DistortionRecipe, DistortionSpec, Grid, Scene,
    WorldProfile,
};

const SCENE_TAG: u64 = 0x5ce;
const PLUGIN_TAG: u64 = 0x91;
const ORDER_TAG: u64 = 0x0d3;

/// Environment variable holding the worker-thread count for sweeps.
pub const WORKERS_ENV: &str = "COOPADAPT_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamOrder {
    #[default]
    Default,
    Shuffled { seed: u64 },
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunManifest {
    pub scenario: String,
    pub seed: u64,
    pub samples: usize,
    pub grid: Grid,
    pub world: WorldProfile,
    /// One entry per collaborator; the last entry repeats if short.
    pub distortions: Vec<DistortionRecipe>,
    pub fusion: FusionKind,
    pub plugin: PluginConfig,
    pub ttt: TttConfig,
    pub decode: DecodeConfig,
    pub order: StreamOrder,
    /// Run without plugins: the student is the unadapted fusion.
    pub passthrough: bool,
    /// Step only on every k-th sample.
    pub update_every: usize,
    /// Tail length for the feature-compatibility averages.
    pub metrics_window: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            scenario: "custom".into(),
            seed: 0,
            samples: 100,
            grid: Grid::default(),
            world: WorldProfile::default(),
            distortions: vec![DistortionRecipe::None],
            fusion: FusionKind::Weighted,
            plugin: PluginConfig::default(),
            ttt: TttConfig::default(),
            decode: DecodeConfig::default(),
            order: StreamOrder::Default,
            passthrough: false,
            update_every: 1,
            metrics_window: 100,
        }
    }
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.world.validate()?;
        self.plugin.validate()?;
        self.ttt.validate()?;
        self.decode.validate()?;
        if self.plugin.channels != self.grid.channels {
            return Err(Error::config(format!(
                "plugin.channels = {} but grid.channels = {}",
                self.plugin.channels, self.grid.channels
            )));
        }
        let (hx, hy) = self.grid.half_extent();
        if self.world.extent >= hx.min(hy) {
            return Err(Error::config(format!(
                "world.extent = {} does not fit inside the grid (half extent {hx} x {hy})",
                self.world.extent
            )));
        }
        if self.samples == 0 || self.update_every == 0 || self.metrics_window == 0 {
            return Err(Error::config("samples, update_every and metrics_window must be positive"));
        }
        if self.distortions.is_empty() && self.world.neighbors > 0 {
            return Err(Error::config("at least one distortion entry is required"));
        }
        self.resolved_distortions().map(|_| ())
    }

    pub fn resolved_distortions(&self) -> Result<Vec<DistortionSpec>> {
        (0..self.world.neighbors)
            .map(|k| {
                let r = self.distortions.get(k).or(self.distortions.last()).unwrap_or(&DistortionRecipe::None);
                r.resolve(self.grid.channels)
            })
            .collect()
    }

    /// Scene seed of stream element `i` (before reordering).
    pub fn scene_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, SCENE_TAG, i as u64)
    }

    /// Processing order as scene indices.
    pub fn stream_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples).collect();
        if let StreamOrder::Shuffled { seed } = self.order {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        idx
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

/// Per-collaborator loss and step summary for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollabStep {
    pub l_pres: f64,
    pub l_enh: f64,
    pub step: Option<StepReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamRecord {
    /// Position in the stream.
    pub sample_index: usize,
    /// Scene (frame) id, stable across orderings.
    pub frame: usize,
    pub teacher_dets: Vec<Detection>,
    pub student_dets_preupdate: Vec<Detection>,
    /// Unadapted fusion.
    pub baseline_dets: Vec<Detection>,
    pub m_hi: usize,
    pub m_boost: usize,
    pub collab: Vec<CollabStep>,
    pub timing: Timing,
}

/// Wall-clock durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub teacher_ms: f64,
    /// Fusion + head on raw neighbor features.
    pub baseline_ms: f64,
    /// Plugins + fusion + head, value only.
    pub forward_ms: f64,
    /// Forward on the tape, losses, backward and optimizer steps.
    pub step_ms: f64,
}

/// Line of the per-sample JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub sample: usize,
    pub frame: usize,
    pub l_pres: Vec<f64>,
    pub l_enh: Vec<f64>,
    pub m_hi: usize,
    pub m_boost: usize,
    pub grad_norm_pre: Vec<f64>,
    pub grad_norm_post: Vec<f64>,
    pub skipped: Vec<bool>,
    pub timing: Timing,
}

impl StreamRecord {
    pub fn log_line(&self) -> LogLine {
        let norms = |f: fn(&StepReport) -> f64| self.collab.iter().map(|c| c.step.as_ref().map_or(0.0, f)).collect();
        LogLine {
            sample: self.sample_index,
            frame: self.frame,
            l_pres: self.collab.iter().map(|c| c.l_pres).collect(),
            l_enh: self.collab.iter().map(|c| c.l_enh).collect(),
            m_hi: self.m_hi,
            m_boost: self.m_boost,
            grad_norm_pre: norms(|s| s.norm_pre_clip),
            grad_norm_post: norms(|s| s.norm_post_clip),
            skipped: self.collab.iter().map(|c| c.step.is_some_and(|s| s.skipped)).collect(),
            timing: self.timing,
        }
    }
}

/// Tail averages of neighbor-feature compatibility with the undistorted
/// canonical render.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    pub cka_before: f64,
    pub cka_after: f64,
    pub scale_before: f64,
    pub scale_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub samples: usize,
    pub collaborators: usize,
    pub fusion: FusionKind,
    pub passthrough: bool,
    pub truth_boxes: usize,
    pub adapted: ApTriple,
    pub unadapted: ApTriple,
    pub ego: ApTriple,
    pub compatibility: Compatibility,
    pub skipped_steps: usize,
    /// Mean `sigmoid(alpha)` per collaborator at the end of the stream.
    pub final_alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub manifest: RunManifest,
    pub records: Vec<StreamRecord>,
    pub truth: Vec<FrameTruth>,
    pub summary: RunSummary,
    pub plugins: Vec<PluginParams>,
}

/// Optional interventions, used by protocol checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunHooks {
    /// Stop updating from this stream position on (its prediction is still
    /// recorded first).
    pub freeze_from: Option<usize>,
    /// Collaborators whose plugin never steps.
    pub frozen_collab: Option<usize>,
    /// Replace the first collaborator's field at this stream position with
    /// one on a mismatched grid.
    pub mismatch_at: Option<usize>,
}

/// A sample's inputs: ego field, distorted neighbor fields, and undistorted
/// neighbor fields for the compatibility metrics.
pub struct SampleFields {
    pub ego: FeatureField,
    pub neighbors: Vec<FeatureField>,
    pub canonical: Vec<FeatureField>,
}

pub fn sample_fields(m: &RunManifest, scene: &Scene, frame: usize, specs: &[DistortionSpec]) -> Result<SampleFields> {
    let ego = render_canonical(scene, 0, &m.grid)?;
    let mut neighbors = Vec::new();
    let mut canonical = Vec::new();
    for (k, spec) in specs.iter().enumerate() {
        let c = render_canonical(scene, k + 1, &m.grid)?;
        neighbors.push(apply_distortion(&c, spec, frame as u64)?);
        canonical.push(c);
    }
    Ok(SampleFields { ego, neighbors, canonical })
}

/// The frozen cooperative stack.
pub struct Stack {
    pub head: DetectionHead,
    pub fusion: FusionModule,
    pub cells: Vec<usize>,
}

impl Stack {
    pub fn new(m: &RunManifest) -> Result<Self> {
        let head = DetectionHead::hand_set(m.grid.channels)?;
        let cells = head.anchor_cells(m.grid.height, m.grid.width);
        Ok(Stack { head, fusion: FusionModule::new(m.fusion, m.grid.channels), cells })
    }

    pub fn detect(&self, ego: &FeatureField, neighbors: &[&FeatureField], grid: &Grid, dc: &DecodeConfig) -> Result<Vec<Detection>> {
        let fused = self.fusion.fuse_fields(ego, neighbors)?;
        Ok(decode_and_nms(&self.head.predict(&fused)?, grid, &self.cells, dc))
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn init_plugins(m: &RunManifest) -> Result<Vec<PluginParams>> {
    (0..m.world.neighbors).map(|k| PluginParams::init(&m.plugin, derive_seed(m.seed, PLUGIN_TAG, k as u64))).collect()
}

pub fn run_stream(m: &RunManifest) -> Result<RunResult> {
    run_stream_with(m, RunHooks::default())
}

pub fn run_stream_with(m: &RunManifest, hooks: RunHooks) -> Result<RunResult> {
    m.validate()?;
    let specs = m.resolved_distortions()?;
    let stack = Stack::new(m)?;
    let mut plugins = init_plugins(m)?;
    let mut opts: Vec<Optimizer> = plugins.iter().map(|p| Optimizer::new(&p.tensors())).collect();
    let order = m.stream_order();
    let tail_from = m.samples.saturating_sub(m.metrics_window);
    let mut compat = Compatibility::default();
    let mut compat_n = 0usize;
    let mut records = Vec::with_capacity(m.samples);
    let mut scenes = vec![None; m.samples];

    for (pos, &frame) in order.iter().enumerate() {
        let mut step = || -> Result<StreamRecord> {
            let scene = generate_scene(m.scene_seed(frame), &m.world)?;
            let mut f = sample_fields(m, &scene, frame, &specs)?;
            if hooks.mismatch_at == Some(pos) && !f.neighbors.is_empty() {
                let (c, h, w) = f.neighbors[0].dims();
                f.neighbors[0] = FeatureField::zeros(1, c, h + 1, w);
            }
            scenes[frame] = Some(scene);
            let raw: Vec<&FeatureField> = f.neighbors.iter().collect();

            let t0 = Instant::now();
            let teacher = stack.head.predict(&f.ego)?;
            let teacher_dets = decode_and_nms(&teacher, &m.grid, &stack.cells, &m.decode);
            let teacher_ms = ms(t0);

            let t0 = Instant::now();
            let baseline_dets = stack.detect(&f.ego, &raw, &m.grid, &m.decode)?;
            let baseline_ms = ms(t0);

            let masks = build_masks(&teacher, &m.ttt);
            let mut rec = StreamRecord {
                sample_index: pos,
                frame,
                teacher_dets,
                student_dets_preupdate: Vec::new(),
                baseline_dets,
                m_hi: masks.m_hi.len(),
                m_boost: masks.m_boost.len(),
                collab: Vec::new(),
                timing: Timing { teacher_ms, baseline_ms, ..Timing::default() },
            };
            if m.passthrough {
                rec.student_dets_preupdate = rec.baseline_dets.clone();
                rec.timing.forward_ms = baseline_ms;
                if pos >= tail_from {
                    for (n, c) in f.neighbors.iter().zip(&f.canonical) {
                        let cka = linear_cka(n, c)?.value;
                        let sc = scale_alignment(n, c)?.value;
                        compat.cka_before += cka;
                        compat.cka_after += cka;
                        compat.scale_before += sc;
                        compat.scale_after += sc;
                        compat_n += 1;
                    }
                }
                return Ok(rec);
            }

            // Prediction with the current (pre-update) plugins.
            let t0 = Instant::now();
            let adapted = plugins
                .iter()
                .zip(&f.neighbors)
                .map(|(p, n)| crate::plugin::apply(p, &m.plugin, n, &f.ego))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&FeatureField> = adapted.iter().collect();
            rec.student_dets_preupdate = stack.detect(&f.ego, &refs, &m.grid, &m.decode)?;
            rec.timing.forward_ms = ms(t0);

            if pos >= tail_from {
                for ((n, a), c) in f.neighbors.iter().zip(&adapted).zip(&f.canonical) {
                    compat.cka_before += linear_cka(n, c)?.value;
                    compat.cka_after += linear_cka(a, c)?.value;
                    compat.scale_before += scale_alignment(n, c)?.value;
                    compat.scale_after += scale_alignment(a, c)?.value;
                    compat_n += 1;
                }
            }

            // One step per collaborator, each on its own graph.
            let t0 = Instant::now();
            let updating = pos % m.update_every == 0 && hooks.freeze_from.is_none_or(|s| pos < s);
            for (k, (p, opt)) in plugins.iter_mut().zip(opts.iter_mut()).enumerate() {
                let mut tape = Tape::new();
                let a = plugin_forward(p, &m.plugin, &f.neighbors[k], &f.ego, &mut tape, true)?;
                let e = tape.constant(f.ego.values.clone());
                let fused = stack.fusion.fuse(&mut tape, e, &[a])?;
                let out = stack.head.forward(&mut tape, fused)?;
                let terms = total_loss(&mut tape, &out, &teacher, &masks, &m.ttt)?;
                let step = if updating && hooks.frozen_collab != Some(k) {
                    let g = tape.backward(terms.total)?;
                    Some(opt.step(&mut p.tensors_mut(), &g, &m.ttt.optim))
                } else {
                    None
                };
                rec.collab.push(CollabStep { l_pres: terms.pres, l_enh: terms.enh, step });
            }
            rec.timing.step_ms = ms(t0) + rec.timing.forward_ms;
            Ok(rec)
        };
        let rec = step().map_err(|e| Error::Stream { index: pos, source: Box::new(e) })?;
        records.push(rec);
    }

    if compat_n > 0 {
        let n = compat_n as f64;
        compat.cka_before /= n;
        compat.cka_after /= n;
        compat.scale_before /= n;
        compat.scale_after /= n;
    }
    let truth = truth_of(scenes.iter().map(|s| s.as_ref().expect("every frame visited")));
    let summary = RunSummary {
        scenario: m.scenario.clone(),
        samples: m.samples,
        collaborators: m.world.neighbors,
        fusion: m.fusion,
        passthrough: m.passthrough,
        truth_boxes: truth.len(),
        adapted: ap_suite(&frame_dets(&records, Curve::Adapted), &truth),
        unadapted: ap_suite(&frame_dets(&records, Curve::Unadapted), &truth),
        ego: ap_suite(&frame_dets(&records, Curve::Ego), &truth),
        compatibility: compat,
        skipped_steps: records.iter().flat_map(|r| &r.collab).filter(|c| c.step.is_some_and(|s| s.skipped)).count(),
        final_alpha: plugins
            .iter()
            .map(|p| {
                let a = crate::plugin::alpha(p);
                a.iter().sum::<f64>() / a.len() as f64
            })
            .collect(),
    };
    Ok(RunResult { manifest: m.clone(), records, truth, summary, plugins })
}

pub fn truth_of<'a>(scenes: impl Iterator<Item = &'a Scene>) -> Vec<FrameTruth> {
    scenes.enumerate().flat_map(|(frame, s)| s.boxes.iter().map(move |&bbox| FrameTruth { frame, bbox })).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Curve {
    Adapted,
    Unadapted,
    Ego,
}

impl Curve {
    pub const ALL: [Curve; 3] = [Curve::Adapted, Curve::Unadapted, Curve::Ego];

    pub fn name(self) -> &'static str {
        match self {
            Curve::Adapted => "adapted",
            Curve::Unadapted => "unadapted",
            Curve::Ego => "ego",
        }
    }
}

pub fn frame_dets(records: &[StreamRecord], curve: Curve) -> Vec<FrameDetection> {
    records
        .iter()
        .flat_map(|r| {
            let d = match curve {
                Curve::Adapted => &r.student_dets_preupdate,
                Curve::Unadapted => &r.baseline_dets,
                Curve::Ego => &r.teacher_dets,
            };
            d.iter().map(move |d| FrameDetection { frame: r.frame, bbox: d.bbox, score: d.score })
        })
        .collect()
}

/// One row per prefix checkpoint: `(prefix length, AP@50 per curve)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrefixPoint {
    pub prefix: usize,
    pub adapted: Option<f64>,
    pub unadapted: Option<f64>,
    pub ego: Option<f64>,
}

/// Pooled AP@50 over each stream prefix of length `k, 2k, ...` (and the full
/// stream).
pub fn prefix_ap_trace(records: &[StreamRecord], truth: &[FrameTruth], every_k: usize) -> Result<Vec<PrefixPoint>> {
    if every_k == 0 {
        return Err(Error::config("every_k must be at least 1"));
    }
    let mut ends: Vec<usize> = (every_k..=records.len()).step_by(every_k).collect();
    if ends.last() != Some(&records.len()) && !records.is_empty() {
        ends.push(records.len());
    }
    Ok(ends
        .into_iter()
        .map(|n| {
            let prefix = &records[..n];
            let frames: std::collections::HashSet<usize> = prefix.iter().map(|r| r.frame).collect();
            let t: Vec<FrameTruth> = truth.iter().filter(|t| frames.contains(&t.frame)).copied().collect();
            let ap = |c| voc2010_ap(&greedy_match(&frame_dets(prefix, c), &t, 0.5));
            PrefixPoint { prefix: n, adapted: ap(Curve::Adapted), unadapted: ap(Curve::Unadapted), ego: ap(Curve::Ego) }
        })
        .collect())
}

pub fn pr_curve(result: &RunResult, curve: Curve, iou: f64) -> PrCurve {
    export_pr(&greedy_match(&frame_dets(&result.records, curve), &result.truth, iou))
}

/// Latency statistics in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub median: f64,
    pub p95: f64,
    pub total: f64,
}

impl Latency {
    pub fn of(xs: &[f64]) -> Latency {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| if v.is_empty() { 0.0 } else { v[((v.len() - 1) as f64 * p).round() as usize] };
        Latency { median: q(0.5), p95: q(0.95), total: xs.iter().sum() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub samples: usize,
    pub forward_with_plugin: Latency,
    pub forward_without_plugin: Latency,
    pub teacher: Latency,
    pub online_step: Latency,
}

/// Summarizes the wall-clock fields of a run's records. The plugin-free
/// forward is the unadapted-fusion path timed on the same samples.
pub fn timing_report(records: &[StreamRecord]) -> TimingReport {
    let col = |f: fn(&Timing) -> f64| records.iter().map(|r| f(&r.timing)).collect::<Vec<_>>();
    TimingReport {
        samples: records.len(),
        forward_with_plugin: Latency::of(&col(|t| t.forward_ms)),
        forward_without_plugin: Latency::of(&col(|t| t.baseline_ms)),
        teacher: Latency::of(&col(|t| t.teacher_ms)),
        online_step: Latency::of(&col(|t| t.step_ms)),
    }
}

/// Mean / sample std / range over a set of values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(xs: &[f64]) -> Spread {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Spread {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderingReport {
    pub default_order: ApTriple,
    pub seeds: Vec<u64>,
    pub shuffled: Vec<ApTriple>,
    pub ap30: Spread,
    pub ap50: Spread,
    pub ap70: Spread,
}

pub fn order_seeds(m: &RunManifest, n: usize) -> Vec<u64> {
    (0..n).map(|i| derive_seed(m.seed, ORDER_TAG, i as u64)).collect()
}

/// Reruns the stream under the default order and `seeds.len()` shuffles.
pub fn ordering_sweep_with_seeds(m: &RunManifest, seeds: &[u64]) -> Result<OrderingReport> {
    if seeds.len() < 2 {
        return Err(Error::config("ordering sweep needs at least 2 orders"));
    }
    let mut manifests = vec![RunManifest { order: StreamOrder::Default, ..m.clone() }];
    manifests.extend(seeds.iter().map(|&seed| RunManifest { order: StreamOrder::Shuffled { seed }, ..m.clone() }));
    let results = par_map(&manifests, |mm| run_stream(mm).map(|r| r.summary.adapted));
    let mut aps = results.into_iter().collect::<Result<Vec<_>>>()?;
    let default_order = aps.remove(0);
    let col = |f: fn(&ApTriple) -> Option<f64>| Spread::of(&aps.iter().map(|a| f(a).unwrap_or(0.0)).collect::<Vec<_>>());
    Ok(OrderingReport {
        default_order,
        seeds: seeds.to_vec(),
        ap30: col(|a| a.ap30),
        ap50: col(|a| a.ap50),
        ap70: col(|a| a.ap70),
        shuffled: aps,
    })
}

pub fn ordering_sweep(m: &RunManifest, n_orders: usize) -> Result<OrderingReport> {
    ordering_sweep_with_seeds(m, &order_seeds(m, n_orders))
}

/// Worker count from [`WORKERS_ENV`], else the available parallelism.
pub fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over [`workers`] threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = workers().min(items.len()).max(1);
    if n == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut out: Vec<(usize, R)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= items.len() {
                            break local;
                        }
                        local.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never see a partial artifact.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    fill(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Deterministic summary JSON (no timings).
pub fn summary_json(s: &RunSummary) -> Result<String> {
    Ok(serde_json::to_string_pretty(s)? + "\n")
}

/// Writes the run's artifacts into `dir`: resolved manifest (as a scenario
/// file that reruns the same stream), summary,
/// per-sample log, prefix-AP and PR curves, detections and plugin weights.
pub fn write_artifacts(result: &RunResult, dir: &Path, every_k: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let trace = prefix_ap_trace(&result.records, &result.truth, every_k)?;
    let echo = crate::scenario::ScenarioFile { output_dir: None, sweep: Default::default(), run: result.manifest.clone() };
    write_atomic(&dir.join("manifest.toml"), |w| Ok(w.write_all(echo.to_toml()?.as_bytes())?))?;
    write_atomic(&dir.join("summary.json"), |w| Ok(w.write_all(summary_json(&result.summary)?.as_bytes())?))?;
    write_atomic(&dir.join("log.jsonl"), |w| {
        for r in &result.records {
            serde_json::to_writer(&mut *w, &r.log_line())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    write_atomic(&dir.join("prefix_ap.csv"), |w| {
        writeln!(w, "prefix,adapted,unadapted,ego")?;
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for p in &trace {
            writeln!(w, "{},{},{},{}", p.prefix, cell(p.adapted), cell(p.unadapted), cell(p.ego))?;
        }
        Ok(())
    })?;
    for c in Curve::ALL {
        write_atomic(&dir.join(format!("pr_{}.csv", c.name())), |w| pr_curve(result, c, 0.5).write_csv(w))?;
        write_atomic(&dir.join(format!("detections_{}.jsonl", c.name())), |w| {
            write_detections_jsonl(w, &frame_dets(&result.records, c))
        })?;
    }
    write_atomic(&dir.join("truth.jsonl"), |w| {
        for t in &result.truth {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    for (k, p) in result.plugins.iter().enumerate() {
        write_atomic(&dir.join(format!("plugin_{k}.ntsr")), |w| p.save(w))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
