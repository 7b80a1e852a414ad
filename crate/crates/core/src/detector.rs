//! Frozen cooperative inference stack: fusion, anchor head, decoding and NMS,
//! plus the optional toy pretraining path for the head.

use serde::{Deserialize, Serialize};

use crate::bev::FeatureField;
use crate::checkpoint;
use crate::distill::{OptimConfig, Optimizer};
use crate::error::{Error, Result};
use crate::eval::rotated_iou;
use crate::grad::{sigmoid, Tape, Tensor, Var};
use crate::world::{wrap_angle, Grid, OrientedBox, Scene, GEOMETRY_CHANNELS};

/// Head outputs per anchor: 1 cls + 6 reg + 2 dir.
pub const HEAD_OUTPUTS: usize = 9;
pub const REG_DIMS: usize = 6;
/// Direction-bin offset, radians.
pub const DIR_OFFSET: f64 = 0.7853;
/// Log-size clamp applied when decoding.
pub const LOG_SIZE_LIMIT: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Max,
    Weighted,
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionKind::Max => "max",
            FusionKind::Weighted => "weighted",
        })
    }
}

/// Ego-side fusion. The weighted variant scores each agent per cell with a
/// frozen 1x1 conv and blends with a softmax across agents.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModule {
    kind: FusionKind,
    score_w: Tensor,
    score_b: Tensor,
}

/// Occupancy weight of the hand-set fusion scorer.
pub const FUSION_SCORE_GAIN: f64 = 4.0;

impl FusionModule {
    pub fn new(kind: FusionKind, channels: usize) -> Self {
        let mut score_w = Tensor::zeros(&[1, channels, 1, 1]);
        score_w.data_mut()[0] = FUSION_SCORE_GAIN;
        FusionModule { kind, score_w, score_b: Tensor::zeros(&[1]) }
    }

    pub fn kind(&self) -> FusionKind {
        self.kind
    }

    /// Frozen tensors, for checkpointing and the frozen-bytes check.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("fusion.score_w".into(), &self.score_w), ("fusion.score_b".into(), &self.score_b)]
    }

    /// Fuses the ego field with the neighbor fields on `tape`.
    pub fn fuse(&self, tape: &mut Tape, ego: Var, neighbors: &[Var]) -> Result<Var> {
        let dims = tape.value(ego).chw()?;
        for (k, &n) in neighbors.iter().enumerate() {
            let d = tape.value(n).chw()?;
            if d != dims {
                return Err(Error::Interface {
                    agent: k + 1,
                    msg: format!("feature grid {d:?} differs from ego grid {dims:?}"),
                });
            }
        }
        if neighbors.is_empty() {
            return Ok(ego);
        }
        let mut all = vec![ego];
        all.extend_from_slice(neighbors);
        match self.kind {
            FusionKind::Max => tape.max_stack(&all),
            FusionKind::Weighted => {
                let w = tape.constant(self.score_w.clone());
                let b = tape.constant(self.score_b.clone());
                let scores = all.iter().map(|&f| tape.conv2d(f, w, b)).collect::<Result<Vec<_>>>()?;
                tape.softmax_blend(&all, &scores)
            }
        }
    }

    /// Value-only fusion of feature fields.
    pub fn fuse_fields(&self, ego: &FeatureField, neighbors: &[&FeatureField]) -> Result<FeatureField> {
        let mut tape = Tape::new();
        let e = tape.constant(ego.values.clone());
        let ns: Vec<Var> = neighbors.iter().map(|f| tape.constant(f.values.clone())).collect();
        let out = self.fuse(&mut tape, e, &ns)?;
        FeatureField::new(ego.agent_id, tape.value(out).clone())
    }
}

/// Per-anchor head outputs as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPredictions {
    pub cls_logits: Tensor,
    /// `[A, 6]`: dx, dy, log w, log l, sin yaw, cos yaw.
    pub reg: Tensor,
    pub dir_logits: Tensor,
}

impl AnchorPredictions {
    pub fn anchors(&self) -> usize {
        self.cls_logits.numel()
    }
}

/// A head forward recorded on a tape. The raw `[9, H, W]` output stays on the
/// tape; anchors address it through [`HeadOutput::index`].
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub raw: Var,
    pub hw: usize,
    /// Cell index of each anchor.
    pub cells: Vec<usize>,
}

impl HeadOutput {
    /// Flat position of output channel `ch` at anchor `a`.
    pub fn index(&self, ch: usize, a: usize) -> usize {
        ch * self.hw + self.cells[a]
    }

    /// Reads the anchor-major predictions off the tape.
    pub fn predictions(&self, tape: &Tape) -> AnchorPredictions {
        let d = tape.value(self.raw).data();
        let n = self.cells.len();
        let cls: Vec<f64> = (0..n).map(|a| d[self.index(0, a)]).collect();
        let reg: Vec<f64> = (0..n).flat_map(|a| (0..REG_DIMS).map(move |k| (a, k))).map(|(a, k)| d[self.index(1 + k, a)]).collect();
        let dir: Vec<f64> = (0..n).flat_map(|a| [7, 8].map(|k| d[self.index(k, a)])).collect();
        AnchorPredictions {
            cls_logits: Tensor::new(vec![n], cls).expect("sized"),
            reg: Tensor::new(vec![n, REG_DIMS], reg).expect("sized"),
            dir_logits: Tensor::new(vec![n, 2], dir).expect("sized"),
        }
    }
}

/// 1x1 readout `C -> 9` on an anchor grid (every `stride`-th cell).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

/// Occupancy gain and bias of the hand-set classification row.
pub const CLS_GAIN: f64 = 8.0;
pub const CLS_BIAS: f64 = -5.0;
const DIR_GAIN: f64 = 2.0;

impl DetectionHead {
    /// Analytic readout of the canonical channel layout.
    pub fn hand_set(channels: usize) -> Result<Self> {
        if channels < GEOMETRY_CHANNELS {
            return Err(Error::config(format!("head needs at least {GEOMETRY_CHANNELS} channels")));
        }
        let mut w = vec![0.0; HEAD_OUTPUTS * channels];
        let mut b = vec![0.0; HEAD_OUTPUTS];
        let mut set = |o: usize, c: usize, v: f64| w[o * channels + c] = v;
        set(0, 0, CLS_GAIN);
        b[0] = CLS_BIAS;
        // dx, dy are stored as 0.5 + d / 6
        set(1, 1, 6.0);
        b[1] = -3.0;
        set(2, 2, 6.0);
        b[2] = -3.0;
        set(3, 3, 1.0);
        set(4, 4, 1.0);
        // sin, cos are stored as (1 + v) / 2
        set(5, 5, 2.0);
        b[5] = -1.0;
        set(6, 6, 2.0);
        b[6] = -1.0;
        // dir0 = k sin(yaw - offset) = k (cos(o) sin - sin(o) cos)
        let (so, co) = DIR_OFFSET.sin_cos();
        set(7, 5, 2.0 * DIR_GAIN * co);
        set(7, 6, -2.0 * DIR_GAIN * so);
        b[7] = DIR_GAIN * (so - co);
        set(8, 5, -2.0 * DIR_GAIN * co);
        set(8, 6, 2.0 * DIR_GAIN * so);
        b[8] = -DIR_GAIN * (so - co);
        Ok(DetectionHead {
            weight: Tensor::new(vec![HEAD_OUTPUTS, channels, 1, 1], w)?,
            bias: Tensor::new(vec![HEAD_OUTPUTS], b)?,
            stride: 1,
        })
    }

    pub fn zeros(channels: usize) -> Self {
        DetectionHead {
            weight: Tensor::zeros(&[HEAD_OUTPUTS, channels, 1, 1]),
            bias: Tensor::zeros(&[HEAD_OUTPUTS]),
            stride: 1,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn anchor_cells(&self, h: usize, w: usize) -> Vec<usize> {
        let s = self.stride.max(1);
        (0..h).step_by(s).flat_map(|i| (0..w).step_by(s).map(move |j| i * w + j)).collect()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    pub fn save<W: std::io::Write>(&self, out: W) -> Result<()> {
        checkpoint::write_tensors(out, &self.tensors())
    }

    pub fn load<R: std::io::Read>(input: R) -> Result<Self> {
        let mut t = checkpoint::read_tensors(input)?;
        if t.len() != 2 || t[0].0 != "head.weight" || t[1].0 != "head.bias" {
            return Err(Error::Checkpoint("expected head.weight and head.bias".into()));
        }
        let (_, bias) = t.pop().expect("len 2");
        let (_, weight) = t.pop().expect("len 2");
        if weight.shape().len() != 4 || weight.shape()[0] != HEAD_OUTPUTS || bias.shape() != [HEAD_OUTPUTS] {
            return Err(Error::Checkpoint(format!("bad head shapes {:?} / {:?}", weight.shape(), bias.shape())));
        }
        Ok(DetectionHead { weight, bias, stride: 1 })
    }

    /// Head forward with frozen weights.
    pub fn forward(&self, tape: &mut Tape, fused: Var) -> Result<HeadOutput> {
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        self.forward_with(tape, fused, w, b)
    }

    pub(crate) fn forward_with(&self, tape: &mut Tape, fused: Var, w: Var, b: Var) -> Result<HeadOutput> {
        let (c, h, wd) = tape.value(fused).chw()?;
        if c != self.channels() {
            return Err(Error::Interface {
                agent: 0,
                msg: format!("head expects {} channels, fused field has {c}", self.channels()),
            });
        }
        let raw = tape.conv2d(fused, w, b)?;
        Ok(HeadOutput { raw, hw: h * wd, cells: self.anchor_cells(h, wd) })
    }

    /// Value-only forward.
    pub fn predict(&self, field: &FeatureField) -> Result<AnchorPredictions> {
        let mut tape = Tape::new();
        let f = tape.constant(field.values.clone());
        let out = self.forward(&mut tape, f)?;
        Ok(out.predictions(&tape))
    }
}

/// Regression targets of `b` relative to an anchor at `(ax, ay)`.
pub fn encode_box(b: &OrientedBox, ax: f64, ay: f64) -> [f64; REG_DIMS] {
    let (s, c) = b.yaw.sin_cos();
    [b.x - ax, b.y - ay, b.w.ln(), b.l.ln(), s, c]
}

pub fn decode_box(reg: &[f64], ax: f64, ay: f64) -> OrientedBox {
    let lw = reg[2].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT);
    let ll = reg[3].clamp(-LOG_SIZE_LIMIT, LOG_SIZE_LIMIT);
    OrientedBox { x: ax + reg[0], y: ay + reg[1], w: lw.exp(), l: ll.exp(), yaw: wrap_angle(reg[4].atan2(reg[5])) }
}

/// Direction bin of a yaw, as used by the toy pretraining loss.
pub fn dir_bin(yaw: f64) -> usize {
    let r = (yaw - DIR_OFFSET).rem_euclid(2.0 * std::f64::consts::PI);
    usize::from(r >= std::f64::consts::PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Candidates kept (by score) before NMS.
    pub pre_nms_top: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.1, nms_iou: 0.15, pre_nms_top: 1000 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::config("score_thresh and nms_iou must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Greedy NMS by descending score (stable on ties).
pub fn nms(mut cands: Vec<Detection>, iou: f64) -> Vec<Detection> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut dead = vec![false; cands.len()];
    let mut keep = Vec::new();
    for i in 0..cands.len() {
        if dead[i] {
            continue;
        }
        keep.push(cands[i]);
        for j in i + 1..cands.len() {
            if !dead[j] && rotated_iou(&cands[i].bbox, &cands[j].bbox) > iou {
                dead[j] = true;
            }
        }
    }
    keep
}

/// Decodes anchors with score at least `score_thresh`, then runs NMS.
pub fn decode_and_nms(preds: &AnchorPredictions, grid: &Grid, cells: &[usize], cfg: &DecodeConfig) -> Vec<Detection> {
    let reg = preds.reg.data();
    let mut cands: Vec<Detection> = preds
        .cls_logits
        .data()
        .iter()
        .enumerate()
        .filter_map(|(a, &logit)| {
            let score = sigmoid(logit);
            if score < cfg.score_thresh {
                return None;
            }
            let (ax, ay) = grid.anchor_center(cells[a]);
            Some(Detection { bbox: decode_box(&reg[a * REG_DIMS..(a + 1) * REG_DIMS], ax, ay), score })
        })
        .collect();
    if cands.len() > cfg.pre_nms_top {
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(cfg.pre_nms_top);
    }
    nms(cands, cfg.nms_iou)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub reg_weight: f64,
    pub dir_weight: f64,
    /// Anchors within this distance (m) of a visible box center are positive.
    pub positive_radius: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            lr: 0.02,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            reg_weight: 2.0,
            dir_weight: 0.2,
            positive_radius: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains a head on ego-only canonical renders with focal classification,
/// smooth-L1 regression and a 2-bin softmax direction loss.
pub fn toy_pretrain(
    head: &DetectionHead,
    scenes: &[Scene],
    grid: &Grid,
    cfg: &PretrainConfig,
) -> Result<(DetectionHead, PretrainReport)> {
    let mut head = head.clone();
    let fields = scenes
        .iter()
        .map(|s| crate::world::render_canonical(s, 0, grid))
        .collect::<Result<Vec<_>>>()?;
    let cells = head.anchor_cells(grid.height, grid.width);
    let ocfg = OptimConfig { lr: cfg.lr, weight_decay: 0.0, ..OptimConfig::default() };
    let mut opt = Optimizer::new(&[&head.weight, &head.bias]);
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (si, (scene, field)) in scenes.iter().zip(&fields).enumerate() {
            let mut positive = vec![false; cells.len()];
            let mut reg_idx = Vec::new();
            let mut reg_t = Vec::new();
            let mut dir_pairs = Vec::new();
            for (a, &cell) in cells.iter().enumerate() {
                let (ax, ay) = grid.anchor_center(cell);
                let owner = scene.boxes.iter().enumerate().find(|(bi, b)| {
                    scene.visibility[0][*bi] > 0.0 && ((b.x - ax).powi(2) + (b.y - ay).powi(2)).sqrt() <= cfg.positive_radius
                });
                if let Some((_, b)) = owner {
                    positive[a] = true;
                    reg_idx.push(a);
                    reg_t.extend(encode_box(b, ax, ay));
                    dir_pairs.push((a, dir_bin(b.yaw)));
                }
            }
            let mut tape = Tape::new();
            let x = tape.constant(field.values.clone());
            let w = tape.param(0, head.weight.clone());
            let b = tape.param(1, head.bias.clone());
            let out = head.forward_with(&mut tape, x, w, b)?;
            let n_pos = reg_idx.len().max(1) as f64;
            let cls = tape.gather(out.raw, (0..cells.len()).map(|a| out.index(0, a)).collect())?;
            let fl = tape.focal(cls, positive, cfg.focal_alpha, cfg.focal_gamma)?;
            let fl = tape.sum(fl);
            let mut loss = tape.scale(fl, 1.0 / n_pos);
            if !reg_idx.is_empty() {
                let idx = reg_idx.iter().flat_map(|&a| (0..REG_DIMS).map(move |k| (a, k))).map(|(a, k)| out.index(1 + k, a)).collect();
                let r = tape.gather(out.raw, idx)?;
                let r = tape.smooth_l1(r, reg_t)?;
                let r = tape.sum(r);
                let r = tape.scale(r, cfg.reg_weight / n_pos);
                loss = tape.add(loss, r)?;
                // two-way softmax CE equals BCE on the logit difference
                let d0 = tape.gather(out.raw, dir_pairs.iter().map(|&(a, _)| out.index(7, a)).collect())?;
                let d1 = tape.gather(out.raw, dir_pairs.iter().map(|&(a, _)| out.index(8, a)).collect())?;
                let diff = tape.sub(d0, d1)?;
                let t = dir_pairs.iter().map(|&(_, bin)| if bin == 0 { 1.0 } else { 0.0 }).collect();
                let ce = tape.bce_logits(diff, t)?;
                let ce = tape.sum(ce);
                let ce = tape.scale(ce, cfg.dir_weight / n_pos);
                loss = tape.add(loss, ce)?;
            }
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("pretraining loss {lv} at epoch {epoch}, scene {si}")));
            }
            total += lv;
            let grads = tape.backward(loss)?;
            let mut params = [&mut head.weight, &mut head.bias];
            opt.step(&mut params, &grads, &ocfg);
        }
        epoch_losses.push(total / scenes.len().max(1) as f64);
    }
    Ok((head, PretrainReport { epoch_losses }))
}

#[cfg(test)]
mod tests;
