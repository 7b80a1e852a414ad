//! Property and oracle suite behind `coopadapt verify`.
//!
//! Every check builds its own inputs from fixed seeds and compares the library
//! against a second, deliberately naive implementation.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bev::{adain_blend, channel_stats, FeatureField};
use crate::detector::{nms, Detection, DetectionHead, FusionKind, FusionModule};
use crate::distill::{
    build_masks, enhancement_loss, total_loss, OptimConfig, Optimizer, TttConfig,
};
use crate::error::{Error, Result};
use crate::eval::{greedy_match, rotated_iou, voc2010_ap, FrameDetection, FrameTruth};
use crate::grad::{log_sigmoid, Gradients, Tape, Tensor};
use crate::plugin::{identity_check, plugin_forward, random_field_pair, Components, PluginConfig, PluginParams};
use crate::runner::{run_stream, run_stream_with, summary_json, RunHooks, RunManifest};
use crate::world::{DistortionRecipe, Grid, OrientedBox, WorldProfile};

#[derive(Debug, Clone, Copy, Default)]
pub struct VerifyOptions {
    /// Fault injection: every plugin the suite initializes gets a nonzero
    /// output projection.
    pub corrupt_w_out: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

type Check = fn(&VerifyOptions) -> Result<String>;

const CHECKS: [(&str, Check); 16] = [
    ("identity_at_init", check_identity),
    ("plugin_gradients", check_gradients),
    ("param_count", check_param_count),
    ("adain_blend", check_adain),
    ("confidence_masks", check_masks),
    ("loss_gating", check_gating),
    ("enhancement_stability", check_enh_stability),
    ("adam_step", check_adam),
    ("rotated_iou", check_iou),
    ("greedy_matching", check_matching),
    ("voc2010_ap", check_ap),
    ("nms", check_nms),
    ("fusion_permutation", check_fusion),
    ("predict_before_update", check_predict_first),
    ("determinism", check_determinism),
    ("plugin_checkpoint", check_checkpoint),
];

pub fn check_names() -> impl Iterator<Item = &'static str> {
    CHECKS.iter().map(|(n, _)| *n)
}

pub fn run_check(name: &str, opts: &VerifyOptions) -> Result<CheckOutcome> {
    let (name, f) = CHECKS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::config(format!("no check named {name:?}")))?;
    let t0 = Instant::now();
    let (passed, detail) = match f(opts) {
        Ok(d) => (true, d),
        Err(e) => (false, e.to_string()),
    };
    Ok(CheckOutcome { name, passed, detail, secs: t0.elapsed().as_secs_f64() })
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    check_names().map(|n| run_check(n, opts).expect("registered check")).collect()
}

fn fail(msg: impl Into<String>) -> Error {
    Error::Verification(msg.into())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

fn init_plugin(cfg: &PluginConfig, seed: u64, opts: &VerifyOptions) -> Result<PluginParams> {
    let mut p = PluginParams::init(cfg, seed)?;
    if opts.corrupt_w_out {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.w_out = Tensor::randn(p.w_out.shape(), 1e-2, &mut rng);
    }
    Ok(p)
}

/// Plugin used by the identity check: full-size fields, testbed-size adapter.
pub fn identity_config() -> PluginConfig {
    PluginConfig { channels: 64, hidden: 32, blocks: 1, gn_groups: 8, ..PluginConfig::default() }
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentitySummary {
    pub trials: usize,
    pub max_rel_dev: f64,
    /// Deviation with the blend switched off; zero means bit-exact.
    pub max_rel_dev_blend_off: f64,
}

pub fn identity_summary(trials: usize, opts: &VerifyOptions) -> Result<IdentitySummary> {
    let cfg = identity_config();
    let p = init_plugin(&cfg, 1, opts)?;
    let on = identity_check(&p, &cfg, (48, 48), trials, 1e-3, 17)?;
    let off_cfg = PluginConfig { components: Components { adain: false, ..cfg.components }, ..cfg };
    let off = identity_check(&p, &off_cfg, (48, 48), trials, 0.0, 17)?;
    Ok(IdentitySummary { trials, max_rel_dev: on.max_rel_dev, max_rel_dev_blend_off: off.max_rel_dev })
}

fn check_identity(opts: &VerifyOptions) -> Result<String> {
    let s = identity_summary(100, opts)?;
    ensure(s.max_rel_dev <= 1e-3 && s.max_rel_dev_blend_off == 0.0, || {
        format!("relative deviation {:.3e}, {:.3e} with blend off", s.max_rel_dev, s.max_rel_dev_blend_off)
    })?;
    Ok(format!("{} pairs, max rel dev {:.2e}, blend off exact", s.trials, s.max_rel_dev))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub m_hi: usize,
    pub m_boost: usize,
}

/// Central finite differences of `L_pres + lambda * L_enh` against the tape,
/// for every plugin scalar on a reduced graph (C=8, 6x6, d=16, L=1).
pub fn plugin_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = PluginConfig { channels: 8, hidden: 16, blocks: 1, gn_groups: 4, ..PluginConfig::default() };
    let tcfg = TttConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PluginParams::init(&cfg, seed)?;
    for t in params.tensors_mut() {
        let noise = Tensor::randn(t.shape(), 0.2, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    params.alpha_logits = Tensor::randn(&[8], 1.0, &mut rng);
    let mut head = DetectionHead::hand_set(8)?;
    // Redraw inputs until both loss terms are active.
    let (f_n, f_e, teacher, masks) = loop {
        head.weight = Tensor::randn(head.weight.shape(), 0.5, &mut rng);
        let (f_n, f_e) = random_field_pair(8, 6, 6, &mut rng);
        let teacher = head.predict(&f_e)?;
        let masks = build_masks(&teacher, &tcfg);
        if !masks.m_hi.is_empty() && !masks.m_boost.is_empty() {
            break (f_n, f_e, teacher, masks);
        }
    };
    let fusion = FusionModule::new(FusionKind::Weighted, 8);
    let eval = |p: &PluginParams, trainable: bool| -> Result<(Tape, crate::grad::Var)> {
        let mut tape = Tape::new();
        let a = plugin_forward(p, &cfg, &f_n, &f_e, &mut tape, trainable)?;
        let e = tape.constant(f_e.values.clone());
        let fused = fusion.fuse(&mut tape, e, &[a])?;
        let out = head.forward(&mut tape, fused)?;
        let l = total_loss(&mut tape, &out, &teacher, &masks, &tcfg)?;
        Ok((tape, l.total))
    };
    let value = |p: &PluginParams| -> Result<f64> {
        let (tape, l) = eval(p, false)?;
        Ok(tape.value(l).item())
    };
    let g = {
        let (tape, l) = eval(&params, true)?;
        tape.backward(l)?
    };
    let names = params.names();
    let h = 1e-6;
    let (mut worst, mut worst_at, mut count) = (0.0f64, String::new(), 0);
    for slot in 0..names.len() {
        let n = params.tensors()[slot].numel();
        for i in 0..n {
            let mut plus = params.clone();
            plus.tensors_mut()[slot].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[slot].data_mut()[i] -= h;
            let fd = (value(&plus)? - value(&minus)?) / (2.0 * h);
            let an = g.get(slot).map_or(0.0, |t| t.data()[i]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{}[{i}]", names[slot]);
            }
            count += 1;
        }
    }
    Ok(GradCheckReport { params: count, max_rel_err: worst, worst: worst_at, m_hi: masks.m_hi.len(), m_boost: masks.m_boost.len() })
}

fn check_gradients(_: &VerifyOptions) -> Result<String> {
    let r = plugin_gradient_check(3)?;
    ensure(r.max_rel_err <= 1e-3, || format!("max rel err {:.3e} at {}", r.max_rel_err, r.worst))?;
    Ok(format!("{} scalars, max rel err {:.2e}", r.params, r.max_rel_err))
}

fn check_param_count(opts: &VerifyOptions) -> Result<String> {
    let cfg = PluginConfig::default();
    let enumerated = init_plugin(&cfg, 0, opts)?.numel();
    let closed = cfg.param_count();
    ensure(enumerated == closed && (880_000..=920_000).contains(&closed), || {
        format!("closed form {closed}, enumerated {enumerated}")
    })?;
    Ok(format!("{closed} parameters"))
}

fn check_adain(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (f_n, f_e) = random_field_pair(4, 5, 3, &mut rng);
        let alpha: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = 1e-5;
        let out = adain_blend(&f_n, &channel_stats(&f_n, eps)?, &channel_stats(&f_e, eps)?, &alpha)?;
        for ch in 0..4 {
            let stats = |p: &[f64]| {
                let m = p.iter().sum::<f64>() / p.len() as f64;
                let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.len() as f64;
                (m, v.sqrt() + eps)
            };
            let (mn, sn) = stats(f_n.plane(ch));
            let (me, se) = stats(f_e.plane(ch));
            for (x, y) in f_n.plane(ch).iter().zip(out.plane(ch)) {
                let want = (1.0 - alpha[ch]) * x + alpha[ch] * ((x - mn) / sn * se + me);
                worst = worst.max((want - y).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs err {worst:.3e}"))?;
    Ok(format!("50 random fields, max abs err {worst:.1e}"))
}

fn check_masks(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits: Vec<f64> = (0..1000).map(|_| rng.random_range(-6.0..6.0)).collect();
    let cfg = TttConfig::default();
    let preds = crate::detector::AnchorPredictions {
        cls_logits: Tensor::new(vec![1000], logits.clone())?,
        reg: Tensor::zeros(&[1000, 6]),
        dir_logits: Tensor::zeros(&[1000, 2]),
    };
    let m = build_masks(&preds, &cfg);
    let mut hi = Vec::new();
    let mut band = Vec::new();
    for (i, &t) in logits.iter().enumerate() {
        let p = 1.0 / (1.0 + (-t).exp());
        if p > cfg.tau_hi {
            hi.push(i);
        } else if p > cfg.tau_lo {
            band.push(i);
        }
    }
    ensure(m.m_hi == hi && m.m_boost == band, || "mask sets differ from the scalar oracle".into())?;
    Ok(format!("1000 logits, |hi| {} |boost| {}", hi.len(), band.len()))
}

fn check_gating(opts: &VerifyOptions) -> Result<String> {
    let cfg = PluginConfig { channels: 8, hidden: 8, blocks: 1, gn_groups: 4, ..PluginConfig::default() };
    let tcfg = TttConfig { tau_hi: 1.0, lambda: 0.0, ..TttConfig::default() };
    let mut p = init_plugin(&cfg, 4, opts)?;
    let before = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (f_n, f_e) = random_field_pair(8, 6, 6, &mut rng);
    let head = DetectionHead::hand_set(8)?;
    let teacher = head.predict(&f_e)?;
    let masks = build_masks(&teacher, &tcfg);
    let mut tape = Tape::new();
    let a = plugin_forward(&p, &cfg, &f_n, &f_e, &mut tape, true)?;
    let e = tape.constant(f_e.values.clone());
    let fused = FusionModule::new(FusionKind::Weighted, 8).fuse(&mut tape, e, &[a])?;
    let out = head.forward(&mut tape, fused)?;
    let l = total_loss(&mut tape, &out, &teacher, &masks, &tcfg)?;
    let v = tape.value(l.total).item();
    let g = tape.backward(l.total)?;
    let mut opt = Optimizer::new(&p.tensors());
    opt.step(&mut p.tensors_mut(), &g, &tcfg.optim);
    let k = 1.0 - tcfg.optim.lr * tcfg.optim.weight_decay;
    let decayed = before.tensors().iter().zip(p.tensors()).all(|(b, a)| b.data().iter().zip(a.data()).all(|(x, y)| (x * k - y).abs() <= 1e-15));
    ensure(v == 0.0 && decayed, || format!("loss {v}, decay-only {decayed}"))?;
    Ok("zero loss, step only decays".into())
}

fn check_enh_stability(_: &VerifyOptions) -> Result<String> {
    let mut tape = Tape::new();
    let s = tape.param(0, Tensor::new(vec![3], vec![-800.0, 0.0, 800.0])?);
    let l = tape.neg_log_sigmoid(s);
    let total = tape.sum(l);
    let v = tape.value(total).item();
    let g = tape.backward(total)?;
    let want = 800.0 + std::f64::consts::LN_2 - log_sigmoid(800.0);
    ensure(v.is_finite() && (v - want).abs() <= 1e-9 && g.get(0).is_some_and(|t| t.all_finite()), || {
        format!("value {v}, want {want}")
    })?;
    // And through the masked mean.
    let head = DetectionHead::hand_set(8)?;
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::full(&[8, 2, 2], -100.0));
    let out = head.forward(&mut tape, f)?;
    let masks = crate::distill::ConfidenceMasks { m_hi: vec![], m_boost: vec![0, 1, 2, 3] };
    let l = enhancement_loss(&mut tape, &out, &masks)?;
    let v = tape.value(l).item();
    ensure(v.is_finite() && v > 700.0, || format!("masked enhancement loss {v}"))?;
    Ok(format!("logits +-800 finite, masked mean {v:.1}"))
}

fn check_adam(_: &VerifyOptions) -> Result<String> {
    let cfg = OptimConfig { lr: 0.01, weight_decay: 0.02, clip_norm: 0.0, ..OptimConfig::default() };
    let (k, x0) = (3.0, 0.8);
    let mut p = Tensor::scalar(x0);
    let mut opt = Optimizer::new(&[&p]);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for t in 1..=3 {
        let g = k * x;
        let grads = unit_grads(g);
        opt.step(&mut [&mut p], &grads, &cfg);
        x *= 1.0 - cfg.lr * cfg.weight_decay;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        x -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        ensure((p.data()[0] - x).abs() <= 1e-12, || format!("step {t}: {} vs {x}", p.data()[0]))?;
    }
    Ok("3 steps match the scalar recurrence".into())
}

/// A gradient set whose slot 0 holds the scalar `g` (from `0.5 g x^2` at 1).
fn unit_grads(g: f64) -> Gradients {
    let mut tape = Tape::new();
    let x = tape.param(0, Tensor::scalar(1.0));
    let sq = tape.mul(x, x).expect("same shape");
    let l = tape.scale(sq, 0.5 * g);
    let s = tape.sum(l);
    tape.backward(s).expect("scalar loss")
}

fn inside(p: (f64, f64), b: &OrientedBox) -> bool {
    let (dx, dy) = (p.0 - b.x, p.1 - b.y);
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0
}

/// Jittered-grid Monte-Carlo IoU.
fn iou_mc(a: &OrientedBox, b: &OrientedBox, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let r = |o: &OrientedBox| 0.5 * (o.w * o.w + o.l * o.l).sqrt();
    let (x0, x1) = ((a.x - r(a)).min(b.x - r(b)), (a.x + r(a)).max(b.x + r(b)));
    let (y0, y1) = ((a.y - r(a)).min(b.y - r(b)), (a.y + r(a)).max(b.y + r(b)));
    let (sx, sy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut both, mut either) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let p = (x0 + (i as f64 + rng.random::<f64>()) * sx, y0 + (j as f64 + rng.random::<f64>()) * sy);
            let (ia, ib) = (inside(p, a), inside(p, b));
            both += usize::from(ia && ib);
            either += usize::from(ia || ib);
        }
    }
    both as f64 / either.max(1) as f64
}

fn check_iou(_: &VerifyOptions) -> Result<String> {
    let a = OrientedBox::new(0.0, 0.0, 1.0, 1.0, 0.0)?;
    let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4)?;
    let inter = 2.0 * 2f64.sqrt() - 2.0;
    let analytic = inter / (2.0 - inter);
    let got = rotated_iou(&a, &b);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mc = iou_mc(&a, &b, 1000, &mut rng);
    ensure((got - analytic).abs() <= 1e-3 && (got - mc).abs() <= 1e-3, || {
        format!("45-degree square: got {got}, analytic {analytic}, mc {mc}")
    })?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut draw = || {
            OrientedBox::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(1.0..2.5),
                rng.random_range(2.0..5.0),
                rng.random_range(-3.0..3.0),
            )
        };
        let (p, q) = (draw()?, draw()?);
        worst = worst.max((rotated_iou(&p, &q) - iou_mc(&p, &q, 400, &mut rng)).abs());
    }
    ensure(worst <= 5e-3, || format!("random pairs: max |iou - mc| {worst:.2e}"))?;
    Ok(format!("45-degree IoU {got:.4}, mc {mc:.4}; 20 random pairs within {worst:.1e}"))
}

fn micro_instance(rng: &mut ChaCha8Rng) -> Result<(Vec<FrameDetection>, Vec<FrameTruth>)> {
    let draw = |rng: &mut ChaCha8Rng| {
        OrientedBox::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 1.5, 3.0, rng.random_range(-3.0..3.0))
    };
    let nt = rng.random_range(0..=5);
    let np = rng.random_range(0..=5);
    let truth = (0..nt).map(|_| Ok(FrameTruth { frame: 0, bbox: draw(rng)? })).collect::<Result<Vec<_>>>()?;
    let preds = (0..np)
        .map(|_| {
            let score = rng.random_range(0..10) as f64 / 10.0;
            Ok(FrameDetection { frame: 0, bbox: draw(rng)?, score })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, truth))
}

/// Brute force: highest remaining score first (first index on ties), best
/// unused truth by IoU, true positive if above the threshold.
fn greedy_oracle(preds: &[FrameDetection], truth: &[FrameTruth], thr: f64) -> Vec<(f64, bool)> {
    let mut done = vec![false; preds.len()];
    let mut used = vec![false; truth.len()];
    let mut out = Vec::new();
    for _ in 0..preds.len() {
        let i = (0..preds.len()).filter(|&i| !done[i]).fold(None, |best: Option<usize>, i| match best {
            Some(j) if preds[j].score >= preds[i].score => Some(j),
            _ => Some(i),
        });
        let i = i.expect("remaining prediction");
        done[i] = true;
        let mut best: Option<(usize, f64)> = None;
        for (t, gt) in truth.iter().enumerate() {
            if used[t] || gt.frame != preds[i].frame {
                continue;
            }
            let v = rotated_iou(&preds[i].bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        let tp = matches!(best, Some((_, v)) if v > thr);
        if let (true, Some((t, _))) = (tp, best) {
            used[t] = true;
        }
        out.push((preds[i].score, tp));
    }
    out
}

/// Brute-force VOC2010 AP: area under the monotone precision envelope,
/// evaluated between consecutive achieved recalls.
fn ap_oracle(ranked: &[(f64, bool)], n_truth: usize) -> f64 {
    let mut pts = Vec::new();
    let mut tp = 0;
    for (k, &(_, t)) in ranked.iter().enumerate() {
        tp += usize::from(t);
        pts.push((tp as f64 / n_truth as f64, tp as f64 / (k + 1) as f64));
    }
    let mut rs: Vec<f64> = std::iter::once(0.0).chain(pts.iter().map(|p| p.0)).collect();
    rs.dedup();
    rs.windows(2)
        .map(|w| {
            let env = pts.iter().filter(|p| p.0 >= w[1]).map(|p| p.1).fold(0.0, f64::max);
            (w[1] - w[0]) * env
        })
        .sum()
}

fn check_matching(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..200 {
        let (preds, truth) = micro_instance(&mut rng)?;
        for thr in [0.3, 0.5, 0.7] {
            ensure(greedy_match(&preds, &truth, thr).ranked == greedy_oracle(&preds, &truth, thr), || {
                format!("instance {k} at IoU {thr}")
            })?;
        }
    }
    Ok("200 micro-instances x 3 thresholds".into())
}

fn check_ap(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..200 {
        let (preds, truth) = micro_instance(&mut rng)?;
        for thr in [0.3, 0.5, 0.7] {
            let m = greedy_match(&preds, &truth, thr);
            let ok = match voc2010_ap(&m) {
                None => truth.is_empty(),
                Some(ap) => (ap - ap_oracle(&m.ranked, truth.len())).abs() <= 1e-12,
            };
            ensure(ok, || format!("instance {k} at IoU {thr}"))?;
        }
    }
    Ok("200 micro-instances x 3 thresholds".into())
}

fn check_nms(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..100 {
        let n = rng.random_range(0..20);
        let mut cands = Vec::new();
        for _ in 0..n {
            let bbox = OrientedBox::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), 2.0, 4.5, rng.random_range(-3.0..3.0))?;
            cands.push(Detection { bbox, score: rng.random_range(0..8) as f64 / 8.0 });
        }
        // Oracle: keep a candidate iff no kept, higher-ranked one overlaps it.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| cands[j].score.total_cmp(&cands[i].score).then(i.cmp(&j)));
        let mut kept: Vec<Detection> = Vec::new();
        for i in order {
            if kept.iter().all(|d| rotated_iou(&d.bbox, &cands[i].bbox) <= 0.15) {
                kept.push(cands[i]);
            }
        }
        ensure(nms(cands, 0.15) == kept, || format!("instance {k}"))?;
    }
    Ok("100 random candidate sets".into())
}

fn check_fusion(_: &VerifyOptions) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let fields: Vec<FeatureField> = (0..4).map(|i| FeatureField::new(i, Tensor::randn(&[8, 5, 5], 1.0, &mut rng))).collect::<Result<_>>()?;
    for kind in [FusionKind::Max, FusionKind::Weighted] {
        let m = FusionModule::new(kind, 8);
        let a = m.fuse_fields(&fields[0], &[&fields[1], &fields[2], &fields[3]])?;
        let b = m.fuse_fields(&fields[0], &[&fields[3], &fields[1], &fields[2]])?;
        let d = a.values.max_abs_diff(&b.values).unwrap_or(f64::INFINITY);
        ensure(d <= 1e-12, || format!("{kind}: permutation changed output by {d:.2e}"))?;
        let solo = m.fuse_fields(&fields[0], &[])?;
        ensure(solo == fields[0], || format!("{kind}: ego-only fusion is not the identity"))?;
    }
    Ok("max and weighted".into())
}

/// Small stream shared by the protocol checks.
pub fn tiny_manifest() -> RunManifest {
    RunManifest {
        scenario: "verify".into(),
        seed: 3,
        samples: 8,
        grid: Grid { channels: 16, height: 24, width: 24, clutter_amplitude: 0.05, ..Grid::default() },
        world: WorldProfile { extent: 8.0, min_separation: 5.0, max_boxes: 5, neighbor_range: [6.0, 10.0], ..WorldProfile::default() },
        distortions: vec![DistortionRecipe::LogGain { spread: 0.5, seed: 1 }],
        plugin: PluginConfig { channels: 16, hidden: 8, blocks: 1, gn_groups: 4, ..PluginConfig::default() },
        ttt: TttConfig { optim: OptimConfig { lr: 3e-3, ..OptimConfig::default() }, ..TttConfig::default() },
        metrics_window: 4,
        ..RunManifest::default()
    }
}

fn check_predict_first(_: &VerifyOptions) -> Result<String> {
    let m = tiny_manifest();
    let full = run_stream(&m)?;
    let frozen = run_stream_with(&m, RunHooks { freeze_from: Some(0), ..RunHooks::default() })?;
    ensure(full.records[0].student_dets_preupdate == frozen.records[0].student_dets_preupdate, || {
        "first prediction depends on its own update".into()
    })?;
    let moved = full.records.iter().zip(&frozen.records).any(|(a, b)| a.student_dets_preupdate != b.student_dets_preupdate);
    ensure(moved, || "updates never changed a later prediction".into())?;
    Ok("sample 0 identical with and without its update".into())
}

fn check_determinism(_: &VerifyOptions) -> Result<String> {
    let m = tiny_manifest();
    let a = summary_json(&run_stream(&m)?.summary)?;
    let b = summary_json(&run_stream(&m)?.summary)?;
    ensure(a == b, || "summary JSON differs between reruns".into())?;
    Ok(format!("{} summary bytes identical", a.len()))
}

fn check_checkpoint(opts: &VerifyOptions) -> Result<String> {
    let cfg = PluginConfig { channels: 8, hidden: 8, blocks: 2, gn_groups: 4, ..PluginConfig::default() };
    let mut p = init_plugin(&cfg, 9, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    p.gate_logits = Tensor::randn(&[8], 1.0, &mut rng);
    let mut buf = Vec::new();
    p.save(&mut buf)?;
    let back = PluginParams::load(&cfg, buf.as_slice())?;
    ensure(back == p, || "plugin changed across save/load".into())?;
    Ok(format!("{} bytes round trip", buf.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_has_distinct_checks() {
        let names: Vec<_> = check_names().collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(names.len() >= 12);
        assert!(run_check("nope", &VerifyOptions::default()).is_err());
    }

    #[test]
    fn corrupted_output_projection_fails_only_identity() {
        let bad = VerifyOptions { corrupt_w_out: true };
        for name in ["identity_at_init", "param_count", "loss_gating", "plugin_checkpoint"] {
            let r = run_check(name, &bad).unwrap();
            assert_eq!(r.passed, name != "identity_at_init", "{name}: {}", r.detail);
        }
    }

    #[test]
    fn oracles_agree_on_a_hand_ranking() {
        let ranked = [(0.9, true), (0.8, false), (0.7, true)];
        assert!((ap_oracle(&ranked, 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }
}
