use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::bev::FeatureField;
use crate::detector::{DetectionHead, FusionKind, FusionModule};
use crate::grad::log_sigmoid;
use crate::plugin::{plugin_forward, random_field_pair, PluginConfig, PluginParams};

fn preds(cls: Vec<f64>) -> AnchorPredictions {
    let n = cls.len();
    AnchorPredictions {
        cls_logits: Tensor::new(vec![n], cls).unwrap(),
        reg: Tensor::zeros(&[n, 6]),
        dir_logits: Tensor::zeros(&[n, 2]),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Head output over `n` anchors laid out as a `[9, 1, n]` raw tensor.
fn raw_output(tape: &mut Tape, p: &AnchorPredictions, slot: Option<usize>) -> HeadOutput {
    let n = p.anchors();
    let mut raw = vec![0.0; 9 * n];
    for a in 0..n {
        raw[a] = p.cls_logits.data()[a];
        for k in 0..6 {
            raw[(1 + k) * n + a] = p.reg.data()[a * 6 + k];
        }
        raw[7 * n + a] = p.dir_logits.data()[2 * a];
        raw[8 * n + a] = p.dir_logits.data()[2 * a + 1];
    }
    let t = Tensor::new(vec![9, 1, n], raw).unwrap();
    let raw = match slot {
        Some(s) => tape.param(s, t),
        None => tape.constant(t),
    };
    HeadOutput { raw, hw: n, cells: (0..n).collect() }
}

#[test]
fn masks_on_background_are_empty() {
    let m = build_masks(&preds(vec![-10.0; 50]), &TttConfig::default());
    assert!(m.m_hi.is_empty() && m.m_boost.is_empty());
}

#[test]
fn masks_band_arithmetic() {
    let m = build_masks(&preds(vec![logit(0.05), logit(0.2), logit(0.9)]), &TttConfig::default());
    assert_eq!(m.m_hi, vec![2]);
    assert_eq!(m.m_boost, vec![1]);
}

#[test]
fn masks_match_scalar_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cls: Vec<f64> = (0..1000).map(|_| rng.random_range(-6.0..6.0)).collect();
    let cfg = TttConfig::default();
    let m = build_masks(&preds(cls.clone()), &cfg);
    let mut hi = Vec::new();
    let mut boost = Vec::new();
    let mut neither = 0;
    for (i, &x) in cls.iter().enumerate() {
        let p = 1.0 / (1.0 + (-x).exp());
        if p > 0.3 {
            hi.push(i);
        } else if p > 0.1 && p <= 0.3 {
            boost.push(i);
        } else {
            neither += 1;
        }
    }
    assert_eq!(m.m_hi, hi);
    assert_eq!(m.m_boost, boost);
    assert_eq!(hi.len() + boost.len() + neither, 1000);
}

#[test]
fn self_distillation_hits_entropy_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = preds((0..20).map(|_| rng.random_range(-3.0..3.0)).collect());
    t.reg = Tensor::randn(&[20, 6], 1.0, &mut rng);
    t.dir_logits = Tensor::randn(&[20, 2], 1.0, &mut rng);
    let cfg = TttConfig::default();
    let m = build_masks(&t, &cfg);
    assert!(!m.m_hi.is_empty());
    let mut tape = Tape::new();
    let s = raw_output(&mut tape, &t, None);
    let l = preservation_loss(&mut tape, &s, &t, &m, &cfg).unwrap();
    let floor: f64 = m
        .m_hi
        .iter()
        .map(|&a| {
            let p = sigmoid(t.cls_logits.data()[a]);
            -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / m.m_hi.len() as f64;
    assert!((tape.value(l).item() - floor).abs() <= 1e-12);
}

#[test]
fn empty_masks_give_zero_loss() {
    let t = preds(vec![-10.0; 4]);
    let cfg = TttConfig::default();
    let m = build_masks(&t, &cfg);
    let mut tape = Tape::new();
    let s = raw_output(&mut tape, &t, Some(0));
    let terms = total_loss(&mut tape, &s, &t, &m, &cfg).unwrap();
    assert_eq!(tape.value(terms.total).item(), 0.0);
    assert_eq!((terms.pres, terms.enh), (0.0, 0.0));
}

#[test]
fn single_anchor_scalar_oracle() {
    let mut t = preds(vec![1.2]);
    t.reg = Tensor::new(vec![1, 6], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
    t.dir_logits = Tensor::new(vec![1, 2], vec![0.7, -0.7]).unwrap();
    let mut s = preds(vec![-0.4]);
    s.reg = Tensor::new(vec![1, 6], vec![0.6, -0.2, 2.3, 0.1, -0.5, 0.0]).unwrap();
    s.dir_logits = Tensor::new(vec![1, 2], vec![0.2, 0.3]).unwrap();
    let cfg = TttConfig::default();
    let m = build_masks(&t, &cfg);
    assert_eq!(m.m_hi, vec![0]);
    let mut tape = Tape::new();
    let so = raw_output(&mut tape, &s, None);
    let l = preservation_loss(&mut tape, &so, &t, &m, &cfg).unwrap();
    let got = tape.value(l).item();

    let p = 1.0 / (1.0 + (-1.2f64).exp());
    let q = 1.0 / (1.0 + 0.4f64.exp());
    let bce = -(p * q.ln() + (1.0 - p) * (1.0 - q).ln());
    // residuals 0.5, 0, 2.0, 0.3, 0, 0.6
    let sl1 = 0.125 + 0.0 + 1.5 + 0.045 + 0.0 + 0.18;
    let mse = ((0.2 - 0.7f64).powi(2) + (0.3 + 0.7f64).powi(2)) / 2.0;
    let want = bce + sl1 + 0.5 * mse;
    assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
}

#[test]
fn enhancement_at_zero_logit() {
    let t = preds(vec![logit(0.2)]);
    let s = preds(vec![0.0]);
    let m = build_masks(&t, &TttConfig::default());
    let mut tape = Tape::new();
    let so = raw_output(&mut tape, &s, None);
    let l = enhancement_loss(&mut tape, &so, &m).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    assert!((tape.value(l).item() - 0.6931).abs() < 1e-4);
}

#[test]
fn enhancement_is_stable_for_large_negative_logits() {
    let t = preds(vec![logit(0.2), logit(0.15)]);
    let s = preds(vec![-50.0, -800.0]);
    let m = build_masks(&t, &TttConfig::default());
    let mut tape = Tape::new();
    let so = raw_output(&mut tape, &s, Some(0));
    let l = enhancement_loss(&mut tape, &so, &m).unwrap();
    let v = tape.value(l).item();
    // -log σ(-50) = 50 + log1p(e^-50)
    let exact = (50.0 + (-50f64).exp().ln_1p() + 800.0) / 2.0;
    assert!(v.is_finite() && (v - exact).abs() <= 1e-12, "{v}");
    assert!((-log_sigmoid(-50.0) - 50.0).abs() < 1e-20);
    let g = tape.backward(l).unwrap();
    assert!(g.get(0).unwrap().all_finite());
}

#[test]
fn config_validation() {
    assert!(TttConfig::default().validate().is_ok());
    let bad = TttConfig { tau_lo: 0.4, tau_hi: 0.3, ..TttConfig::default() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let empty_band = TttConfig { tau_lo: 0.0, tau_hi: 0.0, ..TttConfig::default() };
    assert!(empty_band.validate().is_ok());
    let bad = TttConfig { optim: OptimConfig { lr: 0.0, ..OptimConfig::default() }, ..TttConfig::default() };
    assert!(bad.validate().is_err());
    assert!(toml::from_str::<TttConfig>("tau_hi = 0.5\nbogus = 1").is_err());
    let c: TttConfig = toml::from_str("tau_hi = 0.5\n[optim]\nlr = 0.001").unwrap();
    assert_eq!((c.tau_hi, c.optim.lr, c.lambda), (0.5, 0.001, 0.1));
}

fn grads_of(values: Vec<Tensor>) -> Gradients {
    let mut tape = Tape::new();
    let mut acc: Option<Var> = None;
    for (slot, g) in values.into_iter().enumerate() {
        let p = tape.param(slot, Tensor::zeros(g.shape()));
        let c = tape.constant(g);
        let m = tape.mul(p, c).unwrap();
        let s = tape.sum(m);
        acc = Some(match acc {
            Some(a) => tape.add(a, s).unwrap(),
            None => s,
        });
    }
    tape.backward(acc.unwrap()).unwrap()
}

#[test]
fn zero_gradient_only_decays() {
    let cfg = OptimConfig::default();
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.0]).unwrap();
    let mut opt = Optimizer::new(&[&p]);
    let g = grads_of(vec![Tensor::zeros(&[3])]);
    let r = opt.step(&mut [&mut p], &g, &cfg);
    assert!(!r.skipped);
    let f = 1.0 - cfg.lr * cfg.weight_decay;
    assert_eq!(p.data(), [f, -2.0 * f, 0.0]);
    // missing gradients behave the same
    let mut opt = Optimizer::new(&[&p]);
    let before = p.clone();
    opt.step(&mut [&mut p], &Gradients::default(), &cfg);
    assert_eq!(p.data(), before.map(|x| x * f).data());
}

#[test]
fn clip_scales_to_norm() {
    let g = grads_of(vec![Tensor::new(vec![2], vec![30.0, 40.0]).unwrap()]);
    let mut p = Tensor::zeros(&[2]);
    let mut opt = Optimizer::new(&[&p]);
    let r = opt.step(&mut [&mut p], &g, &OptimConfig::default());
    assert!((r.norm_pre_clip - 50.0).abs() < 1e-12);
    assert!((r.norm_post_clip - 5.0).abs() <= 1e-9);
    let sgd = OptimConfig { kind: OptimizerKind::Sgd, lr: 1.0, weight_decay: 0.0, ..OptimConfig::default() };
    let mut p = Tensor::zeros(&[2]);
    opt.step(&mut [&mut p], &g, &sgd);
    assert!((p.data()[0] + 3.0).abs() < 1e-12 && (p.data()[1] + 4.0).abs() < 1e-12);
}

#[test]
fn nan_gradient_skips_step() {
    let g = grads_of(vec![Tensor::new(vec![2], vec![f64::NAN, 1.0]).unwrap()]);
    let mut p = Tensor::ones(&[2]);
    let mut opt = Optimizer::new(&[&p]);
    let r = opt.step(&mut [&mut p], &g, &OptimConfig::default());
    assert!(r.skipped);
    assert_eq!(p.data(), [1.0, 1.0]);
    assert_eq!(opt.step, 0);
}

#[test]
fn adam_matches_hand_step() {
    // f(x) = 0.5 k x^2, two steps
    let (k, x0) = (3.0, 0.8);
    let cfg = OptimConfig { lr: 0.01, weight_decay: 0.02, clip_norm: 0.0, ..OptimConfig::default() };
    let mut p = Tensor::new(vec![1], vec![x0]).unwrap();
    let mut opt = Optimizer::new(&[&p]);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for t in 1..=2 {
        let g = k * x;
        let gr = grads_of(vec![Tensor::new(vec![1], vec![g]).unwrap()]);
        opt.step(&mut [&mut p], &gr, &cfg);
        x *= 1.0 - 0.01 * 0.02;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((p.data()[0] - x).abs() <= 1e-12, "step {t}");
    }
}

fn small_setup(seed: u64) -> (PluginConfig, PluginParams, FeatureField, FeatureField, DetectionHead) {
    let cfg = PluginConfig { channels: 8, hidden: 8, blocks: 1, gn_groups: 4, ..PluginConfig::default() };
    let mut params = PluginParams::init(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.w_out = Tensor::randn(params.w_out.shape(), 0.05, &mut rng);
    let (f_n, f_e) = random_field_pair(8, 6, 6, &mut rng);
    let mut head = DetectionHead::hand_set(8).unwrap();
    head.weight = Tensor::randn(head.weight.shape(), 0.5, &mut rng);
    (cfg, params, f_n, f_e, head)
}

fn sample_loss(
    cfg: &PluginConfig,
    params: &PluginParams,
    f_n: &FeatureField,
    f_e: &FeatureField,
    head: &DetectionHead,
    teacher: &AnchorPredictions,
    masks: &ConfidenceMasks,
    tcfg: &TttConfig,
) -> (Tape, Var) {
    let mut tape = Tape::new();
    let adapted = plugin_forward(params, cfg, f_n, f_e, &mut tape, true).unwrap();
    let ego = tape.constant(f_e.values.clone());
    let fused = FusionModule::new(FusionKind::Weighted, cfg.channels).fuse(&mut tape, ego, &[adapted]).unwrap();
    let out = head.forward(&mut tape, fused).unwrap();
    let l = total_loss(&mut tape, &out, teacher, masks, tcfg).unwrap();
    (tape, l.total)
}

#[test]
fn repeated_steps_descend() {
    let tcfg = TttConfig { optim: OptimConfig { lr: 1e-3, ..OptimConfig::default() }, ..TttConfig::default() };
    let trials = 20;
    let mut good = 0;
    for seed in 0..trials {
        let (cfg, mut params, f_n, f_e, head) = small_setup(seed);
        let teacher = head.predict(&f_e).unwrap();
        let masks = build_masks(&teacher, &tcfg);
        let mut opt = Optimizer::new(&params.tensors());
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (tape, l) = sample_loss(&cfg, &params, &f_n, &f_e, &head, &teacher, &masks, &tcfg);
            losses.push(tape.value(l).item());
            let g = tape.backward(l).unwrap();
            opt.step(&mut params.tensors_mut(), &g, &tcfg.optim);
        }
        if losses.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            good += 1;
        }
    }
    assert!(good as f64 >= 0.95 * trials as f64, "{good}/{trials}");
}

#[test]
fn teacher_ignores_plugin() {
    let (cfg, params, f_n, f_e, head) = small_setup(3);
    let t1 = head.predict(&f_e).unwrap();
    let _ = plugin_forward(&params, &cfg, &f_n, &f_e, &mut Tape::new(), true).unwrap();
    let mut other = params.clone();
    other.w_out = Tensor::full(other.w_out.shape(), 1.0);
    let _ = plugin_forward(&other, &cfg, &f_n, &f_e, &mut Tape::new(), true).unwrap();
    assert_eq!(head.predict(&f_e).unwrap(), t1);
}

#[test]
fn gated_loss_leaves_params_decayed_only() {
    let (cfg, mut params, f_n, f_e, head) = small_setup(4);
    let tcfg = TttConfig { lambda: 0.0, tau_hi: 1.0, ..TttConfig::default() };
    let teacher = head.predict(&f_e).unwrap();
    let masks = build_masks(&teacher, &tcfg);
    assert!(masks.m_hi.is_empty());
    let (tape, l) = sample_loss(&cfg, &params, &f_n, &f_e, &head, &teacher, &masks, &tcfg);
    assert_eq!(tape.value(l).item(), 0.0);
    let before = params.clone();
    let g = tape.backward(l).unwrap();
    let mut opt = Optimizer::new(&params.tensors());
    opt.step(&mut params.tensors_mut(), &g, &tcfg.optim);
    let f = 1.0 - tcfg.optim.lr * tcfg.optim.weight_decay;
    for (a, b) in params.tensors().iter().zip(before.tensors()) {
        assert_eq!(a.data(), b.map(|x| x * f).data());
    }
}
