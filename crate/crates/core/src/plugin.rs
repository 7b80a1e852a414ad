//! Ego-side adaptive plugin: per-channel statistical blend, residual conv
//! adapter and per-channel gate.
//!
//! At initialization the blend logits sit at -10, the output projection is
//! zero and the gate logits are zero, so the plugin passes the neighbor field
//! through almost unchanged.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{adain_aligned, channel_stats, FeatureField, STATS_EPS};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::grad::{sigmoid, Tape, Tensor, Var};

pub const ALPHA_INIT: f64 = -10.0;
pub const GN_EPS: f64 = 1e-5;

/// Which plugin stages are active. Knocking a stage out is how the component
/// ablation is expressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub adain: bool,
    pub adapter: bool,
    pub gate: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components { adain: true, adapter: true, gate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PluginConfig {
    pub channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub gn_groups: usize,
    /// Floor added to the neighbor std before dividing.
    pub eps: f64,
    pub components: Components,
}

impl Default for PluginConfig {
    fn default() -> Self {
        PluginConfig {
            channels: 64,
            hidden: 128,
            blocks: 3,
            gn_groups: 16,
            eps: STATS_EPS,
            components: Components::default(),
        }
    }
}

impl PluginConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::config("plugin channels and hidden width must be positive"));
        }
        if self.gn_groups == 0 || self.hidden % self.gn_groups != 0 {
            return Err(Error::config(format!(
                "plugin hidden width {} not divisible by gn_groups {}",
                self.hidden, self.gn_groups
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("plugin eps must be positive"));
        }
        Ok(())
    }

    /// Closed-form learnable-parameter count.
    pub fn param_count(&self) -> usize {
        let (c, d, l) = (self.channels, self.hidden, self.blocks);
        let blend_and_gate = 2 * c;
        let w_in = d * c + d;
        let gn_in = 2 * d;
        let block = 2 * (d * d * 9 + d) + 2 * (2 * d);
        let w_out = c * d + c;
        blend_and_gate + w_in + gn_in + l * block + w_out
    }
}

/// Exact learnable-parameter total for a configuration.
pub fn param_count(cfg: &PluginConfig) -> usize {
    cfg.param_count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub gn1_scale: Tensor,
    pub gn1_shift: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub gn2_scale: Tensor,
    pub gn2_shift: Tensor,
}

/// All learnable tensors of one plugin instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PluginParams {
    pub alpha_logits: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub gn_in_scale: Tensor,
    pub gn_in_shift: Tensor,
    pub blocks: Vec<ResBlock>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub gate_logits: Tensor,
}

impl PluginParams {
    /// Initialization with seeded He-uniform weights on `w_in` and the
    /// block convolutions.
    pub fn init(cfg: &PluginConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (c, d) = (cfg.channels, cfg.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let w_in = Tensor::uniform(&[d, c, 1, 1], he(c), &mut rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for _ in 0..cfg.blocks {
            blocks.push(ResBlock {
                w1: Tensor::uniform(&[d, d, 3, 3], he(9 * d), &mut rng),
                b1: Tensor::zeros(&[d]),
                gn1_scale: Tensor::ones(&[d]),
                gn1_shift: Tensor::zeros(&[d]),
                w2: Tensor::uniform(&[d, d, 3, 3], he(9 * d), &mut rng),
                b2: Tensor::zeros(&[d]),
                gn2_scale: Tensor::ones(&[d]),
                gn2_shift: Tensor::zeros(&[d]),
            });
        }
        Ok(PluginParams {
            alpha_logits: Tensor::full(&[c], ALPHA_INIT),
            w_in,
            b_in: Tensor::zeros(&[d]),
            gn_in_scale: Tensor::ones(&[d]),
            gn_in_shift: Tensor::zeros(&[d]),
            blocks,
            w_out: Tensor::zeros(&[c, d, 1, 1]),
            b_out: Tensor::zeros(&[c]),
            gate_logits: Tensor::zeros(&[c]),
        })
    }

    /// Tensor names in slot order.
    pub fn names(&self) -> Vec<String> {
        let mut n: Vec<String> =
            ["alpha_logits", "w_in", "b_in", "gn_in.scale", "gn_in.shift"].iter().map(|s| s.to_string()).collect();
        for i in 0..self.blocks.len() {
            for part in ["w1", "b1", "gn1.scale", "gn1.shift", "w2", "b2", "gn2.scale", "gn2.shift"] {
                n.push(format!("block{i}.{part}"));
            }
        }
        n.extend(["w_out", "b_out", "gate_logits"].iter().map(|s| s.to_string()));
        n
    }

    /// Tensors in slot order; slot `i` on a tape is `tensors()[i]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.alpha_logits, &self.w_in, &self.b_in, &self.gn_in_scale, &self.gn_in_shift];
        for b in &self.blocks {
            v.extend([&b.w1, &b.b1, &b.gn1_scale, &b.gn1_shift, &b.w2, &b.b2, &b.gn2_scale, &b.gn2_shift]);
        }
        v.extend([&self.w_out, &self.b_out, &self.gate_logits]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.alpha_logits,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.gn_in_scale,
            &mut self.gn_in_shift,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.w1,
                &mut b.b1,
                &mut b.gn1_scale,
                &mut b.gn1_shift,
                &mut b.w2,
                &mut b.b2,
                &mut b.gn2_scale,
                &mut b.gn2_shift,
            ]);
        }
        v.extend([&mut self.w_out, &mut self.b_out, &mut self.gate_logits]);
        v
    }

    /// Enumerated parameter total (sum over tensors).
    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self.names().into_iter().zip(self.tensors()).collect();
        checkpoint::write_tensors(out, &named)
    }

    /// Loads tensors into a freshly initialized instance of `cfg`, checking
    /// names and shapes.
    pub fn load<R: Read>(cfg: &PluginConfig, input: R) -> Result<Self> {
        let mut p = PluginParams::init(cfg, 0)?;
        let loaded = checkpoint::read_tensors(input)?;
        let names = p.names();
        if loaded.len() != names.len() {
            return Err(Error::Checkpoint(format!("{} tensors, expected {}", loaded.len(), names.len())));
        }
        for ((want, dst), (name, t)) in names.iter().zip(p.tensors_mut()).zip(loaded) {
            if *want != name || dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match {want} {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
        }
        Ok(p)
    }
}

/// Runs the plugin on `tape`. With `trainable` the parameters become slots
/// `0..n` in [`PluginParams::tensors`] order; otherwise they are constants.
pub fn plugin_forward(
    params: &PluginParams,
    cfg: &PluginConfig,
    f_n: &FeatureField,
    f_e: &FeatureField,
    tape: &mut Tape,
    trainable: bool,
) -> Result<Var> {
    let (c, h, w) = f_n.dims();
    if c != cfg.channels || f_e.dims() != (c, h, w) {
        return Err(Error::config(format!(
            "plugin built for {} channels got neighbor {:?} and ego {:?}",
            cfg.channels,
            f_n.dims(),
            f_e.dims()
        )));
    }
    let vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(slot, t)| if trainable { tape.param(slot, t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    let nb = params.blocks.len();
    let (alpha0, w_in, b_in, gs_in, gb_in) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    let tail = 5 + 8 * nb;
    let (w_out, b_out, gate0) = (vars[tail], vars[tail + 1], vars[tail + 2]);

    let x = tape.constant(f_n.values.clone());
    let base = if cfg.components.adain {
        let sn = channel_stats(f_n, cfg.eps)?;
        let se = channel_stats(f_e, cfg.eps)?;
        let aligned = adain_aligned(f_n, &sn, &se)?;
        let mut diff = aligned;
        for (d, x) in diff.data_mut().iter_mut().zip(f_n.values.data()) {
            *d -= x;
        }
        let diff = tape.constant(diff);
        let alpha = tape.sigmoid(alpha0);
        let step = tape.mul_channel(diff, alpha)?;
        tape.add(x, step)?
    } else {
        x
    };
    if !cfg.components.adapter {
        return Ok(base);
    }

    let mut hdn = tape.conv2d(base, w_in, b_in)?;
    hdn = tape.group_norm(hdn, cfg.gn_groups, gs_in, gb_in, GN_EPS)?;
    hdn = tape.relu(hdn);
    for i in 0..nb {
        let b = &vars[5 + 8 * i..5 + 8 * (i + 1)];
        let mut r = tape.conv2d(hdn, b[0], b[1])?;
        r = tape.group_norm(r, cfg.gn_groups, b[2], b[3], GN_EPS)?;
        r = tape.relu(r);
        r = tape.conv2d(r, b[4], b[5])?;
        r = tape.group_norm(r, cfg.gn_groups, b[6], b[7], GN_EPS)?;
        hdn = tape.add(hdn, r)?;
    }
    let delta = tape.conv2d(hdn, w_out, b_out)?;
    let corr = if cfg.components.gate {
        let g = tape.sigmoid(gate0);
        tape.mul_channel(delta, g)?
    } else {
        delta
    };
    tape.add(base, corr)
}

/// Forward pass without gradient bookkeeping.
pub fn apply(params: &PluginParams, cfg: &PluginConfig, f_n: &FeatureField, f_e: &FeatureField) -> Result<FeatureField> {
    let mut tape = Tape::new();
    let out = plugin_forward(params, cfg, f_n, f_e, &mut tape, false)?;
    FeatureField::new(f_n.agent_id, tape.value(out).clone())
}

/// Effective blend coefficients `sigmoid(alpha_logits)`.
pub fn alpha(params: &PluginParams) -> Vec<f64> {
    params.alpha_logits.data().iter().map(|&a| sigmoid(a)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub trials: usize,
    pub tol: f64,
    /// Largest `max|out - f_n| / max|f_n|` seen.
    pub max_rel_dev: f64,
    pub passed: bool,
}

/// Random neighbor/ego pair with mismatched per-channel statistics.
pub fn random_field_pair(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (FeatureField, FeatureField) {
    use rand::Rng;
    let make = |id: usize, rng: &mut ChaCha8Rng| {
        let mut t = Tensor::randn(&[c, h, w], 1.0, rng);
        let hw = h * w;
        for ch in 0..c {
            let m: f64 = rng.random_range(-1.0..1.0);
            let s: f64 = rng.random_range(0.5..2.0);
            for x in &mut t.data_mut()[ch * hw..(ch + 1) * hw] {
                *x = *x * s + m;
            }
        }
        FeatureField { agent_id: id, values: t }
    };
    let f_n = make(1, rng);
    let f_e = make(0, rng);
    (f_n, f_e)
}

/// Runs the plugin on `trials` random pairs and reports the worst relative
/// deviation from the neighbor input.
pub fn identity_check(
    params: &PluginParams,
    cfg: &PluginConfig,
    grid: (usize, usize),
    trials: usize,
    tol: f64,
    seed: u64,
) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (f_n, f_e) = random_field_pair(cfg.channels, grid.0, grid.1, &mut rng);
        let out = apply(params, cfg, &f_n, &f_e)?;
        let dev = out.values.max_abs_diff(&f_n.values).unwrap_or(f64::INFINITY);
        let scale = f_n.values.max_abs().max(f64::MIN_POSITIVE);
        worst = worst.max(dev / scale);
    }
    Ok(IdentityReport { trials, tol, max_rel_dev: worst, passed: worst <= tol })
}
