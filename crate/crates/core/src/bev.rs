//! BEV feature fields, per-channel spatial statistics, statistical alignment
//! and the feature-compatibility metrics (linear CKA, scale alignment).

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Default floor added to the standard deviation before it is divided by.
pub const STATS_EPS: f64 = 1e-5;

/// A `C x H x W` feature grid owned by one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureField {
    pub agent_id: usize,
    pub values: Tensor,
}

impl FeatureField {
    pub fn new(agent_id: usize, values: Tensor) -> Result<Self> {
        values.chw()?;
        if !values.all_finite() {
            return Err(Error::contract(format!("agent {agent_id}: non-finite feature values")));
        }
        Ok(FeatureField { agent_id, values })
    }

    pub fn zeros(agent_id: usize, c: usize, h: usize, w: usize) -> Self {
        FeatureField { agent_id, values: Tensor::zeros(&[c, h, w]) }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.chw().expect("validated at construction")
    }

    pub fn channels(&self) -> usize {
        self.dims().0
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let (_, h, w) = self.dims();
        &self.values.data()[c * h * w..(c + 1) * h * w]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: FeatureField = serde_json::from_str(s)?;
        Self::new(f.agent_id, f.values)
    }

    /// Binary dump: `b"BEVF"`, agent id (u64), C, H, W (u64 each), then
    /// `C*H*W` little-endian `f64` values.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let (c, h, w) = self.dims();
        out.write_all(b"BEVF")?;
        for v in [self.agent_id, c, h, w] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        for x in self.values.data() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != b"BEVF" {
            return Err(Error::Checkpoint("not a feature-field dump".into()));
        }
        let mut hdr = [0u64; 4];
        for v in hdr.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *v = u64::from_le_bytes(b);
        }
        let [agent, c, h, w] = hdr.map(|v| v as usize);
        let mut data = vec![0.0; c * h * w];
        for x in data.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        Self::new(agent, Tensor::new(vec![c, h, w], data)?)
    }
}

/// Checks the shared-grid precondition: every field has the ego's `(C,H,W)`.
pub fn check_shared_grid(ego: &FeatureField, others: &[&FeatureField]) -> Result<()> {
    let dims = ego.dims();
    for (k, f) in others.iter().enumerate() {
        if f.dims() != dims {
            return Err(Error::Interface {
                agent: k + 1,
                msg: format!("grid {:?} differs from ego grid {:?}", f.dims(), dims),
            });
        }
    }
    Ok(())
}

/// Per-channel spatial mean and (eps-floored) population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// `sqrt(population variance) + eps`
    pub std: Vec<f64>,
    pub eps: f64,
}

pub fn channel_stats(f: &FeatureField, eps: f64) -> Result<ChannelStats> {
    let (c, h, w) = f.dims();
    if h * w == 0 {
        return Err(Error::contract("channel statistics of an empty field"));
    }
    if !(eps > 0.0) {
        return Err(Error::config("stats eps must be positive"));
    }
    let n = (h * w) as f64;
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for ch in 0..c {
        let p = f.plane(ch);
        let m = p.iter().sum::<f64>() / n;
        let v = p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt() + eps);
    }
    Ok(ChannelStats { mean, std, eps })
}

/// The fully aligned field `(F_n - mu_n) / nu_n * nu_e + mu_e`.
pub fn adain_aligned(f_n: &FeatureField, stats_n: &ChannelStats, stats_e: &ChannelStats) -> Result<Tensor> {
    let (c, h, w) = f_n.dims();
    if stats_n.mean.len() != c || stats_e.mean.len() != c {
        return Err(Error::shape(format!(
            "statistics for {} / {} channels, field has {c}",
            stats_n.mean.len(),
            stats_e.mean.len()
        )));
    }
    let hw = h * w;
    let mut out = f_n.values.clone();
    for ch in 0..c {
        let k = stats_e.std[ch] / stats_n.std[ch];
        let (mn, me) = (stats_n.mean[ch], stats_e.mean[ch]);
        for x in &mut out.data_mut()[ch * hw..(ch + 1) * hw] {
            *x = (*x - mn) * k + me;
        }
    }
    Ok(out)
}

/// Per-channel blend between the neighbor field and its statistically
/// aligned version: `F_n + alpha * (aligned - F_n)`.
pub fn adain_blend(
    f_n: &FeatureField,
    stats_n: &ChannelStats,
    stats_e: &ChannelStats,
    alpha: &[f64],
) -> Result<FeatureField> {
    let (c, h, w) = f_n.dims();
    if alpha.len() != c {
        return Err(Error::shape(format!("alpha has {} entries, field has {c} channels", alpha.len())));
    }
    let aligned = adain_aligned(f_n, stats_n, stats_e)?;
    let hw = h * w;
    let mut out = f_n.values.clone();
    for ch in 0..c {
        let a = alpha[ch];
        for j in ch * hw..(ch + 1) * hw {
            let x = f_n.values.data()[j];
            out.data_mut()[j] = x + a * (aligned.data()[j] - x);
        }
    }
    FeatureField::new(f_n.agent_id, out)
}

/// A similarity score plus whether an input was degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub value: f64,
    pub degenerate: bool,
}

fn centered(f: &FeatureField) -> Vec<f64> {
    let (c, h, w) = f.dims();
    let hw = h * w;
    let mut out = f.values.data().to_vec();
    for ch in 0..c {
        let p = &mut out[ch * hw..(ch + 1) * hw];
        let m = p.iter().sum::<f64>() / hw as f64;
        p.iter_mut().for_each(|x| *x -= m);
    }
    out
}

fn frob_sq(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Linear CKA between two fields viewed as `(H*W) x C` matrices.
pub fn linear_cka(a: &FeatureField, b: &FeatureField) -> Result<Similarity> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("CKA of {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (c, h, w) = a.dims();
    let hw = h * w;
    let xa = centered(a);
    let xb = centered(b);
    let mut ab = vec![0.0; c * c];
    let mut aa = vec![0.0; c * c];
    let mut bb = vec![0.0; c * c];
    crate::grad::gemm_nt(c, hw, c, &xa, &xb, &mut ab);
    crate::grad::gemm_nt(c, hw, c, &xa, &xa, &mut aa);
    crate::grad::gemm_nt(c, hw, c, &xb, &xb, &mut bb);
    let denom = frob_sq(&aa).sqrt() * frob_sq(&bb).sqrt();
    if !(denom > 0.0) {
        return Ok(Similarity { value: 0.0, degenerate: true });
    }
    let v = (frob_sq(&ab) / denom).clamp(0.0, 1.0);
    Ok(Similarity { value: v, degenerate: false })
}

/// Mean per-channel (population) standard deviation.
pub fn feature_scale(f: &FeatureField) -> f64 {
    let (c, h, w) = f.dims();
    let n = (h * w) as f64;
    (0..c)
        .map(|ch| {
            let p = f.plane(ch);
            let m = p.iter().sum::<f64>() / n;
            (p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / c as f64
}

/// `min(s_a, s_b) / max(s_a, s_b)` of the mean channel scales.
pub fn scale_alignment(a: &FeatureField, b: &FeatureField) -> Result<Similarity> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("scale alignment of {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (sa, sb) = (feature_scale(a), feature_scale(b));
    if !(sa > 0.0 && sb > 0.0) {
        return Ok(Similarity { value: 0.0, degenerate: true });
    }
    Ok(Similarity { value: sa.min(sb) / sa.max(sb), degenerate: false })
}
