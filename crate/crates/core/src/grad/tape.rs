use std::collections::BTreeMap;

use super::kernels::{col2im, gemm, im2col, log_sigmoid, sigmoid, softplus};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        k: usize,
        // patch columns for k > 1; a 1x1 conv reads the input value directly
        cols: Option<Vec<f64>>,
    },
    GroupNorm {
        input: Var,
        scale: Var,
        shift: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MulChannel {
        field: Var,
        vec: Var,
    },
    AddChannel {
        field: Var,
        vec: Var,
    },
    Scale(Var, f64),
    Sum(Var),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Bce {
        x: Var,
        targets: Vec<f64>,
    },
    SmoothL1 {
        x: Var,
        targets: Vec<f64>,
    },
    SqErr {
        x: Var,
        targets: Vec<f64>,
    },
    NegLogSigmoid(Var),
    Focal {
        x: Var,
        positive: Vec<bool>,
        alpha: f64,
        gamma: f64,
    },
    MaxStack {
        inputs: Vec<Var>,
        argmax: Vec<u32>,
    },
    SoftmaxBlend {
        fields: Vec<Var>,
        scores: Vec<Var>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Record of forward operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so their index order is a
/// topological order of the graph. Only leaves registered with
/// [`Tape::param`] receive gradients; everything else is treated as frozen.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter slot.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_slot: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    pub fn take(&mut self, slot: usize) -> Option<Tensor> {
        self.by_slot.remove(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_slot.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.by_slot.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            slot: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A frozen leaf: inputs, frozen weights, targets.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].slot = Some(slot);
        v
    }

    /// Same-size 2-D cross-correlation with zero padding `(k - 1) / 2`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (ci, h, w) = self.value(input).chw()?;
        let (co, wci, k) = match self.value(weight).shape() {
            &[co, wci, k1, k2] if k1 == k2 => (co, wci, k1),
            s => return Err(Error::shape(format!("conv weight must be [Co,Ci,k,k], got {s:?}"))),
        };
        if k != 1 && k != 3 {
            return Err(Error::shape(format!("conv kernel size {k} unsupported (1 or 3)")));
        }
        if wci != ci {
            return Err(Error::shape(format!(
                "conv weight expects {wci} input channels, field has {ci}"
            )));
        }
        if self.value(bias).shape() != [co] {
            return Err(Error::shape(format!(
                "conv bias must be [{co}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0; co * hw];
        let bvals = self.value(bias).data();
        for (o, &b) in bvals.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(b);
        }
        let cols = if k == 1 {
            gemm(co, ci, hw, self.value(weight).data(), false, self.value(input).data(), false, 1.0, &mut out);
            None
        } else {
            let cols = im2col(self.value(input).data(), ci, h, w, k);
            gemm(co, ci * k * k, hw, self.value(weight).data(), false, &cols, false, 1.0, &mut out);
            Some(cols)
        };
        let rg = self.rg(&[input, weight, bias]);
        let cols = if rg && self.requires_grad(weight) { cols } else { None };
        let value = Tensor::new(vec![co, h, w], out)?;
        Ok(self.push(value, Op::Conv { input, weight, bias, k, cols }, rg))
    }

    /// Group normalization over `[C,H,W]` with per-channel affine.
    pub fn group_norm(&mut self, input: Var, groups: usize, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(input).chw()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!("{c} channels not divisible into {groups} groups")));
        }
        if !(eps > 0.0) {
            return Err(Error::config("group norm eps must be positive"));
        }
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(Error::shape(format!("group norm affine must be [{c}]")));
        }
        let hw = h * w;
        let per = c / groups * hw;
        let x = self.value(input).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut xhat = vec![0.0; c * hw];
        let mut inv_std = vec![0.0; groups];
        let mut out = vec![0.0; c * hw];
        for g in 0..groups {
            let xs = &x[g * per..(g + 1) * per];
            let mean = xs.iter().sum::<f64>() / per as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g] = is;
            for (j, &v) in xs.iter().enumerate() {
                xhat[g * per + j] = (v - mean) * is;
            }
        }
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                out[j] = xhat[j] * sc[ch] + sh[ch];
            }
        }
        let rg = self.rg(&[input, scale, shift]);
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::GroupNorm { input, scale, shift, groups, xhat, inv_std }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    fn channel_dims(&self, field: Var, vec: Var) -> Result<(usize, usize)> {
        let (c, h, w) = self.value(field).chw()?;
        if self.value(vec).shape() != [c] {
            return Err(Error::shape(format!(
                "per-channel operand must be [{c}], got {:?}",
                self.value(vec).shape()
            )));
        }
        Ok((c, h * w))
    }

    /// `field[c, :, :] * vec[c]`
    pub fn mul_channel(&mut self, field: Var, vec: Var) -> Result<Var> {
        let (c, hw) = self.channel_dims(field, vec)?;
        let mut out = self.value(field).clone();
        let vd = self.value(vec).data().to_vec();
        for ch in 0..c {
            out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x *= vd[ch]);
        }
        let rg = self.rg(&[field, vec]);
        Ok(self.push(out, Op::MulChannel { field, vec }, rg))
    }

    /// `field[c, :, :] + vec[c]`
    pub fn add_channel(&mut self, field: Var, vec: Var) -> Result<Var> {
        let (c, hw) = self.channel_dims(field, vec)?;
        let mut out = self.value(field).clone();
        let vd = self.value(vec).data().to_vec();
        for ch in 0..c {
            out.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x += vd[ch]);
        }
        let rg = self.rg(&[field, vec]);
        Ok(self.push(out, Op::AddChannel { field, vec }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    /// Picks flat (row-major) positions of `src` into a 1-D tensor.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let data = self.value(src).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
            return Err(Error::shape(format!("gather index {bad} out of range {}", data.len())));
        }
        let vals: Vec<f64> = idx.iter().map(|&i| data[i]).collect();
        let v = Tensor::new(vec![vals.len()], vals)?;
        let rg = self.rg(&[src]);
        Ok(self.push(v, Op::Gather { src, idx }, rg))
    }

    fn check_targets(&self, x: Var, n: usize) -> Result<()> {
        if self.value(x).numel() != n {
            return Err(Error::shape(format!(
                "{} predictions vs {n} targets",
                self.value(x).numel()
            )));
        }
        Ok(())
    }

    /// Elementwise binary cross-entropy of logits against (soft) targets.
    pub fn bce_logits(&mut self, x: Var, targets: Vec<f64>) -> Result<Var> {
        self.check_targets(x, targets.len())?;
        let vals: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&s, &p)| s.max(0.0) - s * p + (-s.abs()).exp().ln_1p())
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Bce { x, targets }, rg))
    }

    /// Elementwise smooth-L1 (beta = 1) against fixed targets.
    pub fn smooth_l1(&mut self, x: Var, targets: Vec<f64>) -> Result<Var> {
        self.check_targets(x, targets.len())?;
        let vals: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| smooth_l1(s - t))
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SmoothL1 { x, targets }, rg))
    }

    /// Elementwise squared error against fixed targets.
    pub fn sq_err(&mut self, x: Var, targets: Vec<f64>) -> Result<Var> {
        self.check_targets(x, targets.len())?;
        let vals: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| (s - t) * (s - t))
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SqErr { x, targets }, rg))
    }

    /// Elementwise `-ln(sigmoid(x))`, stable for large `|x|`.
    pub fn neg_log_sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|s| -log_sigmoid(s));
        let rg = self.rg(&[x]);
        self.push(v, Op::NegLogSigmoid(x), rg)
    }

    /// Elementwise sigmoid focal loss with hard labels.
    pub fn focal(&mut self, x: Var, positive: Vec<bool>, alpha: f64, gamma: f64) -> Result<Var> {
        self.check_targets(x, positive.len())?;
        let vals: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(&positive)
            .map(|(&s, &pos)| focal_value(s, pos, alpha, gamma))
            .collect();
        let v = Tensor::new(self.value(x).shape().to_vec(), vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Focal { x, positive, alpha, gamma }, rg))
    }

    /// Elementwise maximum across same-shaped inputs; ties go to the
    /// earliest input.
    pub fn max_stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("max over an empty set"))?;
        for &v in &inputs[1..] {
            same_shape(self.value(first), self.value(v), "max")?;
        }
        let n = self.value(first).numel();
        let mut out = self.value(first).data().to_vec();
        let mut argmax = vec![0u32; n];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (j, &x) in self.value(v).data().iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = k as u32;
                }
            }
        }
        let value = Tensor::new(self.value(first).shape().to_vec(), out)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::MaxStack { inputs: inputs.to_vec(), argmax }, rg))
    }

    /// Per-cell convex combination of `[C,H,W]` fields with weights given by a
    /// softmax over the per-agent `[1,H,W]` score maps.
    pub fn softmax_blend(&mut self, fields: &[Var], scores: &[Var]) -> Result<Var> {
        if fields.is_empty() || fields.len() != scores.len() {
            return Err(Error::contract("softmax blend needs one score map per field"));
        }
        let (c, h, w) = self.value(fields[0]).chw()?;
        let hw = h * w;
        for (k, (&f, &s)) in fields.iter().zip(scores).enumerate() {
            if self.value(f).shape() != [c, h, w] {
                return Err(Error::Interface {
                    agent: k,
                    msg: format!("field {:?} vs {:?}", self.value(f).shape(), [c, h, w]),
                });
            }
            if self.value(s).shape() != [1, h, w] {
                return Err(Error::Interface {
                    agent: k,
                    msg: format!("score map {:?} vs {:?}", self.value(s).shape(), [1, h, w]),
                });
            }
        }
        let n = fields.len();
        let mut weights = vec![0.0; n * hw];
        for j in 0..hw {
            let m = scores
                .iter()
                .map(|&s| self.value(s).data()[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, &s) in scores.iter().enumerate() {
                let e = (self.value(s).data()[j] - m).exp();
                weights[k * hw + j] = e;
                z += e;
            }
            for k in 0..n {
                weights[k * hw + j] /= z;
            }
        }
        let mut out = vec![0.0; c * hw];
        for (k, &f) in fields.iter().enumerate() {
            let fd = self.value(f).data();
            for ch in 0..c {
                for j in 0..hw {
                    out[ch * hw + j] += weights[k * hw + j] * fd[ch * hw + j];
                }
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        let mut all = fields.to_vec();
        all.extend_from_slice(scores);
        let rg = self.rg(&all);
        Ok(self.push(
            value,
            Op::SoftmaxBlend { fields: fields.to_vec(), scores: scores.to_vec(), weights },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients for every
    /// parameter slot reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        let mut out = Gradients::default();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(slot), Some(g)) = (self.nodes[i].slot, g) {
                let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                match out.by_slot.get_mut(&slot) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        out.by_slot.insert(slot, t);
                    }
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, k, cols } => {
                let (ci, h, w) = self.value(*input).chw().expect("checked in forward");
                let co = node.value.shape()[0];
                let hw = h * w;
                let kk = ci * k * k;
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], co);
                    for o in 0..co {
                        gb[o] += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
                    }
                }
                if self.wants(*weight) {
                    let src = match cols {
                        Some(c) => c.as_slice(),
                        None => self.value(*input).data(),
                    };
                    let gw = accumulate(&mut grads[weight.0], co * kk);
                    gemm(co, hw, kk, g, false, src, true, 1.0, gw);
                }
                if self.wants(*input) {
                    let wd = self.value(*weight).data();
                    if *k == 1 {
                        let gi = accumulate(&mut grads[input.0], ci * hw);
                        gemm(ci, co, hw, wd, true, g, false, 1.0, gi);
                    } else {
                        let mut dcols = vec![0.0; kk * hw];
                        gemm(kk, co, hw, wd, true, g, false, 0.0, &mut dcols);
                        let gi = accumulate(&mut grads[input.0], ci * hw);
                        col2im(&dcols, ci, h, w, *k, gi);
                    }
                }
            }
            Op::GroupNorm { input, scale, shift, groups, xhat, inv_std } => {
                let (c, h, w) = node.value.chw().expect("checked in forward");
                let hw = h * w;
                let sc = self.value(*scale).data();
                if self.wants(*scale) {
                    let gs = accumulate(&mut grads[scale.0], c);
                    for ch in 0..c {
                        gs[ch] += (ch * hw..(ch + 1) * hw).map(|j| g[j] * xhat[j]).sum::<f64>();
                    }
                }
                if self.wants(*shift) {
                    let gs = accumulate(&mut grads[shift.0], c);
                    for ch in 0..c {
                        gs[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
                if self.wants(*input) {
                    let per_c = c / groups;
                    let per = per_c * hw;
                    let gi = accumulate(&mut grads[input.0], c * hw);
                    for gr in 0..*groups {
                        let base = gr * per;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..per {
                            let d = g[base + j] * sc[(base + j) / hw];
                            sum_d += d;
                            sum_dx += d * xhat[base + j];
                        }
                        let n = per as f64;
                        for j in 0..per {
                            let d = g[base + j] * sc[(base + j) / hw];
                            gi[base + j] +=
                                inv_std[gr] / n * (n * d - sum_d - xhat[base + j] * sum_dx);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let ga = accumulate(&mut grads[v.0], g.len());
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    if av[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let ga = accumulate(&mut grads[a.0], g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
            Op::MulChannel { field, vec } => {
                let (c, h, w) = node.value.chw().expect("checked in forward");
                let hw = h * w;
                if self.wants(*field) {
                    let vd = self.value(*vec).data();
                    let gf = accumulate(&mut grads[field.0], c * hw);
                    for ch in 0..c {
                        for j in ch * hw..(ch + 1) * hw {
                            gf[j] += g[j] * vd[ch];
                        }
                    }
                }
                if self.wants(*vec) {
                    let fd = self.value(*field).data();
                    let gv = accumulate(&mut grads[vec.0], c);
                    for ch in 0..c {
                        gv[ch] += (ch * hw..(ch + 1) * hw).map(|j| g[j] * fd[j]).sum::<f64>();
                    }
                }
            }
            Op::AddChannel { field, vec } => {
                let (c, h, w) = node.value.chw().expect("checked in forward");
                let hw = h * w;
                if self.wants(*field) {
                    let gf = accumulate(&mut grads[field.0], c * hw);
                    gf.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.wants(*vec) {
                    let gv = accumulate(&mut grads[vec.0], c);
                    for ch in 0..c {
                        gv[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = accumulate(&mut grads[a.0], g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                let ga = accumulate(&mut grads[a.0], n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Gather { src, idx } => {
                let n = self.value(*src).numel();
                let gs = accumulate(&mut grads[src.0], n);
                for (j, &i) in idx.iter().enumerate() {
                    gs[i] += g[j];
                }
            }
            Op::Bce { x, targets } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * (sigmoid(xv[j]) - targets[j]);
                }
            }
            Op::SmoothL1 { x, targets } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    let r = xv[j] - targets[j];
                    gx[j] += g[j] * r.clamp(-1.0, 1.0);
                }
            }
            Op::SqErr { x, targets } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * 2.0 * (xv[j] - targets[j]);
                }
            }
            Op::NegLogSigmoid(x) => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * (sigmoid(xv[j]) - 1.0);
                }
            }
            Op::Focal { x, positive, alpha, gamma } => {
                let xv = self.value(*x).data();
                let gx = accumulate(&mut grads[x.0], g.len());
                for j in 0..g.len() {
                    gx[j] += g[j] * focal_grad(xv[j], positive[j], *alpha, *gamma);
                }
            }
            Op::MaxStack { inputs, argmax } => {
                for (k, v) in inputs.iter().enumerate() {
                    if !self.wants(*v) {
                        continue;
                    }
                    let gv = accumulate(&mut grads[v.0], g.len());
                    for j in 0..g.len() {
                        if argmax[j] as usize == k {
                            gv[j] += g[j];
                        }
                    }
                }
            }
            Op::SoftmaxBlend { fields, scores, weights } => {
                let (c, h, w) = node.value.chw().expect("checked in forward");
                let hw = h * w;
                let out = node.value.data();
                for (k, f) in fields.iter().enumerate() {
                    if self.wants(*f) {
                        let gf = accumulate(&mut grads[f.0], c * hw);
                        for ch in 0..c {
                            for j in 0..hw {
                                gf[ch * hw + j] += g[ch * hw + j] * weights[k * hw + j];
                            }
                        }
                    }
                }
                // d out / d s_k = w_k (f_k - out)
                for (k, (s, f)) in scores.iter().zip(fields).enumerate() {
                    if !self.wants(*s) {
                        continue;
                    }
                    let fd = self.value(*f).data();
                    let gs = accumulate(&mut grads[s.0], hw);
                    for j in 0..hw {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            let idx = ch * hw + j;
                            acc += g[idx] * (fd[idx] - out[idx]);
                        }
                        gs[j] += weights[k * hw + j] * acc;
                    }
                }
            }
        }
    }
}

pub fn smooth_l1(r: f64) -> f64 {
    let a = r.abs();
    if a < 1.0 {
        0.5 * r * r
    } else {
        a - 0.5
    }
}

fn focal_value(s: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(s);
    if positive {
        alpha * (1.0 - p).powf(gamma) * softplus(-s)
    } else {
        (1.0 - alpha) * p.powf(gamma) * softplus(s)
    }
}

fn focal_grad(s: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(s);
    let q = 1.0 - p;
    if positive {
        // d/ds [alpha q^g (-ln p)] = alpha q^g (g p ln p - q)
        alpha * q.powf(gamma) * (gamma * p * log_sigmoid(s) - q)
    } else {
        // d/ds [(1-alpha) p^g (-ln q)] = (1-alpha) p^g (p - g q ln q)
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * log_sigmoid(-s))
    }
}
