//! Reverse-mode automatic differentiation over an append-only operation tape.
//!
//! Values are computed eagerly as nodes are appended, so parents always
//! precede children and the backward pass is a single reverse sweep over the
//! node list. The op set is deliberately fixed to what the toy generator,
//! discriminator, and posterior head need:
//!
//! add, multiply, matmul, conv2d (3×3 / stride 1 / zero pad 1), 2× average
//! downsample, 2× nearest upsample, leaky-relu (slope 0.2), sigmoid, log,
//! exp, sum/mean reduction, channel-wise affine, elementwise Gaussian
//! log-density, and concatenation — plus reshape and scalar-affine plumbing.
//!
//! `backward` can be called repeatedly on the same graph; every call starts
//! from fresh accumulators and produces identical gradients.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::optim::ParameterStore;
use crate::tensor::{Tensor, TensorError};

pub const LEAKY_SLOPE: f64 = 0.2;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward target must be scalar, got shape {0:?}")]
    NonScalarTarget(Vec<usize>),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add,
    Mul,
    MatMul,
    Conv2d,
    DownAvg2,
    UpNearest2,
    LeakyRelu,
    Sigmoid,
    Log,
    Exp,
    Sum,
    Mean,
    ChannelAffine,
    GaussianLogDensity,
    Concat,
    Reshape,
    AffineScalar { mul: f64 },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, parents, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf holding a constant tensor (inputs, sampled noise, one-hot masks).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    /// Leaf bound to a named trainable parameter. The same name always maps
    /// to the same node so gradients from every use accumulate together.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId, GraphError> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?
            .clone();
        let id = self.push(Op::Param, vec![], value);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("multiply", va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (va.data(), vb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for l in 0..k {
                let ail = da[i * k + l];
                let brow = &db[l * n..(l + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += ail * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    /// 3×3 convolution, stride 1, zero padding 1, with per-channel bias.
    /// `x`: [C, H, W], `w`: [Co, C, 3, 3], `b`: [Co] → [Co, H, W].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (sx, sw, sb) = (vx.shape(), vw.shape(), vb.shape());
        if sx.len() != 3
            || sw.len() != 4
            || sw[1] != sx[0]
            || sw[2] != 3
            || sw[3] != 3
            || sb != [sw[0]]
        {
            return Err(shape_err(
                "conv2d",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        let cout = sw[0];
        let mut out = vec![0.0; cout * h * wd];
        for co in 0..cout {
            let bias = vb.data()[co];
            let ochan = &mut out[co * h * wd..(co + 1) * h * wd];
            ochan.fill(bias);
            for ci in 0..cin {
                let xchan = &vx.data()[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = vw.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(ochan, xchan, h, wd, ky as isize - 1, kx as isize - 1, wv);
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, h, wd], out)?;
        Ok(self.push(Op::Conv2d, vec![x, w, b], value))
    }

    /// 2× average-pool downsample. [C, H, W] → [C, H/2, W/2]; H, W even.
    pub fn downsample_avg2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err("downsample-avg", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let d = vx.data();
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    let base = ch * h * w + 2 * r * w + 2 * q;
                    out[ch * oh * ow + r * ow + q] =
                        0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::DownAvg2, vec![x], value))
    }

    /// 2× nearest-neighbor upsample. [C, H, W] → [C, 2H, 2W].
    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 3 {
            return Err(shape_err("upsample-nearest", format!("{s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        let d = vx.data();
        for ch in 0..c {
            for r in 0..oh {
                for q in 0..ow {
                    out[ch * oh * ow + r * ow + q] = d[ch * h * w + (r / 2) * w + q / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::UpNearest2, vec![x], value))
    }

    pub fn leaky_relu(&mut self, x: NodeId) -> NodeId {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        self.push(Op::LeakyRelu, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        if let Some(v) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(GraphError::Tensor(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            }));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(Op::Log, vec![x], value))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let value = self.value(x).map(f64::exp);
        if !value.is_finite() {
            return Err(GraphError::Tensor(TensorError::NonFinite { op: "exp" }));
        }
        Ok(self.push(Op::Exp, vec![x], value))
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum, vec![x], value)
    }

    /// Full mean reduction to a rank-0 scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.push(Op::Mean, vec![x], value)
    }

    /// Per-channel scale and bias broadcast over the trailing dimensions.
    /// `x`: [C, ...], `scale`, `bias`: [C].
    pub fn channel_affine(
        &mut self,
        x: NodeId,
        scale: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (vx, vs, vb) = (self.value(x), self.value(scale), self.value(bias));
        let sx = vx.shape();
        if sx.is_empty() || vs.shape() != [sx[0]] || vb.shape() != [sx[0]] {
            return Err(shape_err(
                "channel-affine",
                format!("x {:?}, scale {:?}, bias {:?}", sx, vs.shape(), vb.shape()),
            ));
        }
        let c = sx[0];
        let block = vx.numel() / c;
        let mut out = vec![0.0; vx.numel()];
        for ch in 0..c {
            let (s, b) = (vs.data()[ch], vb.data()[ch]);
            let xs = &vx.data()[ch * block..(ch + 1) * block];
            let os = &mut out[ch * block..(ch + 1) * block];
            for (o, xv) in os.iter_mut().zip(xs) {
                *o = s * xv + b;
            }
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        Ok(self.push(Op::ChannelAffine, vec![x, scale, bias], value))
    }

    /// Elementwise log N(c; μ, σ²) with σ² = exp(log_var).
    pub fn gaussian_log_density(
        &mut self,
        c: NodeId,
        mean: NodeId,
        log_var: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (vc, vm, vl) = (self.value(c), self.value(mean), self.value(log_var));
        same_shape("gaussian-log-density", vc, vm)?;
        same_shape("gaussian-log-density", vc, vl)?;
        let mut out = vec![0.0; vc.numel()];
        for i in 0..out.len() {
            let (cv, mu, lv) = (vc.data()[i], vm.data()[i], vl.data()[i]);
            let d = cv - mu;
            out[i] = -0.5 * (LN_2PI + lv + d * d * (-lv).exp());
        }
        let value = Tensor::new(vc.shape().to_vec(), out)?;
        if !value.is_finite() {
            return Err(GraphError::Tensor(TensorError::NonFinite {
                op: "gaussian-log-density",
            }));
        }
        Ok(self.push(Op::GaussianLogDensity, vec![c, mean, log_var], value))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no operands".to_string()));
        }
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().is_empty() || v.shape()[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs leading {:?}", v.shape(), tail),
                ));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat, parts.to_vec(), value))
    }

    /// Shape change over unchanged row-major data.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value))
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine_scalar(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = self.value(x).map(|v| mul * v + add);
        self.push(Op::AffineScalar { mul }, vec![x], value)
    }

    /// Reverse sweep from a scalar target. Gradients accumulate into fresh
    /// buffers on every call, so repeated calls return identical results.
    pub fn backward(&self, target: NodeId) -> Result<Gradients, GraphError> {
        let tv = self.value(target);
        if tv.numel() != 1 {
            return Err(GraphError::NonScalarTarget(tv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::new(tv.shape().to_vec(), vec![1.0]).unwrap());

        for idx in (0..=target.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            node_grads: grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let parents = &node.parents;
        let mut acc = |target: NodeId, delta: Tensor| {
            match &mut grads[target.0] {
                Some(g) => g.add_assign(&delta),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add => {
                acc(parents[0], gy.clone());
                acc(parents[1], gy.clone());
            }
            Op::Mul => {
                let (va, vb) = (self.value(parents[0]), self.value(parents[1]));
                let da = Tensor::new(
                    va.shape().to_vec(),
                    gy.data().iter().zip(vb.data()).map(|(g, b)| g * b).collect(),
                )
                .unwrap();
                let db = Tensor::new(
                    vb.shape().to_vec(),
                    gy.data().iter().zip(va.data()).map(|(g, a)| g * a).collect(),
                )
                .unwrap();
                acc(parents[0], da);
                acc(parents[1], db);
            }
            Op::MatMul => {
                let (va, vb) = (self.value(parents[0]), self.value(parents[1]));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (da_data, db_data) = {
                    let (a, b, g) = (va.data(), vb.data(), gy.data());
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for l in 0..k {
                            let brow = &b[l * n..(l + 1) * n];
                            let mut dot = 0.0;
                            for (gv, bv) in grow.iter().zip(brow) {
                                dot += gv * bv;
                            }
                            da[i * k + l] = dot;
                        }
                        for l in 0..k {
                            let ail = a[i * k + l];
                            let dbrow = &mut db[l * n..(l + 1) * n];
                            for (d, gv) in dbrow.iter_mut().zip(grow) {
                                *d += ail * gv;
                            }
                        }
                    }
                    (da, db)
                };
                acc(parents[0], Tensor::new(vec![m, k], da_data).unwrap());
                acc(parents[1], Tensor::new(vec![k, n], db_data).unwrap());
            }
            Op::Conv2d => {
                let (vx, vw) = (self.value(parents[0]), self.value(parents[1]));
                let (cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let cout = vw.shape()[0];
                let mut dx = vec![0.0; vx.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; cout];
                for co in 0..cout {
                    let gchan = &gy.data()[co * h * wd..(co + 1) * h * wd];
                    db[co] = gchan.iter().sum();
                    for ci in 0..cin {
                        let xchan = &vx.data()[ci * h * wd..(ci + 1) * h * wd];
                        let dxchan = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let (dy, dxo) = (ky as isize - 1, kx as isize - 1);
                                let wv = vw.data()[((co * cin + ci) * 3 + ky) * 3 + kx];
                                if wv != 0.0 {
                                    accumulate_shifted_into(dxchan, gchan, h, wd, dy, dxo, wv);
                                }
                                dw[((co * cin + ci) * 3 + ky) * 3 + kx] +=
                                    shifted_dot(xchan, gchan, h, wd, dy, dxo);
                            }
                        }
                    }
                }
                acc(parents[0], Tensor::new(vx.shape().to_vec(), dx).unwrap());
                acc(parents[1], Tensor::new(vw.shape().to_vec(), dw).unwrap());
                acc(parents[2], Tensor::new(vec![cout], db).unwrap());
            }
            Op::DownAvg2 => {
                let vx = self.value(parents[0]);
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; vx.numel()];
                for ch in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let g = 0.25 * gy.data()[ch * oh * ow + r * ow + q];
                            let base = ch * h * w + 2 * r * w + 2 * q;
                            dx[base] += g;
                            dx[base + 1] += g;
                            dx[base + w] += g;
                            dx[base + w + 1] += g;
                        }
                    }
                }
                acc(parents[0], Tensor::new(vx.shape().to_vec(), dx).unwrap());
            }
            Op::UpNearest2 => {
                let vx = self.value(parents[0]);
                let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; vx.numel()];
                for ch in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            dx[ch * h * w + (r / 2) * w + q / 2] +=
                                gy.data()[ch * oh * ow + r * ow + q];
                        }
                    }
                }
                acc(parents[0], Tensor::new(vx.shape().to_vec(), dx).unwrap());
            }
            Op::LeakyRelu => {
                let vx = self.value(parents[0]);
                let dx = Tensor::new(
                    vx.shape().to_vec(),
                    vx.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(x, g)| if *x > 0.0 { *g } else { LEAKY_SLOPE * g })
                        .collect(),
                )
                .unwrap();
                acc(parents[0], dx);
            }
            Op::Sigmoid => {
                let vy = &node.value;
                let dx = Tensor::new(
                    vy.shape().to_vec(),
                    vy.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(y, g)| y * (1.0 - y) * g)
                        .collect(),
                )
                .unwrap();
                acc(parents[0], dx);
            }
            Op::Log => {
                let vx = self.value(parents[0]);
                let dx = Tensor::new(
                    vx.shape().to_vec(),
                    vx.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(x, g)| g / x)
                        .collect(),
                )
                .unwrap();
                acc(parents[0], dx);
            }
            Op::Exp => {
                let vy = &node.value;
                let dx = Tensor::new(
                    vy.shape().to_vec(),
                    vy.data()
                        .iter()
                        .zip(gy.data())
                        .map(|(y, g)| y * g)
                        .collect(),
                )
                .unwrap();
                acc(parents[0], dx);
            }
            Op::Sum => {
                let vx = self.value(parents[0]);
                acc(parents[0], Tensor::filled(vx.shape(), gy.item()));
            }
            Op::Mean => {
                let vx = self.value(parents[0]);
                acc(
                    parents[0],
                    Tensor::filled(vx.shape(), gy.item() / vx.numel() as f64),
                );
            }
            Op::ChannelAffine => {
                let (vx, vs) = (self.value(parents[0]), self.value(parents[1]));
                let c = vx.shape()[0];
                let block = vx.numel() / c;
                let mut dx = vec![0.0; vx.numel()];
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ch in 0..c {
                    let s = vs.data()[ch];
                    let gs = &gy.data()[ch * block..(ch + 1) * block];
                    let xs = &vx.data()[ch * block..(ch + 1) * block];
                    let dxs = &mut dx[ch * block..(ch + 1) * block];
                    let (mut sum_g, mut sum_xg) = (0.0, 0.0);
                    for ((d, g), x) in dxs.iter_mut().zip(gs).zip(xs) {
                        *d = s * g;
                        sum_g += g;
                        sum_xg += x * g;
                    }
                    ds[ch] = sum_xg;
                    db[ch] = sum_g;
                }
                acc(parents[0], Tensor::new(vx.shape().to_vec(), dx).unwrap());
                acc(parents[1], Tensor::new(vec![c], ds).unwrap());
                acc(parents[2], Tensor::new(vec![c], db).unwrap());
            }
            Op::GaussianLogDensity => {
                let (vc, vm, vl) = (
                    self.value(parents[0]),
                    self.value(parents[1]),
                    self.value(parents[2]),
                );
                let n = vc.numel();
                let mut dc = vec![0.0; n];
                let mut dm = vec![0.0; n];
                let mut dl = vec![0.0; n];
                for i in 0..n {
                    let d = vc.data()[i] - vm.data()[i];
                    let inv_var = (-vl.data()[i]).exp();
                    let g = gy.data()[i];
                    dc[i] = -d * inv_var * g;
                    dm[i] = d * inv_var * g;
                    dl[i] = -0.5 * (1.0 - d * d * inv_var) * g;
                }
                acc(parents[0], Tensor::new(vc.shape().to_vec(), dc).unwrap());
                acc(parents[1], Tensor::new(vm.shape().to_vec(), dm).unwrap());
                acc(parents[2], Tensor::new(vl.shape().to_vec(), dl).unwrap());
            }
            Op::Concat => {
                let mut offset = 0;
                for &p in parents {
                    let vp = self.value(p);
                    let n = vp.numel();
                    let slice = Tensor::new(
                        vp.shape().to_vec(),
                        gy.data()[offset..offset + n].to_vec(),
                    )
                    .unwrap();
                    offset += n;
                    acc(p, slice);
                }
            }
            Op::Reshape => {
                let vx = self.value(parents[0]);
                acc(
                    parents[0],
                    Tensor::new(vx.shape().to_vec(), gy.data().to_vec()).unwrap(),
                );
            }
            Op::AffineScalar { mul } => {
                let m = *mul;
                acc(parents[0], gy.map(|g| m * g));
            }
        }
    }
}

/// Result of a backward sweep: per-node gradients plus the name → node map
/// for every parameter leaf that participated in the graph.
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter; zero-filled absent from this sweep.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|id| self.node(*id))
    }

    /// All parameter gradients that received a contribution, by name.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, id) in std::mem::take(&mut self.params) {
            if let Some(g) = self.node_grads[id.0].take() {
                out.insert(name, g);
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn shape_err(op: &'static str, detail: String) -> GraphError {
    GraphError::Tensor(TensorError::ShapeMismatch { op, detail })
}

/// out[r][c] += wv * src[r+dy][c+dx] over the in-bounds window.
fn accumulate_shifted(
    out: &mut [f64],
    src: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wv: f64,
) {
    let (r0, r1) = row_range(h, dy);
    let (c0, c1) = row_range(w, dx);
    if c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let sr = (r as isize + dy) as usize;
        let orow = &mut out[r * w + c0..r * w + c1];
        let srow = &src[sr * w + (c0 as isize + dx) as usize..];
        for (o, s) in orow.iter_mut().zip(srow) {
            *o += wv * s;
        }
    }
}

/// out[r+dy][c+dx] += wv * src[r][c] — the transpose of `accumulate_shifted`.
fn accumulate_shifted_into(
    out: &mut [f64],
    src: &[f64],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wv: f64,
) {
    let (r0, r1) = row_range(h, dy);
    let (c0, c1) = row_range(w, dx);
    if c0 >= c1 {
        return;
    }
    for r in r0..r1 {
        let or = (r as isize + dy) as usize;
        let srow = &src[r * w + c0..r * w + c1];
        let orow = &mut out[or * w + (c0 as isize + dx) as usize..];
        for (o, s) in orow.iter_mut().zip(srow) {
            *o += wv * s;
        }
    }
}

/// Σ_{r,c} a[r+dy][c+dx] * b[r][c] over the in-bounds window.
fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (r0, r1) = row_range(h, dy);
    let (c0, c1) = row_range(w, dx);
    if c0 >= c1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in r0..r1 {
        let ar = (r as isize + dy) as usize;
        let arow = &a[ar * w + (c0 as isize + dx) as usize..];
        let brow = &b[r * w + c0..r * w + c1];
        for (av, bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
    }
    acc
}

fn row_range(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c).data(), g.value(a).data());
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        // hand sum of the full 3×3 window at an interior pixel
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1, 4, 4], 1.0));
        let w = g.input(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 4, 4]);
        assert_eq!(v.data()[1 * 4 + 1], 9.0);
        assert_eq!(v.data()[2 * 4 + 2], 9.0);
        // corner sees a 2×2 window
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn down_then_up_shapes() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let d = g.downsample_avg2(x).unwrap();
        assert_eq!(g.value(d).data(), &[2.5]);
        let u = g.upsample_nearest2(d).unwrap();
        assert_eq!(g.value(u).data(), &[2.5; 4]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        // d(x²)/dx at x = 3 → 6
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.node(x).unwrap().item(), 6.0);
    }

    #[test]
    fn gaussian_log_density_stationary_at_mean() {
        let mut g = Graph::new();
        let c = g.input(Tensor::from_vec(vec![0.7]));
        let mu = g.input(Tensor::from_vec(vec![0.7]));
        let lv = g.input(Tensor::from_vec(vec![-0.3]));
        let y = g.gaussian_log_density(c, mu, lv).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(mu).unwrap().data()[0], 0.0);
    }

    #[test]
    fn backward_non_scalar_target_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(GraphError::NonScalarTarget(_))
        ));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.3, -0.8, 1.2]));
        let y = g.sigmoid(x);
        let m = g.mean(y);
        let g1 = g.backward(m).unwrap();
        let g2 = g.backward(m).unwrap();
        assert_eq!(g1.node(x).unwrap().data(), g2.node(x).unwrap().data());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![0.5, 0.0]));
        assert!(g.log(x).is_err());
    }

    #[test]
    fn concat_backward_splits() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.input(Tensor::from_vec(vec![3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = g.input(Tensor::from_vec(vec![10.0, 20.0, 30.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(grads.node(b).unwrap().data(), &[30.0]);
    }

    #[test]
    fn concat_of_same_node_accumulates() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1.0]));
        let c = g.concat(&[a, a, a]).unwrap();
        let s = g.sum(c);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.node(a).unwrap().data(), &[3.0]);
    }

    /// Central-difference check of every differentiable op on random inputs.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..5 {
            let checks = gradcheck::standard_op_checks(&mut rng);
            for (name, max_rel) in checks {
                assert!(
                    max_rel < 1e-5,
                    "trial {trial}: op {name} rel err {max_rel:.3e}"
                );
            }
        }
    }

    #[test]
    fn forward_ops_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |data: &[f64]| {
            let mut g = Graph::new();
            let a = g.input(t(&[3, 4, 4], data));
            let b = g.leaky_relu(a);
            let c = g.downsample_avg2(b).unwrap();
            let d = g.sigmoid(c);
            let m = g.mean(d);
            g.value(m).item()
        };
        assert_eq!(run(&x), run(&x));
    }
}
