//! Wengert-list reverse-mode autodiff over 4-D tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; `backward`
//! walks the list in reverse, accumulating parameter gradients into the
//! [`ParamStore`]. Ops cover exactly what the segmentation networks need:
//! same-padding 3D convolution (k = 1 or 3), 2x max pooling, trilinear
//! upsampling by an integer factor, channel concatenation, instance
//! normalization, leaky ReLU, sigmoid, elementwise products for mask gating,
//! and a gradient-blocking hard gate for inference-style binarized masks.

use ndarray::{Array4, ArrayView3, Axis};
use rayon::prelude::*;

use super::{conv, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a value node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Conv { input: NodeId, weight: ParamId, bias: ParamId, kernel: usize },
    MaxPool2 { input: NodeId, argmax: Option<Vec<u8>> },
    Upsample { input: NodeId, factor: usize },
    Concat { a: NodeId, b: NodeId },
    InstanceNorm { input: NodeId, gain: ParamId, bias: ParamId, mean: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { input: NodeId, slope: f64 },
    Sigmoid { input: NodeId },
    Mul { a: NodeId, b: NodeId },
    HardGate,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

fn shape4(t: &Tensor) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Axis lookup tables for trilinear interpolation with edge replication,
/// under the half-voxel-center convention `src = (o + 0.5)/f - 0.5`.
fn upsample_axis_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let floor = src.floor();
            let t = src - floor;
            let i0 = (floor.max(0.0) as usize).min(n_in - 1);
            let i1 = (((floor + 1.0).max(0.0)) as usize).min(n_in - 1);
            (i0, i1, t)
        })
        .collect()
}

impl Tape {
    /// `grad_enabled = false` skips backward-only caches (inference mode).
    pub fn new(grad_enabled: bool) -> Self {
        Tape { nodes: Vec::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Extracts a single-channel value as a 3-D view.
    pub fn value3(&self, id: NodeId) -> ArrayView3<'_, f64> {
        self.nodes[id.0].value.index_axis(Axis(0), 0)
    }

    /// Registers a constant input tensor (no gradient tracked).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let t = if t.is_standard_layout() { t } else { t.as_standard_layout().into_owned() };
        self.push(t, Op::Input)
    }

    /// Same-padding convolution with kernel size 3 or 1 taken from the
    /// weight shape `[oc, ic, k, k, k]`.
    pub fn conv(&mut self, store: &ParamStore, input: NodeId, weight: ParamId, bias: ParamId) -> Result<NodeId> {
        let wshape = store.shape(weight).to_vec();
        if wshape.len() != 5 || wshape[2] != wshape[3] || wshape[3] != wshape[4] {
            return Err(Error::InvalidArgument(format!("bad conv weight shape {wshape:?}")));
        }
        let (oc, ic, k) = (wshape[0], wshape[1], wshape[2]);
        if k != 1 && k != 3 {
            return Err(Error::InvalidArgument(format!("conv kernel must be 1 or 3, got {k}")));
        }
        let in_shape = shape4(self.value(input));
        if in_shape[0] != ic {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {ic} input channels, got {}",
                in_shape[0]
            )));
        }
        if store.shape(bias) != [oc] {
            return Err(Error::InvalidArgument("conv bias shape must be [oc]".into()));
        }
        let out = conv::forward(self.value(input), store.data(weight), store.data(bias), oc, k);
        Ok(self.push(out, Op::Conv { input, weight, bias, kernel: k }))
    }

    /// 2x2x2 max pooling with stride 2. Ties resolve to the first maximum in
    /// scan order, which keeps results deterministic.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let [c, d, h, w] = shape4(self.value(input));
        for (axis, (name, n)) in [("depth", d), ("height", h), ("width", w)].iter().enumerate() {
            if n % 2 != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "max-pool needs even extents: {name} axis ({axis}) has {n}"
                )));
            }
        }
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        let src = self.value(input);
        let mut out = Array4::<f64>::zeros((c, od, oh, ow));
        let mut argmax = self.grad_enabled.then(|| vec![0u8; c * od * oh * ow]);
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_off = 0u8;
                        for dz in 0..2usize {
                            for dy in 0..2usize {
                                for dx in 0..2usize {
                                    let v = src[[ch, 2 * z + dz, 2 * y + dy, 2 * x + dx]];
                                    let off = (dz * 4 + dy * 2 + dx) as u8;
                                    if v > best {
                                        best = v;
                                        best_off = off;
                                    }
                                }
                            }
                        }
                        out[[ch, z, y, x]] = best;
                        if let Some(am) = argmax.as_mut() {
                            am[((ch * od + z) * oh + y) * ow + x] = best_off;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool2 { input, argmax }))
    }

    /// Trilinear upsampling by an integer factor with edge replication.
    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
        }
        let [c, d, h, w] = shape4(self.value(input));
        if factor == 1 {
            let v = self.value(input).clone();
            return Ok(self.push(v, Op::Upsample { input, factor }));
        }
        let td = upsample_axis_table(d, factor);
        let th = upsample_axis_table(h, factor);
        let tw = upsample_axis_table(w, factor);
        let src = self.value(input);
        let src_slice = src.as_slice().unwrap();
        let slab_in = d * h * w;
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let mut out = Array4::<f64>::zeros((c, od, oh, ow));
        out.as_slice_mut().unwrap().par_chunks_mut(od * oh * ow).enumerate().for_each(
            |(ch, out_slab)| {
                let s = &src_slice[ch * slab_in..(ch + 1) * slab_in];
                let at = |z: usize, y: usize, x: usize| s[(z * h + y) * w + x];
                for (oz, &(z0, z1, tz)) in td.iter().enumerate() {
                    for (oy, &(y0, y1, ty)) in th.iter().enumerate() {
                        for (ox, &(x0, x1, tx)) in tw.iter().enumerate() {
                            let c00 = at(z0, y0, x0) * (1.0 - tx) + at(z0, y0, x1) * tx;
                            let c01 = at(z0, y1, x0) * (1.0 - tx) + at(z0, y1, x1) * tx;
                            let c10 = at(z1, y0, x0) * (1.0 - tx) + at(z1, y0, x1) * tx;
                            let c11 = at(z1, y1, x0) * (1.0 - tx) + at(z1, y1, x1) * tx;
                            let c0 = c00 * (1.0 - ty) + c01 * ty;
                            let c1 = c10 * (1.0 - ty) + c11 * ty;
                            out_slab[(oz * oh + oy) * ow + ox] = c0 * (1.0 - tz) + c1 * tz;
                        }
                    }
                }
            },
        );
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = shape4(self.value(a));
        let sb = shape4(self.value(b));
        if sa[1..] != sb[1..] {
            return Err(Error::shape(&sa[1..], &sb[1..]));
        }
        let out = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("shapes checked");
        Ok(self.push(out.as_standard_layout().into_owned(), Op::Concat { a, b }))
    }

    /// Per-sample, per-channel normalization with learnable gain and bias.
    pub fn instance_norm(&mut self, store: &ParamStore, input: NodeId, gain: ParamId, bias: ParamId) -> Result<NodeId> {
        let [c, d, h, w] = shape4(self.value(input));
        if store.shape(gain) != [c] || store.shape(bias) != [c] {
            return Err(Error::InvalidArgument(format!(
                "instance norm gain/bias must have shape [{c}]"
            )));
        }
        let n = d * h * w;
        let src = self.value(input).as_slice().unwrap();
        let g = store.data(gain);
        let b = store.data(bias);
        let mut mean = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut out = Array4::<f64>::zeros((c, d, h, w));
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(n)
            .zip(mean.par_iter_mut())
            .zip(inv_std.par_iter_mut())
            .enumerate()
            .for_each(|(ch, ((out_slab, mean_ch), istd_ch))| {
                let s = &src[ch * n..(ch + 1) * n];
                let mu = s.iter().sum::<f64>() / n as f64;
                let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let istd = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                *mean_ch = mu;
                *istd_ch = istd;
                for (o, &v) in out_slab.iter_mut().zip(s) {
                    *o = g[ch] * (v - mu) * istd + b[ch];
                }
            });
        Ok(self.push(out, Op::InstanceNorm { input, gain, bias, mean, inv_std }))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let out = self.value(input).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { input })
    }

    /// Elementwise product; both factors receive gradients (mask gating).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = shape4(self.value(a));
        let sb = shape4(self.value(b));
        if sa != sb {
            return Err(Error::shape(sa, sb));
        }
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Binarizes at `threshold` and blocks gradient flow.
    pub fn hard_gate(&mut self, input: NodeId, threshold: f64) -> NodeId {
        let out = self.value(input).mapv(|v| if v > threshold { 1.0 } else { 0.0 });
        self.push(out, Op::HardGate)
    }

    /// Reverse pass from the given output-gradient seeds. Parameter gradients
    /// accumulate into the store (on top of whatever is already there).
    pub fn backward(&self, store: &mut ParamStore, seeds: Vec<(NodeId, Tensor)>) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::InvalidArgument(
                "backward on a tape recorded with gradients disabled".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            if shape4(&seed) != shape4(self.value(id)) {
                return Err(Error::shape(shape4(self.value(id)), shape4(&seed)));
            }
            match &mut grads[id.0] {
                Some(g) => *g += &seed,
                slot => *slot = Some(seed),
            }
        }

        fn accum(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
            match &mut grads[id.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input | Op::HardGate => {}
                Op::Conv { input, weight, bias, kernel } => {
                    let wshape = store.shape(*weight).to_vec();
                    let ic = wshape[1];
                    let din = conv::backward_input(&g, store.data(*weight), ic, *kernel);
                    {
                        // Split borrows: clone weight data is avoided by
                        // accumulating into temporary buffers.
                        let mut dw = vec![0.0; store.data(*weight).len()];
                        let mut db = vec![0.0; store.data(*bias).len()];
                        conv::backward_params(&g, self.value(*input), *kernel, &mut dw, &mut db);
                        for (acc, d) in store.grad_mut(*weight).iter_mut().zip(&dw) {
                            *acc += d;
                        }
                        for (acc, d) in store.grad_mut(*bias).iter_mut().zip(&db) {
                            *acc += d;
                        }
                    }
                    accum(&mut grads, *input, din);
                }
                Op::MaxPool2 { input, argmax } => {
                    let argmax = argmax.as_ref().expect("grad-enabled tape caches argmax");
                    let [c, od, oh, ow] = shape4(&g);
                    let mut din = Array4::<f64>::zeros(self.value(*input).raw_dim());
                    for ch in 0..c {
                        for z in 0..od {
                            for y in 0..oh {
                                for x in 0..ow {
                                    let off = argmax[((ch * od + z) * oh + y) * ow + x] as usize;
                                    let (dz, dy, dx) = (off / 4, (off / 2) % 2, off % 2);
                                    din[[ch, 2 * z + dz, 2 * y + dy, 2 * x + dx]] +=
                                        g[[ch, z, y, x]];
                                }
                            }
                        }
                    }
                    accum(&mut grads, *input, din);
                }
                Op::Upsample { input, factor } => {
                    if *factor == 1 {
                        accum(&mut grads, *input, g);
                        continue;
                    }
                    let [c, d, h, w] = shape4(self.value(*input));
                    let td = upsample_axis_table(d, *factor);
                    let th = upsample_axis_table(h, *factor);
                    let tw = upsample_axis_table(w, *factor);
                    let (oh, ow) = (h * factor, w * factor);
                    let g_slice = g.as_slice().unwrap();
                    let mut din = Array4::<f64>::zeros((c, d, h, w));
                    let slab_out = d * factor * oh * ow;
                    din.as_slice_mut().unwrap().par_chunks_mut(d * h * w).enumerate().for_each(
                        |(ch, din_slab)| {
                            let gs = &g_slice[ch * slab_out..(ch + 1) * slab_out];
                            let mut add = |z: usize, y: usize, x: usize, v: f64| {
                                din_slab[(z * h + y) * w + x] += v;
                            };
                            for (oz, &(z0, z1, tz)) in td.iter().enumerate() {
                                for (oy, &(y0, y1, ty)) in th.iter().enumerate() {
                                    for (ox, &(x0, x1, tx)) in tw.iter().enumerate() {
                                        let gv = gs[(oz * oh + oy) * ow + ox];
                                        add(z0, y0, x0, gv * (1.0 - tz) * (1.0 - ty) * (1.0 - tx));
                                        add(z0, y0, x1, gv * (1.0 - tz) * (1.0 - ty) * tx);
                                        add(z0, y1, x0, gv * (1.0 - tz) * ty * (1.0 - tx));
                                        add(z0, y1, x1, gv * (1.0 - tz) * ty * tx);
                                        add(z1, y0, x0, gv * tz * (1.0 - ty) * (1.0 - tx));
                                        add(z1, y0, x1, gv * tz * (1.0 - ty) * tx);
                                        add(z1, y1, x0, gv * tz * ty * (1.0 - tx));
                                        add(z1, y1, x1, gv * tz * ty * tx);
                                    }
                                }
                            }
                        },
                    );
                    accum(&mut grads, *input, din);
                }
                Op::Concat { a, b } => {
                    let ca = shape4(self.value(*a))[0];
                    let ga = g.slice(ndarray::s![..ca, .., .., ..]).to_owned();
                    let gb = g.slice(ndarray::s![ca.., .., .., ..]).to_owned();
                    accum(&mut grads, *a, ga.as_standard_layout().into_owned());
                    accum(&mut grads, *b, gb.as_standard_layout().into_owned());
                }
                Op::InstanceNorm { input, gain, bias, mean, inv_std } => {
                    let [c, d, h, w] = shape4(&g);
                    let n = d * h * w;
                    let x = self.value(*input).as_slice().unwrap();
                    let gs = g.as_slice().unwrap();
                    let gamma = store.data(*gain).to_vec();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut din = Array4::<f64>::zeros((c, d, h, w));
                    din.as_slice_mut()
                        .unwrap()
                        .par_chunks_mut(n)
                        .zip(dgamma.par_iter_mut())
                        .zip(dbeta.par_iter_mut())
                        .enumerate()
                        .for_each(|(ch, ((din_slab, dgamma_ch), dbeta_ch))| {
                            let xs = &x[ch * n..(ch + 1) * n];
                            let gy = &gs[ch * n..(ch + 1) * n];
                            let mu = mean[ch];
                            let istd = inv_std[ch];
                            let mut sum_gy = 0.0;
                            let mut sum_gy_xhat = 0.0;
                            for (&gyi, &xi) in gy.iter().zip(xs) {
                                let xhat = (xi - mu) * istd;
                                sum_gy += gyi;
                                sum_gy_xhat += gyi * xhat;
                            }
                            *dbeta_ch = sum_gy;
                            *dgamma_ch = sum_gy_xhat;
                            let mean_gy = sum_gy / n as f64;
                            let mean_gy_xhat = sum_gy_xhat / n as f64;
                            let scale = gamma[ch] * istd;
                            for ((o, &gyi), &xi) in din_slab.iter_mut().zip(gy).zip(xs) {
                                let xhat = (xi - mu) * istd;
                                *o = scale * (gyi - mean_gy - xhat * mean_gy_xhat);
                            }
                        });
                    for (acc, d) in store.grad_mut(*gain).iter_mut().zip(&dgamma) {
                        *acc += d;
                    }
                    for (acc, d) in store.grad_mut(*bias).iter_mut().zip(&dbeta) {
                        *acc += d;
                    }
                    accum(&mut grads, *input, din);
                }
                Op::LeakyRelu { input, slope } => {
                    let x = self.value(*input);
                    let mut din = g;
                    ndarray::Zip::from(&mut din).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= slope;
                        }
                    });
                    accum(&mut grads, *input, din);
                }
                Op::Sigmoid { input } => {
                    let y = &self.nodes[idx].value;
                    let mut din = g;
                    ndarray::Zip::from(&mut din).and(y).for_each(|gv, &yv| {
                        *gv *= yv * (1.0 - yv);
                    });
                    accum(&mut grads, *input, din);
                }
                Op::Mul { a, b } => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accum(&mut grads, *a, da);
                    accum(&mut grads, *b, db);
                }
            }
        }
        Ok(())
    }
}
