//! 3D encoder-decoder heatmap-regression network with hand-written backward passes.
//!
//! Each encoder level applies two 3x3x3 convolutions with ReLU and then 2x max-pooling;
//! the decoder mirrors it with 2x trilinear upsampling, skip concatenation and two
//! convolutions per level. A final 1x1x1 convolution maps to one channel per landmark.

pub mod adam;
pub mod checkpoint;
pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use ops::Feature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// One output channel per landmark.
    pub out_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    pub base_channels: usize,
    pub head_activation: HeadActivation,
    pub batch_norm: bool,
    /// Spatial shape of the inputs the network will see.
    pub input_shape: [usize; 3],
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            out_channels: 3,
            depth: 4,
            base_channels: 16,
            head_activation: HeadActivation::Identity,
            batch_norm: false,
            input_shape: [128, 128, 80],
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument("depth and base_channels must be >= 1".into()));
        }
        let block = 1usize << self.depth.min(63);
        if self.depth >= 63 || self.input_shape.iter().any(|&d| d == 0 || d % block != 0) {
            return Err(Error::InvalidGeometry(format!(
                "input shape {:?} is not divisible by 2^{} (depth {})",
                self.input_shape, self.depth, self.depth
            )));
        }
        Ok(())
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Clone, Debug)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    /// Offset into the running-statistics buffer (means, then variances).
    stats: usize,
}

#[derive(Clone, Debug)]
struct ConvSlots {
    cin: usize,
    cout: usize,
    weight: usize,
    bias: usize,
    bn: Option<BnSlots>,
}

impl ConvSlots {
    fn weight_len(&self, k3: usize) -> usize {
        self.cout * self.cin * k3
    }
}

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

/// The network: configuration, flat parameter vector and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    /// Encoder levels `0..depth` plus the bottleneck at index `depth`; two convs each.
    enc: Vec<[ConvSlots; 2]>,
    /// Decoder levels `0..depth`; two convs each.
    dec: Vec<[ConvSlots; 2]>,
    head: ConvSlots,
    params: Vec<f32>,
    running: Vec<f32>,
}

/// Per-convolution activations kept for the backward pass.
struct ConvTape {
    padded: Vec<Vec<f32>>,
    in_dims: [usize; 3],
    /// Normalized pre-activations and per-channel inverse std when batch norm is on.
    bn: Option<(Vec<Feature>, Vec<f32>)>,
    /// Post-ReLU outputs.
    out: Vec<Feature>,
}

/// Everything recorded during a forward pass that backward needs.
pub struct Tape {
    enc: Vec<[ConvTape; 2]>,
    dec: Vec<[ConvTape; 2]>,
    pool_args: Vec<Vec<Vec<u32>>>,
    pool_dims: Vec<[usize; 3]>,
    head_in: Vec<Feature>,
    head_out: Vec<Feature>,
    /// Batch means/variances per normalized conv (in layer order), for running-stat updates.
    batch_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Network {
    /// Builds the network and initializes parameters deterministically from `cfg.seed`.
    pub fn build(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut n_params = 0usize;
        let mut n_running = 0usize;
        let mut alloc = |cin: usize, cout: usize, k3: usize, bn: bool| {
            let weight = n_params;
            n_params += cout * cin * k3;
            let bias = n_params;
            n_params += cout;
            let bn = bn.then(|| {
                let gamma = n_params;
                n_params += cout;
                let beta = n_params;
                n_params += cout;
                let stats = n_running;
                n_running += 2 * cout;
                BnSlots { gamma, beta, stats }
            });
            ConvSlots { cin, cout, weight, bias, bn }
        };
        let mut enc = Vec::with_capacity(cfg.depth + 1);
        let mut cin = cfg.in_channels;
        for level in 0..=cfg.depth {
            let c = cfg.level_channels(level);
            enc.push([alloc(cin, c, 27, cfg.batch_norm), alloc(c, c, 27, cfg.batch_norm)]);
            cin = c;
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let c = cfg.level_channels(level);
            let up = cfg.level_channels(level + 1);
            dec.push([alloc(up + c, c, 27, cfg.batch_norm), alloc(c, c, 27, cfg.batch_norm)]);
        }
        let head = alloc(cfg.level_channels(0), cfg.out_channels, 1, false);

        let mut params = vec![0.0f32; n_params];
        let mut running = vec![0.0f32; n_running];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = |slots: &ConvSlots, k3: usize, gain: f64| {
            let std = (gain / (slots.cin * k3) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[slots.weight..slots.weight + slots.weight_len(k3)] {
                *p = normal.sample(&mut rng) as f32;
            }
            if let Some(bn) = &slots.bn {
                params[bn.gamma..bn.gamma + slots.cout].fill(1.0);
                running[bn.stats + slots.cout..bn.stats + 2 * slots.cout].fill(1.0);
            }
        };
        for pair in enc.iter().chain(dec.iter()) {
            for slots in pair {
                init(slots, 27, 2.0);
            }
        }
        init(&head, 1, 1.0);
        Ok(Self { cfg, enc, dec, head, params, running })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[f32] {
        &self.running
    }

    pub(crate) fn set_state(&mut self, params: Vec<f32>, running: Vec<f32>) -> Result<()> {
        if params.len() != self.params.len() || running.len() != self.running.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} params / {} stats", self.params.len(), self.running.len()),
                actual: format!("{} params / {} stats", params.len(), running.len()),
            });
        }
        self.params = params;
        self.running = running;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_inputs(&self, inputs: &[Feature]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let block = 1usize << self.cfg.depth;
        for x in inputs {
            if x.channels != self.cfg.in_channels || x.dims != inputs[0].dims {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} channel(s) of {:?}", self.cfg.in_channels, inputs[0].dims),
                    actual: format!("{} channel(s) of {:?}", x.channels, x.dims),
                });
            }
            if x.dims.iter().any(|&d| d == 0 || d % block != 0) {
                return Err(Error::InvalidGeometry(format!(
                    "input dims {:?} not divisible by 2^{}",
                    x.dims, self.cfg.depth
                )));
            }
        }
        Ok(())
    }

    fn conv_forward(
        &self,
        slots: &ConvSlots,
        inputs: Vec<Feature>,
        mode: Mode,
        stats: &mut Vec<(usize, Vec<f32>, Vec<f32>)>,
    ) -> ConvTape {
        let in_dims = inputs[0].dims;
        let w = &self.params[slots.weight..slots.weight + slots.weight_len(27)];
        let b = &self.params[slots.bias..slots.bias + slots.cout];
        let padded: Vec<Vec<f32>> = inputs.iter().map(ops::pad1).collect();
        drop(inputs);
        let use_bias = slots.bn.is_none();
        let mut pre: Vec<Feature> = padded
            .iter()
            .map(|p| {
                Feature::from_vec(
                    slots.cout,
                    in_dims,
                    ops::conv3(p, slots.cin, in_dims, w, use_bias.then_some(b), slots.cout),
                )
            })
            .collect();
        let bn = slots.bn.as_ref().map(|bn| {
            let c = slots.cout;
            let n = pre[0].voxels();
            let count = (n * pre.len()) as f64;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut mean = vec![0.0f32; c];
                    let mut var = vec![0.0f32; c];
                    for ch in 0..c {
                        let m: f64 = pre.iter().flat_map(|f| f.channel(ch)).map(|&v| v as f64).sum::<f64>() / count;
                        let v: f64 = pre
                            .iter()
                            .flat_map(|f| f.channel(ch))
                            .map(|&v| (v as f64 - m).powi(2))
                            .sum::<f64>()
                            / count;
                        mean[ch] = m as f32;
                        var[ch] = v as f32;
                    }
                    stats.push((bn.stats, mean.clone(), var.clone()));
                    (mean, var)
                }
                Mode::Eval => (
                    self.running[bn.stats..bn.stats + c].to_vec(),
                    self.running[bn.stats + c..bn.stats + 2 * c].to_vec(),
                ),
            };
            let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let gamma = &self.params[bn.gamma..bn.gamma + c];
            let beta = &self.params[bn.beta..bn.beta + c];
            let mut xhat = Vec::with_capacity(pre.len());
            for f in pre.iter_mut() {
                let mut h = Feature::zeros(c, in_dims);
                for ch in 0..c {
                    let src = &mut f.data[ch * n..(ch + 1) * n];
                    let dst = &mut h.data[ch * n..(ch + 1) * n];
                    for (s, d) in src.iter_mut().zip(dst.iter_mut()) {
                        *d = (*s - mean[ch]) * inv_std[ch];
                        *s = gamma[ch] * *d + beta[ch];
                    }
                }
                xhat.push(h);
            }
            (xhat, inv_std)
        });
        for f in pre.iter_mut() {
            for v in f.data.iter_mut() {
                *v = v.max(0.0);
            }
        }
        ConvTape { padded, in_dims, bn, out: pre }
    }

    /// Backpropagates through one conv block; returns input gradients when `need_input`.
    fn conv_backward(
        &self,
        slots: &ConvSlots,
        tape: &ConvTape,
        mut grads_out: Vec<Feature>,
        grad: &mut [f32],
        need_input: bool,
    ) -> Vec<Feature> {
        for (g, y) in grads_out.iter_mut().zip(&tape.out) {
            for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        if let (Some(bn), Some((xhat, inv_std))) = (&slots.bn, &tape.bn) {
            let c = slots.cout;
            let n = xhat[0].voxels();
            let count = (n * xhat.len()) as f64;
            for ch in 0..c {
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for (g, xh) in grads_out.iter().zip(xhat) {
                    for (gv, xv) in g.channel(ch).iter().zip(xh.channel(ch)) {
                        sum_g += *gv as f64;
                        sum_gx += (*gv as f64) * (*xv as f64);
                    }
                }
                grad[bn.beta + ch] += sum_g as f32;
                grad[bn.gamma + ch] += sum_gx as f32;
                let gamma = self.params[bn.gamma + ch];
                let scale = gamma * inv_std[ch];
                let mean_g = (sum_g / count) as f32;
                let mean_gx = (sum_gx / count) as f32;
                for (g, xh) in grads_out.iter_mut().zip(xhat) {
                    let gs = &mut g.data[ch * n..(ch + 1) * n];
                    for (gv, xv) in gs.iter_mut().zip(xh.channel(ch)) {
                        *gv = scale * (*gv - mean_g - xv * mean_gx);
                    }
                }
            }
        }
        let wl = slots.weight_len(27);
        let use_bias = slots.bn.is_none();
        let mut grad_w = vec![0.0f32; wl];
        let mut grad_b = vec![0.0f32; slots.cout];
        for (p, g) in tape.padded.iter().zip(&grads_out) {
            ops::conv3_param_grad(p, slots.cin, g, &mut grad_w, use_bias.then_some(&mut grad_b[..]));
        }
        for (d, s) in grad[slots.weight..slots.weight + wl].iter_mut().zip(&grad_w) {
            *d += s;
        }
        if use_bias {
            for (d, s) in grad[slots.bias..slots.bias + slots.cout].iter_mut().zip(&grad_b) {
                *d += s;
            }
        }
        if !need_input {
            return Vec::new();
        }
        let w = &self.params[slots.weight..slots.weight + wl];
        grads_out
            .iter()
            .map(|g| Feature::from_vec(slots.cin, tape.in_dims, ops::conv3_input_grad(g, w, slots.cin)))
            .collect()
    }

    /// Runs the batch forward, returning per-sample outputs `(N_l, D1, D2, D3)` and the tape.
    pub fn forward(&self, inputs: &[Feature], mode: Mode) -> Result<(Vec<Feature>, Tape)> {
        self.check_inputs(inputs)?;
        let depth = self.cfg.depth;
        let mut stats = Vec::new();
        let mut enc_tapes: Vec<[ConvTape; 2]> = Vec::with_capacity(depth + 1);
        let mut pool_args = Vec::with_capacity(depth);
        let mut pool_dims = Vec::with_capacity(depth);
        let mut x: Vec<Feature> = inputs.to_vec();
        for level in 0..=depth {
            let [a, b] = &self.enc[level];
            let ta = self.conv_forward(a, x, mode, &mut stats);
            let tb = self.conv_forward(b, ta.out.clone(), mode, &mut stats);
            if level < depth {
                let mut pooled = Vec::with_capacity(tb.out.len());
                let mut args = Vec::with_capacity(tb.out.len());
                for f in &tb.out {
                    let (p, arg) = ops::max_pool2(f);
                    pooled.push(p);
                    args.push(arg);
                }
                pool_dims.push(tb.out[0].dims);
                pool_args.push(args);
                x = pooled;
            } else {
                x = Vec::new();
            }
            enc_tapes.push([ta, tb]);
        }
        let mut y: Vec<Feature> = enc_tapes[depth][1].out.clone();
        let mut dec_tapes: Vec<Option<[ConvTape; 2]>> = (0..depth).map(|_| None).collect();
        for level in (0..depth).rev() {
            let skip = &enc_tapes[level][1].out;
            let cat: Vec<Feature> = y
                .iter()
                .zip(skip)
                .map(|(low, s)| {
                    let up = ops::upsample2(low);
                    let mut data = up.data;
                    data.extend_from_slice(&s.data);
                    Feature::from_vec(up.channels + s.channels, s.dims, data)
                })
                .collect();
            let [a, b] = &self.dec[level];
            let ta = self.conv_forward(a, cat, mode, &mut stats);
            let tb = self.conv_forward(b, ta.out.clone(), mode, &mut stats);
            y = tb.out.clone();
            dec_tapes[level] = Some([ta, tb]);
        }
        let hw = &self.params[self.head.weight..self.head.weight + self.head.weight_len(1)];
        let hb = &self.params[self.head.bias..self.head.bias + self.head.cout];
        let mut outputs: Vec<Feature> = y.iter().map(|f| ops::conv1(f, hw, hb, self.head.cout)).collect();
        if self.cfg.head_activation == HeadActivation::Sigmoid {
            for f in outputs.iter_mut() {
                for v in f.data.iter_mut() {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
        }
        let tape = Tape {
            enc: enc_tapes,
            dec: dec_tapes.into_iter().map(|t| t.expect("decoder level visited")).collect(),
            pool_args,
            pool_dims,
            head_in: y,
            head_out: outputs.clone(),
            batch_stats: stats,
        };
        Ok((outputs, tape))
    }

    /// Backpropagates per-sample output gradients; returns the flat parameter gradient.
    pub fn backward(&self, tape: &Tape, grad_outputs: &[Feature]) -> Result<Vec<f32>> {
        if grad_outputs.len() != tape.head_out.len()
            || grad_outputs.iter().zip(&tape.head_out).any(|(g, y)| g.channels != y.channels || g.dims != y.dims)
        {
            return Err(Error::ShapeMismatch {
                expected: format!("{} outputs shaped like the forward pass", tape.head_out.len()),
                actual: format!("{} gradients", grad_outputs.len()),
            });
        }
        let depth = self.cfg.depth;
        let mut grad = vec![0.0f32; self.params.len()];
        let mut g_out: Vec<Feature> = grad_outputs.to_vec();
        if self.cfg.head_activation == HeadActivation::Sigmoid {
            for (g, y) in g_out.iter_mut().zip(&tape.head_out) {
                for (gv, yv) in g.data.iter_mut().zip(&y.data) {
                    *gv *= yv * (1.0 - yv);
                }
            }
        }
        let hw = &self.params[self.head.weight..self.head.weight + self.head.weight_len(1)];
        let (gw, rest) = grad[self.head.weight..].split_at_mut(self.head.weight_len(1));
        let gb = &mut rest[..self.head.cout];
        let mut gy: Vec<Feature> = tape
            .head_in
            .iter()
            .zip(&g_out)
            .map(|(x, g)| ops::conv1_backward(x, hw, g, gw, gb))
            .collect();

        let mut skip_grads: Vec<Vec<Feature>> = Vec::with_capacity(depth);
        for level in 0..depth {
            let [a, b] = &self.dec[level];
            let [ta, tb] = &tape.dec[level];
            let gh = self.conv_backward(b, tb, gy, &mut grad, true);
            let gcat = self.conv_backward(a, ta, gh, &mut grad, true);
            let up_c = self.cfg.level_channels(level + 1);
            let mut skips = Vec::with_capacity(gcat.len());
            gy = gcat
                .into_iter()
                .map(|g| {
                    let n = g.voxels();
                    let mut data = g.data;
                    let skip = data.split_off(up_c * n);
                    skips.push(Feature::from_vec(g.channels - up_c, g.dims, skip));
                    ops::upsample2_backward(&Feature::from_vec(up_c, g.dims, data))
                })
                .collect();
            skip_grads.push(skips);
        }

        let mut g = gy;
        for level in (0..=depth).rev() {
            if level < depth {
                let skips = &skip_grads[level];
                let args = &tape.pool_args[level];
                g = g
                    .iter()
                    .zip(args)
                    .zip(skips)
                    .map(|((gp, arg), s)| {
                        let mut up = ops::max_pool2_backward(gp, arg, tape.pool_dims[level]);
                        for (u, sv) in up.data.iter_mut().zip(&s.data) {
                            *u += sv;
                        }
                        up
                    })
                    .collect();
            }
            let [a, b] = &self.enc[level];
            let [ta, tb] = &tape.enc[level];
            let gh = self.conv_backward(b, tb, g, &mut grad, true);
            g = self.conv_backward(a, ta, gh, &mut grad, level > 0);
        }
        Ok(grad)
    }

    /// Folds the batch statistics recorded in a training-mode tape into the running averages.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        for (offset, mean, var) in &tape.batch_stats {
            let c = mean.len();
            for ch in 0..c {
                let rm = &mut self.running[offset + ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut self.running[offset + c + ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch];
            }
        }
    }

    /// Inference on a batch of inputs.
    pub fn predict(&self, inputs: &[Feature]) -> Result<Vec<Feature>> {
        Ok(self.forward(inputs, Mode::Eval)?.0)
    }
}
