//! Dense single-sample kernels for the 3D U-Net: channel-major feature maps,
//! 3x3x3 "same" convolution with its two gradients, 1x1x1 convolution,
//! 2x max-pooling and 2x trilinear upsampling.
//!
//! All reductions run in a fixed order so results are bitwise reproducible.

/// A channel-major feature map `[channels][d][h][w]` for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Feature {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Self { channels, dims, data }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Copies `x` into a buffer with a one-voxel zero border on every spatial face.
pub fn pad1(x: &Feature) -> Vec<f32> {
    let [d, h, w] = x.dims;
    let (pd, ph, pw) = (d + 2, h + 2, w + 2);
    let mut out = vec![0.0f32; x.channels * pd * ph * pw];
    for c in 0..x.channels {
        for z in 0..d {
            for y in 0..h {
                let src = ((c * d + z) * h + y) * w;
                let dst = ((c * pd + z + 1) * ph + y + 1) * pw + 1;
                out[dst..dst + w].copy_from_slice(&x.data[src..src + w]);
            }
        }
    }
    out
}

#[inline(always)]
fn conv_chunk<const OB: usize, const CW: usize>(
    padded: &[f32],
    cin: usize,
    dims: [usize; 3],
    weight: &[f32],
    ob: usize,
    z: usize,
    y: usize,
    x0: usize,
    acc: &mut [[f32; CW]; OB],
) {
    let [d, h, w] = dims;
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let pvol = (d + 2) * pplane;
    for i in 0..cin {
        for dz in 0..3 {
            for dy in 0..3 {
                let start = i * pvol + (z + dz) * pplane + (y + dy) * pw + x0;
                let row = &padded[start..start + CW + 2];
                for (o, acc_o) in acc.iter_mut().enumerate() {
                    let k = ((ob + o) * cin + i) * 27 + dz * 9 + dy * 3;
                    let (w0, w1, w2) = (weight[k], weight[k + 1], weight[k + 2]);
                    for j in 0..CW {
                        let a = w0.mul_add(row[j], acc_o[j]);
                        let a = w1.mul_add(row[j + 1], a);
                        acc_o[j] = w2.mul_add(row[j + 2], a);
                    }
                }
            }
        }
    }
}

fn conv_block<const OB: usize>(
    padded: &[f32],
    cin: usize,
    dims: [usize; 3],
    weight: &[f32],
    bias: Option<&[f32]>,
    ob: usize,
    out: &mut [f32],
) {
    let [d, h, w] = dims;
    let vol = d * h * w;

    macro_rules! run {
        ($cw:expr, $z:expr, $y:expr, $x0:expr) => {{
            let mut acc = [[0.0f32; $cw]; OB];
            if let Some(b) = bias {
                for o in 0..OB {
                    acc[o] = [b[ob + o]; $cw];
                }
            }
            conv_chunk::<OB, $cw>(padded, cin, dims, weight, ob, $z, $y, $x0, &mut acc);
            for o in 0..OB {
                let dst = (ob + o) * vol + ($z * h + $y) * w + $x0;
                out[dst..dst + $cw].copy_from_slice(&acc[o]);
            }
        }};
    }

    for z in 0..d {
        for y in 0..h {
            let mut x0 = 0;
            while x0 + 16 <= w {
                run!(16, z, y, x0);
                x0 += 16;
            }
            while x0 + 8 <= w {
                run!(8, z, y, x0);
                x0 += 8;
            }
            while x0 < w {
                run!(1, z, y, x0);
                x0 += 1;
            }
        }
    }
}

/// 3x3x3 convolution with zero "same" padding.
///
/// `padded` is the output of [`pad1`] for a `cin`-channel map of spatial size `dims`;
/// `weight` is laid out `[cout][cin][3][3][3]`.
pub fn conv3(
    padded: &[f32],
    cin: usize,
    dims: [usize; 3],
    weight: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
) -> Vec<f32> {
    debug_assert_eq!(weight.len(), cout * cin * 27);
    let mut out = vec![0.0f32; cout * dims[0] * dims[1] * dims[2]];
    let mut ob = 0;
    while ob + 4 <= cout {
        conv_block::<4>(padded, cin, dims, weight, bias, ob, &mut out);
        ob += 4;
    }
    while ob < cout {
        conv_block::<1>(padded, cin, dims, weight, bias, ob, &mut out);
        ob += 1;
    }
    out
}

/// Gradient of [`conv3`] with respect to its (unpadded) input.
///
/// This is the convolution of the padded output gradient with the spatially
/// flipped, channel-transposed kernel.
pub fn conv3_input_grad(
    grad_out: &Feature,
    weight: &[f32],
    cin: usize,
) -> Vec<f32> {
    let cout = grad_out.channels;
    let mut flipped = vec![0.0f32; weight.len()];
    for o in 0..cout {
        for i in 0..cin {
            for k in 0..27 {
                flipped[(i * cout + o) * 27 + (26 - k)] = weight[(o * cin + i) * 27 + k];
            }
        }
    }
    let padded = pad1(grad_out);
    conv3(&padded, cout, grad_out.dims, &flipped, None, cin)
}

#[inline(always)]
fn dot_fixed<const N: usize>(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; N];
    let chunks = a.len() / N;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * N..c * N + N], &b[c * N..c * N + N]);
        for j in 0..N {
            lanes[j] = ac[j].mul_add(bc[j], lanes[j]);
        }
    }
    let mut s = 0.0f32;
    for j in chunks * N..a.len() {
        s = a[j].mul_add(b[j], s);
    }
    lanes.iter().sum::<f32>() + s
}

/// Accumulates the weight and bias gradients of [`conv3`] into `grad_w` / `grad_b`.
pub fn conv3_param_grad(
    padded_in: &[f32],
    cin: usize,
    grad_out: &Feature,
    grad_w: &mut [f32],
    grad_b: Option<&mut [f32]>,
) {
    let [d, h, w] = grad_out.dims;
    let cout = grad_out.channels;
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let pvol = (d + 2) * pplane;
    let vol = d * h * w;
    // One lane per output column and kernel tap; summed once at the end.
    let mut lanes = vec![0.0f32; 27 * w];
    for o in 0..cout {
        let g = &grad_out.data[o * vol..(o + 1) * vol];
        for i in 0..cin {
            lanes.fill(0.0);
            for z in 0..d {
                for y in 0..h {
                    let g_row = &g[(z * h + y) * w..(z * h + y + 1) * w];
                    for dz in 0..3 {
                        for dy in 0..3 {
                            let start = i * pvol + (z + dz) * pplane + (y + dy) * pw;
                            let p_row = &padded_in[start..start + pw];
                            for dx in 0..3 {
                                let k = dz * 9 + dy * 3 + dx;
                                let acc = &mut lanes[k * w..(k + 1) * w];
                                for ((a, gv), pv) in acc.iter_mut().zip(g_row).zip(&p_row[dx..dx + w]) {
                                    *a = gv.mul_add(*pv, *a);
                                }
                            }
                        }
                    }
                }
            }
            let base = (o * cin + i) * 27;
            for k in 0..27 {
                grad_w[base + k] += lanes[k * w..(k + 1) * w].iter().sum::<f32>();
            }
        }
    }
    if let Some(gb) = grad_b {
        for o in 0..cout {
            gb[o] += grad_out.data[o * vol..(o + 1) * vol].iter().sum::<f32>();
        }
    }
}

/// Pointwise (1x1x1) convolution; `weight` is `[cout][cin]`.
pub fn conv1(x: &Feature, weight: &[f32], bias: &[f32], cout: usize) -> Feature {
    let n = x.voxels();
    let mut out = Feature::zeros(cout, x.dims);
    for o in 0..cout {
        let dst = &mut out.data[o * n..(o + 1) * n];
        dst.fill(bias[o]);
        for i in 0..x.channels {
            let wv = weight[o * x.channels + i];
            for (d, s) in dst.iter_mut().zip(x.channel(i)) {
                *d = wv.mul_add(*s, *d);
            }
        }
    }
    out
}

/// Gradients of [`conv1`]; returns the input gradient and accumulates parameter gradients.
pub fn conv1_backward(
    x: &Feature,
    weight: &[f32],
    grad_out: &Feature,
    grad_w: &mut [f32],
    grad_b: &mut [f32],
) -> Feature {
    let n = x.voxels();
    let cin = x.channels;
    let mut grad_in = Feature::zeros(cin, x.dims);
    for o in 0..grad_out.channels {
        let g = grad_out.channel(o);
        grad_b[o] += g.iter().sum::<f32>();
        for i in 0..cin {
            grad_w[o * cin + i] += dot_fixed::<16>(g, x.channel(i));
            let wv = weight[o * cin + i];
            for (d, s) in grad_in.data[i * n..(i + 1) * n].iter_mut().zip(g) {
                *d = wv.mul_add(*s, *d);
            }
        }
    }
    grad_in
}

/// 2x2x2 max-pooling; also returns the flat input index chosen for every output voxel.
pub fn max_pool2(x: &Feature) -> (Feature, Vec<u32>) {
    let [d, h, w] = x.dims;
    let od = [d / 2, h / 2, w / 2];
    let mut out = Feature::zeros(x.channels, od);
    let mut arg = vec![0u32; out.data.len()];
    let mut k = 0;
    for c in 0..x.channels {
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((c * d + 2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if x.data[idx] > best {
                                    best = x.data[idx];
                                    best_i = idx;
                                }
                            }
                        }
                    }
                    out.data[k] = best;
                    arg[k] = best_i as u32;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(grad_out: &Feature, arg: &[u32], in_dims: [usize; 3]) -> Feature {
    let mut g = Feature::zeros(grad_out.channels, in_dims);
    for (v, &i) in grad_out.data.iter().zip(arg) {
        g.data[i as usize] += *v;
    }
    g
}

/// Source taps and weights for 2x half-pixel linear upsampling of one axis of length `n`.
#[inline]
fn up_taps(t: usize, n: usize) -> (usize, usize, f32, f32) {
    let k = t / 2;
    if t % 2 == 0 {
        if k == 0 {
            (0, 0, 1.0, 0.0)
        } else {
            (k - 1, k, 0.25, 0.75)
        }
    } else if k + 1 >= n {
        (n - 1, n - 1, 1.0, 0.0)
    } else {
        (k, k + 1, 0.75, 0.25)
    }
}

/// Splits a channel-major array into `(outer, n, inner)` around `axis` (0..3 spatial).
fn axis_layout(channels: usize, dims: [usize; 3], axis: usize) -> (usize, usize, usize) {
    let outer = channels * dims[..axis].iter().product::<usize>();
    let inner = dims[axis + 1..].iter().product::<usize>();
    (outer, dims[axis], inner)
}

fn upsample_axis(data: &[f32], channels: usize, dims: [usize; 3], axis: usize) -> Vec<f32> {
    let (outer, n, inner) = axis_layout(channels, dims, axis);
    let mut out = vec![0.0f32; outer * 2 * n * inner];
    for o in 0..outer {
        for t in 0..2 * n {
            let (a, b, wa, wb) = up_taps(t, n);
            let dst = (o * 2 * n + t) * inner;
            let sa = (o * n + a) * inner;
            let sb = (o * n + b) * inner;
            for j in 0..inner {
                out[dst + j] = wa * data[sa + j] + wb * data[sb + j];
            }
        }
    }
    out
}

fn upsample_axis_transpose(grad: &[f32], channels: usize, in_dims: [usize; 3], axis: usize) -> Vec<f32> {
    let (outer, n, inner) = axis_layout(channels, in_dims, axis);
    let mut out = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        for t in 0..2 * n {
            let (a, b, wa, wb) = up_taps(t, n);
            let src = (o * 2 * n + t) * inner;
            let da = (o * n + a) * inner;
            let db = (o * n + b) * inner;
            for j in 0..inner {
                out[da + j] += wa * grad[src + j];
            }
            if wb != 0.0 {
                for j in 0..inner {
                    out[db + j] += wb * grad[src + j];
                }
            }
        }
    }
    out
}

/// 2x trilinear upsampling (half-pixel centers, edge-clamped).
pub fn upsample2(x: &Feature) -> Feature {
    let mut dims = x.dims;
    let mut data = x.data.clone();
    for axis in 0..3 {
        data = upsample_axis(&data, x.channels, dims, axis);
        dims[axis] *= 2;
    }
    Feature::from_vec(x.channels, dims, data)
}

pub fn upsample2_backward(grad_out: &Feature) -> Feature {
    let mut dims = grad_out.dims;
    let mut data = grad_out.data.clone();
    for axis in (0..3).rev() {
        dims[axis] /= 2;
        data = upsample_axis_transpose(&data, grad_out.channels, dims, axis);
    }
    Feature::from_vec(grad_out.channels, dims, data)
}
