//! Slice-level forward and backward kernels.
//!
//! Every reduction runs in a fixed order per sample, so a sample's result
//! does not depend on which other samples share its batch.

/// Shape of a valid (unpadded) 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn out_area(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unrolled receptive field.
    pub fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_area()
    }

    fn im2col(&self, input: &[f32], cols: &mut [f32]) {
        let (k, s, area, ow) = (self.kernel, self.stride, self.out_area(), self.out_w());
        let plane = self.in_h * self.in_w;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * area..(row + 1) * area];
                    for oy in 0..self.out_h() {
                        let src = c * plane + (oy * s + ky) * self.in_w + kx;
                        for ox in 0..ow {
                            dst[oy * ow + ox] = input[src + ox * s];
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dinput: &mut [f32]) {
        let (k, s, area, ow) = (self.kernel, self.stride, self.out_area(), self.out_w());
        let plane = self.in_h * self.in_w;
        for c in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * area..(row + 1) * area];
                    for oy in 0..self.out_h() {
                        let dst = c * plane + (oy * s + ky) * self.in_w + kx;
                        for ox in 0..ow {
                            dinput[dst + ox * s] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `weight` is `[out_channels, in_channels, k, k]`, `bias` is `[out_channels]`.
pub fn conv2d_forward(
    geo: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    batch: usize,
) -> Vec<f32> {
    let (patch, area) = (geo.patch(), geo.out_area());
    let mut out = vec![0.0f32; batch * geo.out_len()];
    let mut cols = vec![0.0f32; patch * area];
    for (x, y) in input
        .chunks_exact(geo.in_len())
        .zip(out.chunks_exact_mut(geo.out_len()))
    {
        geo.im2col(x, &mut cols);
        for (o, y_o) in y.chunks_exact_mut(area).enumerate() {
            y_o.fill(bias[o]);
        }
        // Four output channels per sweep over the columns; each output still
        // accumulates in patch order, so results match the one-channel loop.
        let mut o = 0;
        while o + 4 <= geo.out_channels {
            let (y0, rest) = y[o * area..(o + 4) * area].split_at_mut(area);
            let (y1, rest) = rest.split_at_mut(area);
            let (y2, y3) = rest.split_at_mut(area);
            for kk in 0..patch {
                let w = [
                    weight[o * patch + kk],
                    weight[(o + 1) * patch + kk],
                    weight[(o + 2) * patch + kk],
                    weight[(o + 3) * patch + kk],
                ];
                let col = &cols[kk * area..(kk + 1) * area];
                let lanes = y0.iter_mut().zip(y1.iter_mut()).zip(y2.iter_mut().zip(y3.iter_mut()));
                for (((a0, a1), (a2, a3)), &v) in lanes.zip(col) {
                    *a0 += w[0] * v;
                    *a1 += w[1] * v;
                    *a2 += w[2] * v;
                    *a3 += w[3] * v;
                }
            }
            o += 4;
        }
        for o in o..geo.out_channels {
            let y_o = &mut y[o * area..(o + 1) * area];
            for (kk, &w) in weight[o * patch..(o + 1) * patch].iter().enumerate() {
                let col = &cols[kk * area..(kk + 1) * area];
                for (acc, &v) in y_o.iter_mut().zip(col) {
                    *acc += w * v;
                }
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn conv2d_backward(
    geo: &ConvGeometry,
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    batch: usize,
) -> ConvGrads {
    let (patch, area) = (geo.patch(), geo.out_area());
    let mut grads = ConvGrads {
        input: vec![0.0; batch * geo.in_len()],
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; geo.out_channels],
    };
    let mut cols = vec![0.0f32; patch * area];
    let mut dcols = vec![0.0f32; patch * area];
    for ((x, dy), dx) in input
        .chunks_exact(geo.in_len())
        .zip(dout.chunks_exact(geo.out_len()))
        .zip(grads.input.chunks_exact_mut(geo.in_len()))
    {
        geo.im2col(x, &mut cols);
        dcols.fill(0.0);
        for (o, dy_o) in dy.chunks_exact(area).enumerate() {
            grads.bias[o] += dy_o.iter().sum::<f32>();
            let w_o = &weight[o * patch..(o + 1) * patch];
            let dw_o = &mut grads.weight[o * patch..(o + 1) * patch];
            for kk in 0..patch {
                let col = &cols[kk * area..(kk + 1) * area];
                dw_o[kk] += dy_o.iter().zip(col).map(|(a, b)| a * b).sum::<f32>();
                let w = w_o[kk];
                for (acc, &g) in dcols[kk * area..(kk + 1) * area].iter_mut().zip(dy_o) {
                    *acc += w * g;
                }
            }
        }
        geo.col2im_add(&dcols, dx);
    }
    grads
}

/// Non-overlapping max pooling with window == stride; trailing rows and
/// columns that do not fill a window are dropped. Returns the output and, for
/// each output element, the flat input index that produced it (first maximum
/// wins).
pub fn max_pool_forward(
    input: &[f32],
    batch_channels: usize,
    h: usize,
    w: usize,
    window: usize,
) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(batch_channels * oh * ow);
    let mut argmax = Vec::with_capacity(batch_channels * oh * ow);
    for plane in 0..batch_channels {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * window * w + ox * window;
                let mut best = input[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * window + dy) * w + ox * window + dx;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(dout: &[f32], argmax: &[usize], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; input_len];
    for (&g, &idx) in dout.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

pub fn relu_forward(input: &[f32]) -> Vec<f32> {
    input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(input: &[f32], dout: &[f32]) -> Vec<f32> {
    input
        .iter()
        .zip(dout)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// `weight` is stored `[in_features, out_features]`.
pub fn linear_forward(
    input: &[f32],
    weight: &[f32],
    bias: &[f32],
    in_features: usize,
    out_features: usize,
) -> Vec<f32> {
    let batch = input.len() / in_features;
    let mut out = Vec::with_capacity(batch * out_features);
    for x in input.chunks_exact(in_features) {
        let start = out.len();
        out.extend_from_slice(bias);
        let y = &mut out[start..];
        for (i, &xi) in x.iter().enumerate() {
            let row = &weight[i * out_features..(i + 1) * out_features];
            for (acc, &w) in y.iter_mut().zip(row) {
                *acc += xi * w;
            }
        }
    }
    out
}

pub struct LinearGrads {
    pub input: Vec<f32>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

pub fn linear_backward(
    input: &[f32],
    weight: &[f32],
    dout: &[f32],
    in_features: usize,
    out_features: usize,
) -> LinearGrads {
    let mut grads = LinearGrads {
        input: vec![0.0; input.len()],
        weight: vec![0.0; weight.len()],
        bias: vec![0.0; out_features],
    };
    for ((x, dy), dx) in input
        .chunks_exact(in_features)
        .zip(dout.chunks_exact(out_features))
        .zip(grads.input.chunks_exact_mut(in_features))
    {
        for (b, &g) in grads.bias.iter_mut().zip(dy) {
            *b += g;
        }
        for (i, &xi) in x.iter().enumerate() {
            let row = &weight[i * out_features..(i + 1) * out_features];
            dx[i] = row.iter().zip(dy).map(|(w, g)| w * g).sum();
            let drow = &mut grads.weight[i * out_features..(i + 1) * out_features];
            for (acc, &g) in drow.iter_mut().zip(dy) {
                *acc += xi * g;
            }
        }
    }
    grads
}

/// Row-wise softmax over the last dimension.
pub fn softmax_forward(input: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(input.len());
    for row in input.chunks_exact(width) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let sum: f32 = out[start..].iter().sum();
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

pub fn softmax_backward(output: &[f32], dout: &[f32], width: usize) -> Vec<f32> {
    let mut dx = Vec::with_capacity(output.len());
    for (y, dy) in output.chunks_exact(width).zip(dout.chunks_exact(width)) {
        let dot: f32 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
        dx.extend(y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - dot)));
    }
    dx
}

/// Probability floor applied before taking logs in the weighted loss.
pub const PROB_EPSILON: f32 = 1e-7;

fn clamp_prob(p: f32) -> (f64, bool) {
    let lo = PROB_EPSILON;
    let hi = 1.0 - PROB_EPSILON;
    if p < lo {
        (lo as f64, true)
    } else if p > hi {
        (hi as f64, true)
    } else {
        (p as f64, false)
    }
}

/// Mean over the batch of `-w1*y*ln(p) - w0*(1-y)*ln(1-p)`, with `p` the
/// positive-class column of `probs` (`[n, 2]`).
pub fn weighted_ce_forward(probs: &[f32], targets: &[u8], w0: f32, w1: f32) -> f32 {
    let n = targets.len();
    let total: f64 = probs
        .chunks_exact(2)
        .zip(targets)
        .map(|(row, &y)| {
            let (p, _) = clamp_prob(row[1]);
            if y == 1 {
                -(w1 as f64) * p.ln()
            } else {
                -(w0 as f64) * (1.0 - p).ln()
            }
        })
        .sum();
    (total / n as f64) as f32
}

pub fn weighted_ce_backward(probs: &[f32], targets: &[u8], w0: f32, w1: f32, dloss: f32) -> Vec<f32> {
    let n = targets.len() as f64;
    let mut dprobs = vec![0.0f32; probs.len()];
    for ((row, &y), d) in probs
        .chunks_exact(2)
        .zip(targets)
        .zip(dprobs.chunks_exact_mut(2))
    {
        let (p, clamped) = clamp_prob(row[1]);
        if clamped {
            continue;
        }
        let g = if y == 1 {
            -(w1 as f64) / p
        } else {
            (w0 as f64) / (1.0 - p)
        };
        d[1] = (g / n * dloss as f64) as f32;
    }
    dprobs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let geo = ConvGeometry {
            in_channels: 1,
            in_h: 3,
            in_w: 3,
            out_channels: 1,
            kernel: 1,
            stride: 1,
        };
        let x: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let y = conv2d_forward(&geo, &x, &[1.0], &[0.5], 1);
        let want: Vec<f32> = x.iter().map(|v| v + 0.5).collect();
        assert_eq!(y, want);
    }

    #[test]
    fn conv_stride_two_output_size() {
        let geo = ConvGeometry {
            in_channels: 2,
            in_h: 7,
            in_w: 7,
            out_channels: 3,
            kernel: 3,
            stride: 2,
        };
        assert_eq!(geo.out_h(), 3);
        let y = conv2d_forward(&geo, &vec![1.0; 98], &vec![1.0; 54], &[0.0; 3], 1);
        assert_eq!(y.len(), 27);
        assert!(y.iter().all(|&v| v == 18.0));
    }

    #[test]
    fn max_pool_first_max_wins() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (y, idx) = max_pool_forward(&x, 1, 2, 2, 2);
        assert_eq!(y, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn max_pool_drops_ragged_edge() {
        let x: Vec<f32> = (0..25).map(|v| v as f32).collect();
        let (y, _) = max_pool_forward(&x, 1, 5, 5, 2);
        assert_eq!(y, vec![6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        // x = [1, 2], W = [[1, 0, -1], [2, 1, 0]] stored [in, out]
        let y = linear_forward(&[1.0, 2.0], &[1.0, 0.0, -1.0, 2.0, 1.0, 0.0], &[0.0, 1.0, 0.0], 2, 3);
        assert_eq!(y, vec![5.0, 3.0, -1.0]);
    }

    #[test]
    fn softmax_equal_logits_is_half() {
        assert_eq!(softmax_forward(&[3.0, 3.0], 2), vec![0.5, 0.5]);
    }

    #[test]
    fn clamped_probability_has_zero_gradient() {
        let d = weighted_ce_backward(&[1.0, 0.0], &[1], 0.1, 0.9, 1.0);
        assert_eq!(d, vec![0.0, 0.0]);
    }
}
