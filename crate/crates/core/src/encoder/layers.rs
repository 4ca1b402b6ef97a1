//! Dense and 3-D convolution layers with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `[out_dim × in_dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Valid (unpadded) 3-D convolution over `[channels × time × height × width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// `[out × in × kt × kh × kw]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: (0..out_channels * fan_in).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    /// Output `[time, height, width]` for an input of `dims`, or `None` when
    /// the kernel does not fit.
    pub fn output_dims(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            if dims[i] < self.kernel[i] {
                return None;
            }
            out[i] = (dims[i] - self.kernel[i]) / self.stride[i] + 1;
        }
        Some(out)
    }

    pub fn forward(&self, x: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
        let [t, h, w] = dims;
        let [ot, oh, ow] = self.output_dims(dims).expect("kernel fits input");
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        debug_assert_eq!(x.len(), self.in_channels * t * h * w);
        let out_plane = ot * oh * ow;
        let mut y = vec![0.0; self.out_channels * out_plane];
        for co in 0..self.out_channels {
            let yc = &mut y[co * out_plane..(co + 1) * out_plane];
            yc.fill(self.bias[co]);
            for ci in 0..self.in_channels {
                let xc = &x[ci * t * h * w..(ci + 1) * t * h * w];
                for dt in 0..kt {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let wv = self.weight[(((co * self.in_channels + ci) * kt + dt) * kh + dy) * kw + dx];
                            for a in 0..ot {
                                let xt = (a * st + dt) * h * w;
                                for b in 0..oh {
                                    let xrow = xt + (b * sh + dy) * w + dx;
                                    let yrow = (a * oh + b) * ow;
                                    for c in 0..ow {
                                        yc[yrow + c] += wv * xc[xrow + c * sw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        (y, [ot, oh, ow])
    }

    /// Accumulates parameter gradients; returns dL/dx when `need_input_grad`.
    pub fn backward(
        &self,
        x: &[f64],
        dims: [usize; 3],
        dy: &[f64],
        grad: &mut Conv3d,
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let [t, h, w] = dims;
        let [ot, oh, ow] = self.output_dims(dims).expect("kernel fits input");
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let out_plane = ot * oh * ow;
        let in_plane = t * h * w;
        let mut dx_buf = need_input_grad.then(|| vec![0.0; x.len()]);
        for co in 0..self.out_channels {
            let dyc = &dy[co * out_plane..(co + 1) * out_plane];
            grad.bias[co] += dyc.iter().sum::<f64>();
            for ci in 0..self.in_channels {
                let xc = &x[ci * in_plane..(ci + 1) * in_plane];
                for dt in 0..kt {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = (((co * self.in_channels + ci) * kt + dt) * kh + ky) * kw + kx;
                            let wv = self.weight[widx];
                            let mut gw = 0.0;
                            for a in 0..ot {
                                let xt = (a * st + dt) * h * w;
                                for b in 0..oh {
                                    let xrow = xt + (b * sh + ky) * w + kx;
                                    let yrow = (a * oh + b) * ow;
                                    for c in 0..ow {
                                        gw += dyc[yrow + c] * xc[xrow + c * sw];
                                    }
                                }
                            }
                            grad.weight[widx] += gw;
                            if let Some(dx) = dx_buf.as_mut() {
                                let dxc = &mut dx[ci * in_plane..(ci + 1) * in_plane];
                                for a in 0..ot {
                                    let xt = (a * st + dt) * h * w;
                                    for b in 0..oh {
                                        let xrow = xt + (b * sh + ky) * w + kx;
                                        let yrow = (a * oh + b) * ow;
                                        for c in 0..ow {
                                            dxc[xrow + c * sw] += wv * dyc[yrow + c];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx_buf
    }
}

pub fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Mean over each channel's spatio-temporal extent.
pub fn global_avg_pool(x: &[f64], channels: usize) -> Vec<f64> {
    let plane = x.len() / channels;
    x.chunks_exact(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn global_avg_pool_backward(dy: &[f64], plane: usize) -> Vec<f64> {
    let mut dx = Vec::with_capacity(dy.len() * plane);
    for &g in dy {
        dx.extend(std::iter::repeat_n(g / plane as f64, plane));
    }
    dx
}
