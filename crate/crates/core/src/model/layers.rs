//! Convolution and 1x1 projection layers with explicit backward passes.
//!
//! All per-sample buffers are channel-major: `[channels, h * w]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gemm::{gemm, Trans};

/// 3x3 convolution, padding 1, configurable stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// `[out_c, in_c * 9]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_c: usize, out_c: usize, stride: usize) -> Self {
        Conv3x3 {
            in_c,
            out_c,
            stride,
            weight: vec![0.0; out_c * in_c * 9],
            bias: vec![0.0; out_c],
        }
    }

    /// He-normal weights, zero bias.
    pub fn init<R: Rng>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_c, out_c, stride);
        let std = (2.0 / (in_c * 9) as f64).sqrt();
        for w in &mut l.weight {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        l
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Unfolds `x` (`[in_c, h, w]`) into `[in_c * 9, oh * ow]`.
    pub fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let s = self.stride;
        let mut cols = vec![0.0; self.in_c * 9 * oh * ow];
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * oh * ow;
                    let dst = &mut cols[row..row + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds `[in_c * 9, oh * ow]` columns back onto `[in_c, h, w]`.
    pub fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let s = self.stride;
        let mut x = vec![0.0; self.in_c * h * w];
        for c in 0..self.in_c {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * oh * ow;
                    let src = &cols[row..row + oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns `(output [out_c, oh*ow], unfolded input)`.
    pub fn forward(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let (oh, ow) = self.out_hw(h, w);
        let n = oh * ow;
        let cols = self.im2col(x, h, w);
        let mut y = vec![0.0; self.out_c * n];
        for (o, chunk) in y.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[o]);
        }
        gemm(
            self.out_c,
            self.in_c * 9,
            n,
            1.0,
            &self.weight,
            Trans::No,
            &cols,
            Trans::No,
            1.0,
            &mut y,
        );
        (y, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        cols: &[f64],
        dy: &[f64],
        h: usize,
        w: usize,
        grad: &mut Conv3x3,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.out_hw(h, w);
        let n = oh * ow;
        let k = self.in_c * 9;
        gemm(self.out_c, n, k, 1.0, dy, Trans::No, cols, Trans::Yes, 1.0, &mut grad.weight);
        for (o, chunk) in dy.chunks(n).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0; k * n];
        gemm(k, self.out_c, n, 1.0, &self.weight, Trans::Yes, dy, Trans::No, 0.0, &mut dcols);
        Some(self.col2im(&dcols, h, w))
    }
}

/// Per-pixel linear projection (1x1 convolution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear1x1 {
    pub in_c: usize,
    pub out_c: usize,
    /// `[out_c, in_c]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear1x1 {
    pub fn zeros(in_c: usize, out_c: usize) -> Self {
        Linear1x1 {
            in_c,
            out_c,
            weight: vec![0.0; out_c * in_c],
            bias: vec![0.0; out_c],
        }
    }

    pub fn init<R: Rng>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(in_c, out_c);
        let std = (1.0 / in_c as f64).sqrt();
        for w in &mut l.weight {
            *w = std * rng.sample::<f64, _>(StandardNormal);
        }
        l
    }

    /// `[in_c, n] -> [out_c, n]`
    pub fn forward(&self, f: &[f64], n: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.out_c * n];
        for (o, chunk) in z.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias[o]);
        }
        gemm(self.out_c, self.in_c, n, 1.0, &self.weight, Trans::No, f, Trans::No, 1.0, &mut z);
        z
    }

    pub fn backward(&self, f: &[f64], dz: &[f64], n: usize, grad: &mut Linear1x1) -> Vec<f64> {
        gemm(self.out_c, n, self.in_c, 1.0, dz, Trans::No, f, Trans::Yes, 1.0, &mut grad.weight);
        for (o, chunk) in dz.chunks(n).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f64>();
        }
        let mut df = vec![0.0; self.in_c * n];
        gemm(self.in_c, self.out_c, n, 1.0, &self.weight, Trans::Yes, dz, Trans::No, 0.0, &mut df);
        df
    }
}
