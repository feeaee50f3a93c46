//! Bilinear resampling with the half-pixel (`align_corners = false`)
//! convention: output coordinate `o` samples source coordinate
//! `(o + 0.5) * src / dst - 0.5`, clamped at zero, and the upper neighbour
//! is clamped to the last source index.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Per-axis sampling table.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisMap {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

impl AxisMap {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut frac = Vec::with_capacity(dst);
        for o in 0..dst {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(s - i0 as f64);
        }
        AxisMap { lo, hi, frac }
    }
}

/// Precomputed resampler from `src` to `dst` spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Upsampler {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisMap,
    cols: AxisMap,
}

impl Upsampler {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if dst.0 < src.0 || dst.1 < src.1 {
            return Err(Error::InvalidArgument(format!(
                "upsample target {dst:?} smaller than source {src:?}"
            )));
        }
        if src.0 == 0 || src.1 == 0 {
            return Err(Error::InvalidArgument("empty source grid".into()));
        }
        Ok(Upsampler {
            src,
            dst,
            rows: AxisMap::new(src.0, dst.0),
            cols: AxisMap::new(src.1, dst.1),
        })
    }

    pub fn src(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    /// Resamples `channels` stacked planes.
    pub fn forward(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        debug_assert_eq!(input.len(), channels * sh * sw);
        if self.src == self.dst {
            return input.to_vec();
        }
        let mut out = vec![0.0; channels * dh * dw];
        let mut tmp = vec![0.0; sh * dw];
        for c in 0..channels {
            let plane = &input[c * sh * sw..(c + 1) * sh * sw];
            for y in 0..sh {
                let row = &plane[y * sw..(y + 1) * sw];
                let trow = &mut tmp[y * dw..(y + 1) * dw];
                for x in 0..dw {
                    let f = self.cols.frac[x];
                    trow[x] = row[self.cols.lo[x]] * (1.0 - f) + row[self.cols.hi[x]] * f;
                }
            }
            let oplane = &mut out[c * dh * dw..(c + 1) * dh * dw];
            for y in 0..dh {
                let f = self.rows.frac[y];
                let r0 = &tmp[self.rows.lo[y] * dw..(self.rows.lo[y] + 1) * dw];
                let r1 = &tmp[self.rows.hi[y] * dw..(self.rows.hi[y] + 1) * dw];
                let orow = &mut oplane[y * dw..(y + 1) * dw];
                for x in 0..dw {
                    orow[x] = r0[x] * (1.0 - f) + r1[x] * f;
                }
            }
        }
        out
    }

    /// Adjoint of [`Upsampler::forward`]: maps an output-space gradient back
    /// onto the source grid.
    pub fn backward(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        debug_assert_eq!(grad_out.len(), channels * dh * dw);
        if self.src == self.dst {
            return grad_out.to_vec();
        }
        let mut grad_in = vec![0.0; channels * sh * sw];
        let mut tmp = vec![0.0; sh * dw];
        for c in 0..channels {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let gplane = &grad_out[c * dh * dw..(c + 1) * dh * dw];
            for y in 0..dh {
                let f = self.rows.frac[y];
                let (lo, hi) = (self.rows.lo[y], self.rows.hi[y]);
                let grow = &gplane[y * dw..(y + 1) * dw];
                for x in 0..dw {
                    tmp[lo * dw + x] += grow[x] * (1.0 - f);
                    tmp[hi * dw + x] += grow[x] * f;
                }
            }
            let iplane = &mut grad_in[c * sh * sw..(c + 1) * sh * sw];
            for y in 0..sh {
                let trow = &tmp[y * dw..(y + 1) * dw];
                let irow = &mut iplane[y * sw..(y + 1) * sw];
                for x in 0..dw {
                    let f = self.cols.frac[x];
                    irow[self.cols.lo[x]] += trow[x] * (1.0 - f);
                    irow[self.cols.hi[x]] += trow[x] * f;
                }
            }
        }
        grad_in
    }
}

/// Bilinearly upsamples every plane of `volume` to `target_hw`.
pub fn bilinear_upsample(volume: &Tensor4, target_hw: (usize, usize)) -> Result<Tensor4> {
    let up = Upsampler::new(volume.hw(), target_hw)?;
    let [n, c, _, _] = volume.shape();
    let mut data = Vec::with_capacity(n * c * target_hw.0 * target_hw.1);
    for i in 0..n {
        data.extend(up.forward(volume.sample(i), c));
    }
    Tensor4::from_vec([n, c, target_hw.0, target_hw.1], data)
}
