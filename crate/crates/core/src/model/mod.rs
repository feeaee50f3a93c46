//! Shared encoder, per-domain decoders and the entropy-module projection.
//!
//! The encoder is a stack of 3x3 convolutions (strided to the configured
//! output stride) with a nonlinearity between layers. Decoders and the
//! embedding head are 1x1 projections evaluated on the encoder grid and
//! bilinearly upsampled to the input size.

mod checkpoint;
mod layers;
mod upsample;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{Conv3x3, Linear1x1};
pub use upsample::{bilinear_upsample, AxisMap, Upsampler};

use crate::domain::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`; smooth, so finite-difference checks never straddle a kink.
    #[default]
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// One decoder's identity: the domain it serves and its label names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainHead {
    pub id: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub activation: Activation,
    pub embed_dim: usize,
    pub domains: Vec<DomainHead>,
}

impl ModelConfig {
    /// Toy backbone: three convolutions, output stride 4, `C_e = 64`.
    pub fn toy(domains: Vec<DomainHead>, embed_dim: usize) -> Self {
        ModelConfig {
            in_channels: 3,
            encoder_channels: vec![16, 32, 64],
            encoder_strides: vec![2, 2, 1],
            activation: Activation::Silu,
            embed_dim,
            domains,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.encoder_channels.len() != self.encoder_strides.len() {
            return Err(Error::Config(
                "encoder_channels and encoder_strides differ in length".into(),
            ));
        }
        if self.encoder_strides.iter().any(|&s| s == 0)
            || self.encoder_channels.iter().any(|&c| c == 0)
            || self.in_channels == 0
            || self.embed_dim == 0
        {
            return Err(Error::Config("zero-sized encoder/embedding dimension".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("model needs at least one domain".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.labels.len() < 2 {
                return Err(Error::Config(format!("domain {} has < 2 labels", d.id)));
            }
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return Err(Error::Config(format!("duplicate domain {}", d.id)));
            }
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.encoder_channels.last().expect("validated non-empty")
    }

    pub fn output_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn domain_index(&self, id: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))
    }

    /// Encoder output grid for an `h x w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        self.encoder_strides
            .iter()
            .fold((h, w), |(h, w), &s| ((h - 1) / s + 1, (w - 1) / s + 1))
    }

    /// SHA-256 over the canonical JSON encoding of this config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Which 1x1 head to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadId {
    Decoder(usize),
    Embed,
}

/// All trainable parameters. The same structure doubles as a gradient or
/// momentum buffer (see [`ModelParams::zeros_like`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    config: ModelConfig,
    pub encoder: Vec<Conv3x3>,
    pub decoders: Vec<Linear1x1>,
    pub embed_head: Linear1x1,
}

/// Saved intermediate values of one sample's encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
struct LayerTrace {
    in_hw: (usize, usize),
    cols: Vec<f64>,
    /// Pre-activation output, kept only for layers followed by a nonlinearity.
    pre: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut in_c = config.in_channels;
        for (&c, &s) in config.encoder_channels.iter().zip(&config.encoder_strides) {
            encoder.push(Conv3x3::zeros(in_c, c, s));
            in_c = c;
        }
        let decoders = config
            .domains
            .iter()
            .map(|d| Linear1x1::zeros(in_c, d.labels.len()))
            .collect();
        let embed_head = Linear1x1::zeros(in_c, config.embed_dim);
        Ok(ModelParams {
            config,
            encoder,
            decoders,
            embed_head,
        })
    }

    /// Seeded random initialization (He-normal convs, zero biases).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config)?;
        for l in &mut p.encoder {
            *l = Conv3x3::init(l.in_c, l.out_c, l.stride, &mut rng);
        }
        for d in &mut p.decoders {
            *d = Linear1x1::init(d.in_c, d.out_c, &mut rng);
        }
        p.embed_head = Linear1x1::init(p.embed_head.in_c, p.embed_head.out_c, &mut rng);
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter buffer in a fixed order.
    pub fn buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.encoder {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for d in &self.decoders {
            out.push(&d.weight);
            out.push(&d.bias);
        }
        out.push(&self.embed_head.weight);
        out.push(&self.embed_head.bias);
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for d in &mut self.decoders {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out.push(&mut self.embed_head.weight);
        out.push(&mut self.embed_head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    pub fn head(&self, id: HeadId) -> &Linear1x1 {
        match id {
            HeadId::Decoder(k) => &self.decoders[k],
            HeadId::Embed => &self.embed_head,
        }
    }

    pub fn head_mut(&mut self, id: HeadId) -> &mut Linear1x1 {
        match id {
            HeadId::Decoder(k) => &mut self.decoders[k],
            HeadId::Embed => &mut self.embed_head,
        }
    }

    /// Encoder forward on one `[in_c, h, w]` sample, keeping what the
    /// backward pass needs. Returns `[C_e, h/s, w/s]` features.
    pub fn encode_sample(&self, x: &[f64], h: usize, w: usize) -> (Vec<f64>, EncoderTrace) {
        let act = self.config.activation;
        let last = self.encoder.len() - 1;
        let mut cur = x.to_vec();
        let (mut ch, mut cw) = (h, w);
        let mut layers = Vec::with_capacity(self.encoder.len());
        for (i, l) in self.encoder.iter().enumerate() {
            let (y, cols) = l.forward(&cur, ch, cw);
            let in_hw = (ch, cw);
            (ch, cw) = l.out_hw(ch, cw);
            if i < last {
                cur = y.iter().map(|&v| act.apply(v)).collect();
                layers.push(LayerTrace {
                    in_hw,
                    cols,
                    pre: Some(y),
                });
            } else {
                cur = y;
                layers.push(LayerTrace {
                    in_hw,
                    cols,
                    pre: None,
                });
            }
        }
        (cur, EncoderTrace { layers })
    }

    /// Backpropagates `dfeat` through the encoder, accumulating into
    /// `grads`. Returns the input gradient if requested.
    pub fn encoder_backward(
        &self,
        trace: &EncoderTrace,
        dfeat: Vec<f64>,
        grads: &mut ModelParams,
        need_input: bool,
    ) -> Option<Vec<f64>> {
        let act = self.config.activation;
        let mut d = dfeat;
        for (i, (l, t)) in self.encoder.iter().zip(&trace.layers).enumerate().rev() {
            if let Some(pre) = &t.pre {
                for (g, &z) in d.iter_mut().zip(pre) {
                    *g *= act.derivative(z);
                }
            }
            let need = i > 0 || need_input;
            match l.backward(&t.cols, &d, t.in_hw.0, t.in_hw.1, &mut grads.encoder[i], need) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }

    /// Runs a head on one sample's features and upsamples to `out_hw`.
    pub fn head_forward(
        &self,
        id: HeadId,
        feats: &[f64],
        feat_hw: (usize, usize),
        out_hw: (usize, usize),
    ) -> Result<Vec<f64>> {
        let head = self.head(id);
        let z = head.forward(feats, feat_hw.0 * feat_hw.1);
        let up = Upsampler::new(feat_hw, out_hw)?;
        Ok(up.forward(&z, head.out_c))
    }

    /// Backward of [`ModelParams::head_forward`]; returns the feature gradient.
    pub fn head_backward(
        &self,
        id: HeadId,
        feats: &[f64],
        feat_hw: (usize, usize),
        dout: &[f64],
        out_hw: (usize, usize),
        grads: &mut ModelParams,
    ) -> Result<Vec<f64>> {
        let head = self.head(id);
        let up = Upsampler::new(feat_hw, out_hw)?;
        let dz = up.backward(dout, head.out_c);
        Ok(head.backward(feats, &dz, feat_hw.0 * feat_hw.1, grads.head_mut(id)))
    }

    /// Shared encoder on a batch of images.
    pub fn encode(&self, images: &Tensor4) -> Result<Tensor4> {
        if images.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {}",
                self.config.in_channels,
                images.channels()
            )));
        }
        if !images.is_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        let (h, w) = images.hw();
        let (fh, fw) = self.config.feature_hw(h, w);
        let c = self.config.feature_channels();
        let mut data = Vec::with_capacity(images.batch() * c * fh * fw);
        for n in 0..images.batch() {
            data.extend(self.encode_sample(images.sample(n), h, w).0);
        }
        Tensor4::from_vec([images.batch(), c, fh, fw], data)
    }

    fn apply_head(&self, id: HeadId, features: &Tensor4, out_hw: (usize, usize)) -> Result<Tensor4> {
        let head = self.head(id);
        if features.channels() != head.in_c {
            return Err(Error::Shape(format!(
                "head expects {} feature channels, got {}",
                head.in_c,
                features.channels()
            )));
        }
        let fhw = features.hw();
        let mut data = Vec::with_capacity(features.batch() * head.out_c * out_hw.0 * out_hw.1);
        for n in 0..features.batch() {
            data.extend(self.head_forward(id, features.sample(n), fhw, out_hw)?);
        }
        Tensor4::from_vec([features.batch(), head.out_c, out_hw.0, out_hw.1], data)
    }

    /// Domain `k`'s decoder: logits over its label space at `out_hw`.
    pub fn decode(&self, domain: usize, features: &Tensor4, out_hw: (usize, usize)) -> Result<Tensor4> {
        if domain >= self.decoders.len() {
            return Err(Error::InvalidArgument(format!("no decoder {domain}")));
        }
        self.apply_head(HeadId::Decoder(domain), features, out_hw)
    }

    /// Entropy-module projection: `d`-dimensional embeddings at `out_hw`.
    pub fn embed(&self, features: &Tensor4, out_hw: (usize, usize)) -> Result<Tensor4> {
        self.apply_head(HeadId::Embed, features, out_hw)
    }

    /// Sets the embedding head to the affine map `x -> P^T (x - mean)`, with
    /// `projection` laid out `[C_e, d]` row-major.
    pub fn init_embed_from_projection(&mut self, projection: &[f64], mean: &[f64]) -> Result<()> {
        let (c, d) = (self.embed_head.in_c, self.embed_head.out_c);
        if projection.len() != c * d || mean.len() != c {
            return Err(Error::Shape(format!(
                "projection must be {c}x{d} with a {c}-vector mean"
            )));
        }
        for j in 0..d {
            let mut b = 0.0;
            for i in 0..c {
                let p = projection[i * d + j];
                self.embed_head.weight[j * c + i] = p;
                b -= p * mean[i];
            }
            self.embed_head.bias[j] = b;
        }
        Ok(())
    }
}

/// Per-pixel argmax over channels; ties resolve to the lowest index.
pub fn infer(logits: &Tensor4) -> Vec<Mask> {
    let [n, c, h, w] = logits.shape();
    (0..n)
        .map(|i| {
            let s = logits.sample(i);
            let data = (0..h * w)
                .map(|p| {
                    let mut best = 0;
                    let mut bv = s[p];
                    for k in 1..c {
                        let v = s[k * h * w + p];
                        if v > bv {
                            bv = v;
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect();
            Mask { h, w, data }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn heads(labels: &[usize]) -> Vec<DomainHead> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &n)| DomainHead {
                id: format!("d{i}"),
                labels: (0..n).map(|k| format!("l{k}")).collect(),
            })
            .collect()
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor4::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encode_shape_contract() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[4, 3]), 32), 1).unwrap();
        let x = random_tensor([1, 3, 32, 32], 2);
        let f = p.encode(&x).unwrap();
        assert_eq!(f.shape(), [1, 64, 8, 8]);
        let e = p.embed(&f, (32, 32)).unwrap();
        assert_eq!(e.shape(), [1, 32, 32, 32]);
        let l = p.decode(1, &f, (32, 32)).unwrap();
        assert_eq!(l.shape(), [1, 3, 32, 32]);
    }

    #[test]
    fn odd_input_sizes_upsample_back_exactly() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[2]), 8), 1).unwrap();
        let x = random_tensor([1, 3, 13, 9], 2);
        let f = p.encode(&x).unwrap();
        assert_eq!(f.hw(), (4, 3));
        assert_eq!(p.decode(0, &f, (13, 9)).unwrap().hw(), (13, 9));
    }

    #[test]
    fn zero_weights_zero_image_give_zero_outputs() {
        let p = ModelParams::zeros(ModelConfig::toy(heads(&[4]), 8)).unwrap();
        let x = Tensor4::zeros([1, 3, 16, 16]);
        let f = p.encode(&x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(p.decode(0, &f, (16, 16)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(p.embed(&f, (16, 16)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_give_identical_features() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[4]), 8), 9).unwrap();
        let one = random_tensor([1, 3, 16, 16], 4);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor4::from_vec([2, 3, 16, 16], data).unwrap();
        let f = p.encode(&two).unwrap();
        assert_eq!(f.sample(0), f.sample(1));
        assert_eq!(p.encode(&two).unwrap(), f);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[4]), 8), 9).unwrap();
        let mut x = Tensor4::zeros([1, 3, 8, 8]);
        x.data_mut()[5] = f64::NAN;
        assert!(matches!(p.encode(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decode_is_linear_in_features() {
        let mut p = ModelParams::random(ModelConfig::toy(heads(&[3]), 8), 5).unwrap();
        p.decoders[0].bias = vec![0.5, -1.0, 2.0];
        let f = random_tensor([1, 64, 4, 4], 6);
        let mut f2 = f.clone();
        f2.scale(2.0);
        let a = p.decode(0, &f, (16, 16)).unwrap();
        let b = p.decode(0, &f2, (16, 16)).unwrap();
        for c in 0..3 {
            let bias = p.decoders[0].bias[c];
            for y in 0..16 {
                for x in 0..16 {
                    let lhs = b.at(0, c, y, x) - bias;
                    let rhs = 2.0 * (a.at(0, c, y, x) - bias);
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_matches_per_pixel_oracle() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[3]), 8), 7).unwrap();
        let f = random_tensor([1, 64, 3, 3], 8);
        let out = p.decode(0, &f, (9, 11)).unwrap();
        let head = &p.decoders[0];
        // oracle: per-pixel matrix product on the coarse grid, then bilinear
        // interpolation written directly from the half-pixel formula
        let coarse = |c: usize, y: usize, x: usize| {
            head.bias[c]
                + (0..64)
                    .map(|i| head.weight[c * 64 + i] * f.at(0, i, y, x))
                    .sum::<f64>()
        };
        let coord = |o: usize, s: usize, d: usize| {
            let v = ((o as f64 + 0.5) * s as f64 / d as f64 - 0.5).max(0.0);
            let i0 = (v.floor() as usize).min(s - 1);
            (i0, (i0 + 1).min(s - 1), v - i0 as f64)
        };
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..11 {
                    let (y0, y1, fy) = coord(y, 3, 9);
                    let (x0, x1, fx) = coord(x, 3, 11);
                    let want = (1.0 - fy) * ((1.0 - fx) * coarse(c, y0, x0) + fx * coarse(c, y0, x1))
                        + fy * ((1.0 - fx) * coarse(c, y1, x0) + fx * coarse(c, y1, x1));
                    assert!((out.at(0, c, y, x) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let p = ModelParams::random(ModelConfig::toy(heads(&[3]), 8), 7).unwrap();
        let f = random_tensor([1, 10, 3, 3], 8);
        assert!(matches!(p.decode(0, &f, (9, 9)), Err(Error::Shape(_))));
    }

    #[test]
    fn infer_argmax_and_ties() {
        let logits = Tensor4::from_vec([1, 2, 1, 3], vec![2.0, 1.0, 0.0, -1.0, 1.0, 5.0]).unwrap();
        assert_eq!(infer(&logits)[0].data, vec![0, 0, 1]);
    }

    #[test]
    fn infer_matches_exhaustive_scan() {
        let logits = random_tensor([2, 3, 8, 8], 11);
        let maps = infer(&logits);
        for n in 0..2 {
            for y in 0..8 {
                for x in 0..8 {
                    let vals: Vec<f64> = (0..3).map(|c| logits.at(n, c, y, x)).collect();
                    let mut best = 0;
                    for c in 0..3 {
                        if vals[c] > vals[best] {
                            best = c;
                        }
                    }
                    assert_eq!(maps[n].get(y, x) as usize, best);
                }
            }
        }
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ModelConfig::toy(heads(&[3, 4]), 8);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.embed_dim = 16;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
