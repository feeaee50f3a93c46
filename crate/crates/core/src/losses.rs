//! Objective terms: pixel-wise softmax cross entropy, prototype similarity
//! scores, cross- and within-domain similarity entropy, the weighted total,
//! and plain softmax entropy on decoder outputs (the "direct SER" baseline).
//!
//! Volumes are `[batch, channels, h, w]`; every pixel-averaged term divides
//! by the number of contributing pixels across the whole batch. The
//! `*_sample` functions are the per-image kernels used by the trainer; they
//! return an unnormalized sum and optionally accumulate `scale * d(sum)/dx`.

use serde::{Deserialize, Serialize};

use crate::domain::Mask;
use crate::error::{Error, Result};
use crate::gemm::{gemm, Trans};
use crate::prototypes::PrototypeTable;
use crate::tensor::Tensor4;

pub type SimilarityVolume = Tensor4;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution("empty".into()));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidDistribution("negative or non-finite mass".into()));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidDistribution(format!("mass sums to {s}")));
    }
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
}

/// Log-softmax of one pixel's scores gathered with `stride`.
#[inline]
fn log_softmax_strided(s: &[f64], c: usize, stride: usize, p: usize, out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for k in 0..c {
        m = m.max(s[k * stride + p]);
    }
    let mut z = 0.0;
    for k in 0..c {
        z += (s[k * stride + p] - m).exp();
    }
    let lz = m + z.ln();
    for k in 0..c {
        out[k] = s[k * stride + p] - lz;
    }
}

/// Sum over pixels of `H(softmax(scores[:, p]))` for a `[c, npix]` buffer.
/// If `grad` is given, adds `scale * dSum/dscores` into it.
pub fn softmax_entropy_sample(
    scores: &[f64],
    c: usize,
    npix: usize,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let mut logp = vec![0.0; c];
    let mut total = 0.0;
    for p in 0..npix {
        log_softmax_strided(scores, c, npix, p, &mut logp);
        let mut h = 0.0;
        for &lp in &logp {
            h -= lp.exp() * lp;
        }
        total += h;
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..c {
                let pk = logp[k].exp();
                g[k * npix + p] -= scale * pk * (logp[k] + h);
            }
        }
    }
    total
}

/// Sum of `-ln softmax(logits)[y]` over non-ignored pixels and their count.
pub fn cross_entropy_sample(
    logits: &[f64],
    c: usize,
    mask: &[u8],
    ignore_index: u8,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> (f64, usize) {
    let npix = mask.len();
    let mut logp = vec![0.0; c];
    let mut total = 0.0;
    let mut count = 0;
    for (p, &y) in mask.iter().enumerate() {
        if y == ignore_index {
            continue;
        }
        let y = y as usize;
        log_softmax_strided(logits, c, npix, p, &mut logp);
        total -= logp[y];
        count += 1;
        if let Some(g) = grad.as_deref_mut() {
            for k in 0..c {
                let d = logp[k].exp() - if k == y { 1.0 } else { 0.0 };
                g[k * npix + p] += scale * d;
            }
        }
    }
    (total, count)
}

/// Per-pixel similarity of `[d, npix]` embeddings to every label of `protos`
/// (max over each label's prototypes). Returns `[labels, npix]` scores and,
/// per label and pixel, the index of the winning prototype.
pub fn similarity_sample(emb: &[f64], npix: usize, protos: &PrototypeTable) -> (Vec<f64>, Vec<u32>) {
    let (nl, k, d) = (protos.num_labels(), protos.k(), protos.dim());
    let mut all = vec![0.0; nl * k * npix];
    gemm(nl * k, d, npix, 1.0, protos.vectors(), Trans::No, emb, Trans::No, 0.0, &mut all);
    if k == 1 {
        return (all, vec![0; nl * npix]);
    }
    let mut scores = vec![0.0; nl * npix];
    let mut arg = vec![0u32; nl * npix];
    for l in 0..nl {
        for p in 0..npix {
            let mut best = all[(l * k) * npix + p];
            let mut bj = 0;
            for j in 1..k {
                let v = all[(l * k + j) * npix + p];
                if v > best {
                    best = v;
                    bj = j;
                }
            }
            scores[l * npix + p] = best;
            arg[l * npix + p] = bj as u32;
        }
    }
    (scores, arg)
}

/// Sum over pixels of the entropy of `softmax(similarity(emb, protos))`.
/// Prototypes are constants; only the embedding gradient is produced.
pub fn similarity_entropy_sample(
    emb: &[f64],
    npix: usize,
    protos: &PrototypeTable,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> f64 {
    let (nl, k, d) = (protos.num_labels(), protos.k(), protos.dim());
    let (scores, arg) = similarity_sample(emb, npix, protos);
    let Some(g) = grad else {
        return softmax_entropy_sample(&scores, nl, npix, 1.0, None);
    };
    let mut ds = vec![0.0; nl * npix];
    let total = softmax_entropy_sample(&scores, nl, npix, scale, Some(&mut ds));
    let ds_full = if k == 1 {
        ds
    } else {
        let mut full = vec![0.0; nl * k * npix];
        for l in 0..nl {
            for p in 0..npix {
                let j = arg[l * npix + p] as usize;
                full[(l * k + j) * npix + p] = ds[l * npix + p];
            }
        }
        full
    };
    gemm(d, nl * k, npix, 1.0, protos.vectors(), Trans::Yes, &ds_full, Trans::No, 1.0, g);
    total
}

/// Result of [`supervised_loss`]; `count` is the number of scored pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedLoss {
    pub value: f64,
    pub count: usize,
}

fn check_masks(logits: &Tensor4, masks: &[Mask]) -> Result<()> {
    let (h, w) = logits.hw();
    if masks.len() != logits.batch() {
        return Err(Error::Shape(format!(
            "{} masks for a batch of {}",
            masks.len(),
            logits.batch()
        )));
    }
    if let Some(m) = masks.iter().find(|m| (m.h, m.w) != (h, w)) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs logits {h}x{w}",
            m.h, m.w
        )));
    }
    Ok(())
}

fn check_targets(logits: &Tensor4, masks: &[Mask], ignore_index: u8) -> Result<()> {
    let c = logits.channels();
    for m in masks {
        if let Some(&v) = m.data.iter().find(|&&v| v != ignore_index && v as usize >= c) {
            return Err(Error::InvalidArgument(format!(
                "mask value {v} outside {c} classes"
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross entropy over non-ignored pixels. An all-ignored batch
/// yields `value = 0, count = 0`.
pub fn supervised_loss(logits: &Tensor4, masks: &[Mask], ignore_index: u8) -> Result<SupervisedLoss> {
    Ok(supervised_loss_with_grad(logits, masks, ignore_index, false)?.0)
}

/// Like [`supervised_loss`], optionally also returning `dLoss/dlogits`.
pub fn supervised_loss_with_grad(
    logits: &Tensor4,
    masks: &[Mask],
    ignore_index: u8,
    want_grad: bool,
) -> Result<(SupervisedLoss, Option<Tensor4>)> {
    check_masks(logits, masks)?;
    check_targets(logits, masks, ignore_index)?;
    let c = logits.channels();
    let count: usize = masks
        .iter()
        .map(|m| m.data.iter().filter(|&&v| v != ignore_index).count())
        .sum();
    let scale = if count > 0 { 1.0 / count as f64 } else { 0.0 };
    let mut grad = want_grad.then(|| Tensor4::zeros(logits.shape()));
    let mut total = 0.0;
    for (n, m) in masks.iter().enumerate() {
        let g = grad.as_mut().map(|g| g.sample_mut(n));
        total += cross_entropy_sample(logits.sample(n), c, &m.data, ignore_index, scale, g).0;
    }
    Ok((
        SupervisedLoss {
            value: total * scale,
            count,
        },
        grad,
    ))
}

fn check_dims(emb: &Tensor4, protos: &PrototypeTable) -> Result<()> {
    if emb.channels() != protos.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs prototype dim {}",
            emb.channels(),
            protos.dim()
        )));
    }
    Ok(())
}

/// `[v]_k`: per pixel, the best dot product between the embedding and label
/// `k`'s prototypes.
pub fn similarity_scores(emb: &Tensor4, protos: &PrototypeTable) -> Result<SimilarityVolume> {
    check_dims(emb, protos)?;
    let (h, w) = emb.hw();
    let mut data = Vec::with_capacity(emb.batch() * protos.num_labels() * h * w);
    for n in 0..emb.batch() {
        data.extend(similarity_sample(emb.sample(n), h * w, protos).0);
    }
    Tensor4::from_vec([emb.batch(), protos.num_labels(), h, w], data)
}

/// Mean per-pixel entropy of `softmax(similarity(emb, protos))`, with the
/// embedding gradient on request. An empty batch contributes 0.
pub fn similarity_entropy(
    emb: &Tensor4,
    protos: &PrototypeTable,
    want_grad: bool,
) -> Result<(f64, Option<Tensor4>)> {
    check_dims(emb, protos)?;
    let (h, w) = emb.hw();
    let npix = h * w;
    let total_pix = emb.batch() * npix;
    let mut grad = want_grad.then(|| Tensor4::zeros(emb.shape()));
    if total_pix == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / total_pix as f64;
    let mut total = 0.0;
    for n in 0..emb.batch() {
        let g = grad.as_mut().map(|g| g.sample_mut(n));
        total += similarity_entropy_sample(emb.sample(n), npix, protos, scale, g);
    }
    Ok((total * scale, grad))
}

/// `H(softmax(v_11)) + H(softmax(v_22))`: each domain's unlabeled embeddings
/// against its own prototypes.
pub fn within_dataset_loss(
    emb_u1: &Tensor4,
    emb_u2: &Tensor4,
    protos_1: &PrototypeTable,
    protos_2: &PrototypeTable,
) -> Result<f64> {
    Ok(similarity_entropy(emb_u1, protos_1, false)?.0 + similarity_entropy(emb_u2, protos_2, false)?.0)
}

/// `H(softmax(v_12)) + H(softmax(v_21))`: each domain's unlabeled embeddings
/// against the other domain's prototypes.
pub fn cross_dataset_loss(
    emb_u1: &Tensor4,
    emb_u2: &Tensor4,
    protos_1: &PrototypeTable,
    protos_2: &PrototypeTable,
) -> Result<f64> {
    Ok(similarity_entropy(emb_u1, protos_2, false)?.0 + similarity_entropy(emb_u2, protos_1, false)?.0)
}

/// Mean per-pixel entropy of the decoder's own softmax.
pub fn direct_ser_loss(logits: &Tensor4) -> f64 {
    direct_ser_loss_with_grad(logits, false).0
}

pub fn direct_ser_loss_with_grad(logits: &Tensor4, want_grad: bool) -> (f64, Option<Tensor4>) {
    let (h, w) = logits.hw();
    let total_pix = logits.batch() * h * w;
    let mut grad = want_grad.then(|| Tensor4::zeros(logits.shape()));
    if total_pix == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / total_pix as f64;
    let mut total = 0.0;
    for n in 0..logits.batch() {
        let g = grad.as_mut().map(|g| g.sample_mut(n));
        total += softmax_entropy_sample(logits.sample(n), logits.channels(), h * w, scale, g);
    }
    (total * scale, grad)
}

/// All loss components of one step and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sup_per_domain: Vec<f64>,
    pub l_cross: f64,
    pub l_within: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossReport {
    /// The weighted sum, evaluated in the one canonical order.
    pub fn weighted_sum(sup: &[f64], cross: f64, within: f64, alpha: f64, beta: f64) -> f64 {
        let s: f64 = sup.iter().sum();
        s + alpha * cross + beta * within
    }

    pub fn supervised_sum(&self) -> f64 {
        self.l_sup_per_domain.iter().sum()
    }
}

/// `L_T = sum(L_S) + alpha * L_cross + beta * L_within`.
pub fn total_loss(sup_terms: &[f64], cross: f64, within: f64, alpha: f64, beta: f64) -> Result<LossReport> {
    if !(alpha >= 0.0) || !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "loss weights must be non-negative (alpha {alpha}, beta {beta})"
        )));
    }
    if sup_terms.iter().chain([&cross, &within]).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    Ok(LossReport {
        l_sup_per_domain: sup_terms.to_vec(),
        l_cross: cross,
        l_within: within,
        total: LossReport::weighted_sum(sup_terms, cross, within, alpha, beta),
        alpha,
        beta,
    })
}
