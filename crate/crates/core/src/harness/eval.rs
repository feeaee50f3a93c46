//! Full-image evaluation, prediction entropy probes and embedding export.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{DomainDataset, Image, InputNorm, LabeledSample};
use crate::error::{Error, Result};
use crate::losses::softmax_entropy_sample;
use crate::metrics::{average_miou, ConfusionMatrix, MetricsRecord};
use crate::model::{infer, HeadId, ModelParams};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Resolves `dataset` to a decoder of `params`, checking the label count.
pub fn decoder_for(params: &ModelParams, dataset: &DomainDataset) -> Result<usize> {
    let k = params.config().domain_index(dataset.id())?;
    let labels = &params.config().domains[k].labels;
    if labels.as_slice() != dataset.label_space().names() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint labels for {} differ from the dataset's",
            dataset.id()
        )));
    }
    Ok(k)
}

/// Decoder logits for one uncropped image, `[L, h, w]`.
pub fn image_logits(params: &ModelParams, decoder: usize, image: &Image, norm: &InputNorm) -> Result<Vec<f64>> {
    let x = norm.apply(image);
    let (feats, _) = params.encode_sample(&x, image.h, image.w);
    let fhw = params.config().feature_hw(image.h, image.w);
    params.head_forward(HeadId::Decoder(decoder), &feats, fhw, (image.h, image.w))
}

/// Confusion matrix of full-image predictions over `samples`.
pub fn confusion(
    params: &ModelParams,
    decoder: usize,
    samples: &[LabeledSample],
    num_labels: usize,
    ignore: u8,
    norm: &InputNorm,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_labels);
    for s in samples {
        let logits = image_logits(params, decoder, &s.image, norm)?;
        let t = Tensor4::from_vec([1, num_labels, s.image.h, s.image.w], logits)?;
        let pred = infer(&t).pop().expect("one image");
        cm.accumulate(&pred, &s.mask, ignore)?;
    }
    Ok(cm)
}

/// mIoU record of one domain's split. `average_miou` equals `miou`; the
/// joint evaluation overwrites it.
pub fn evaluate(
    params: &ModelParams,
    dataset: &DomainDataset,
    split: Split,
    norm: &InputNorm,
    step: usize,
) -> Result<MetricsRecord> {
    let k = decoder_for(params, dataset)?;
    let samples = match split {
        Split::Train => dataset.labeled(),
        Split::Val => dataset.val(),
    };
    let cm = confusion(
        params,
        k,
        samples,
        dataset.num_labels(),
        dataset.label_space().ignore_index(),
        norm,
    )?;
    let miou = cm.miou()?;
    Ok(MetricsRecord {
        step,
        domain: dataset.id().to_string(),
        per_class_iou: cm.iou_per_class(),
        miou,
        average_miou: miou,
    })
}

/// Validation records for every domain, with the shared average filled in.
pub fn evaluate_all(
    params: &ModelParams,
    domains: &[&DomainDataset],
    norm: &InputNorm,
    step: usize,
) -> Result<(Vec<MetricsRecord>, f64)> {
    let mut recs = domains
        .iter()
        .map(|d| evaluate(params, d, Split::Val, norm, step))
        .collect::<Result<Vec<_>>>()?;
    let avg = average_miou(&recs.iter().map(|r| r.miou).collect::<Vec<_>>())?;
    for r in &mut recs {
        r.average_miou = avg;
    }
    Ok((recs, avg))
}

/// Mean per-pixel entropy of the decoder softmax over the first `probe`
/// unlabeled images of `dataset`.
pub fn prediction_entropy(params: &ModelParams, dataset: &DomainDataset, probe: usize, norm: &InputNorm) -> Result<f64> {
    let k = decoder_for(params, dataset)?;
    let c = dataset.num_labels();
    let mut total = 0.0;
    let mut pixels = 0usize;
    for s in dataset.unlabeled().iter().take(probe) {
        let logits = image_logits(params, k, &s.image, norm)?;
        let npix = s.image.h * s.image.w;
        total += softmax_entropy_sample(&logits, c, npix, 1.0, None);
        pixels += npix;
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument(format!("{} has no unlabeled images to probe", dataset.id())));
    }
    Ok(total / pixels as f64)
}

/// Average of [`prediction_entropy`] over domains.
pub fn mean_prediction_entropy(
    params: &ModelParams,
    domains: &[&DomainDataset],
    probe: usize,
    norm: &InputNorm,
) -> Result<f64> {
    let mut s = 0.0;
    for d in domains {
        s += prediction_entropy(params, d, probe, norm)?;
    }
    Ok(s / domains.len().max(1) as f64)
}

/// Writes rows `domain label v1 .. vd` of embedding-head outputs for the
/// labeled pixels of each domain, at most `per_class_cap` per class, chosen
/// by seeded reservoir sampling. Returns the row count.
pub fn export_embeddings(
    params: &ModelParams,
    domains: &[&DomainDataset],
    per_class_cap: usize,
    seed: u64,
    norm: &InputNorm,
    path: &Path,
) -> Result<usize> {
    let d = params.config().embed_dim;
    let mut out = String::new();
    let mut rows = 0;
    for (di, ds) in domains.iter().enumerate() {
        let nl = ds.num_labels();
        let ignore = ds.label_space().ignore_index();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(di as u64));
        let mut res: Vec<Vec<Vec<f64>>> = vec![Vec::new(); nl];
        let mut seen = vec![0usize; nl];
        for s in ds.labeled() {
            let (h, w) = (s.image.h, s.image.w);
            let x = norm.apply(&s.image);
            let (feats, _) = params.encode_sample(&x, h, w);
            let fhw = params.config().feature_hw(h, w);
            let emb = params.head_forward(HeadId::Embed, &feats, fhw, (h, w))?;
            let npix = h * w;
            for (p, &l) in s.mask.data.iter().enumerate() {
                if l == ignore {
                    continue;
                }
                let l = l as usize;
                seen[l] += 1;
                let slot = if res[l].len() < per_class_cap {
                    res[l].push(Vec::new());
                    Some(res[l].len() - 1)
                } else {
                    let r = rng.gen_range(0..seen[l]);
                    (r < per_class_cap).then_some(r)
                };
                if let Some(slot) = slot {
                    res[l][slot] = (0..d).map(|j| emb[j * npix + p]).collect();
                }
            }
        }
        for (l, vs) in res.iter().enumerate() {
            let name = &ds.label_space().names()[l];
            for v in vs {
                write!(out, "{} {}", ds.id(), name.replace(char::is_whitespace, "_")).expect("string write");
                for x in v {
                    write!(out, " {x:.8e}").expect("string write");
                }
                out.push('\n');
                rows += 1;
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}
