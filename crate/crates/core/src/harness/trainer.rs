//! Supervised pretraining, prototype preparation and joint universal
//! training over the ablation modes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{JointBatch, JointSampler};
use super::config::{Mode, TrainConfig};
use super::eval::{evaluate_all, mean_prediction_entropy};
use super::optim::{poly_lr, Sgd};
use crate::domain::{register_domain, DomainDataset, DomainSource};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_sample, similarity_entropy_sample, softmax_entropy_sample, total_loss, LossReport};
use crate::metrics::MetricsRecord;
use crate::model::{save_checkpoint, DomainHead, HeadId, ModelParams};
use crate::prototypes::{
    construct_prototypes, ema_update, fresh_centroids, write_projection, write_prototypes, PrototypeBuild,
    PrototypeTable, Projection,
};

// Offsets that keep the seeded streams of one run apart.
const STREAM_PRETRAIN: u64 = 0x5eed_0001;
const STREAM_TRAIN: u64 = 0x5eed_0002;
const STREAM_PROTO: u64 = 0x5eed_0003;

/// Loads the configured domains from folders under `data_root`, applying
/// the labeled / unlabeled caps.
pub fn load_domains(cfg: &TrainConfig, data_root: &Path) -> Result<Vec<DomainDataset>> {
    if cfg.domains.is_empty() {
        return Err(Error::Config("no domains configured".into()));
    }
    cfg.domains
        .iter()
        .map(|d| {
            let root = match &d.root {
                Some(r) if r.is_absolute() => r.clone(),
                Some(r) => data_root.join(r),
                None => data_root.join(&d.id),
            };
            let reg = register_domain(DomainSource::Folder { id: d.id.clone(), root })?;
            Ok(apply_caps(reg.dataset, d.n_labeled, d.n_unlabeled))
        })
        .collect()
}

/// Applies the caps of `cfg.domains` (matched by id) to in-memory datasets.
pub fn cap_domains(cfg: &TrainConfig, domains: Vec<DomainDataset>) -> Vec<DomainDataset> {
    domains
        .into_iter()
        .map(|ds| match cfg.domains.iter().find(|d| d.id == ds.id()) {
            Some(d) => apply_caps(ds, d.n_labeled, d.n_unlabeled),
            None => ds,
        })
        .collect()
}

fn apply_caps(mut ds: DomainDataset, n_labeled: Option<usize>, n_unlabeled: Option<usize>) -> DomainDataset {
    if let Some(n) = n_labeled {
        ds = ds.with_labeled_cap(n);
    }
    if let Some(n) = n_unlabeled {
        ds = ds.with_unlabeled_cap(n);
    }
    ds
}

pub fn domain_heads(domains: &[&DomainDataset]) -> Vec<DomainHead> {
    domains
        .iter()
        .map(|d| DomainHead {
            id: d.id().to_string(),
            labels: d.label_space().names().to_vec(),
        })
        .collect()
}

/// Per-step loss values before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTerms {
    /// One supervised term per batch part.
    pub sup: Vec<f64>,
    pub cross: f64,
    pub within: f64,
}

/// What the unlabeled halves contribute in one step.
#[derive(Debug, Clone, Copy)]
pub struct UnsupSetup<'a> {
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
    /// Tables indexed like the batch parts; empty when unused.
    pub tables: &'a [PrototypeTable],
}

/// Loss terms of one joint batch and, if `grads` is given, the gradient of
/// `sum(sup) + alpha * cross + beta * within` accumulated into it.
/// `decoders[i]` is the decoder serving batch part `i`. With
/// `keep_features`, also returns each part's unlabeled encoder features as
/// `[pixels, C]` rows.
pub fn step_gradients(
    params: &ModelParams,
    batch: &JointBatch,
    decoders: &[usize],
    ignores: &[u8],
    unsup: UnsupSetup<'_>,
    mut grads: Option<&mut ModelParams>,
    keep_features: bool,
) -> Result<(StepTerms, Vec<Vec<f64>>)> {
    let cfg = params.config();
    let c_e = cfg.feature_channels();
    let mut terms = StepTerms {
        sup: Vec::with_capacity(batch.parts.len()),
        cross: 0.0,
        within: 0.0,
    };
    let mut kept = Vec::new();
    let need_embed = unsup.mode.uses_prototypes() && !unsup.tables.is_empty() && (unsup.alpha > 0.0 || unsup.beta > 0.0);
    let need_ser = unsup.mode == Mode::DirectSer && unsup.beta > 0.0;

    for (i, part) in batch.parts.iter().enumerate() {
        let dec = decoders[i];
        let head = HeadId::Decoder(dec);
        let n_labels = cfg.domains[dec].labels.len();
        let ignore = ignores[i];

        // supervised half
        let count: usize = part
            .labeled
            .iter()
            .map(|(_, m)| m.data.iter().filter(|&&v| v != ignore).count())
            .sum();
        let mut sup = 0.0;
        if count > 0 {
            let scale = 1.0 / count as f64;
            for (x, mask) in &part.labeled {
                let (h, w) = (mask.h, mask.w);
                let fhw = cfg.feature_hw(h, w);
                let (feats, trace) = params.encode_sample(x, h, w);
                let logits = params.head_forward(head, &feats, fhw, (h, w))?;
                match grads.as_deref_mut() {
                    Some(g) => {
                        let mut dl = vec![0.0; logits.len()];
                        sup += cross_entropy_sample(&logits, n_labels, &mask.data, ignore, scale, Some(&mut dl)).0;
                        let df = params.head_backward(head, &feats, fhw, &dl, (h, w), g)?;
                        params.encoder_backward(&trace, df, g, false);
                    }
                    None => sup += cross_entropy_sample(&logits, n_labels, &mask.data, ignore, scale, None).0,
                }
            }
            sup *= scale;
        }
        terms.sup.push(sup);

        // unlabeled half
        if !(need_embed || need_ser || keep_features) {
            kept.push(Vec::new());
            continue;
        }
        let total_pix: usize = part.unlabeled.iter().map(|(_, (h, w))| h * w).sum();
        let mut rows = Vec::new();
        for (x, (h, w)) in &part.unlabeled {
            let (h, w) = (*h, *w);
            let npix = h * w;
            let fhw = cfg.feature_hw(h, w);
            let (feats, trace) = params.encode_sample(x, h, w);
            if keep_features {
                let fp = fhw.0 * fhw.1;
                for p in 0..fp {
                    rows.extend((0..c_e).map(|ch| feats[ch * fp + p]));
                }
            }
            let inv = 1.0 / total_pix as f64;
            let mut dfeat = grads.is_some().then(|| vec![0.0; feats.len()]);
            if need_embed {
                let emb = params.head_forward(HeadId::Embed, &feats, fhw, (h, w))?;
                let mut gemb = grads.is_some().then(|| vec![0.0; emb.len()]);
                for (j, table) in unsup.tables.iter().enumerate() {
                    let wt = if j == i { unsup.beta } else { unsup.alpha };
                    if wt == 0.0 {
                        continue;
                    }
                    let v = similarity_entropy_sample(&emb, npix, table, wt * inv, gemb.as_deref_mut()) * inv;
                    if j == i {
                        terms.within += v;
                    } else {
                        terms.cross += v;
                    }
                }
                if let (Some(g), Some(ge), Some(df)) = (grads.as_deref_mut(), &gemb, dfeat.as_mut()) {
                    let d = params.head_backward(HeadId::Embed, &feats, fhw, ge, (h, w), g)?;
                    add_into(df, &d);
                }
            }
            if need_ser {
                let logits = params.head_forward(head, &feats, fhw, (h, w))?;
                let mut gl = grads.is_some().then(|| vec![0.0; logits.len()]);
                terms.within +=
                    softmax_entropy_sample(&logits, n_labels, npix, unsup.beta * inv, gl.as_deref_mut()) * inv;
                if let (Some(g), Some(gl), Some(df)) = (grads.as_deref_mut(), &gl, dfeat.as_mut()) {
                    let d = params.head_backward(head, &feats, fhw, gl, (h, w), g)?;
                    add_into(df, &d);
                }
            }
            if let (Some(g), Some(df)) = (grads.as_deref_mut(), dfeat) {
                if need_embed || need_ser {
                    params.encoder_backward(&trace, df, g, false);
                }
            }
        }
        kept.push(rows);
    }
    Ok((terms, kept))
}

fn add_into(acc: &mut [f64], d: &[f64]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a += b;
    }
}

fn check_finite(r: &LossReport, step: usize) -> Result<()> {
    let named = r
        .l_sup_per_domain
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("l_sup[{i}]"), v))
        .chain([("l_cross".to_string(), r.l_cross), ("l_within".to_string(), r.l_within)]);
    for (term, value) in named {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, step, value });
        }
    }
    Ok(())
}

fn terms_to_report(t: &StepTerms, alpha: f64, beta: f64, step: usize) -> Result<LossReport> {
    let probe = LossReport {
        l_sup_per_domain: t.sup.clone(),
        l_cross: t.cross,
        l_within: t.within,
        total: 0.0,
        alpha,
        beta,
    };
    check_finite(&probe, step)?;
    let r = total_loss(&t.sup, t.cross, t.within, alpha, beta)?;
    if !r.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total".into(),
            step,
            value: r.total,
        });
    }
    Ok(r)
}

/// Supervised-only training of a fresh model on the labeled splits of
/// `active` (indices into `domains`). The model carries heads for every
/// domain. Returns the model and the per-iteration supervised sum.
pub fn pretrain(
    cfg: &TrainConfig,
    domains: &[&DomainDataset],
    active: &[usize],
    iters: usize,
) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    let mc = cfg.model_config(domain_heads(domains));
    let mut params = ModelParams::random(mc, cfg.seed)?;
    let subset: Vec<&DomainDataset> = active.iter().map(|&i| domains[i]).collect();
    let crops = active.iter().map(|&i| cfg.crop_for(i)).collect();
    let mut sampler = JointSampler::new(&subset, cfg.batch_size, 1.0, crops, cfg.norm, true)?;
    let ignores: Vec<u8> = subset.iter().map(|d| d.label_space().ignore_index()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_PRETRAIN);
    let mut sgd = Sgd::new(&params, cfg.momentum);
    let base = cfg.pretrain_lr.unwrap_or(cfg.lr);
    let none = UnsupSetup {
        mode: Mode::TrainOnSource,
        alpha: 0.0,
        beta: 0.0,
        tables: &[],
    };
    let mut history = Vec::with_capacity(iters);
    for it in 0..iters {
        let batch = sampler.next_batch(&subset, &mut rng);
        let mut grads = params.zeros_like();
        let (terms, _) = step_gradients(&params, &batch, active, &ignores, none, Some(&mut grads), false)?;
        let r = terms_to_report(&terms, 0.0, 0.0, it)?;
        history.push(r.total);
        sgd.step(&mut params, &grads, poly_lr(base, it, iters, cfg.poly_power)?)?;
    }
    Ok((params, history))
}

/// Refits decoder `decoder` on a frozen encoder with full-batch momentum
/// descent over `dataset`'s labeled split, starting from zero weights.
pub fn fit_decoder(
    params: &mut ModelParams,
    decoder: usize,
    dataset: &DomainDataset,
    iters: usize,
    lr: f64,
    momentum: f64,
    norm: &crate::domain::InputNorm,
) -> Result<()> {
    let cfg = params.config().clone();
    let head = HeadId::Decoder(decoder);
    let ignore = dataset.label_space().ignore_index();
    let n_labels = dataset.num_labels();
    let cached: Vec<(Vec<f64>, (usize, usize), &crate::domain::Mask)> = dataset
        .labeled()
        .iter()
        .map(|s| {
            let x = norm.apply(&s.image);
            let f = params.encode_sample(&x, s.image.h, s.image.w).0;
            (f, cfg.feature_hw(s.image.h, s.image.w), &s.mask)
        })
        .collect();
    let count: usize = cached
        .iter()
        .map(|(_, _, m)| m.data.iter().filter(|&&v| v != ignore).count())
        .sum();
    {
        let d = params.head_mut(head);
        d.weight.iter_mut().for_each(|v| *v = 0.0);
        d.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    if count == 0 {
        return Ok(());
    }
    let scale = 1.0 / count as f64;
    let (wl, bl) = (params.head(head).weight.len(), params.head(head).bias.len());
    let (mut vw, mut vb) = (vec![0.0; wl], vec![0.0; bl]);
    let mut grads = params.zeros_like();
    for _ in 0..iters {
        {
            let g = grads.head_mut(head);
            g.weight.iter_mut().for_each(|v| *v = 0.0);
            g.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        for (f, fhw, m) in &cached {
            let logits = params.head_forward(head, f, *fhw, (m.h, m.w))?;
            let mut dl = vec![0.0; logits.len()];
            cross_entropy_sample(&logits, n_labels, &m.data, ignore, scale, Some(&mut dl));
            params.head_backward(head, f, *fhw, &dl, (m.h, m.w), &mut grads)?;
        }
        let g = grads.head(head).clone();
        let d = params.head_mut(head);
        for ((p, v), gi) in d.weight.iter_mut().zip(&mut vw).zip(&g.weight) {
            *v = momentum * *v + gi;
            *p -= lr * *v;
        }
        for ((p, v), gi) in d.bias.iter_mut().zip(&mut vb).zip(&g.bias) {
            *v = momentum * *v + gi;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// A jointly pretrained model and the prototypes built from it.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pretrained: ModelParams,
    pub pretrain_history: Vec<f64>,
    pub tables: Vec<PrototypeTable>,
    pub projection: Projection,
}

/// Pretrains on every domain's labeled split and builds prototypes in one
/// PCA space shared by all domains.
pub fn prepare(cfg: &TrainConfig, domains: &[&DomainDataset]) -> Result<Prepared> {
    let all: Vec<usize> = (0..domains.len()).collect();
    let (pretrained, pretrain_history) = pretrain(cfg, domains, &all, cfg.pretrain_iters)?;
    let (tables, projection) = build_prototypes(cfg, &pretrained, domains)?;
    Ok(Prepared {
        pretrained,
        pretrain_history,
        tables,
        projection,
    })
}

pub fn build_prototypes(
    cfg: &TrainConfig,
    model: &ModelParams,
    domains: &[&DomainDataset],
) -> Result<(Vec<PrototypeTable>, Projection)> {
    let build = PrototypeBuild {
        dim: cfg.d,
        k: cfg.k,
        cap_per_class: cfg.proto_cap_per_class,
        seed: cfg.seed ^ STREAM_PROTO,
        kmeans_restarts: cfg.kmeans_restarts,
        theta: cfg.theta,
        norm: cfg.norm,
    };
    let (tables, projection, reports) = construct_prototypes(model, domains, &build)?;
    for (ds, r) in domains.iter().zip(&reports) {
        if !r.empty_classes.is_empty() {
            log::warn!("{}: no pixels for classes {:?}", ds.id(), r.empty_classes);
        }
    }
    Ok((tables, projection))
}

/// One `losses.jsonl` line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLine {
    pub step: usize,
    pub lr: f64,
    pub l_sup: Vec<f64>,
    pub l_cross: f64,
    pub l_within: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub seed: u64,
    pub best_step: usize,
    pub best_average_miou: f64,
    pub final_average_miou: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub losses: Vec<LossLine>,
    pub metrics: Vec<MetricsRecord>,
    pub best: ModelParams,
    pub last: ModelParams,
    pub initial_tables: Vec<PrototypeTable>,
    pub final_tables: Vec<PrototypeTable>,
}

/// Output layout of a training run.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn losses(&self) -> PathBuf {
        self.0.join("losses.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.0.join("checkpoints/best.ckpt")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.0.join("checkpoints/final.ckpt")
    }
    pub fn prototypes(&self, domain: &str) -> PathBuf {
        self.0.join("prototypes").join(format!("{domain}.txt"))
    }
    pub fn final_prototypes(&self, domain: &str) -> PathBuf {
        self.0.join("prototypes/final").join(format!("{domain}.txt"))
    }
    pub fn projection(&self) -> PathBuf {
        self.0.join("prototypes/projection.txt")
    }
    pub fn summary(&self) -> PathBuf {
        self.0.join("summary.json")
    }
}

fn mkparent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    mkparent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn source_index(cfg: &TrainConfig, domains: &[&DomainDataset]) -> Result<usize> {
    match &cfg.source_domain {
        None => Ok(0),
        Some(id) => domains
            .iter()
            .position(|d| d.id() == id)
            .ok_or_else(|| Error::UnknownDomain(id.clone())),
    }
}

fn run_meta(cfg: &TrainConfig, step: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("mode".to_string(), cfg.mode.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("step".to_string(), step.to_string()),
    ])
}

/// Joint training in `cfg.mode`. Modes other than train-on-source start
/// from `prepared` (computed here when absent); the embedding head is
/// initialized to the prototype PCA map. Validation runs every
/// `cfg.eval_every()` steps and after the last; the best checkpoint is the
/// first step reaching the highest average mIoU. With `out`, logs,
/// checkpoints, prototypes and a summary are written there.
pub fn train_universal(
    cfg: &TrainConfig,
    domains: &[&DomainDataset],
    prepared: Option<&Prepared>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::Config("no domains".into()));
    }
    let (alpha, beta) = cfg.effective_weights();
    let run = out.map(|p| RunDir(p.to_path_buf()));

    let owned;
    let (mut params, tables, active): (ModelParams, Vec<PrototypeTable>, Vec<usize>) = match cfg.mode {
        Mode::TrainOnSource => {
            let mc = cfg.model_config(domain_heads(domains));
            (ModelParams::random(mc, cfg.seed)?, Vec::new(), vec![source_index(cfg, domains)?])
        }
        _ => {
            let p = match prepared {
                Some(p) => p,
                None => {
                    owned = prepare(cfg, domains)?;
                    &owned
                }
            };
            let mut params = p.pretrained.clone();
            if params.config() != &cfg.model_config(domain_heads(domains)) {
                return Err(Error::Config("prepared model does not match the configuration".into()));
            }
            params.init_embed_from_projection(&p.projection.components, &p.projection.mean)?;
            (params, p.tables.clone(), (0..domains.len()).collect())
        }
    };
    let initial_tables = tables.clone();
    let mut tables = tables;

    if let Some(run) = &run {
        fs::create_dir_all(&run.0).map_err(|e| Error::io(&run.0, e))?;
        write_text(&run.0.join("config.toml"), &cfg.to_toml())?;
        if let Some(t) = tables.first() {
            for t in &tables {
                mkparent(&run.prototypes(t.domain()))?;
                write_prototypes(&run.prototypes(t.domain()), t)?;
            }
            if let Some(p) = t.projection() {
                write_projection(&run.projection(), p)?;
            }
        }
    }

    let subset: Vec<&DomainDataset> = active.iter().map(|&i| domains[i]).collect();
    let crops = active.iter().map(|&i| cfg.crop_for(i)).collect();
    let mut sampler = JointSampler::new(&subset, cfg.batch_size, cfg.labeled_ratio, crops, cfg.norm, true)?;
    let ignores: Vec<u8> = subset.iter().map(|d| d.label_space().ignore_index()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STREAM_TRAIN);
    let mut sgd = Sgd::new(&params, cfg.momentum);
    let ema = cfg.theta < 1.0 && !tables.is_empty();

    let entropy_start = mean_prediction_entropy(&params, domains, cfg.entropy_probe, &cfg.norm)?;
    let eval_every = cfg.eval_every();
    let mut losses = Vec::with_capacity(cfg.max_iters);
    let mut metrics = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut loss_log = String::new();
    let mut metric_log = String::new();

    for it in 0..cfg.max_iters {
        let batch = sampler.next_batch(&subset, &mut rng);
        let mut grads = params.zeros_like();
        let setup = UnsupSetup {
            mode: cfg.mode,
            alpha,
            beta,
            tables: &tables,
        };
        let (terms, feats) = step_gradients(&params, &batch, &active, &ignores, setup, Some(&mut grads), ema)?;
        let report = terms_to_report(&terms, alpha, beta, it)?;
        let lr = poly_lr(cfg.lr, it, cfg.max_iters, cfg.poly_power)?;
        sgd.step(&mut params, &grads, lr)?;
        if ema {
            for (t, rows) in tables.iter_mut().zip(&feats) {
                if rows.is_empty() {
                    continue;
                }
                let proj = t.projection().expect("prepared tables carry their projection");
                let projected = proj.project_rows(rows, rows.len() / proj.input_dim);
                let fresh = fresh_centroids(&projected, t)?;
                *t = ema_update(t, &fresh, cfg.theta)?;
            }
        }
        let line = LossLine {
            step: it,
            lr,
            l_sup: report.l_sup_per_domain.clone(),
            l_cross: report.l_cross,
            l_within: report.l_within,
            total: report.total,
            alpha,
            beta,
        };
        loss_log.push_str(&serde_json::to_string(&line).expect("loss line serializes"));
        loss_log.push('\n');
        losses.push(line);

        let step = it + 1;
        if step % eval_every == 0 || step == cfg.max_iters {
            let eval_params = if cfg.mode == Mode::TrainOnSource {
                with_fitted_decoders(cfg, &params, domains, &active)?
            } else {
                params.clone()
            };
            let (recs, avg) = evaluate_all(&eval_params, domains, &cfg.norm, step)?;
            for r in &recs {
                metric_log.push_str(&r.to_json_line());
            }
            metrics.extend(recs);
            log::info!("{} step {step}: average mIoU {avg:.4}", cfg.mode.name());
            if best.as_ref().map_or(true, |(_, b, _)| avg > *b) {
                best = Some((step, avg, eval_params));
            }
        }
    }

    let last = if cfg.mode == Mode::TrainOnSource {
        with_fitted_decoders(cfg, &params, domains, &active)?
    } else {
        params
    };
    let (best_step, best_avg, best_params) = match best {
        Some(b) => b,
        None => {
            let (_, avg) = evaluate_all(&last, domains, &cfg.norm, 0)?;
            (0, avg, last.clone())
        }
    };
    let final_avg = metrics
        .iter()
        .rev()
        .find(|r| r.step == cfg.max_iters)
        .map_or(best_avg, |r| r.average_miou);
    let entropy_end = mean_prediction_entropy(&last, domains, cfg.entropy_probe, &cfg.norm)?;
    let summary = TrainSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        best_step,
        best_average_miou: best_avg,
        final_average_miou: final_avg,
        entropy_start,
        entropy_end,
    };

    if let Some(run) = &run {
        write_text(&run.losses(), &loss_log)?;
        write_text(&run.metrics(), &metric_log)?;
        mkparent(&run.best_checkpoint())?;
        save_checkpoint(&run.best_checkpoint(), &best_params, &run_meta(cfg, best_step))?;
        save_checkpoint(&run.final_checkpoint(), &last, &run_meta(cfg, cfg.max_iters))?;
        for t in &tables {
            mkparent(&run.final_prototypes(t.domain()))?;
            write_prototypes(&run.final_prototypes(t.domain()), t)?;
        }
        let mut f = fs::File::create(run.summary()).map_err(|e| Error::io(run.summary(), e))?;
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        writeln!(f, "{text}").map_err(|e| Error::io(run.summary(), e))?;
    }

    Ok(TrainOutcome {
        summary,
        losses,
        metrics,
        best: best_params,
        last,
        initial_tables,
        final_tables: tables,
    })
}

/// Copy of `params` whose decoders for domains outside `trained` are refit
/// on the frozen encoder.
fn with_fitted_decoders(
    cfg: &TrainConfig,
    params: &ModelParams,
    domains: &[&DomainDataset],
    trained: &[usize],
) -> Result<ModelParams> {
    let mut p = params.clone();
    let lr = cfg.pretrain_lr.unwrap_or(cfg.lr);
    for (i, ds) in domains.iter().enumerate() {
        if !trained.contains(&i) {
            fit_decoder(&mut p, i, ds, cfg.decoder_fit_iters, lr, cfg.momentum, &cfg.norm)?;
        }
    }
    Ok(p)
}
