//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use uniseg::domain::Mask;
use uniseg::harness::{step_gradients, DomainBatch, JointBatch, Mode, UnsupSetup};
use uniseg::losses::{direct_ser_loss_with_grad, similarity_entropy, supervised_loss_with_grad, LossReport};
use uniseg::model::{Activation, DomainHead, ModelConfig, ModelParams};
use uniseg::prototypes::PrototypeTable;
use uniseg::Tensor4;

pub const FD_STEP: f64 = 1e-3;
pub const REL_FLOOR: f64 = 1e-3;

/// Relative error with a unit floor on the scale: `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor4 {
    let n = shape.iter().product();
    Tensor4::from_vec(shape, normal_vec(rng, n, scale)).unwrap()
}

/// Mask with values in `0..labels`, about one pixel in eight set to `ignore`.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, labels: usize, ignore: u8) -> Mask {
    let data = (0..h * w)
        .map(|_| if rng.gen_bool(0.125) { ignore } else { rng.gen_range(0..labels) as u8 })
        .collect();
    Mask::new(h, w, data).unwrap()
}

pub fn random_table(rng: &mut ChaCha8Rng, domain: &str, labels: usize, k: usize, d: usize) -> PrototypeTable {
    let names = (0..labels).map(|i| format!("l{i}")).collect();
    PrototypeTable::new(domain, names, d, k, normal_vec(rng, labels * k * d, 1.0))
        .unwrap()
        .normalized()
}

/// Two-domain toy model (3 and 4 labels) small enough for finite differences.
pub fn tiny_model(seed: u64, d: usize) -> ModelParams {
    let heads = vec![
        DomainHead {
            id: "a".into(),
            labels: (0..3).map(|i| format!("l{i}")).collect(),
        },
        DomainHead {
            id: "b".into(),
            labels: (0..4).map(|i| format!("l{i}")).collect(),
        },
    ];
    let cfg = ModelConfig {
        in_channels: 3,
        encoder_channels: vec![4, 5],
        encoder_strides: vec![2, 1],
        activation: Activation::Silu,
        embed_dim: d,
        domains: heads,
    };
    let mut p = ModelParams::random(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for b in p.buffers_mut() {
        for v in b.iter_mut() {
            *v += r.sample::<f64, _>(StandardNormal) * 0.1;
        }
    }
    p
}

/// Which objective a gradient case isolates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Supervised,
    Within,
    Cross,
    DirectSer,
}

pub struct ModelCase {
    pub params: ModelParams,
    pub batch: JointBatch,
    pub tables: Vec<PrototypeTable>,
    pub mode: Mode,
    pub alpha: f64,
    pub beta: f64,
}

/// Random batch of one labeled and one unlabeled image per domain, sizes
/// drawn from 5..=8.
pub fn model_case(term: Term, seed: u64) -> ModelCase {
    let mut r = rng(seed);
    let d = 3;
    let params = tiny_model(seed, d);
    let label_counts = [3usize, 4];
    let mut parts = Vec::new();
    for (i, &nl) in label_counts.iter().enumerate() {
        let mut part = DomainBatch {
            domain: i,
            labeled: Vec::new(),
            unlabeled: Vec::new(),
        };
        let (h, w) = (r.gen_range(5..=8), r.gen_range(5..=8));
        if term == Term::Supervised {
            let x = normal_vec(&mut r, 3 * h * w, 1.0);
            part.labeled.push((x, random_mask(&mut r, h, w, nl, 255)));
        } else {
            let x = normal_vec(&mut r, 3 * h * w, 1.0);
            part.unlabeled.push((x, (h, w)));
        }
        parts.push(part);
    }
    // K = 1 here: with several prototypes per label the max is not
    // differentiable where two of them tie, and a finite-difference step on
    // the encoder can straddle such a tie. K > 1 is covered on volumes.
    let k = 1;
    let tables = vec![
        random_table(&mut r, "a", 3, k, d),
        random_table(&mut r, "b", 4, k, d),
    ];
    let (mode, alpha, beta) = match term {
        Term::Supervised => (Mode::UnivBasic, 0.0, 0.0),
        Term::Within => (Mode::UnivFull, 0.0, 1.0),
        Term::Cross => (Mode::UnivCross, 1.0, 0.0),
        Term::DirectSer => (Mode::DirectSer, 0.0, 1.0),
    };
    ModelCase {
        params,
        batch: JointBatch { parts },
        tables,
        mode,
        alpha,
        beta,
    }
}

impl ModelCase {
    fn setup(&self) -> UnsupSetup<'_> {
        UnsupSetup {
            mode: self.mode,
            alpha: self.alpha,
            beta: self.beta,
            tables: &self.tables,
        }
    }

    pub fn objective(&self, params: &ModelParams) -> f64 {
        let (t, _) = step_gradients(params, &self.batch, &[0, 1], &[255, 255], self.setup(), None, false).unwrap();
        LossReport::weighted_sum(&t.sup, t.cross, t.within, self.alpha, self.beta)
    }

    pub fn analytic(&self) -> ModelParams {
        let mut g = self.params.zeros_like();
        step_gradients(&self.params, &self.batch, &[0, 1], &[255, 255], self.setup(), Some(&mut g), false).unwrap();
        g
    }
}

/// Max relative error between analytic parameter gradients and central
/// differences, over every parameter of the model.
pub fn model_grad_error(term: Term, seed: u64) -> f64 {
    let case = model_case(term, seed);
    let analytic: Vec<f64> = case.analytic().buffers().concat();
    let mut worst: f64 = 0.0;
    let mut idx = 0;
    let n_buffers = case.params.buffers().len();
    for b in 0..n_buffers {
        let len = case.params.buffers()[b].len();
        for j in 0..len {
            let mut p = case.params.clone();
            p.buffers_mut()[b][j] += FD_STEP;
            let up = case.objective(&p);
            p.buffers_mut()[b][j] -= 2.0 * FD_STEP;
            let down = case.objective(&p);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[idx], numeric));
            idx += 1;
        }
    }
    worst
}

/// Central differences of `f` at every coordinate of `x`.
fn numeric_grad(x: &Tensor4, f: impl Fn(&Tensor4) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.data().len());
    for i in 0..x.data().len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_STEP;
        let up = f(&p);
        p.data_mut()[i] -= 2.0 * FD_STEP;
        out.push((up - f(&p)) / (2.0 * FD_STEP));
    }
    out
}

fn max_err(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Gradient of the volume-level loss with respect to its input volume.
pub fn volume_grad_error(term: Term, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, h, w) = (2, r.gen_range(3..=8), r.gen_range(3..=8));
    match term {
        Term::Supervised => {
            let c = 4;
            let x = random_tensor(&mut r, [b, c, h, w], 2.0);
            let masks: Vec<Mask> = (0..b).map(|_| random_mask(&mut r, h, w, c, 255)).collect();
            let f = |t: &Tensor4| supervised_loss_with_grad(t, &masks, 255, false).unwrap().0.value;
            let g = supervised_loss_with_grad(&x, &masks, 255, true).unwrap().1.unwrap();
            max_err(g.data(), &numeric_grad(&x, f))
        }
        Term::Within | Term::Cross => {
            let d = 4;
            let k = if seed % 2 == 0 { 1 } else { 3 };
            let x = random_tensor(&mut r, [b, d, h, w], 1.5);
            let table = random_table(&mut r, "t", 5, k, d);
            let f = |t: &Tensor4| similarity_entropy(t, &table, false).unwrap().0;
            let g = similarity_entropy(&x, &table, true).unwrap().1.unwrap();
            max_err(g.data(), &numeric_grad(&x, f))
        }
        Term::DirectSer => {
            let x = random_tensor(&mut r, [b, 5, h, w], 2.0);
            let f = |t: &Tensor4| direct_ser_loss_with_grad(t, false).0;
            let g = direct_ser_loss_with_grad(&x, true).1.unwrap();
            max_err(g.data(), &numeric_grad(&x, f))
        }
    }
}

pub const TERMS: [Term; 4] = [Term::Supervised, Term::Within, Term::Cross, Term::DirectSer];

/// Runs `cases_per_term` seeded model-level and volume-level cases for
/// every term; returns the number of cases and the worst error.
pub fn gradient_audit(cases_per_term: u64) -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for term in TERMS {
        for s in 0..cases_per_term {
            worst = worst.max(model_grad_error(term, 100 + s));
            worst = worst.max(volume_grad_error(term, 200 + s));
            n += 2;
        }
    }
    (n, worst)
}

/// Per-pixel tally of `(gt, pred)` pairs.
pub fn brute_confusion(classes: usize, pairs: &[(Mask, Mask)], ignore: u8) -> Vec<u64> {
    let mut m = vec![0u64; classes * classes];
    for (pred, gt) in pairs {
        for y in 0..gt.h {
            for x in 0..gt.w {
                let g = gt.get(y, x);
                if g == ignore {
                    continue;
                }
                m[g as usize * classes + pred.get(y, x) as usize] += 1;
            }
        }
    }
    m
}

/// IoU per class straight from the definition: TP / (TP + FP + FN).
pub fn brute_iou(classes: usize, m: &[u64]) -> Vec<Option<f64>> {
    (0..classes)
        .map(|k| {
            let tp = m[k * classes + k];
            let mut fp = 0;
            let mut fn_ = 0;
            for j in 0..classes {
                if j != k {
                    fp += m[j * classes + k];
                    fn_ += m[k * classes + j];
                }
            }
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Similarity of one pixel's embedding to every label: best dot product.
pub fn brute_similarity(emb: &Tensor4, n: usize, y: usize, x: usize, t: &PrototypeTable) -> Vec<f64> {
    (0..t.num_labels())
        .map(|l| {
            (0..t.k())
                .map(|j| (0..t.dim()).map(|c| emb.at(n, c, y, x) * t.vector(l, j)[c]).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Entropy of softmax(v) computed the long way.
pub fn brute_softmax_entropy(v: &[f64]) -> f64 {
    let z: f64 = v.iter().map(|x| x.exp()).sum();
    -v.iter()
        .map(|x| {
            let p = x.exp() / z;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations; returns
/// eigenvalues (descending) and matching unit eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let vecs = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (vals, vecs)
}

/// Minimum k-means inertia over every assignment of `points` to `k`
/// non-empty clusters (exhaustive; keep n small).
pub fn exhaustive_inertia(points: &[f64], d: usize, k: usize) -> f64 {
    let n = points.len() / d;
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    // first point is pinned to cluster 0 to skip relabelings
    let total = k.pow((n - 1) as u32);
    for code in 0..total {
        let mut c = code;
        for a in assign.iter_mut().skip(1) {
            *a = c % k;
            c /= k;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[a * d + j] += points[i * d + j];
            }
        }
        if counts.iter().any(|&c| c == 0) {
            continue;
        }
        let mut inertia = 0.0;
        for (i, &a) in assign.iter().enumerate() {
            for j in 0..d {
                let m = sums[a * d + j] / counts[a] as f64;
                inertia += (points[i * d + j] - m).powi(2);
            }
        }
        best = best.min(inertia);
    }
    best
}
