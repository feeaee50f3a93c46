use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compute_centroids, fit_pca, kmeans_prototypes, CentroidReport, PrototypeTable, Projection};
use crate::domain::{DomainDataset, InputNorm};
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Labeled encoder features: `features` is `[N, dim]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    /// Encoder cells seen per class before capping.
    pub available: Vec<usize>,
}

impl Harvest {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Classes with no harvested cell.
    pub fn missing_classes(&self) -> Vec<usize> {
        self.available
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(c, _)| c)
            .collect()
    }
}

/// Image pixel that labels encoder cell `cell` (nearest-neighbour mask
/// downsampling with half-cell offset).
pub fn nearest_cell_pixel(cell: usize, stride: usize, size: usize) -> usize {
    (cell * stride + stride / 2).min(size - 1)
}

/// Encoder features of the domain's labeled pixels at encoder resolution,
/// at most `cap` per class chosen by seeded reservoir sampling. Ignore
/// pixels are skipped. Images are visited in dataset order.
pub fn harvest_features(
    model: &ModelParams,
    dataset: &DomainDataset,
    cap: usize,
    seed: u64,
    norm: &InputNorm,
) -> Result<Harvest> {
    let cfg = model.config();
    let c = cfg.feature_channels();
    let stride = cfg.output_stride();
    let nl = dataset.num_labels();
    let ignore = dataset.label_space().ignore_index();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoirs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); nl];
    let mut seen = vec![0usize; nl];
    for s in dataset.labeled() {
        let (h, w) = (s.image.h, s.image.w);
        let x = norm.apply(&s.image);
        let (feats, _) = model.encode_sample(&x, h, w);
        let (fh, fw) = cfg.feature_hw(h, w);
        for cy in 0..fh {
            let py = nearest_cell_pixel(cy, stride, h);
            for cx in 0..fw {
                let px = nearest_cell_pixel(cx, stride, w);
                let l = s.mask.get(py, px);
                if l == ignore {
                    continue;
                }
                let l = l as usize;
                seen[l] += 1;
                let slot = if reservoirs[l].len() < cap {
                    reservoirs[l].push(Vec::new());
                    Some(reservoirs[l].len() - 1)
                } else {
                    let r = rng.gen_range(0..seen[l]);
                    (r < cap).then_some(r)
                };
                if let Some(slot) = slot {
                    reservoirs[l][slot] = (0..c).map(|ch| feats[(ch * fh + cy) * fw + cx]).collect();
                }
            }
        }
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (l, res) in reservoirs.into_iter().enumerate() {
        for f in res {
            features.extend(f);
            labels.push(l);
        }
    }
    Ok(Harvest {
        dim: c,
        features,
        labels,
        available: seen,
    })
}

/// Settings for [`construct_prototypes`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBuild {
    pub dim: usize,
    pub k: usize,
    pub cap_per_class: usize,
    pub seed: u64,
    pub kmeans_restarts: usize,
    pub theta: f64,
    pub norm: InputNorm,
}

/// Builds one table per domain in a shared space: features from every
/// domain are harvested through `model`'s encoder, one PCA is fitted on the
/// pooled features, and each domain's centroids are taken in that space.
pub fn construct_prototypes(
    model: &ModelParams,
    domains: &[&DomainDataset],
    build: &PrototypeBuild,
) -> Result<(Vec<PrototypeTable>, Projection, Vec<CentroidReport>)> {
    let c = model.config().feature_channels();
    if build.dim > c {
        return Err(Error::InvalidArgument(format!(
            "prototype dim {} exceeds encoder channels {c}",
            build.dim
        )));
    }
    let harvests = domains
        .iter()
        .enumerate()
        .map(|(i, ds)| harvest_features(model, ds, build.cap_per_class, build.seed.wrapping_add(i as u64), &build.norm))
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = harvests.iter().flat_map(|h| h.features.iter().copied()).collect();
    let n: usize = harvests.iter().map(Harvest::len).sum();
    let projection = fit_pca(&pooled, n, c, build.dim)?;
    let mut tables = Vec::with_capacity(domains.len());
    let mut reports = Vec::with_capacity(domains.len());
    for (ds, h) in domains.iter().zip(&harvests) {
        let projected = projection.project_rows(&h.features, h.len());
        let (table, report) = if build.k == 1 {
            compute_centroids(&projected, &h.labels, build.dim, ds.label_space(), ds.id())?
        } else {
            kmeans_prototypes(
                &projected,
                &h.labels,
                build.dim,
                ds.label_space(),
                ds.id(),
                build.k,
                build.seed,
                build.kmeans_restarts,
            )?
        };
        tables.push(table.with_projection(projection.clone())?.with_theta(build.theta)?);
        reports.push(report);
    }
    Ok((tables, projection, reports))
}
