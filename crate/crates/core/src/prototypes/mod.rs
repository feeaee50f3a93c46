//! Label embeddings ("prototypes"): per-label unit vectors in the shared
//! `d`-dimensional embedding space.
//!
//! Construction: harvest encoder features of labeled pixels, fit a PCA down
//! to `d`, then take per-class centroids (`K = 1`) or per-class k-means
//! centres (`K > 1`), each normalized to unit length. Tables can be blended
//! toward fresh centroids with an exponential moving average, or replaced by
//! word vectors read from a file.

mod harvest;
mod io;
mod kmeans;
mod pca;

pub use harvest::{construct_prototypes, harvest_features, nearest_cell_pixel, Harvest, PrototypeBuild};
pub use io::{
    format_prototypes, load_word_vectors, parse_prototypes, read_projection, read_prototypes, write_projection, write_prototypes,
    WordVectorReport,
};
pub use kmeans::{kmeans, KMeansFit};
pub use pca::{fit_pca, Projection};

use serde::{Deserialize, Serialize};

use crate::domain::LabelSpace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    domain: String,
    labels: Vec<String>,
    dim: usize,
    k: usize,
    /// `[labels, k, dim]`
    vectors: Vec<f64>,
    projection: Option<Projection>,
    theta: f64,
}

impl PrototypeTable {
    /// Builds a table; vectors are stored as given (see [`normalized`](Self::normalized)).
    pub fn new(domain: impl Into<String>, labels: Vec<String>, dim: usize, k: usize, vectors: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || labels.is_empty() {
            return Err(Error::InvalidArgument(
                "prototype table needs labels, K >= 1 and d >= 1".into(),
            ));
        }
        if vectors.len() != labels.len() * k * dim {
            return Err(Error::Shape(format!(
                "{} values for {} labels x {k} x {dim}",
                vectors.len(),
                labels.len()
            )));
        }
        Ok(PrototypeTable {
            domain: domain.into(),
            labels,
            dim,
            k,
            vectors,
            projection: None,
            theta: 1.0,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// All prototypes, `[labels * k, dim]` row-major.
    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, label: usize, j: usize) -> &[f64] {
        let start = (label * self.k + j) * self.dim;
        &self.vectors[start..start + self.dim]
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn with_projection(mut self, p: Projection) -> Result<Self> {
        if p.dim != self.dim {
            return Err(Error::Shape(format!(
                "projection dim {} vs table dim {}",
                p.dim, self.dim
            )));
        }
        self.projection = Some(p);
        Ok(self)
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn with_theta(mut self, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
        }
        self.theta = theta;
        Ok(self)
    }

    /// Every prototype scaled to unit L2 norm; zero vectors stay zero.
    pub fn normalized(mut self) -> Self {
        for v in self.vectors.chunks_mut(self.dim) {
            normalize(v);
        }
        self
    }

    /// Same table contents (labels, shape, values), ignoring projection and θ.
    pub fn same_vectors(&self, other: &PrototypeTable) -> bool {
        self.domain == other.domain
            && self.labels == other.labels
            && self.dim == other.dim
            && self.k == other.k
            && self.vectors == other.vectors
    }
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Classes that could not be estimated from data.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CentroidReport {
    /// Labels with no samples; their prototype is the global mean direction.
    pub empty_classes: Vec<usize>,
    /// Labels with fewer samples than K; their K prototypes repeat the mean.
    pub underfilled_classes: Vec<usize>,
}

fn group_by_label(projected: &[f64], labels: &[usize], d: usize, num_labels: usize) -> Result<Vec<Vec<f64>>> {
    if projected.len() != labels.len() * d {
        return Err(Error::Shape(format!(
            "{} projected values for {} labels of width {d}",
            projected.len(),
            labels.len()
        )));
    }
    let mut groups = vec![Vec::new(); num_labels];
    for (row, &l) in projected.chunks(d).zip(labels) {
        if l >= num_labels {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{num_labels}")));
        }
        groups[l].extend_from_slice(row);
    }
    Ok(groups)
}

fn global_direction(projected: &[f64], d: usize) -> Vec<f64> {
    let n = projected.len() / d;
    let mut m = vec![0.0; d];
    for row in projected.chunks(d) {
        for (a, &b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    if n > 0 {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    normalize(&mut m);
    if m.iter().all(|&v| v == 0.0) {
        m[0] = 1.0;
    }
    m
}

/// Per-class means of `projected` (`[N, d]`), unit-normalized (`K = 1`).
pub fn compute_centroids(
    projected: &[f64],
    labels: &[usize],
    d: usize,
    label_space: &LabelSpace,
    domain: &str,
) -> Result<(PrototypeTable, CentroidReport)> {
    let nl = label_space.len();
    let groups = group_by_label(projected, labels, d, nl)?;
    let mut report = CentroidReport::default();
    let mut vectors = Vec::with_capacity(nl * d);
    let mut fallback = None;
    for (l, g) in groups.iter().enumerate() {
        let n = g.len() / d;
        if n == 0 {
            report.empty_classes.push(l);
            vectors.extend(fallback.get_or_insert_with(|| global_direction(projected, d)).iter());
            continue;
        }
        let mut m = vec![0.0; d];
        for row in g.chunks(d) {
            for (a, &b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        vectors.extend(m);
    }
    let table = PrototypeTable::new(domain, label_space.names().to_vec(), d, 1, vectors)?.normalized();
    Ok((table, report))
}

/// `K` k-means centres per class, unit-normalized.
#[allow(clippy::too_many_arguments)]
pub fn kmeans_prototypes(
    projected: &[f64],
    labels: &[usize],
    d: usize,
    label_space: &LabelSpace,
    domain: &str,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(PrototypeTable, CentroidReport)> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let nl = label_space.len();
    let groups = group_by_label(projected, labels, d, nl)?;
    let mut report = CentroidReport::default();
    let mut vectors = Vec::with_capacity(nl * k * d);
    for (l, g) in groups.iter().enumerate() {
        if g.is_empty() {
            report.empty_classes.push(l);
            vectors.extend(global_direction(projected, d).repeat(k));
            continue;
        }
        let fit = kmeans(g, d, k, seed.wrapping_add(l as u64), restarts, 100)?;
        if fit.degenerate {
            report.underfilled_classes.push(l);
        }
        vectors.extend(fit.centroids);
    }
    let table = PrototypeTable::new(domain, label_space.names().to_vec(), d, k, vectors)?.normalized();
    Ok((table, report))
}

/// Per-(label, prototype) means of the rows assigned to them, `None` where
/// nothing was assigned. Layout matches [`PrototypeTable::vectors`].
#[derive(Debug, Clone, PartialEq)]
pub struct FreshCentroids {
    pub dim: usize,
    pub centroids: Vec<Option<Vec<f64>>>,
}

/// Pseudo-labels each row of `projected` (`[N, d]`) with the prototype it
/// scores highest against (dot product) and averages per prototype.
pub fn fresh_centroids(projected: &[f64], table: &PrototypeTable) -> Result<FreshCentroids> {
    let d = table.dim();
    if projected.len() % d != 0 {
        return Err(Error::Shape(format!("{} values with width {d}", projected.len())));
    }
    let slots = table.num_labels() * table.k();
    let mut sums = vec![0.0; slots * d];
    let mut counts = vec![0usize; slots];
    for row in projected.chunks(d) {
        let mut best = (0, f64::NEG_INFINITY);
        for (s, proto) in table.vectors().chunks(d).enumerate() {
            let v: f64 = proto.iter().zip(row).map(|(a, b)| a * b).sum();
            if v > best.1 {
                best = (s, v);
            }
        }
        counts[best.0] += 1;
        for (a, &b) in sums[best.0 * d..(best.0 + 1) * d].iter_mut().zip(row) {
            *a += b;
        }
    }
    let centroids = (0..slots)
        .map(|s| {
            (counts[s] > 0).then(|| sums[s * d..(s + 1) * d].iter().map(|v| v / counts[s] as f64).collect())
        })
        .collect();
    Ok(FreshCentroids { dim: d, centroids })
}

/// `c <- normalize(theta * c + (1 - theta) * normalize(fresh))` for every
/// prototype with a fresh centroid. `theta = 1` returns the table untouched.
pub fn ema_update(table: &PrototypeTable, fresh: &FreshCentroids, theta: f64) -> Result<PrototypeTable> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta {theta} outside [0, 1]")));
    }
    if fresh.dim != table.dim() || fresh.centroids.len() != table.num_labels() * table.k() {
        return Err(Error::Shape(format!(
            "fresh centroids ({} x {}) vs table ({} x {})",
            fresh.centroids.len(),
            fresh.dim,
            table.num_labels() * table.k(),
            table.dim()
        )));
    }
    if theta == 1.0 {
        return Ok(table.clone());
    }
    let d = table.dim();
    let mut out = table.clone();
    for (slot, f) in fresh.centroids.iter().enumerate() {
        let Some(f) = f else { continue };
        if f.len() != d {
            return Err(Error::Shape(format!("fresh centroid of width {}", f.len())));
        }
        let mut f = f.clone();
        normalize(&mut f);
        let c = &mut out.vectors[slot * d..(slot + 1) * d];
        for (ci, fi) in c.iter_mut().zip(&f) {
            *ci = theta * *ci + (1.0 - theta) * fi;
        }
        normalize(c);
    }
    Ok(out)
}

/// EMA blend of two vectors without the final normalization.
pub fn ema_blend(previous: &[f64], fresh: &[f64], theta: f64) -> Vec<f64> {
    previous
        .iter()
        .zip(fresh)
        .map(|(c, f)| theta * c + (1.0 - theta) * f)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(n: usize) -> LabelSpace {
        LabelSpace::from_names(&(0..n).map(|i| format!("c{i}")).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn centroid_examples() {
        let (t, r) = compute_centroids(&[3.0, 4.0, 1.0, 0.0, 0.0, 1.0], &[0, 1, 1], 2, &space(2), "a").unwrap();
        assert!(r.empty_classes.is_empty());
        assert!((t.vector(0, 0)[0] - 0.6).abs() < 1e-15);
        assert!((t.vector(0, 0)[1] - 0.8).abs() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((t.vector(1, 0)[0] - h).abs() < 1e-15);
        assert!((t.vector(1, 0)[1] - h).abs() < 1e-15);
    }

    #[test]
    fn empty_class_gets_global_direction_and_is_flagged() {
        let (t, r) = compute_centroids(&[1.0, 0.0, 3.0, 0.0], &[0, 0], 2, &space(3), "a").unwrap();
        assert_eq!(r.empty_classes, vec![1, 2]);
        assert_eq!(t.vector(1, 0), &[1.0, 0.0]);
    }

    #[test]
    fn ema_examples() {
        let t = PrototypeTable::new("a", vec!["x".into(), "y".into()], 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let fresh = FreshCentroids {
            dim: 2,
            centroids: vec![Some(vec![0.0, 1.0]), None],
        };
        assert_eq!(ema_update(&t, &fresh, 1.0).unwrap(), t);
        let replaced = ema_update(&t, &fresh, 0.0).unwrap();
        assert_eq!(replaced.vector(0, 0), &[0.0, 1.0]);
        assert_eq!(replaced.vector(1, 0), &[0.0, 1.0]);
        assert_eq!(ema_blend(&[1.0, 0.0], &[0.0, 1.0], 0.5), vec![0.5, 0.5]);
        let half = ema_update(&t, &fresh, 0.5).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((half.vector(0, 0)[0] - h).abs() < 1e-15);
        assert!(ema_update(&t, &fresh, 1.5).is_err());
        let bad = FreshCentroids {
            dim: 3,
            centroids: vec![None, None],
        };
        assert!(ema_update(&t, &bad, 0.5).is_err());
    }

    #[test]
    fn fresh_centroids_use_argmax_assignment() {
        let t = PrototypeTable::new("a", vec!["x".into(), "y".into()], 2, 1, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = fresh_centroids(&[2.0, 1.0, 4.0, 0.0, 0.0, 3.0], &t).unwrap();
        assert_eq!(f.centroids[0], Some(vec![3.0, 0.5]));
        assert_eq!(f.centroids[1], Some(vec![0.0, 3.0]));
        let f = fresh_centroids(&[2.0, 1.0], &t).unwrap();
        assert_eq!(f.centroids[1], None);
    }

    #[test]
    fn kmeans_k1_is_mean() {
        let pts = [1.0, 2.0, 3.0, 5.0, -1.0, 0.5, 0.25, 7.0];
        let fit = kmeans(&pts, 2, 1, 1, 3, 50).unwrap();
        assert!((fit.centroids[0] - 0.8125).abs() < 1e-9);
        assert!((fit.centroids[1] - 3.625).abs() < 1e-9);
        assert!(kmeans(&pts, 2, 0, 1, 3, 50).is_err());
    }

    #[test]
    fn kmeans_with_too_few_points_duplicates_mean() {
        let fit = kmeans(&[0.0, 2.0], 1, 3, 0, 1, 10).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.centroids, vec![1.0, 1.0, 1.0]);
    }
}
