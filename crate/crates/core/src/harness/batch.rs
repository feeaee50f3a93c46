//! Seeded joint mini-batches across domains.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{DomainDataset, Image, InputNorm, Mask};
use crate::error::{Error, Result};

/// One domain's share of a joint batch; all images share `hw`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub domain: usize,
    /// Normalized planar images with their masks.
    pub labeled: Vec<(Vec<f64>, Mask)>,
    /// Normalized image with its `(h, w)`.
    pub unlabeled: Vec<(Vec<f64>, (usize, usize))>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointBatch {
    pub parts: Vec<DomainBatch>,
}

/// Endless reshuffled pass over `0..n`.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Cycler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Option<usize> {
        if self.order.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }
}

/// How many samples each domain contributes, and how many of those are
/// labeled: `batch_size` splits evenly (remainder to the first domains) and
/// each share splits by `labeled_ratio`, rounded half up.
pub fn batch_composition(batch_size: usize, n_domains: usize, labeled_ratio: f64) -> Vec<(usize, usize)> {
    (0..n_domains)
        .map(|i| {
            let share = batch_size / n_domains + usize::from(i < batch_size % n_domains);
            let lab = ((share as f64 * labeled_ratio) + 0.5).floor() as usize;
            let lab = lab.min(share);
            (lab, share - lab)
        })
        .collect()
}

/// Draws joint batches with per-epoch reshuffling, random crops and
/// horizontal flips, all from one seeded generator.
#[derive(Debug, Clone)]
pub struct JointSampler {
    composition: Vec<(usize, usize)>,
    crops: Vec<[usize; 2]>,
    labeled: Vec<Cycler>,
    unlabeled: Vec<Cycler>,
    norm: InputNorm,
}

impl JointSampler {
    /// `require_labeled` makes an empty labeled split an error (supervised modes).
    pub fn new(
        domains: &[&DomainDataset],
        batch_size: usize,
        labeled_ratio: f64,
        crops: Vec<[usize; 2]>,
        norm: InputNorm,
        require_labeled: bool,
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::InvalidArgument("no domains to sample".into()));
        }
        if crops.len() != domains.len() {
            return Err(Error::InvalidArgument("one crop size per domain required".into()));
        }
        let composition = batch_composition(batch_size, domains.len(), labeled_ratio);
        for (ds, &(lab, _)) in domains.iter().zip(&composition) {
            if require_labeled && lab > 0 && ds.n_labeled() == 0 {
                return Err(Error::InvalidArgument(format!(
                    "domain {} has an empty labeled split",
                    ds.id()
                )));
            }
        }
        Ok(JointSampler {
            composition,
            crops,
            labeled: domains.iter().map(|d| Cycler::new(d.n_labeled())).collect(),
            unlabeled: domains.iter().map(|d| Cycler::new(d.n_unlabeled())).collect(),
            norm,
        })
    }

    pub fn composition(&self) -> &[(usize, usize)] {
        &self.composition
    }

    pub fn next_batch(&mut self, domains: &[&DomainDataset], rng: &mut ChaCha8Rng) -> JointBatch {
        let mut parts = Vec::with_capacity(domains.len());
        for (i, ds) in domains.iter().enumerate() {
            let (n_lab, n_unl) = self.composition[i];
            let [ch, cw] = self.crops[i];
            let mut part = DomainBatch {
                domain: i,
                labeled: Vec::with_capacity(n_lab),
                unlabeled: Vec::with_capacity(n_unl),
            };
            for _ in 0..n_lab {
                let Some(idx) = self.labeled[i].next(rng) else { break };
                let s = &ds.labeled()[idx];
                let (win, flip) = crop_window(s.image.h, s.image.w, ch, cw, rng);
                let img = crop_image(&s.image, win, flip);
                let mask = crop_mask(&s.mask, win, flip);
                part.labeled.push((self.norm.apply(&img), mask));
            }
            for _ in 0..n_unl {
                let Some(idx) = self.unlabeled[i].next(rng) else { break };
                let s = &ds.unlabeled()[idx];
                let (win, flip) = crop_window(s.image.h, s.image.w, ch, cw, rng);
                part.unlabeled.push((self.norm.apply(&crop_image(&s.image, win, flip)), (win.2, win.3)));
            }
            parts.push(part);
        }
        JointBatch { parts }
    }
}

/// `(y0, x0, h, w)` of a random crop no larger than the image, plus a
/// coin-flip for horizontal mirroring.
fn crop_window(h: usize, w: usize, ch: usize, cw: usize, rng: &mut ChaCha8Rng) -> ((usize, usize, usize, usize), bool) {
    let (ch, cw) = (ch.min(h), cw.min(w));
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let flip = rng.gen_bool(0.5);
    ((y0, x0, ch, cw), flip)
}

fn crop_image(img: &Image, (y0, x0, ch, cw): (usize, usize, usize, usize), flip: bool) -> Image {
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in 0..ch {
            for x in 0..cw {
                let sx = if flip { x0 + cw - 1 - x } else { x0 + x };
                data.push(img.get(c, y0 + y, sx));
            }
        }
    }
    Image { h: ch, w: cw, data }
}

fn crop_mask(m: &Mask, (y0, x0, ch, cw): (usize, usize, usize, usize), flip: bool) -> Mask {
    let mut data = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        for x in 0..cw {
            let sx = if flip { x0 + cw - 1 - x } else { x0 + x };
            data.push(m.get(y0 + y, sx));
        }
    }
    Mask { h: ch, w: cw, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_examples() {
        assert_eq!(batch_composition(10, 2, 0.5), vec![(3, 2), (3, 2)]);
        assert_eq!(batch_composition(10, 2, 1.0), vec![(5, 0), (5, 0)]);
        assert_eq!(batch_composition(7, 2, 0.0), vec![(0, 4), (0, 3)]);
        let total: usize = batch_composition(10, 3, 0.5).iter().map(|(a, b)| a + b).sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = Image::new(1, 3, vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = crop_image(&img, (0, 0, 1, 3), true);
        assert_eq!(&out.data[..3], &[0.3, 0.2, 0.1]);
        let m = Mask::new(1, 3, vec![1, 2, 3]).unwrap();
        assert_eq!(crop_mask(&m, (0, 1, 1, 2), true).data, vec![3, 2]);
    }
}
