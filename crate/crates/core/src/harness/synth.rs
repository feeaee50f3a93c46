//! Procedural two-domain street-scene benchmark.
//!
//! Each image is a sky band on top, a ground band at the bottom and a middle
//! band split into vertical segments of the remaining classes. Band heights
//! and segment widths are drawn around each class's target pixel
//! proportion. Classes render with a class-specific texture; domains differ
//! in palette, noise level and texture scale, and every image gets its own
//! illumination gain and tint. Generation is a pure function of the seed.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{DomainDataset, Image, LabelSpace, LabeledSample, Mask, UnlabeledSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Sky,
    Ground,
    Blocks,
    Pole,
    Sign,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub generator: Generator,
    /// Target share of all pixels.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub id: String,
    pub classes: Vec<SynthClass>,
    /// Per-channel colour multiplier.
    pub palette: [f64; 3],
    /// Std-dev of additive per-pixel noise.
    pub noise: f64,
    /// Multiplier on texture periods.
    pub texture_scale: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub domains: Vec<SynthDomain>,
}

fn class(name: &str, generator: Generator, proportion: f64) -> SynthClass {
    SynthClass {
        name: name.into(),
        generator,
        proportion,
    }
}

impl SynthSpec {
    /// 64x64 images; a 5-label and a 4-label domain sharing sky, ground and
    /// blocks; 20 labeled, 500 unlabeled and 30 validation images each.
    pub fn benchmark() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            domains: vec![
                SynthDomain {
                    id: "city".into(),
                    classes: vec![
                        class("sky", Generator::Sky, 0.30),
                        class("ground", Generator::Ground, 0.35),
                        class("blocks", Generator::Blocks, 0.20),
                        class("pole", Generator::Pole, 0.05),
                        class("sign", Generator::Sign, 0.10),
                    ],
                    palette: [1.0, 1.0, 1.0],
                    noise: 0.04,
                    texture_scale: 1.0,
                    n_labeled: 20,
                    n_unlabeled: 500,
                    n_val: 30,
                },
                SynthDomain {
                    id: "village".into(),
                    classes: vec![
                        class("sky", Generator::Sky, 0.30),
                        class("ground", Generator::Ground, 0.35),
                        class("blocks", Generator::Blocks, 0.20),
                        class("tree", Generator::Tree, 0.15),
                    ],
                    palette: [1.12, 0.96, 0.78],
                    noise: 0.07,
                    texture_scale: 1.5,
                    n_labeled: 20,
                    n_unlabeled: 500,
                    n_val: 30,
                },
            ],
        }
    }

    /// Same layout with different split sizes and image size.
    pub fn scaled(height: usize, width: usize, n_labeled: usize, n_unlabeled: usize, n_val: usize) -> Self {
        let mut s = Self::benchmark();
        s.height = height;
        s.width = width;
        for d in &mut s.domains {
            d.n_labeled = n_labeled;
            d.n_unlabeled = n_unlabeled;
            d.n_val = n_val;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.height < 16 || self.width < 16 {
            return bad("images must be at least 16x16".into());
        }
        if self.domains.is_empty() {
            return bad("no domains".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return bad(format!("duplicate domain {}", d.id));
            }
            let count = |g: Generator| d.classes.iter().filter(|c| c.generator == g).count();
            if count(Generator::Sky) != 1 || count(Generator::Ground) != 1 {
                return bad(format!("{}: exactly one sky and one ground class required", d.id));
            }
            if d.classes.len() < 3 {
                return bad(format!("{}: need a middle class besides sky and ground", d.id));
            }
            if d.classes.iter().any(|c| !(c.proportion > 0.0)) {
                return bad(format!("{}: proportions must be positive", d.id));
            }
            let total: f64 = d.classes.iter().map(|c| c.proportion).sum();
            if (total - 1.0).abs() > 1e-6 {
                return bad(format!("{}: proportions sum to {total}", d.id));
            }
            if !(d.noise >= 0.0) || !(d.texture_scale > 0.0) {
                return bad(format!("{}: noise/texture_scale out of range", d.id));
            }
        }
        Ok(())
    }
}

/// Per-image appearance draws.
struct Look {
    gain: f64,
    tint: [f64; 3],
    blocks: [f64; 3],
    sign: [f64; 3],
    tree: [f64; 3],
    sky: [f64; 3],
    ground: [f64; 3],
    phase: [f64; 4],
}

fn render(d: &SynthDomain, h: usize, w: usize, rng: &mut ChaCha8Rng) -> (Image, Mask) {
    let find = |g: Generator| d.classes.iter().position(|c| c.generator == g).expect("validated");
    let (sky, ground) = (find(Generator::Sky), find(Generator::Ground));
    let mids: Vec<usize> = (0..d.classes.len()).filter(|&i| i != sky && i != ground).collect();

    let sky_h = d.classes[sky].proportion * h as f64 * rng.gen_range(0.85..1.15);
    let ground_h = d.classes[ground].proportion * h as f64 * rng.gen_range(0.85..1.15);
    let (amp_s, per_s, ph_s) = (rng.gen_range(0.5..2.0), rng.gen_range(16.0..40.0), rng.gen_range(0.0..2.0 * PI));
    let (amp_g, per_g, ph_g) = (rng.gen_range(0.5..2.0), rng.gen_range(16.0..40.0), rng.gen_range(0.0..2.0 * PI));

    // middle segments: (class, weight)
    let mid_total: f64 = mids.iter().map(|&c| d.classes[c].proportion).sum();
    let mut segs: Vec<(usize, f64)> = Vec::new();
    for &c in &mids {
        let n = rng.gen_range(1..=2);
        for _ in 0..n {
            segs.push((c, d.classes[c].proportion / mid_total / n as f64 * rng.gen_range(0.8..1.2)));
        }
    }
    segs.shuffle(rng);
    let wsum: f64 = segs.iter().map(|s| s.1).sum();
    let mut column_class = vec![0usize; w];
    let mut acc = 0.0;
    let mut start = 0usize;
    for (i, &(c, wt)) in segs.iter().enumerate() {
        acc += wt / wsum;
        let end = if i + 1 == segs.len() { w } else { ((acc * w as f64).round() as usize).min(w) };
        for col in column_class.iter_mut().take(end).skip(start) {
            *col = c;
        }
        start = end.max(start);
    }

    let pick = |rng: &mut ChaCha8Rng, choices: &[[f64; 3]]| *choices.choose(rng).expect("non-empty");
    let look = Look {
        gain: rng.gen_range(0.6..1.4),
        tint: [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)],
        blocks: [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)],
        sign: pick(rng, &[[0.85, 0.2, 0.2], [0.9, 0.8, 0.2], [0.2, 0.3, 0.85]]),
        tree: [rng.gen_range(0.1..0.3), rng.gen_range(0.45..0.65), rng.gen_range(0.1..0.3)],
        sky: [rng.gen_range(0.45..0.65), rng.gen_range(0.62..0.82), rng.gen_range(0.8..1.0)],
        ground: [rng.gen_range(0.3..0.55), rng.gen_range(0.3..0.5), rng.gen_range(0.28..0.45)],
        phase: [
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..2.0 * PI),
            rng.gen_range(0.0..8.0),
            rng.gen_range(0.0..8.0),
        ],
    };

    let mut mask = vec![0u8; h * w];
    let mut data = vec![0f32; 3 * h * w];
    let s = d.texture_scale;
    for y in 0..h {
        for x in 0..w {
            let xf = x as f64;
            let sky_line = sky_h + amp_s * (2.0 * PI * xf / per_s + ph_s).sin();
            let ground_line = h as f64 - ground_h + amp_g * (2.0 * PI * xf / per_g + ph_g).sin();
            let yf = y as f64 + 0.5;
            let c = if yf < sky_line {
                sky
            } else if yf >= ground_line {
                ground
            } else {
                column_class[x]
            };
            mask[y * w + x] = c as u8;
            let base = texture(d.classes[c].generator, &look, x, y, h, s);
            for ch in 0..3 {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * d.noise;
                let v = base[ch] * d.palette[ch] * look.gain + look.tint[ch] + noise;
                let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                data[(ch * h + y) * w + x] = q as f32;
            }
        }
    }
    (Image { h, w, data }, Mask { h, w, data: mask })
}

fn texture(g: Generator, look: &Look, x: usize, y: usize, h: usize, s: f64) -> [f64; 3] {
    let (xf, yf) = (x as f64, y as f64);
    match g {
        Generator::Sky => {
            let t = 0.85 + 0.3 * yf / h as f64;
            look.sky.map(|c| c * t)
        }
        Generator::Ground => {
            let period = 6.0 * s;
            let lane = ((xf + look.phase[2] * s) / period).floor() as i64 % 2 == 0
                && ((yf + look.phase[3]) / (3.0 * s)).floor() as i64 % 3 == 0;
            if lane {
                look.ground.map(|c| c + 0.2)
            } else {
                look.ground
            }
        }
        Generator::Blocks => {
            let row_h = 4.0 * s;
            let row = ((yf + look.phase[3]) / row_h).floor() as i64;
            let offset = if row % 2 == 0 { 0.0 } else { 4.0 * s };
            let mortar_y = (yf + look.phase[3]).rem_euclid(row_h) < 1.0;
            let mortar_x = (xf + offset + look.phase[2]).rem_euclid(8.0 * s) < 1.0;
            if mortar_y || mortar_x {
                look.blocks.map(|c| c * 0.55)
            } else {
                look.blocks
            }
        }
        Generator::Pole => {
            let shade = 0.85 + 0.15 * (xf * 1.3).sin();
            [0.33 * shade, 0.33 * shade, 0.36 * shade]
        }
        Generator::Sign => {
            if ((yf + look.phase[3]) / (3.0 * s)).floor() as i64 % 3 == 0 {
                [0.92, 0.92, 0.9]
            } else {
                look.sign
            }
        }
        Generator::Tree => {
            let b = 0.15
                * (xf * 0.9 / s + look.phase[0]).sin()
                * (yf * 0.7 / s + look.phase[1]).sin();
            look.tree.map(|c| (c + b).max(0.0))
        }
    }
}

fn split_rng(seed: u64, domain: usize, split: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(domain as u64 * 4 + split);
    r
}

/// Renders every domain of `spec`.
pub fn generate_synthetic_domains(seed: u64, spec: &SynthSpec) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    spec.domains
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let names: Vec<String> = d.classes.iter().map(|c| c.name.clone()).collect();
            let ls = LabelSpace::from_names(&names)?;
            let labeled_pairs = |split: u64, n: usize, prefix: &str| {
                let mut rng = split_rng(seed, di, split);
                (0..n)
                    .map(|i| {
                        let (image, mask) = render(d, h, w, &mut rng);
                        LabeledSample {
                            name: format!("{prefix}_{i:05}"),
                            image,
                            mask,
                        }
                    })
                    .collect::<Vec<_>>()
            };
            let labeled = labeled_pairs(0, d.n_labeled, "train");
            let val = labeled_pairs(2, d.n_val, "val");
            let mut rng = split_rng(seed, di, 1);
            let unlabeled = (0..d.n_unlabeled)
                .map(|i| UnlabeledSample {
                    name: format!("unl_{i:05}"),
                    image: render(d, h, w, &mut rng).0,
                })
                .collect();
            DomainDataset::new(d.id.clone(), ls, labeled, unlabeled, val)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let spec = SynthSpec::scaled(32, 32, 3, 4, 2);
        let a = generate_synthetic_domains(5, &spec).unwrap();
        let b = generate_synthetic_domains(5, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_domains(6, &spec).unwrap();
        assert_ne!(a, c);
        for ds in &a {
            for s in ds.labeled().iter().chain(ds.val()) {
                assert!(s.mask.data.iter().all(|&v| (v as usize) < ds.num_labels()));
            }
        }
        assert_eq!(a[0].num_labels(), 5);
        assert_eq!(a[1].num_labels(), 4);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = SynthSpec::benchmark();
        s.domains[0].classes[0].proportion = 0.5;
        assert!(s.validate().is_err());
        let mut s = SynthSpec::benchmark();
        s.domains[1].classes.remove(0);
        assert!(s.validate().is_err());
        let mut s = SynthSpec::benchmark();
        s.height = 8;
        assert!(s.validate().is_err());
    }
}
