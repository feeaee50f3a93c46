//! Domain registry: label spaces, per-domain datasets, and folder ingestion.
//!
//! Folder layout for one domain:
//!
//! ```text
//! <root>/labels.txt               one label name per line
//! <root>/images/{train,val}/*.png
//! <root>/masks/{train,val}/*.png  8-bit single channel, 255 = ignore
//! <root>/unlabeled/*.png
//! ```
//!
//! Images pair with masks by identical file stem. Every directory listing is
//! sorted lexicographically by file name, so ingestion order is stable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    names: Vec<String>,
    ignore_index: u8,
}

impl LabelSpace {
    pub fn new(names: Vec<String>, ignore_index: u8) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least 2 labels, got {}",
                names.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::InvalidLabelSpace("empty label name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::InvalidLabelSpace(format!("duplicate label {n:?}")));
            }
        }
        if (ignore_index as usize) < names.len() {
            return Err(Error::InvalidLabelSpace(format!(
                "ignore index {ignore_index} collides with a label index"
            )));
        }
        Ok(LabelSpace {
            names,
            ignore_index,
        })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names.iter().map(|s| s.as_ref().to_string()).collect(),
            DEFAULT_IGNORE_INDEX,
        )
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ignore_index(&self) -> u8 {
        self.ignore_index
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// True for label indices and the ignore value.
    pub fn is_valid_mask_value(&self, v: u8) -> bool {
        (v as usize) < self.names.len() || v == self.ignore_index
    }
}

/// Case-sensitive intersection of two label spaces' names.
pub fn label_overlap(a: &LabelSpace, b: &LabelSpace) -> BTreeSet<String> {
    let bs: BTreeSet<&str> = b.names.iter().map(String::as_str).collect();
    a.names
        .iter()
        .filter(|n| bs.contains(n.as_str()))
        .cloned()
        .collect()
}

/// Planar RGB image, values in `[0, 1]`, layout `[3, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "image {h}x{w} needs {} values, got {}",
                3 * h * w,
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
            }
        }
        Image { h, w, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.w as u32, self.h as u32, |x, y| {
            let px = |c: usize| {
                let v = self.data[(c * self.h + y as usize) * self.w + x as usize];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }
}

/// Per-channel input normalization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl InputNorm {
    /// Normalized planar `[3, h, w]` copy of `img`.
    pub fn apply(&self, img: &Image) -> Vec<f64> {
        let plane = img.h * img.w;
        img.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (v as f64 - self.mean[c]) / self.std[c]
            })
            .collect()
    }
}

/// Single-channel label mask, row-major `[h, w]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!(
                "mask {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Mask { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_raw(self.w as u32, self.h as u32, self.data.clone())
            .expect("mask buffer matches dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub name: String,
    pub image: Image,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub name: String,
    pub image: Image,
}

/// One domain's labeled training pairs, validation pairs and unlabeled
/// images, all checked against its label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    id: String,
    label_space: LabelSpace,
    labeled: Vec<LabeledSample>,
    unlabeled: Vec<UnlabeledSample>,
    val: Vec<LabeledSample>,
}

impl DomainDataset {
    /// Builds a dataset, validating every mask eagerly.
    pub fn new(
        id: impl Into<String>,
        label_space: LabelSpace,
        labeled: Vec<LabeledSample>,
        unlabeled: Vec<UnlabeledSample>,
        val: Vec<LabeledSample>,
    ) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!(
                "domain id {id:?} must be non-empty without whitespace"
            )));
        }
        for s in labeled.iter().chain(&val) {
            validate_pair(s, &label_space)?;
        }
        Ok(DomainDataset {
            id,
            label_space,
            labeled,
            unlabeled,
            val,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn labeled(&self) -> &[LabeledSample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[UnlabeledSample] {
        &self.unlabeled
    }

    pub fn val(&self) -> &[LabeledSample] {
        &self.val
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_space.len()
    }

    /// Keeps the first `n` labeled pairs; the images of the remaining pairs
    /// join the unlabeled pool (their masks are dropped).
    pub fn with_labeled_cap(mut self, n: usize) -> Self {
        if self.labeled.len() > n {
            let extra = self.labeled.split_off(n);
            self.unlabeled.extend(extra.into_iter().map(|s| UnlabeledSample {
                name: s.name,
                image: s.image,
            }));
        }
        self
    }

    /// Truncates the unlabeled pool to at most `n` images.
    pub fn with_unlabeled_cap(mut self, n: usize) -> Self {
        self.unlabeled.truncate(n);
        self
    }
}

fn validate_pair(s: &LabeledSample, ls: &LabelSpace) -> Result<()> {
    if (s.image.h, s.image.w) != (s.mask.h, s.mask.w) {
        return Err(Error::SizeMismatch {
            sample: s.name.clone(),
            image_hw: (s.image.h, s.image.w),
            mask_hw: (s.mask.h, s.mask.w),
        });
    }
    if let Some(&bad) = s.mask.data.iter().find(|&&v| !ls.is_valid_mask_value(v)) {
        return Err(Error::InvalidMaskValue {
            sample: s.name.clone(),
            value: bad,
            num_labels: ls.len(),
            ignore: ls.ignore_index(),
        });
    }
    Ok(())
}

/// Where a domain comes from.
#[derive(Debug, Clone)]
pub enum DomainSource {
    /// A folder in the on-disk layout.
    Folder { id: String, root: PathBuf },
    /// An already-built dataset (e.g. from the synthetic generator).
    Memory(DomainDataset),
}

/// Result of ingesting a domain, with discovery counts for auditing.
#[derive(Debug, Clone)]
pub struct Registered {
    pub dataset: DomainDataset,
    /// Files found under `images/train` and `unlabeled`.
    pub discovered_train_files: usize,
    pub discovered_val_files: usize,
}

pub fn register_domain(source: DomainSource) -> Result<Registered> {
    match source {
        DomainSource::Memory(ds) => {
            // Re-run validation so in-memory datasets get the same checks.
            let discovered_train_files = ds.n_labeled() + ds.n_unlabeled();
            let discovered_val_files = ds.val.len();
            let dataset =
                DomainDataset::new(ds.id, ds.label_space, ds.labeled, ds.unlabeled, ds.val)?;
            Ok(Registered {
                dataset,
                discovered_train_files,
                discovered_val_files,
            })
        }
        DomainSource::Folder { id, root } => load_folder(&id, &root),
    }
}

pub fn read_labels_file(path: &Path) -> Result<LabelSpace> {
    if !path.is_file() {
        return Err(Error::MissingLabels(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r').to_string())
        .filter(|l| !l.is_empty())
        .collect();
    LabelSpace::from_names(&names)
}

/// Sorted `*.png` files of a directory; a missing directory is empty.
fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Image::from_rgb8(&img.to_rgb8()))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if img.color() != ColorType::L8 {
        return Err(Error::Parse(format!(
            "mask {} must be 8-bit single channel, found {:?}",
            path.display(),
            img.color()
        )));
    }
    let g = img.into_luma8();
    Mask::new(g.height() as usize, g.width() as usize, g.into_raw())
}

fn load_pairs(root: &Path, split: &str) -> Result<(Vec<LabeledSample>, usize)> {
    let images = list_pngs(&root.join("images").join(split))?;
    let mask_dir = root.join("masks").join(split);
    let mut out = Vec::with_capacity(images.len());
    for ip in &images {
        let name = stem(ip);
        let mp = mask_dir.join(format!("{name}.png"));
        if !mp.is_file() {
            return Err(Error::Parse(format!(
                "image {} has no mask at {}",
                ip.display(),
                mp.display()
            )));
        }
        out.push(LabeledSample {
            name,
            image: read_image(ip)?,
            mask: read_mask(&mp)?,
        });
    }
    Ok((out, images.len()))
}

fn load_folder(id: &str, root: &Path) -> Result<Registered> {
    let label_space = read_labels_file(&root.join("labels.txt"))?;
    let (labeled, n_train) = load_pairs(root, "train")?;
    let (val, n_val) = load_pairs(root, "val")?;
    let un_paths = list_pngs(&root.join("unlabeled"))?;
    let unlabeled = un_paths
        .iter()
        .map(|p| {
            Ok(UnlabeledSample {
                name: stem(p),
                image: read_image(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = DomainDataset::new(id, label_space, labeled, unlabeled, val)?;
    Ok(Registered {
        dataset,
        discovered_train_files: n_train + un_paths.len(),
        discovered_val_files: n_val,
    })
}

/// Writes a dataset in the folder layout (inverse of folder ingestion).
pub fn save_domain(ds: &DomainDataset, root: &Path) -> Result<()> {
    let mk = |p: PathBuf| -> Result<PathBuf> {
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let labels: String = ds
        .label_space
        .names()
        .iter()
        .map(|n| format!("{n}\n"))
        .collect();
    mk(root.to_path_buf())?;
    let lp = root.join("labels.txt");
    fs::write(&lp, labels).map_err(|e| Error::io(&lp, e))?;
    for (split, samples) in [("train", &ds.labeled), ("val", &ds.val)] {
        let idir = mk(root.join("images").join(split))?;
        let mdir = mk(root.join("masks").join(split))?;
        for s in samples.iter() {
            let ip = idir.join(format!("{}.png", s.name));
            s.image.to_rgb8().save(&ip).map_err(|source| Error::Image {
                path: ip.clone(),
                source,
            })?;
            let mp = mdir.join(format!("{}.png", s.name));
            s.mask.to_gray8().save(&mp).map_err(|source| Error::Image {
                path: mp.clone(),
                source,
            })?;
        }
    }
    let udir = mk(root.join("unlabeled"))?;
    for s in &ds.unlabeled {
        let p = udir.join(format!("{}.png", s.name));
        s.image.to_rgb8().save(&p).map_err(|source| Error::Image {
            path: p.clone(),
            source,
        })?;
    }
    Ok(())
}
