//! Synthetic scenes, image and label files, normalisation and batching.
//!
//! A dataset directory holds `images/<id>.png` (8-bit RGB),
//! `labels/<id>.png` (8-bit grey, value = class id, 255 = ignore) and
//! `manifest.csv` with columns `id,split`.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

mod scene;

pub use crate::losses::IGNORE;
pub use scene::{class_names, generate_scene, SceneConfig, CITYSCAPES_CLASSES, DESK_CLASSES};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// First index of the validation range; training indices stay below it.
pub const VAL_OFFSET: u64 = 1_000_000;

/// An RGB image (row-major, channels interleaved, values in `[0, 1]`) and
/// its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Per-channel ImageNet standardisation of an interleaved `H×W×3` image
/// into a channel-first `3×H×W` tensor.
pub fn normalize<T: Scalar>(image: &[f32], h: usize, w: usize) -> Result<Tensor<T>> {
    if image.len() != h * w * 3 {
        return Err(Error::shape(format!("{} values for a {h}x{w}x3 image", image.len())));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::data(format!("pixel value {v} outside [0, 1]")));
    }
    let hw = h * w;
    let mut out = vec![T::zero(); 3 * hw];
    for (p, px) in image.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + p] = T::of((px[c] as f64 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
        }
    }
    Tensor::new(out, &[3, h, w])
}

/// Training indices `[0, n_train)` and validation indices
/// `[VAL_OFFSET, VAL_OFFSET + n_val)`.
pub fn make_splits(n_train: u64, n_val: u64) -> (Vec<u64>, Vec<u64>) {
    ((0..n_train).collect(), (VAL_OFFSET..VAL_OFFSET + n_val).collect())
}

pub fn save_label_png(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        return Err(Error::shape(format!("{} labels for a {h}x{w} map", labels.len())));
    }
    let img = GrayImage::from_raw(w as u32, h as u32, labels.to_vec()).expect("length checked");
    img.save(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Reads a label map; only single-channel 8-bit PNGs are accepted.
pub fn load_label_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    match open_png(path)? {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            Ok((g.into_raw(), h as usize, w as usize))
        }
        other => Err(Error::data(format!(
            "{}: label maps must be 8-bit greyscale, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_image_png(path: &Path, image: &[f32], h: usize, w: usize) -> Result<()> {
    if image.len() != h * w * 3 {
        return Err(Error::shape(format!("{} values for a {h}x{w}x3 image", image.len())));
    }
    let raw = image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("length checked");
    img.save(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn load_image_png(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    match open_png(path)? {
        image::DynamicImage::ImageRgb8(img) => {
            let (w, h) = img.dimensions();
            Ok((img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(), h as usize, w as usize))
        }
        other => Err(Error::data(format!(
            "{}: images must be 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    split: Split,
}

/// In-memory train and validation samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(cfg: &SceneConfig, n_train: u64, n_val: u64) -> Result<Self> {
        let (tr, va) = make_splits(n_train, n_val);
        Ok(Dataset {
            train: tr.into_iter().map(|i| generate_scene(cfg, i)).collect::<Result<_>>()?,
            val: va.into_iter().map(|i| generate_scene(cfg, i)).collect::<Result<_>>()?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = dir.join("manifest.csv");
        let mut w = csv::Writer::from_path(&manifest).map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
        for (split, samples) in [(Split::Train, &self.train), (Split::Val, &self.val)] {
            for s in samples {
                save_image_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image, s.height, s.width)?;
                save_label_png(&dir.join("labels").join(format!("{}.png", s.id)), &s.labels, s.height, s.width)?;
                w.serialize(ManifestRow { id: s.id.clone(), split })
                    .map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
            }
        }
        w.flush().map_err(|e| Error::io(&manifest, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.csv");
        let mut r = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&manifest, io),
            other => Error::data(format!("{}: {other:?}", manifest.display())),
        })?;
        let mut ds = Dataset::default();
        for row in r.deserialize::<ManifestRow>() {
            let row = row.map_err(|e| Error::data(format!("{}: {e}", manifest.display())))?;
            let (image, h, w) = load_image_png(&dir.join("images").join(format!("{}.png", row.id)))?;
            let (labels, lh, lw) = load_label_png(&dir.join("labels").join(format!("{}.png", row.id)))?;
            if (h, w) != (lh, lw) {
                return Err(Error::data(format!("sample {}: image {h}x{w}, labels {lh}x{lw}", row.id)));
            }
            let s = SceneSample {
                id: row.id,
                height: h,
                width: w,
                image,
                labels,
            };
            match row.split {
                Split::Train => ds.train.push(s),
                Split::Val => ds.val.push(s),
            }
        }
        Ok(ds)
    }

    /// Checks that every sample has the given extents and label range.
    pub fn validate(&self, h: usize, w: usize, classes: usize) -> Result<()> {
        for s in self.train.iter().chain(&self.val) {
            if (s.height, s.width) != (h, w) {
                return Err(Error::data(format!(
                    "sample {} is {}x{}, model expects {h}x{w}",
                    s.id, s.height, s.width
                )));
            }
            if let Some(&l) = s.labels.iter().find(|&&l| l != IGNORE && l as usize >= classes) {
                return Err(Error::data(format!("sample {} has label {l} with {classes} classes", s.id)));
            }
        }
        Ok(())
    }
}

/// Normalised images, labels and ids of several samples.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&SceneSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if (s.height, s.width) != (h, w) {
                return Err(Error::data("batch mixes image sizes"));
            }
            data.extend_from_slice(normalize::<T>(&s.image, h, w)?.data());
            labels.extend_from_slice(&s.labels);
        }
        Ok(Batch {
            images: Tensor::new(data, &[samples.len(), 3, h, w])?,
            labels,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }
}
