//! Images, masks, label remapping, synthetic scenes, datasets on disk,
//! model files and the JSON config.

pub mod config;
pub mod model_io;
pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use config::Config;
pub use model_io::{load_model, save_model};
pub use netpbm::{load_image, load_mask, save_image, save_mask};
pub use synth::{synth_dataset, synth_sample, SynthConfig};

/// An `h × w` grid of 8-bit values, row-major. Label masks hold 0 or 1
/// (1 = navigable ground); id masks hold raw class ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::invalid(format!("mask of {h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, 3, H, W)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: Mask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, label: Mask) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::invalid(format!("sample image must be (1, 3, H, W), got {s}")));
        }
        if (s.h, s.w) != (label.h, label.w) {
            return Err(Error::invalid(format!(
                "label is {}x{} but image is {}x{}",
                label.h, label.w, s.h, s.w
            )));
        }
        if !label.is_binary() {
            return Err(Error::invalid("label mask must hold only 0 and 1"));
        }
        Ok(Self { image, label })
    }
}

/// Largest class id in the label-id range.
pub const MAX_LABEL_ID: u8 = 33;
/// ground, road, sidewalk, parking, rail track.
pub const DEFAULT_NAVIGABLE_IDS: [u8; 5] = [6, 7, 8, 9, 10];

/// Maps ids `0..=33` to 1 if navigable, else 0.
pub fn remap_labels(ids: &Mask, navigable: &[u8]) -> Result<Mask> {
    let mut table = [0u8; MAX_LABEL_ID as usize + 1];
    for &id in navigable {
        if id > MAX_LABEL_ID {
            return Err(Error::invalid(format!("navigable id {id} outside 0..={MAX_LABEL_ID}")));
        }
        table[id as usize] = 1;
    }
    let mut data = Vec::with_capacity(ids.len());
    for (i, &id) in ids.data.iter().enumerate() {
        let v = table.get(id as usize).ok_or_else(|| {
            Error::invalid(format!(
                "label id {id} at ({}, {}) outside 0..={MAX_LABEL_ID}",
                i / ids.w.max(1),
                i % ids.w.max(1)
            ))
        })?;
        data.push(*v);
    }
    Mask::new(ids.h, ids.w, data)
}

/// Writes `root/images/NNNN.ppm` and `root/labels/NNNN.pgm`.
pub fn save_dataset(root: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("labels"))?;
    for (i, s) in samples.iter().enumerate() {
        save_image(root.join("images").join(format!("{i:04}.ppm")), &s.image)?;
        save_mask(root.join("labels").join(format!("{i:04}.pgm")), &s.label)?;
    }
    Ok(())
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads every image/label pair under `root`, ordered by stem.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let root = root.as_ref();
    let images = stems(&root.join("images"), "ppm")?;
    let labels = stems(&root.join("labels"), "pgm")?;
    if images.is_empty() {
        return Err(Error::invalid(format!("no images found under {}", root.join("images").display())));
    }
    if let Some(stem) = labels.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::invalid(format!("label {stem}.pgm has no matching image")));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img) in &images {
        let lbl = labels
            .get(stem)
            .ok_or_else(|| Error::invalid(format!("image {stem}.ppm has no matching label")))?;
        let sample = Sample::new(load_image(img)?, load_mask(lbl)?)
            .map_err(|e| Error::invalid(format!("sample {stem}: {e}")))?;
        samples.push(sample);
    }
    Ok(samples)
}
