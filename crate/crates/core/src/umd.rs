//! Optional harness for the UMD part-affordance dataset.
//!
//! Expected layout: any directory tree holding `<stem>_rgb.png` next to
//! `<stem>_label.png`, where each label pixel stores the affordance id
//! (0 background, 1..=7 in [`AFFORDANCES`] order) in its first channel. The
//! original release ships `.jpg` images and `.mat` labels; convert them once
//! with any image tool before running the harness.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imageio::read_rgb_png;
use crate::metrics::{per_affordance_scores, BinaryMask, MetricConfig};
use crate::scenegen::RgbImage;
use crate::vaed::{train_vaed, ConvStage, ImageSet, TrainConfig, Vaed, VaedConfig};
use crate::{Error, Result};

pub const AFFORDANCES: [&str; 7] = [
    "grasp",
    "cut",
    "scoop",
    "contain",
    "pound",
    "support",
    "wrap-grasp",
];
pub const TRAIN_FRACTION: f64 = 0.7;

/// VAED settings for the harness: 7 channels, latent 20, β = 4.
pub fn umd_vaed_config() -> VaedConfig {
    let st = |channels| ConvStage {
        channels,
        kernel: 4,
        stride: 2,
    };
    VaedConfig {
        latent_dim: 20,
        beta: 4.0,
        conv_spec: vec![st(16), st(32), st(64), st(128)],
        image_size: [64, 64],
        n_affordances: AFFORDANCES.len(),
        ..Default::default()
    }
}

/// `(rgb, label)` path pairs found under `root`, sorted by path.
pub fn find_pairs(root: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(stem) = path.to_str().and_then(|s| s.strip_suffix("_rgb.png")) {
                let label = PathBuf::from(format!("{stem}_label.png"));
                if label.exists() {
                    pairs.push((path, label));
                }
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Seeded shuffle split; `train` has `round(fraction · n)` entries.
pub fn split_indices(n: usize, seed: u64, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * fraction).round() as usize;
    let val = idx.split_off(k.min(n));
    (idx, val)
}

/// Box-filter downsampling (area average over the source footprint).
pub fn resize_area(img: &RgbImage, h: usize, w: usize) -> RgbImage {
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        let (r0, r1) = (
            r * img.height / h,
            ((r + 1) * img.height)
                .div_ceil(h)
                .max(r * img.height / h + 1),
        );
        for c in 0..w {
            let (c0, c1) = (
                c * img.width / w,
                ((c + 1) * img.width).div_ceil(w).max(c * img.width / w + 1),
            );
            let mut acc = [0u32; 3];
            for sr in r0..r1.min(img.height) {
                for sc in c0..c1.min(img.width) {
                    let i = 3 * (sr * img.width + sc);
                    for k in 0..3 {
                        acc[k] += u32::from(img.data[i + k]);
                    }
                }
            }
            let n = ((r1.min(img.height) - r0) * (c1.min(img.width) - c0)) as u32;
            data.extend(acc.iter().map(|&a| ((a + n / 2) / n) as u8));
        }
    }
    RgbImage {
        height: h,
        width: w,
        data,
    }
}

/// Channel-major binary masks from an id image, sampled at cell centres.
pub fn label_masks(label: &RgbImage, h: usize, w: usize, channels: usize) -> Vec<u8> {
    let mut masks = vec![0u8; channels * h * w];
    for r in 0..h {
        let sr = ((2 * r + 1) * label.height) / (2 * h);
        for c in 0..w {
            let sc = ((2 * c + 1) * label.width) / (2 * w);
            let id = label.data[3 * (sr * label.width + sc)] as usize;
            if (1..=channels).contains(&id) {
                masks[((id - 1) * h + r) * w + c] = 1;
            }
        }
    }
    masks
}

pub fn load_pairs(
    pairs: &[(PathBuf, PathBuf)],
    size: [usize; 2],
    channels: usize,
) -> Result<ImageSet> {
    let [h, w] = size;
    let mut set = ImageSet::new(h, w, channels);
    for (rgb, label) in pairs {
        let img = read_rgb_png(rgb)?;
        let lab = read_rgb_png(label)?;
        if (img.height, img.width) != (lab.height, lab.width) {
            return Err(Error::Image(format!(
                "{}: image and label sizes differ",
                rgb.display()
            )));
        }
        set.push(&resize_area(&img, h, w), &label_masks(&lab, h, w, channels))?;
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmdRow {
    pub affordance: String,
    /// Validation images in which the affordance appears.
    pub n_images: usize,
    /// `None` when the affordance never appears in the validation split.
    pub fbeta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UmdReport {
    pub split_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub rows: Vec<UmdRow>,
    /// Unweighted mean over affordances present in the validation split.
    pub average: f64,
}

impl UmdReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("affordance,n_images,fbeta\n");
        for r in &self.rows {
            let f = r.fbeta.map_or_else(String::new, |f| f.to_string());
            s.push_str(&format!("{},{},{f}\n", r.affordance, r.n_images));
        }
        s.push_str(&format!("average,{},{}\n", self.n_val, self.average));
        s
    }
}

/// Weighted F-beta per affordance on thresholded VAED output, averaged over
/// the validation images that contain that affordance.
pub fn score_set(model: &Vaed<f32>, set: &ImageSet, threshold: f64) -> Result<Vec<UmdRow>> {
    let c = set.channels;
    let (h, w) = (set.height, set.width);
    let mut sums = vec![(0usize, 0.0f64); c];
    let cfg = MetricConfig::default();
    for i in 0..set.len() {
        let image = set.image(i);
        let probs = model.decode(&model.encode(&image)?.mu)?;
        let mask = set.mask(i);
        let gt: Vec<BinaryMask> = (0..c)
            .map(|ch| BinaryMask::from_fn((h, w), |(r, col)| mask[(ch * h + r) * w + col] != 0))
            .collect();
        let scores = per_affordance_scores(probs.view(), &gt, &cfg, Some(threshold))?;
        for ch in 0..c {
            if gt[ch].count() > 0 {
                sums[ch].0 += 1;
                sums[ch].1 += scores.scores[ch];
            }
        }
    }
    Ok(sums
        .iter()
        .enumerate()
        .map(|(ch, &(n, s))| UmdRow {
            affordance: AFFORDANCES
                .get(ch)
                .map_or_else(|| format!("channel{ch}"), |a| a.to_string()),
            n_images: n,
            fbeta: (n > 0).then(|| s / n as f64),
        })
        .collect())
}

/// Trains on a 70 % split and scores the rest. Returns `Ok(None)` after a log
/// message when `root` does not exist, so callers can skip cleanly.
pub fn umd_harness(
    root: &Path,
    split_seed: u64,
    config: &VaedConfig,
    opt: &TrainConfig,
) -> Result<Option<UmdReport>> {
    if !root.is_dir() {
        log::warn!("UMD data not found at {}; skipping", root.display());
        return Ok(None);
    }
    let pairs = find_pairs(root)?;
    if pairs.len() < 2 {
        return Err(Error::Input(format!(
            "{} holds {} image/label pairs",
            root.display(),
            pairs.len()
        )));
    }
    let (train_idx, val_idx) = split_indices(pairs.len(), split_seed, TRAIN_FRACTION);
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let train = load_pairs(&pick(&train_idx), config.image_size, config.n_affordances)?;
    let val = load_pairs(&pick(&val_idx), config.image_size, config.n_affordances)?;
    let trained = train_vaed(&train, Some(&val), config, opt, |_| {})?;
    let rows = score_set(&trained.model, &val, 0.5)?;
    let present: Vec<f64> = rows.iter().filter_map(|r| r.fbeta).collect();
    Ok(Some(UmdReport {
        split_seed,
        n_train: train.len(),
        n_val: val.len(),
        average: if present.is_empty() {
            f64::NAN
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
        rows,
    }))
}
