//! On-disk dataset of rendered samples.
//!
//! ```text
//! <out>/manifest.json
//! <out>/samples/<i:08d>_rgb.png
//! <out>/samples/<i:08d>_label.png
//! <out>/samples/<i:08d>_meta.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    render_sample, sample_scene_seeded, CameraPose, LabelMasks, RandomizationConfig, RgbImage,
    SceneSpec,
};
use crate::imageio::{read_rgb_png, write_rgb_png};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: u64,
    pub seed: u64,
    pub rgb: String,
    pub label: String,
    pub meta: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub n: u64,
    pub config: RandomizationConfig,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: u64,
    pub seed: u64,
    pub scene: SceneSpec,
    pub cup_position: [f64; 3],
    pub camera: CameraPose,
    pub camera_features: [f64; 7],
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index`, a pure function of the master seed and the index.
pub fn sample_seed(master_seed: u64, index: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(index))
}

fn file_stem(index: u64) -> String {
    format!("{index:08}")
}

fn write_sample(
    dir: &Path,
    index: u64,
    seed: u64,
    cfg: &RandomizationConfig,
) -> Result<SampleEntry> {
    let scene = sample_scene_seeded(seed, cfg)?;
    let (rgb, labels) = render_sample(&scene);
    let stem = file_stem(index);
    let entry = SampleEntry {
        index,
        seed,
        rgb: format!("samples/{stem}_rgb.png"),
        label: format!("samples/{stem}_label.png"),
        meta: format!("samples/{stem}_meta.json"),
    };
    let root = dir.parent().expect("samples dir has a parent");
    write_rgb_png(&root.join(&entry.rgb), &rgb)?;
    write_rgb_png(&root.join(&entry.label), &labels.to_rgb())?;
    let meta = SampleMeta {
        index,
        seed,
        cup_position: scene.cup_position().unwrap_or([0.0; 3]),
        camera: scene.camera.clone(),
        camera_features: scene.camera.features(),
        scene,
    };
    let path = root.join(&entry.meta);
    fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(entry)
}

fn remove_partial(out_dir: &Path, n: u64) {
    for i in 0..n {
        let stem = file_stem(i);
        for suffix in ["_rgb.png", "_label.png", "_meta.json"] {
            let _ = fs::remove_file(out_dir.join("samples").join(format!("{stem}{suffix}")));
        }
    }
    let _ = fs::remove_file(out_dir.join("manifest.json"));
    let _ = fs::remove_dir(out_dir.join("samples"));
}

/// Renders `n` samples into `out_dir` using `workers` threads. Output bytes do
/// not depend on `workers`. On failure every file written so far is removed.
pub fn generate_dataset(
    n: u64,
    cfg: &RandomizationConfig,
    out_dir: &Path,
    workers: usize,
    master_seed: u64,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let results: Vec<Result<SampleEntry>> = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| write_sample(&samples_dir, i, sample_seed(master_seed, i), cfg))
            .collect()
    });
    let mut samples = Vec::with_capacity(n as usize);
    for r in results {
        match r {
            Ok(e) => samples.push(e),
            Err(e) => {
                remove_partial(out_dir, n);
                return Err(e);
            }
        }
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        master_seed,
        n,
        config: cfg.clone(),
        samples,
    };
    let path = out_dir.join("manifest.json");
    let written = serde_json::to_vec_pretty(&manifest)
        .map_err(Error::from)
        .and_then(|bytes| fs::write(&path, bytes).map_err(|e| Error::io(&path, e)));
    if let Err(e) = written {
        remove_partial(out_dir, n);
        return Err(e);
    }
    log::info!("wrote {n} samples to {}", out_dir.display());
    Ok(manifest)
}

/// Samples read back from disk. Unreadable samples are skipped and listed in
/// `skipped`.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub images: Vec<RgbImage>,
    pub labels: Vec<LabelMasks>,
    pub metas: Vec<SampleMeta>,
    pub skipped: Vec<u64>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads a dataset directory. Corrupt samples are skipped with a warning; the
/// load fails if more than `max_skip_fraction` of them are unreadable.
pub fn load_dataset(dir: &Path, max_skip_fraction: f64) -> Result<LoadedDataset> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingDependency {
            artifact: mpath,
            hint: "run `gen-data` first".into(),
        });
    }
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    let loaded: Vec<Result<(RgbImage, LabelMasks, SampleMeta)>> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let rgb = read_rgb_png(&dir.join(&s.rgb))?;
            let label = LabelMasks::from_rgb(&read_rgb_png(&dir.join(&s.label))?);
            let mp = dir.join(&s.meta);
            let meta: SampleMeta =
                serde_json::from_slice(&fs::read(&mp).map_err(|e| Error::io(&mp, e))?)?;
            if (rgb.height, rgb.width) != (label.height, label.width) {
                return Err(Error::Image(format!(
                    "sample {}: rgb and label sizes differ",
                    s.index
                )));
            }
            Ok((rgb, label, meta))
        })
        .collect();
    let mut out = LoadedDataset {
        root: dir.to_path_buf(),
        images: Vec::with_capacity(loaded.len()),
        labels: Vec::with_capacity(loaded.len()),
        metas: Vec::with_capacity(loaded.len()),
        skipped: Vec::new(),
        manifest,
    };
    for (entry, r) in out.manifest.samples.iter().zip(loaded) {
        match r {
            Ok((rgb, label, meta)) => {
                out.images.push(rgb);
                out.labels.push(label);
                out.metas.push(meta);
            }
            Err(e) => {
                log::warn!("skipping sample {}: {e}", entry.index);
                out.skipped.push(entry.index);
            }
        }
    }
    let total = out.manifest.samples.len().max(1) as f64;
    if out.skipped.len() as f64 > max_skip_fraction * total {
        return Err(Error::Input(format!(
            "{} of {} samples unreadable (limit {:.1}%)",
            out.skipped.len(),
            out.manifest.samples.len(),
            100.0 * max_skip_fraction
        )));
    }
    Ok(out)
}
