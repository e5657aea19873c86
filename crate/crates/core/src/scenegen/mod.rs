//! Domain-randomized tabletop scenes with pixel-exact cup affordance labels.

mod config;
mod dataset;
mod raster;
mod texture;

pub use config::{RandomizationConfig, Span};
pub use dataset::{
    generate_dataset, load_dataset, sample_seed, DatasetManifest, LoadedDataset, SampleEntry,
    SampleMeta, DATASET_FORMAT_VERSION,
};
pub use raster::{
    render, render_frame, render_labels, render_sample, Frame, LabelMasks, RgbImage, CONTAIN,
    OBJECT_CLUTTER, OBJECT_CUP, OBJECT_NONE, OBJECT_TABLE, OBJECT_WALLS, WRAP_GRASP,
};
pub use texture::{Texture, TextureKind};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CupProfile {
    pub heights: Vec<f64>,
    pub radii: Vec<f64>,
    pub split_height: f64,
}

impl CupProfile {
    pub fn cylinder(radius: f64, height: f64, samples: usize, split_height: f64) -> Self {
        Self {
            heights: (0..samples)
                .map(|k| height * k as f64 / (samples - 1) as f64)
                .collect(),
            radii: vec![radius; samples],
            split_height,
        }
    }

    pub fn height(&self) -> f64 {
        *self.heights.last().expect("non-empty profile")
    }

    /// Radius at the rim.
    pub fn rim_radius(&self) -> f64 {
        *self.radii.last().expect("non-empty profile")
    }

    pub fn max_radius(&self) -> f64 {
        self.radii.iter().cloned().fold(0.0, f64::max)
    }

    /// Piecewise-linear radius at height `z`, clamped to the ends.
    pub fn radius_at(&self, z: f64) -> f64 {
        let h = &self.heights;
        if z <= h[0] {
            return self.radii[0];
        }
        for k in 1..h.len() {
            if z <= h[k] {
                let t = (z - h[k - 1]) / (h[k] - h[k - 1]);
                return self.radii[k - 1] + t * (self.radii[k] - self.radii[k - 1]);
            }
        }
        self.rim_radius()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cup {
    pub profile: CupProfile,
    pub x: f64,
    pub y: f64,
    pub inner_texture: Texture,
    pub outer_texture: Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClutterShape {
    Box,
    Sphere,
    Cylinder,
}

/// A clutter primitive resting on the table. `scale` is the full extent
/// along the object's local axes; spheres use `scale[0]` as diameter and
/// cylinders use `scale[0]` as diameter and `scale[2]` as height.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clutter {
    pub shape: ClutterShape,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub scale: [f64; 3],
    pub texture: Texture,
}

impl Clutter {
    /// Horizontal radius of the footprint.
    pub fn footprint(&self) -> f64 {
        match self.shape {
            ClutterShape::Box => 0.5 * self.scale[0].hypot(self.scale[1]),
            _ => 0.5 * self.scale[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub texture: Texture,
    pub scale: [f64; 2],
    pub center: [f64; 2],
    pub base_size: [f64; 2],
}

impl Table {
    pub fn extent(&self) -> [f64; 2] {
        [
            self.base_size[0] * self.scale[0],
            self.base_size[1] * self.scale[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walls {
    pub texture: Texture,
    /// `[x_min, x_max, y_min, y_max]`.
    pub room: [f64; 4],
    pub height: f64,
    pub floor_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub focal: f64,
    /// `(H, W)`.
    pub image_size: [usize; 2],
}

impl CameraPose {
    pub fn validate(&self) -> Result<()> {
        let f = Vector3::from(self.look_at) - Vector3::from(self.position);
        if f.norm() < 1e-9 {
            return Err(Error::Input(
                "camera position coincides with look_at".into(),
            ));
        }
        if f.normalize().cross(&Vector3::from(self.up)).norm() < 1e-6 {
            return Err(Error::Input(
                "camera up vector is parallel to the view direction".into(),
            ));
        }
        if !(self.focal > 0.0) || self.image_size[0] == 0 || self.image_size[1] == 0 {
            return Err(Error::Input(
                "camera focal length and image size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Orthonormal `(right, up, forward)` basis.
    pub fn basis(&self) -> [Vector3<f64>; 3] {
        let f = (Vector3::from(self.look_at) - Vector3::from(self.position)).normalize();
        let r = f.cross(&Vector3::from(self.up)).normalize();
        let u = r.cross(&f);
        [r, u, f]
    }

    /// Position, unit view direction and focal length.
    pub fn features(&self) -> [f64; 7] {
        let f = self.basis()[2];
        let p = self.position;
        [p[0], p[1], p[2], f[0], f[1], f[2], self.focal]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    pub position: [f64; 3],
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Always present in sampled scenes.
    pub cup: Option<Cup>,
    pub clutter: Vec<Clutter>,
    pub table: Table,
    pub walls: Walls,
    pub camera: CameraPose,
    pub lights: Vec<Light>,
    pub ambient: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// World position of the cup base, if there is a cup.
    pub fn cup_position(&self) -> Option<[f64; 3]> {
        self.cup.as_ref().map(|c| [c.x, c.y, 0.0])
    }
}

/// Per-scene overrides used by the evaluation protocol.
#[derive(Clone, Debug, Default)]
pub struct SceneOverrides {
    pub cup_profile: Option<CupProfile>,
    pub clutter_count: Option<usize>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: Span) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn uniform_count<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

/// Smoothed random walk over radii.
///
/// `r0 ~ U(r_min, r_max)`, steps are `N(0, σ)` clamped strictly inside
/// `±smoothness·(r_max − r_min)`, followed by a 3-tap moving average with
/// replicated edges, clipping to the radius range and, if needed, a
/// contraction toward the mean that enforces `max/min ≤ max_ratio`.
pub fn generate_cup_profile<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomizationConfig) -> CupProfile {
    let [r_min, r_max] = cfg.cup_radius;
    let k = cfg.cup_samples;
    let height = uniform(rng, cfg.cup_height);
    let heights: Vec<f64> = (0..k).map(|i| height * i as f64 / (k - 1) as f64).collect();
    let span = r_max - r_min;
    let r0 = uniform(rng, cfg.cup_radius);
    if span <= 0.0 {
        return CupProfile {
            heights,
            radii: vec![r0; k],
            split_height: cfg.cup_split_height,
        };
    }
    let bound = 0.999 * cfg.cup_smoothness * span;
    let step = Normal::new(0.0, bound / 3.0).expect("finite sigma");
    let mut walk = Vec::with_capacity(k);
    walk.push(r0);
    for i in 1..k {
        let s: f64 = step.sample(rng);
        walk.push(walk[i - 1] + s.clamp(-bound, bound));
    }
    let mut radii: Vec<f64> = (0..k)
        .map(|i| {
            let a = walk[i.saturating_sub(1)];
            let c = walk[(i + 1).min(k - 1)];
            ((a + walk[i] + c) / 3.0).clamp(r_min, r_max)
        })
        .collect();
    let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = radii.iter().cloned().fold(0.0, f64::max);
    let rho = cfg.cup_max_ratio;
    if hi > rho * lo {
        let m = radii.iter().sum::<f64>() / k as f64;
        let s = (rho - 1.0) * m / ((hi - m) + rho * (m - lo)) * (1.0 - 1e-12);
        for r in &mut radii {
            *r = m + s * (*r - m);
        }
    }
    CupProfile {
        heights,
        radii,
        split_height: cfg.cup_split_height,
    }
}

pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomizationConfig) -> Result<SceneSpec> {
    sample_scene_with(rng, cfg, &SceneOverrides::default())
}

pub fn sample_scene_seeded(seed: u64, cfg: &RandomizationConfig) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = sample_scene(&mut rng, cfg)?;
    scene.seed = seed;
    Ok(scene)
}

pub fn sample_scene_with<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RandomizationConfig,
    overrides: &SceneOverrides,
) -> Result<SceneSpec> {
    cfg.validate()?;
    let seed = rng.next_u64();

    // Cup: pose, shape and the two surface textures.
    let profile = match &overrides.cup_profile {
        Some(p) => {
            let _ = generate_cup_profile(rng, cfg);
            p.clone()
        }
        None => generate_cup_profile(rng, cfg),
    };
    let cup = Cup {
        x: uniform(rng, cfg.workspace_x),
        y: uniform(rng, cfg.workspace_y),
        inner_texture: Texture::sample(rng),
        outer_texture: Texture::sample(rng),
        profile,
    };

    // Table.
    let table = Table {
        texture: Texture::sample(rng),
        scale: [uniform(rng, cfg.table_scale), uniform(rng, cfg.table_scale)],
        center: cfg.table_center,
        base_size: cfg.table_size,
    };

    // Clutter, kept clear of the cup wall when possible.
    let drawn = uniform_count(rng, cfg.clutter_count);
    let n_clutter = overrides.clutter_count.unwrap_or(drawn);
    let [wx, wy] = [cfg.workspace_x, cfg.workspace_y];
    let spread = cfg.clutter_spread;
    let cup_r = cup.profile.max_radius();
    let mut clutter = Vec::with_capacity(n_clutter);
    for _ in 0..n_clutter {
        let shape = match rng.random_range(0..3u8) {
            0 => ClutterShape::Box,
            1 => ClutterShape::Sphere,
            _ => ClutterShape::Cylinder,
        };
        let a = uniform(rng, cfg.clutter_size);
        let b = uniform(rng, cfg.clutter_size);
        let c = uniform(rng, cfg.clutter_size);
        let scale = match shape {
            ClutterShape::Box => [a, b, c],
            ClutterShape::Sphere => [a, a, a],
            ClutterShape::Cylinder => [a, a, c],
        };
        let yaw = uniform(rng, [0.0, std::f64::consts::TAU]);
        let texture = Texture::sample(rng);
        let mut item = Clutter {
            shape,
            x: 0.0,
            y: 0.0,
            yaw,
            scale,
            texture,
        };
        for _ in 0..32 {
            item.x = uniform(rng, [wx[0] - spread, wx[1] + spread]);
            item.y = uniform(rng, [wy[0] - spread, wy[1] + spread]);
            let gap = (item.x - cup.x).hypot(item.y - cup.y) - cup_r - item.footprint();
            if gap >= cfg.clutter_clearance {
                break;
            }
        }
        clutter.push(item);
    }

    let camera = CameraPose {
        position: [
            uniform(rng, cfg.camera_x),
            uniform(rng, cfg.camera_y),
            uniform(rng, cfg.camera_z),
        ],
        look_at: [
            uniform(rng, cfg.look_at_x),
            uniform(rng, cfg.look_at_y),
            uniform(rng, cfg.look_at_z),
        ],
        up: [0.0, 0.0, 1.0],
        focal: uniform(rng, cfg.focal),
        image_size: cfg.image_size,
    };
    camera
        .validate()
        .map_err(|e| Error::Config(format!("camera ranges produce an invalid pose: {e}")))?;

    let n_lights = uniform_count(rng, cfg.light_count).max(1);
    let lights = (0..n_lights)
        .map(|_| Light {
            position: [
                uniform(rng, cfg.light_x),
                uniform(rng, cfg.light_y),
                uniform(rng, cfg.light_z),
            ],
            intensity: uniform(rng, cfg.light_intensity),
        })
        .collect();

    Ok(SceneSpec {
        cup: Some(cup),
        clutter,
        table,
        walls: Walls {
            texture: Texture::flat(cfg.wall_color),
            room: cfg.room,
            height: cfg.wall_height,
            floor_z: cfg.floor_z,
        },
        camera,
        lights,
        ambient: cfg.ambient,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn degenerate_clutter_range_gives_no_clutter() {
        let cfg = RandomizationConfig {
            clutter_count: [0, 0],
            ..Default::default()
        };
        for s in 0..20 {
            assert!(sample_scene(&mut rng(s), &cfg).unwrap().clutter.is_empty());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = RandomizationConfig::default();
        assert_eq!(
            sample_scene(&mut rng(9), &cfg).unwrap(),
            sample_scene(&mut rng(9), &cfg).unwrap()
        );
        assert_ne!(
            sample_scene(&mut rng(9), &cfg).unwrap(),
            sample_scene(&mut rng(10), &cfg).unwrap()
        );
    }

    #[test]
    fn collapsed_radius_range_gives_cylinder() {
        let cfg = RandomizationConfig {
            cup_radius: [0.04, 0.04],
            ..Default::default()
        };
        let p = generate_cup_profile(&mut rng(1), &cfg);
        assert!(p.radii.iter().all(|&r| r == 0.04));
        assert!(p.heights.len() >= 4 && p.heights[0] == 0.0);
    }

    #[test]
    fn radius_interpolation() {
        let p = CupProfile {
            heights: vec![0.0, 0.1, 0.2],
            radii: vec![0.03, 0.05, 0.04],
            split_height: 0.01,
        };
        assert!((p.radius_at(0.05) - 0.04).abs() < 1e-15);
        assert!((p.radius_at(0.15) - 0.045).abs() < 1e-15);
        assert_eq!(p.radius_at(1.0), 0.04);
        assert_eq!(p.max_radius(), 0.05);
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut cam = sample_scene(&mut rng(0), &RandomizationConfig::default())
            .unwrap()
            .camera;
        cam.look_at = cam.position;
        assert!(cam.validate().is_err());
        cam.look_at = [cam.position[0], cam.position[1], cam.position[2] - 1.0];
        assert!(cam.validate().is_err());
    }
}
