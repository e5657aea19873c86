//! Renders a few randomised scenes at 4× resolution with their affordance
//! labels tinted on top.
//!
//! `cargo run --example render_scenes -- <out_dir> [count] [seed]`

use std::path::PathBuf;

use visuomotor_core::imageio::write_rgb_png;
use visuomotor_core::plot::{affordance_overlay, hstack};
use visuomotor_core::scenegen::{
    render_sample, sample_scene_seeded, sample_seed, RandomizationConfig,
};

fn main() -> visuomotor_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scene_previews".into()));
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    std::fs::create_dir_all(&out).map_err(|e| visuomotor_core::Error::io(&out, e))?;

    let mut cfg = RandomizationConfig::default();
    let k = 4;
    cfg.image_size = [cfg.image_size[0] * k, cfg.image_size[1] * k];
    cfg.focal = [cfg.focal[0] * k as f64, cfg.focal[1] * k as f64];
    for i in 0..count {
        let scene = sample_scene_seeded(sample_seed(seed, i), &cfg)?;
        let (rgb, labels) = render_sample(&scene);
        let panel = hstack(&[rgb.clone(), affordance_overlay(&rgb, &labels, 0.6)?])?;
        let path = out.join(format!("scene_{i:03}.png"));
        write_rgb_png(&path, &panel)?;
        println!(
            "{}: {} clutter objects, {} wrap-grasp px, {} contain px",
            path.display(),
            scene.clutter.len(),
            labels.channel_count(0),
            labels.channel_count(1)
        );
    }
    Ok(())
}
