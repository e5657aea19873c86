use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visuomotor_core::scenegen::*;

fn base_scene(seed: u64) -> SceneSpec {
    let cfg = RandomizationConfig {
        clutter_count: [0, 0],
        ..Default::default()
    };
    sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap()
}

fn sphere(x: f64, y: f64, diameter: f64) -> Clutter {
    Clutter {
        shape: ClutterShape::Sphere,
        x,
        y,
        yaw: 0.0,
        scale: [diameter; 3],
        texture: Texture::flat([0.5, 0.5, 0.5]),
    }
}

#[test]
fn unit_sphere_silhouette_matches_projection_formula() {
    for (d, f) in [(5.0, 100.0), (3.0, 60.0), (8.0, 200.0)] {
        let mut scene = base_scene(1);
        scene.cup = None;
        let (x, y) = (0.45, 0.0);
        scene.clutter = vec![sphere(x, y, 2.0)];
        scene.camera = CameraPose {
            position: [x, y, 1.0 + d],
            look_at: [x, y, 1.0],
            up: [1.0, 0.0, 0.0],
            focal: f,
            image_size: [128, 128],
        };
        let frame = render_frame(&scene);
        let count = frame
            .object
            .iter()
            .filter(|&&o| o == OBJECT_CLUTTER)
            .count();
        let measured = (count as f64 / std::f64::consts::PI).sqrt();
        let expected = f / (d * d - 1.0f64).sqrt();
        assert!(
            (measured - expected).abs() < 1.0,
            "d={d} f={f}: radius {measured} vs {expected}"
        );
    }
}

#[test]
fn camera_looking_away_sees_background_only() {
    let mut scene = base_scene(2);
    scene.camera.position = [0.45, 0.0, 0.4];
    scene.camera.look_at = [0.45, 0.0, 5.0];
    scene.camera.up = [1.0, 0.0, 0.0];
    let img = render(&scene);
    let bg = scene
        .walls
        .texture
        .base_color
        .map(|c| (c * 255.0).round() as u8);
    assert!(img.data.chunks(3).all(|px| px == bg));
    assert!(render_labels(&scene).is_empty());
}

#[test]
fn rendering_is_deterministic() {
    let cfg = RandomizationConfig::default();
    let scene = sample_scene_seeded(77, &cfg).unwrap();
    assert_eq!(render(&scene), render(&scene));
    assert_eq!(render_labels(&scene), render_labels(&scene));
}

#[test]
fn scene_without_cup_has_no_labels() {
    let mut scene = sample_scene_seeded(5, &RandomizationConfig::default()).unwrap();
    scene.cup = None;
    assert!(render_labels(&scene).is_empty());
}

#[test]
fn unoccluded_cup_has_both_disjoint_channels() {
    for seed in 0..20 {
        let scene = base_scene(seed);
        let labels = render_labels(&scene);
        assert!(
            labels.channel_count(0) > 0,
            "seed {seed}: no wrap-grasp pixels"
        );
        assert!(
            labels.channel_count(1) > 0,
            "seed {seed}: no contain pixels"
        );
        let n = labels.height * labels.width;
        assert!((0..n).all(|i| !(labels.data[i] == 1 && labels.data[n + i] == 1)));
    }
}

#[test]
fn occluding_box_removes_all_labels() {
    let mut scene = base_scene(3);
    let cup = scene.cup.clone().unwrap();
    let cam = scene.camera.position;
    let open = render_frame(&scene);
    assert!(open.object.contains(&OBJECT_CUP));

    // A tall box straddling the segment from the camera to the cup.
    let (mx, my) = (0.5 * (cam[0] + cup.x), 0.5 * (cam[1] + cup.y));
    scene.clutter = vec![Clutter {
        shape: ClutterShape::Box,
        x: mx,
        y: my,
        yaw: 0.0,
        scale: [0.5, 0.3, cam[2] + 0.3],
        texture: Texture::flat([0.2, 0.3, 0.4]),
    }];
    let blocked = render_frame(&scene);
    assert!(render_labels(&scene).is_empty());
    for i in 0..open.object.len() {
        if open.object[i] == OBJECT_CUP {
            assert_eq!(blocked.object[i], OBJECT_CLUTTER);
            assert!(blocked.depth[i] < open.depth[i]);
        }
    }
}

#[test]
fn labels_are_sound_with_clutter() {
    let cfg = RandomizationConfig::default();
    for seed in 0..50 {
        let scene = sample_scene_seeded(seed, &cfg).unwrap();
        let frame = render_frame(&scene);
        for (i, &l) in frame.label.iter().enumerate() {
            if l != 0 {
                assert_eq!(frame.object[i], OBJECT_CUP);
                assert!(frame.depth[i].is_finite());
            }
        }
    }
}

#[test]
fn randomized_quantities_respect_ranges() {
    let cfg = RandomizationConfig::default();
    let inside = |v: f64, [lo, hi]: Span| lo <= v && v <= hi;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let s = sample_scene(&mut rng, &cfg).unwrap();
        let cup = s.cup.as_ref().unwrap();
        assert!(inside(cup.x, cfg.workspace_x) && inside(cup.y, cfg.workspace_y));
        assert!(cup.profile.radii.iter().all(|&r| inside(r, cfg.cup_radius)));
        assert!(inside(cup.profile.height(), cfg.cup_height));
        assert!((cfg.clutter_count[0]..=cfg.clutter_count[1]).contains(&s.clutter.len()));
        for c in &s.clutter {
            assert!(c
                .scale
                .iter()
                .all(|&v| inside(v, cfg.clutter_size) && v > 0.0));
        }
        assert!(s.table.scale.iter().all(|&v| inside(v, cfg.table_scale)));
        let cam = &s.camera;
        assert!(inside(cam.position[0], cfg.camera_x));
        assert!(inside(cam.position[1], cfg.camera_y));
        assert!(inside(cam.position[2], cfg.camera_z));
        assert!(inside(cam.look_at[0], cfg.look_at_x));
        assert!(inside(cam.look_at[1], cfg.look_at_y));
        assert!(inside(cam.look_at[2], cfg.look_at_z));
        assert!(inside(cam.focal, cfg.focal));
        assert!((cfg.light_count[0]..=cfg.light_count[1]).contains(&s.lights.len()));
        for l in &s.lights {
            assert!(inside(l.intensity, cfg.light_intensity));
            assert!(inside(l.position[2], cfg.light_z));
        }
    }
}

#[test]
fn cup_profiles_respect_ratio_and_smoothness() {
    let cfg = RandomizationConfig::default();
    let step = cfg.cup_smoothness * (cfg.cup_radius[1] - cfg.cup_radius[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10_000 {
        let p = generate_cup_profile(&mut rng, &cfg);
        let lo = p.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.radii.iter().cloned().fold(0.0, f64::max);
        assert!(hi / lo <= cfg.cup_max_ratio);
        assert!(p.radii.windows(2).all(|w| (w[1] - w[0]).abs() < step));
        assert!(p.heights.len() >= 4 && p.heights[0] == 0.0);
        assert!(p.heights.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn clutter_counts_are_uniform() {
    let cfg = RandomizationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut hist = [0usize; 11];
    for _ in 0..1000 {
        hist[sample_scene(&mut rng, &cfg).unwrap().clutter.len()] += 1;
    }
    let expected = 1000.0 / 11.0;
    let chi2: f64 = hist
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    // Upper 0.001 quantile of chi-square with 10 degrees of freedom.
    assert!(chi2 < 29.588, "chi2 = {chi2}, hist = {hist:?}");
    assert!(hist.iter().all(|&c| c > 0));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let m = generate_dataset(0, &RandomizationConfig::default(), tmp.path(), 2, 1).unwrap();
    assert!(m.samples.is_empty());
    let files = tree_bytes(tmp.path());
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].0, "manifest.json");
}

#[test]
fn dataset_is_worker_independent_and_sound() {
    let cfg = RandomizationConfig::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(100, &cfg, a.path(), 1, 42).unwrap();
    generate_dataset(100, &cfg, b.path(), 8, 42).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let data = load_dataset(a.path(), 0.0).unwrap();
    assert_eq!(data.len(), 100);
    for (labels, meta) in data.labels.iter().zip(&data.metas) {
        let frame = render_frame(&meta.scene);
        assert_eq!(&frame.labels(), labels);
        for (i, &l) in frame.label.iter().enumerate() {
            if l != 0 {
                assert_eq!(frame.object[i], OBJECT_CUP);
            }
        }
        assert_eq!(meta.seed, sample_seed(42, meta.index));
    }
}

#[test]
fn unreadable_samples_are_skipped_up_to_limit() {
    let tmp = tempfile::tempdir().unwrap();
    generate_dataset(10, &RandomizationConfig::default(), tmp.path(), 1, 3).unwrap();
    fs::write(tmp.path().join("samples/00000004_rgb.png"), b"garbage").unwrap();
    let data = load_dataset(tmp.path(), 0.2).unwrap();
    assert_eq!(data.len(), 9);
    assert_eq!(data.skipped, vec![4]);
    assert!(load_dataset(tmp.path(), 0.01).is_err());
}

#[test]
fn failed_generation_cleans_up() {
    let tmp = tempfile::tempdir().unwrap();
    // A directory where a sample file should go makes that write fail.
    fs::create_dir_all(tmp.path().join("samples/00000003_meta.json")).unwrap();
    let err = generate_dataset(6, &RandomizationConfig::default(), tmp.path(), 2, 9);
    assert!(err.is_err());
    assert!(!tmp.path().join("manifest.json").exists());
    assert!(!tmp.path().join("samples/00000000_rgb.png").exists());
}
