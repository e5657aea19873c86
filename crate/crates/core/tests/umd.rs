use std::path::Path;

use visuomotor_core::imageio::write_rgb_png;
use visuomotor_core::scenegen::RgbImage;
use visuomotor_core::umd::{find_pairs, umd_harness, AFFORDANCES};
use visuomotor_core::vaed::{ConvStage, TrainConfig, VaedConfig};

/// 24×24 image with one coloured block whose label id cycles through 1..=7.
fn write_sample(dir: &Path, i: usize) {
    let (h, w) = (24, 24);
    let id = (i % 7 + 1) as u8;
    let (r0, c0) = (4 + i % 5, 3 + (i * 3) % 7);
    let inside = |r: usize, c: usize| (r0..r0 + 10).contains(&r) && (c0..c0 + 12).contains(&c);
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut lab = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let v = if inside(r, c) {
                [30 * id, 200, 255 - 30 * id]
            } else {
                [20, 20, 20]
            };
            rgb.extend(v);
            let l = if inside(r, c) { id } else { 0 };
            lab.extend([l, l, l]);
        }
    }
    let sub = dir.join(format!("tool_{}", i % 3));
    std::fs::create_dir_all(&sub).unwrap();
    write_rgb_png(
        &sub.join(format!("t{i:02}_rgb.png")),
        &RgbImage {
            height: h,
            width: w,
            data: rgb,
        },
    )
    .unwrap();
    write_rgb_png(
        &sub.join(format!("t{i:02}_label.png")),
        &RgbImage {
            height: h,
            width: w,
            data: lab,
        },
    )
    .unwrap();
}

#[test]
fn synthetic_dataset_yields_seven_scores() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..30 {
        write_sample(dir.path(), i);
    }
    std::fs::write(dir.path().join("tool_0/orphan_rgb.png"), b"").unwrap();
    assert_eq!(find_pairs(dir.path()).unwrap().len(), 30);

    let st = |channels| ConvStage {
        channels,
        kernel: 4,
        stride: 2,
    };
    let cfg = VaedConfig {
        latent_dim: 4,
        conv_spec: vec![st(4), st(4), st(8), st(8)],
        image_size: [16, 16],
        n_affordances: 7,
        ..Default::default()
    };
    let opt = TrainConfig {
        epochs: 3,
        batch_size: 7,
        ..Default::default()
    };
    let report = umd_harness(dir.path(), 5, &cfg, &opt).unwrap().unwrap();
    assert_eq!((report.n_train, report.n_val), (21, 9));
    assert_eq!(report.rows.len(), 7);
    for (row, name) in report.rows.iter().zip(AFFORDANCES) {
        assert_eq!(row.affordance, name);
        assert_eq!(row.fbeta.is_some(), row.n_images > 0);
        assert!(row.fbeta.is_none_or(|f| (0.0..=1.0).contains(&f)));
    }
    assert_eq!(report.rows.iter().map(|r| r.n_images).sum::<usize>(), 9);
    assert_eq!(report.to_csv().lines().count(), 1 + 7 + 1);
    assert_eq!(
        report,
        umd_harness(dir.path(), 5, &cfg, &opt).unwrap().unwrap()
    );
}
