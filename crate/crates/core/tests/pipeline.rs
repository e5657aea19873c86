use std::sync::Mutex;

use proptest::prelude::*;
use visuomotor_core::kinematics::KinematicChain;
use visuomotor_core::pipeline::{encode_scenes, random_targets, PipelineConfig};
use visuomotor_core::plot::{
    affordance_overlay, clutter_curve_plot, error_ellipse_plot, CONTAIN_TINT, WRAP_TINT,
};
use visuomotor_core::policy::{
    evaluate, Controller, CupShape, EvalConfig, Observation, OracleController,
};
use visuomotor_core::scenegen::{LabelMasks, RandomizationConfig, RgbImage, SceneOverrides};
use visuomotor_core::trajvae::{TrajGenConfig, Workspace, DESK_START};
use visuomotor_core::vaed::{Vaed, VaedConfig};
use visuomotor_core::Result;

fn oracle() -> (KinematicChain, TrajGenConfig) {
    let gen = TrajGenConfig::default();
    (KinematicChain::desk_arm(gen.hover_height), gen)
}

/// Records the clutter count of every scene it is shown and reports the cup centre.
struct Recorder(Mutex<Vec<usize>>);

impl Controller for Recorder {
    fn final_position(&self, obs: &Observation<'_>) -> Result<[f64; 3]> {
        self.0.lock().unwrap().push(obs.scene.clutter.len());
        let [x, y, _] = obs.scene.cup_position().unwrap();
        Ok([x, y, 0.1])
    }
}

#[test]
fn zero_clutter_protocol_has_one_row_and_no_clutter() {
    let rec = Recorder(Mutex::new(Vec::new()));
    let cfg = EvalConfig {
        n_trials: 9,
        clutter_levels: vec![0],
        ..Default::default()
    };
    let report = evaluate(&rec, &RandomizationConfig::default(), &cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].condition, "clutter0_random");
    assert_eq!(report.rows[0].n, 9);
    assert_eq!(report.rows[0].success_rate, 1.0);
    assert_eq!(*rec.0.lock().unwrap(), vec![0; 9]);
}

#[test]
fn report_rows_cover_every_condition() {
    let (chain, gen) = oracle();
    let ctl = OracleController {
        chain: &chain,
        start: DESK_START.to_vec(),
        gen,
    };
    let cfg = EvalConfig {
        n_trials: 12,
        clutter_levels: vec![0, 3, 6],
        cup_shapes: vec![CupShape::Cylinder, CupShape::Flared],
        ..Default::default()
    };
    let report = evaluate(&ctl, &RandomizationConfig::default(), &cfg).unwrap();
    assert_eq!(report.rows.len(), 3 * 2);
    assert!(report.rows.iter().all(|r| r.n == 2));
    assert_eq!(report.rows_csv().lines().count(), 1 + 6);
    assert_eq!(report.plot_csv().lines().count(), 1 + 12);
    let ellipse = error_ellipse_plot(&report, 200).unwrap();
    assert_eq!((ellipse.width, ellipse.height), (200, 200));
    let curve = clutter_curve_plot(&report, 300, 200).unwrap();
    assert_eq!((curve.width, curve.height), (300, 200));
}

#[test]
fn policy_scene_encoding_ignores_worker_count() {
    let sc = RandomizationConfig::default();
    let vaed = Vaed::<f32>::new(VaedConfig::default(), 3).unwrap();
    let ov = SceneOverrides {
        cup_profile: None,
        clutter_count: Some(0),
    };
    let a = encode_scenes(&vaed, &sc, &ov, 70, 11, 0.1, 1).unwrap();
    let b = encode_scenes(&vaed, &sc, &ov, 70, 11, 0.1, 3).unwrap();
    assert_eq!(a.inputs, b.inputs);
    assert_eq!(a.targets, b.targets);
    assert_eq!(a.inputs.dim(), (70, 17));
    assert!(a.targets.iter().all(|t| t[2] == 0.1));
    // Camera features follow the latent mean.
    assert!(a.inputs.column(10).iter().all(|v| (0.4..0.5).contains(v)));
}

#[test]
fn heldout_targets_lie_in_the_workspace() {
    let ws = Workspace::default();
    let t = random_targets(&ws, 0.1, 50, 4);
    assert_eq!(t, random_targets(&ws, 0.1, 50, 4));
    assert!(t
        .iter()
        .all(|p| (ws.x[0]..=ws.x[1]).contains(&p[0]) && (ws.y[0]..=ws.y[1]).contains(&p[1])));
}

#[test]
fn smoke_config_parses() {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/smoke.toml"
    ))
    .unwrap();
    let cfg = PipelineConfig::parse(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.vaed.model.image_size, [32, 32]);
}

fn image_and_masks() -> impl Strategy<Value = (RgbImage, LabelMasks, f64)> {
    (1usize..6, 1usize..6, 0.05f64..1.0).prop_flat_map(|(h, w, alpha)| {
        (
            prop::collection::vec(any::<u8>(), h * w * 3),
            prop::collection::vec(0u8..2, 2 * h * w),
        )
            .prop_map(move |(rgb, m)| {
                (
                    RgbImage {
                        height: h,
                        width: w,
                        data: rgb,
                    },
                    LabelMasks {
                        height: h,
                        width: w,
                        data: m,
                    },
                    alpha,
                )
            })
    })
}

proptest! {
    #[test]
    fn overlay_tints_labeled_pixels_only((img, masks, alpha) in image_and_masks()) {
        let out = affordance_overlay(&img, &masks, alpha).unwrap();
        for r in 0..img.height {
            for c in 0..img.width {
                let i = 3 * (r * img.width + c);
                let (src, dst) = (&img.data[i..i + 3], &out.data[i..i + 3]);
                let tint = match (masks.get(0, r, c), masks.get(1, r, c)) {
                    (_, true) => Some(CONTAIN_TINT),
                    (true, false) => Some(WRAP_TINT),
                    _ => None,
                };
                match tint {
                    None => prop_assert_eq!(src, dst),
                    Some(t) => for k in 0..3 {
                        // Each channel moves toward the tint and never past it.
                        let (s, d, t) = (f64::from(src[k]), f64::from(dst[k]), f64::from(t[k]));
                        prop_assert!((d - s) * (t - s) >= 0.0);
                        prop_assert!((d - t).abs() <= (s - t).abs() + 0.5);
                        prop_assert!((d - ((1.0 - alpha) * s + alpha * t)).abs() <= 0.5);
                    },
                }
            }
        }
    }
}
