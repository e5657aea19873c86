use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use visuomotor_core::pipeline::{dataset_hash, file_hash, read_manifest, Paths};
use visuomotor_core::scenegen::load_dataset;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visuomotor"))
        .args(args)
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .env_remove("VISUOMOTOR_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn inspect(path: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visuomotor"))
        .arg("inspect")
        .arg(path)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_data_smoke_creates_dir_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("not/yet/there");
    ok(&["gen-data", "--n", "10"], &out);
    let data = load_dataset(&out.join("data"), 0.0).unwrap();
    assert_eq!(data.len(), 10);
    assert!(data.skipped.is_empty());
    let first = dataset_hash(&out.join("data")).unwrap();
    ok(&["gen-data", "--n", "10", "--workers", "2"], &out);
    assert_eq!(dataset_hash(&out.join("data")).unwrap(), first);
    let manifest = read_manifest(&out).unwrap();
    assert_eq!(manifest.len(), 2);
    assert_eq!(manifest[0].stage, "gen-data");
    assert_eq!(manifest[0].outputs, manifest[1].outputs);
}

#[test]
fn policy_without_trajvae_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&["gen-data"], out);
    ok(&["train", "vaed"], out);
    let o = run(&["train", "policy"], out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("trajvae.ckpt"), "{err}");
    assert!(err.contains("train trajvae"), "{err}");

    let o = run(&["train", "vaed"], &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest.json"));
}

#[test]
fn stages_run_in_isolation_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let p = Paths::new(out);
    ok(&["train", "trajvae"], out);
    ok(&["gen-data"], out);
    ok(&["train", "vaed"], out);
    ok(&["train", "policy"], out);
    ok(&["evaluate"], out);

    let headers = [
        (&p.vaed_log, "epoch,bce,kl,total,val_total"),
        (&p.trajvae_log, "epoch,mse,kl,beta,total"),
        (&p.policy_log, "epoch,train_loss,val_mean_err"),
        (
            &p.report_csv,
            "condition,n,mean_err_m,x_err_m,y_err_m,success_rate",
        ),
        (&p.plot_csv, "x,y,err_x,err_y"),
    ];
    for (path, header) in headers {
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{}", path.display());
    }
    // 2 clutter levels × 2 cup shapes.
    assert_eq!(
        fs::read_to_string(&p.report_csv).unwrap().lines().count(),
        1 + 4
    );
    for png in [
        &p.ellipse_png,
        &p.clutter_png,
        &p.overlays.join("overlay_000.png"),
    ] {
        assert!(png.exists(), "{}", png.display());
    }

    let before = [
        file_hash(&p.vaed_ckpt).unwrap(),
        file_hash(&p.policy_ckpt).unwrap(),
    ];
    fs::remove_dir_all(out.join("vaed")).unwrap();
    fs::remove_dir_all(out.join("policy")).unwrap();
    ok(&["train", "vaed"], out);
    ok(&["train", "policy"], out);
    assert_eq!(
        [
            file_hash(&p.vaed_ckpt).unwrap(),
            file_hash(&p.policy_ckpt).unwrap()
        ],
        before
    );

    fs::remove_file(&p.ellipse_png).unwrap();
    ok(&["plot"], out);
    assert!(p.ellipse_png.exists());

    let stages: Vec<String> = read_manifest(out)
        .unwrap()
        .into_iter()
        .map(|r| r.stage)
        .collect();
    assert_eq!(
        stages,
        [
            "train-trajvae",
            "gen-data",
            "train-vaed",
            "train-policy",
            "evaluate",
            "train-vaed",
            "train-policy",
            "plot"
        ]
    );
}

#[test]
fn inspect_lists_tensors_and_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&["train", "trajvae"], out);
    let ckpt = Paths::new(out).trajvae_ckpt;
    let o = inspect(&ckpt);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("format version: 1"));
    assert!(text.contains("enc.0.weight"), "{text}");
    assert!(text.contains("parameters:"));

    let bytes = fs::read(&ckpt).unwrap();
    let cut = out.join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
    let o = inspect(&cut);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
}

#[test]
fn config_errors_and_output_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[policy.model]\nlatent_dim = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_visuomotor"))
        .args(["show-config", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("latent_dim"));

    let o = Command::new(env!("CARGO_BIN_EXE_visuomotor"))
        .args(["train", "everything"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    let show = |flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_visuomotor"));
        c.args(["show-config", "--config"]).arg(smoke_config());
        c.env("VISUOMOTOR_OUT", "from_env");
        if let Some(f) = flag {
            c.args(["--out", f]);
        }
        String::from_utf8(c.output().unwrap().stdout).unwrap()
    };
    assert!(show(None).contains("out = \"from_env\""));
    assert!(show(Some("from_flag")).contains("out = \"from_flag\""));
}
