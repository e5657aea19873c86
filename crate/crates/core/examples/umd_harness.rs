//! Trains a VAED on the UMD part-affordance data and prints per-affordance
//! weighted F-beta on the held-out 30 %. Skips when the directory is absent.
//!
//! `cargo run --release --example umd_harness -- <umd_dir> [split_seed] [epochs]`

use std::path::PathBuf;

use visuomotor_core::umd::{umd_harness, umd_vaed_config};
use visuomotor_core::vaed::TrainConfig;

fn main() -> visuomotor_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "data/umd".into()));
    let split_seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(40);
    let opt = TrainConfig {
        epochs,
        seed: split_seed,
        ..Default::default()
    };
    match umd_harness(&dir, split_seed, &umd_vaed_config(), &opt)? {
        None => println!("skipped: {} not found", dir.display()),
        Some(report) => print!("{}", report.to_csv()),
    }
    Ok(())
}
