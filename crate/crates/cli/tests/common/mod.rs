#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bigans_core::imgio::save_image;
use bigans_core::synthetic::toy_image;

pub const BIN: &str = env!("CARGO_BIN_EXE_bigans");

/// Tiny networks on 6x6 LR patches; every stage runs in well under a second.
pub const TOY_CONFIG: &str = "\
run.seed = 7
data.lr_patch = 6
data.batch_size = 2
data.crops_per_image = 4
data.val_pairs = 2
mr.n_features = 4
mr.n_mr_blocks = 1
mr.epochs = 3
wp.n_features = 4
wp.n_resblocks = 1
disc.base_features = 2
disc.dense_features = 8
optim.lr0 = 0.001
schedule.total_iterations = 20
schedule.decay_at = 10
loss.extractor = identity
";

pub fn bigans(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn bigans")
}

pub fn ok(args: &[&str]) -> Output {
    let out = bigans(args);
    assert!(
        out.status.success(),
        "bigans {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn code(args: &[&str]) -> i32 {
    bigans(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `n` smooth synthetic HR images of side `size`.
pub fn write_toy_set(dir: &Path, n: u64, size: usize, seed: u64) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let p = dir.join(format!("img{i}.png"));
            save_image(&toy_image::<f64>(seed + i, size), &p).unwrap();
            p
        })
        .collect()
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("toy.cfg");
    std::fs::write(&p, format!("{TOY_CONFIG}{extra}")).unwrap();
    p
}
