#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn gem() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gem"));
    c.env("RUST_LOG", "warn");
    c
}

/// Runs `gem` with `args`, returning the output whatever the status.
pub fn run(args: &[&str], dir: &Path) -> Output {
    gem().args(args).current_dir(dir).output().expect("spawn gem")
}

pub fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "gem {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// A small synthetic dataset with `components` per modality.
pub fn dataset(dir: &Path, frames: usize, components: usize) -> PathBuf {
    let ds = dir.join("ds");
    ok(
        &[
            "synth",
            ds.to_str().unwrap(),
            "--frames",
            &frames.to_string(),
            "--tex-resolution",
            "8",
            "--image-size",
            "24",
            "--cameras",
            "2",
            "--feature-dim",
            "64",
            "--components",
            &components.to_string(),
        ],
        dir,
    );
    ds
}
