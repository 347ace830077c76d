mod support;

use std::collections::BTreeMap;
use std::path::Path;

use gem_core::eigenmodel::{GemModel, Modality};
use gem_core::io::{load_coefficients, save_ply};
use gem_core::{GaussianCloud, ImageBuffer};
use nalgebra::{Vector3, Vector4};
use serde_json::Value;
use support::*;

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "synth", "distill", "refine", "fit", "render", "traverse", "regress-train", "regress-apply", "metrics", "info", "serve",
    ] {
        let out = ok(&[sub, "--help"], dir.path());
        assert!(out.contains("Usage: gem"), "{sub}: {out}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = run(&["distill", "nowhere", "-o", "m.gem"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
    assert_eq!(run(&["distill"], d).status.code(), Some(2));
    assert_eq!(run(&["info", "m.gem", "--bogus"], d).status.code(), Some(2));
    assert_eq!(run(&["info", "absent.gem"], d).status.code(), Some(2));

    std::fs::write(d.join("bad.json"), r#"{"synth": {"frameCount": 2, "wat": 1}}"#).unwrap();
    let bad = run(&["--config", "bad.json", "synth", "x"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("wat"));

    std::fs::write(d.join("junk.gem"), b"GEM1 but not really").unwrap();
    assert_eq!(run(&["info", "junk.gem"], d).status.code(), Some(3));
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(run(&["distill", "empty", "-o", "m.gem"], d).status.code(), Some(3));
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.json"),
        r#"{"synth": {"frameCount": 3, "seed": 7, "texResolution": 6, "imageSize": 16, "cameraCount": 1, "featureDim": 8, "components": [2, 2, 2, 2]}}"#,
    )
    .unwrap();
    let out = gem().args(["--config", "run.json", "synth", "ds", "--frames", "4"]).current_dir(d).output().unwrap();
    assert!(out.status.success());
    let echo = String::from_utf8_lossy(&out.stderr);
    let line = echo.lines().find(|l| l.starts_with("resolved config: ")).unwrap();
    let v: Value = serde_json::from_str(line.trim_start_matches("resolved config: ")).unwrap();
    let spec = &v["config"]["spec"];
    assert_eq!(spec["frameCount"], 4);
    assert_eq!(spec["seed"], 7);
    // Defaults fill what neither source sets.
    assert_eq!(spec["opacityAmplitude"], 0.5);
    let written: Value = serde_json::from_str(&std::fs::read_to_string(d.join("ds/spec.json")).unwrap()).unwrap();
    assert_eq!(written, *spec);
}

#[test]
fn synth_distill_and_refine_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        dataset(d, 6, 3);
        ok(&["distill", "ds", "-o", "m.gem", "--components", "3,2,2,1"], d);
        ok(
            &["refine", "m.gem", "ds", "-o", "r.gem", "--steps", "12", "--orthogonalize-every", "5", "--seed", "3", "--history", "h.csv"],
            d,
        );
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{k} differs");
    }
    assert!(fa.contains_key("ds/images/f0005_c01.pfm"));
    let sidecar: Value = serde_json::from_slice(&fa["r.gem.json"]).unwrap();
    assert_eq!(sidecar["checkpoints"].as_array().unwrap().len(), 3);
    assert_eq!(sidecar["config"]["steps"], 12);
    assert_eq!(String::from_utf8_lossy(&fa["h.csv"]).lines().count(), 13);
}

#[test]
fn constant_sequence_reports_zero_deviation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("frames")).unwrap();
    let mut cloud = GaussianCloud::default();
    for i in 0..6 {
        cloud
            .push(
                Vector3::new(i as f64 * 0.1, 0.0, 0.0),
                Vector4::new(1.0, 0.0, 0.0, 0.0),
                Vector3::repeat(-2.0),
                0.5,
                Vector3::new(0.5, 0.2, 0.1),
            )
            .unwrap();
    }
    for t in 0..4 {
        save_ply(&cloud, &d.join(format!("frames/{t:03}.ply"))).unwrap();
    }
    let report: Value = serde_json::from_str(&ok(&["distill", "frames", "-o", "c.gem", "--components", "2"], d)).unwrap();
    for m in report["report"]["modalities"].as_array().unwrap() {
        assert!(m["stddev"].as_array().unwrap().iter().all(|s| s.as_f64() == Some(0.0)), "{m}");
    }
    // Every component has zero deviation, so a traversal is constant.
    ok(&["traverse", "c.gem", "--steps", "3", "--size", "16", "-o", "s.pfm"], d);
    let strip = ImageBuffer::load(&d.join("s.pfm")).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(strip.pixel(x, y), strip.pixel(x + 16, y));
            assert_eq!(strip.pixel(x, y), strip.pixel(x + 32, y));
        }
    }
}

#[test]
fn distill_sweep_improves_with_components() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 12, 4);
    let out: Value = serde_json::from_str(&ok(&["distill", "ds", "-o", "m.gem", "--sweep", "1,3,6"], d)).unwrap();
    let psnr: Vec<f64> = out["sweep"].as_array().unwrap().iter().map(|r| r["psnr"].as_f64().unwrap()).collect();
    assert!(psnr[0] < psnr[1] && psnr[1] <= psnr[2], "{psnr:?}");
    let bytes = std::fs::metadata(d.join("m.gem")).unwrap().len();
    assert_eq!(out["bytes"].as_u64(), Some(bytes));
    assert_eq!(run(&["distill", "ds/clouds", "-o", "n.gem", "--sweep", "2"], d).status.code(), Some(2));
}

#[test]
fn traverse_single_step_is_the_mean_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 6, 3);
    ok(&["render", "ds/model.gem", "--cam", "ds/cams/cam_01.json", "-o", "mean.ppm"], d);
    ok(&["traverse", "ds/model.gem", "--cam", "ds/cams/cam_01.json", "--steps", "1", "-o", "one.ppm"], d);
    assert_eq!(std::fs::read(d.join("mean.ppm")).unwrap(), std::fs::read(d.join("one.ppm")).unwrap());

    ok(&["traverse", "ds/model.gem", "--modality", "opacity", "--component", "1", "--steps", "4", "-o", "s.ppm", "--size", "20"], d);
    let strip = ImageBuffer::load(&d.join("s.ppm")).unwrap();
    assert_eq!((strip.width(), strip.height()), (80, 20));
    assert_eq!(run(&["traverse", "ds/model.gem", "--component", "3", "-o", "x.ppm"], d).status.code(), Some(2));
    assert_eq!(run(&["traverse", "ds/model.gem", "--modality", "colour", "-o", "x.ppm"], d).status.code(), Some(2));
}

#[test]
fn render_fit_and_metrics_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 6, 3);
    // Frame 2 from its stored coefficients, compared with the ground truth.
    ok(&["render", "ds/model.gem", "--coeffs", "ds/coeffs.bin", "--frame", "2", "--cam", "ds/cams/cam_00.json", "-o", "f2.pfm"], d);
    let m: Value = serde_json::from_str(&ok(&["metrics", "f2.pfm", "ds/images/f0002_c00.pfm", "--json"], d)).unwrap();
    assert!(m["psnr"].as_f64().unwrap() > 25.0, "{m}");
    let same: Value = serde_json::from_str(&ok(&["metrics", "f2.pfm", "f2.pfm", "--json"], d)).unwrap();
    assert_eq!(same["ssim"].as_f64(), Some(1.0));
    assert_eq!(same["l1"].as_f64(), Some(0.0));
    assert!(ok(&["metrics", "f2.pfm", "f2.pfm"], d).starts_with("psnr"));

    let fit: Value = serde_json::from_str(&ok(&["fit", "ds/model.gem", "--dataset", "ds", "--frame", "2", "--steps", "150", "-o", "k.json"], d)).unwrap();
    assert!(fit["finalLoss"].as_f64().unwrap() < fit["initialLoss"].as_f64().unwrap());
    ok(&["render", "ds/model.gem", "--k", "k.json", "--cam", "ds/cams/cam_00.json", "-o", "fit.png"], d);
    let (ks, _) = load_coefficients(&d.join("ds/coeffs.bin")).unwrap();
    let fitted: Value = serde_json::from_str(&std::fs::read_to_string(d.join("k.json")).unwrap()).unwrap();
    assert_eq!(fitted["position"].as_array().unwrap().len(), ks[2].get(Modality::Position).len());

    // Explicit views instead of a dataset.
    ok(
        &["fit", "ds/model.gem", "--cams", "ds/cams/cam_00.json", "--images", "ds/images/f0002_c00.pfm", "--steps", "5", "-o", "k1.json"],
        d,
    );
    assert_eq!(run(&["fit", "ds/model.gem", "--dataset", "ds", "--frame", "9", "-o", "k.json"], d).status.code(), Some(2));
    assert_eq!(run(&["render", "ds/model.gem", "-o", "x.bmp"], d).status.code(), Some(2));
}

#[test]
fn info_reports_the_stored_means() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 6, 3);
    let v: Value = serde_json::from_str(&ok(&["info", "ds/model.gem", "--json", "--means"], d)).unwrap();
    let model = GemModel::load(&d.join("ds/model.gem")).unwrap();
    assert_eq!(v["T"], 64);
    assert_eq!(v["texWidth"], 8);
    for m in Modality::ALL {
        assert_eq!(v["M"][m.name()], 3);
        let means: Vec<f64> = v["means"][m.name()].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(means, model.basis(m).mean.as_slice());
    }
    assert!(ok(&["info", "ds/model.gem"], d).contains("position  M = 3"));
}

#[test]
fn regressor_trains_and_applies() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    dataset(d, 56, 3);
    let out: Value = serde_json::from_str(&ok(
        &["regress-train", "--pairs", "ds/pairs.json", "--model", "ds/model.gem", "-o", "r.gemr", "--steps", "300", "--hidden", "32,32"],
        d,
    ))
    .unwrap();
    assert_eq!(out["pairs"], 56);
    assert!(out["trainMse"].as_f64().unwrap() < 0.05, "{out}");
    let printed: Value = serde_json::from_str(&ok(
        &["regress-apply", "--regressor", "r.gemr", "--features", "ds/features.bin", "--rows", "0,5", "-o", "pred.bin", "--json"],
        d,
    ))
    .unwrap();
    assert_eq!(printed.as_array().unwrap().len(), 2);
    let (pred, counts) = load_coefficients(&d.join("pred.bin")).unwrap();
    assert_eq!(counts, [3; 4]);
    assert_eq!(pred.len(), 2);
    let model = GemModel::load(&d.join("ds/model.gem")).unwrap();
    for (k, s) in pred[1].to_flat().iter().zip(model.stddevs_flat()) {
        assert!(k.abs() <= 3.0 * s * (1.0 + 1e-6));
    }
    assert_eq!(
        run(&["regress-apply", "--regressor", "r.gemr", "--features", "ds/features.bin", "--rows", "99", "-o", "p.bin"], d).status.code(),
        Some(2)
    );
}
