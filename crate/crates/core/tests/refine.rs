mod common;

use common::{front_camera, grad_close, toy_model};
use gem_core::eigenmodel::{GemModel, Modality};
use gem_core::loss::PerceptualHook;
use gem_core::refine::{
    refine_bases, refine_objective, reorthogonalize, write_history_csv, RefineConfig, TrainingFrame, TrainingSet, View,
};
use gem_core::render::{render_forward, RenderConfig};
use gem_core::{Camera, GemError, ImageBuffer};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Probe {
    Mean(usize, usize),
    Basis(usize, usize, usize),
    Color(usize, usize),
}

fn nudged(model: &GemModel, p: Probe, h: f64) -> GemModel {
    let mut bases = model.bases().clone();
    let mut colors = model.colors().to_vec();
    match p {
        Probe::Mean(m, i) => bases[m].mean[i] += h,
        Probe::Basis(m, r, c) => bases[m].basis[(r, c)] += h,
        Probe::Color(t, ch) => colors[t][ch] += h,
    }
    model.with_parts(bases, colors).unwrap()
}

fn cameras(w: usize, h: usize) -> Vec<Camera> {
    let base = front_camera(w, h, 3.0);
    let turn = nalgebra::Rotation3::from_axis_angle(&Vector3::y_axis(), 0.35).into_inner();
    vec![base.clone(), base.co_moved(&turn, &Vector3::zeros()).unwrap()]
}

fn render_targets(model: &GemModel, frames: &[gem_core::eigenmodel::CoefficientVector], cams: &[Camera], bg: Vector3<f64>) -> Vec<TrainingFrame> {
    frames
        .iter()
        .map(|k| {
            let cloud = model.evaluate(k).unwrap();
            let views = cams
                .iter()
                .map(|c| {
                    let (img, _) = render_forward(&cloud, c, bg, &RenderConfig::default()).unwrap();
                    View::new(c.clone(), img).unwrap()
                })
                .collect();
            TrainingFrame {
                coefficients: k.clone(),
                views,
            }
        })
        .collect()
}

fn random_targets(rng: &mut impl Rng, model: &GemModel, seq: &[gem_core::GaussianCloud], cams: &[Camera]) -> Vec<TrainingFrame> {
    seq.iter()
        .map(|c| TrainingFrame {
            coefficients: model.project(c).unwrap(),
            views: cams
                .iter()
                .map(|cam| {
                    let data = (0..cam.width * cam.height * 3).map(|_| rng.random_range(0.0..1.0)).collect();
                    View::new(cam.clone(), ImageBuffer::from_data(cam.width, cam.height, data).unwrap()).unwrap()
                })
                .collect(),
        })
        .collect()
}

fn check_pipeline_gradient(size: usize, cfg: &RefineConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, seq) = toy_model(seed, 3, 5, [2, 2, 2, 1]);
    let frames = random_targets(&mut rng, &model, &seq[..2], &cameras(size, size));
    let refs: Vec<&TrainingFrame> = frames.iter().collect();
    let bg = Vector3::new(0.1, 0.2, 0.3);
    let (_, grad) = refine_objective(&model, &refs, bg, cfg, None).unwrap();

    let mut probes = Vec::new();
    for m in 0..4 {
        let b = &model.bases()[m];
        for _ in 0..4 {
            probes.push(Probe::Mean(m, rng.random_range(0..b.mean.len())));
            probes.push(Probe::Basis(m, rng.random_range(0..b.basis.nrows()), rng.random_range(0..b.basis.ncols())));
        }
    }
    for _ in 0..4 {
        probes.push(Probe::Color(rng.random_range(0..3), rng.random_range(0..3)));
    }
    let h = 1e-6;
    let mut nonzero = 0;
    for p in probes {
        if let Probe::Color(t, ch) = p {
            let c = model.colors()[t][ch];
            if c < 2.0 * h || c > 1.0 - 2.0 * h {
                continue;
            }
        }
        let f = |d: f64| refine_objective(&nudged(&model, p, d), &refs, bg, cfg, None).unwrap().0.total;
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        let analytic = match p {
            Probe::Mean(m, i) => grad.means[m][i],
            Probe::Basis(m, r, c) => grad.bases[m][(r, c)],
            Probe::Color(t, ch) => grad.colors[t][ch],
        };
        if numeric.abs() > 1e-5 {
            nonzero += 1;
        }
        assert!(grad_close(analytic, numeric), "{p:?}: analytic {analytic} numeric {numeric}");
    }
    assert!(nonzero >= 10, "only {nonzero} probes had signal");
}

#[test]
fn l1_gradient_matches_finite_differences_through_the_model() {
    let cfg = RefineConfig {
        ssim_weight: 0.0,
        position_reg: 0.0,
        scale_reg: 0.0,
        ..RefineConfig::default()
    };
    for seed in [1, 2, 3] {
        check_pipeline_gradient(8, &cfg, seed);
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let cfg = RefineConfig {
        position_reg: 0.3,
        scale_reg: 0.2,
        ..RefineConfig::default()
    };
    check_pipeline_gradient(12, &cfg, 4);
}

fn small_set(seed: u64) -> (GemModel, TrainingSet) {
    let (model, seq) = toy_model(seed, 24, 6, [3, 2, 2, 2]);
    let ks: Vec<_> = seq.iter().map(|c| model.project(c).unwrap()).collect();
    let bg = Vector3::new(0.05, 0.05, 0.1);
    let frames = render_targets(&model, &ks, &cameras(16, 16), bg);
    (model, TrainingSet { frames, background: bg })
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let (model, set) = small_set(5);
    let cfg = RefineConfig {
        steps: 0,
        ..RefineConfig::default()
    };
    let out = refine_bases(&model, &set, &cfg, None).unwrap();
    assert_eq!(out.model, model);
    assert!(out.history.is_empty() && out.checkpoints.is_empty());
    let ks: Vec<_> = set.frames.iter().map(|f| f.coefficients.clone()).collect();
    assert_eq!(out.coefficients, ks);
}

#[test]
fn self_rendered_targets_are_a_fixed_point() {
    let (model, set) = small_set(6);
    let cfg = RefineConfig {
        steps: 200,
        orthogonalize_every: 50,
        position_reg: 0.0,
        scale_reg: 0.0,
        step_size: 1e-3,
        ..RefineConfig::default()
    };
    let out = refine_bases(&model, &set, &cfg, None).unwrap();
    assert!(out.history.iter().all(|r| r.total < 1e-6), "{:?}", out.history.last());
    for (a, b) in out.model.bases().iter().zip(model.bases()) {
        assert!((&a.mean - &b.mean).amax() < 1e-6);
        // QR may flip nothing here: diag(R) >= 0 on an orthonormal basis is the identity.
        assert!((&a.basis - &b.basis).amax() < 1e-6, "{}", a.modality);
    }
    for (a, b) in out.coefficients.iter().zip(&set.frames) {
        assert!(a.blocks.iter().zip(&b.coefficients.blocks).all(|(x, y)| (x - y).amax() < 1e-6));
    }
}

#[test]
fn bases_stay_orthonormal_and_checkpoints_preserve_psnr() {
    let (model, mut set) = small_set(7);
    // Targets from a perturbed model so the bases actually move.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bases = model.bases().clone();
    for v in bases[0].mean.iter_mut() {
        *v += rng.random_range(-0.02..0.02);
    }
    let truth = model.with_parts(bases, model.colors().to_vec()).unwrap();
    let ks: Vec<_> = set.frames.iter().map(|f| f.coefficients.clone()).collect();
    set.frames = render_targets(&truth, &ks, &cameras(16, 16), set.background);
    let cfg = RefineConfig {
        steps: 40,
        orthogonalize_every: 10,
        step_size: 5e-3,
        ..RefineConfig::default()
    };
    let out = refine_bases(&model, &set, &cfg, None).unwrap();
    assert_eq!(out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
    assert!(out.model.orthonormality_error() <= 1e-5);
    for c in &out.checkpoints {
        assert!((c.psnr_after - c.psnr_before).abs() < 1e-6, "{c:?}");
    }
    assert!(out.final_psnr() > out.initial_psnr, "{} -> {}", out.initial_psnr, out.final_psnr());
}

#[test]
fn reorthogonalize_preserves_reconstructions() {
    let (model, set) = small_set(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut bases = model.bases().clone();
    for b in bases.iter_mut() {
        for v in b.basis.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let mut skewed = model.with_parts(bases, model.colors().to_vec()).unwrap();
    let before: Vec<_> = set.frames.iter().map(|f| skewed.evaluate_raw(&f.coefficients).unwrap()).collect();
    let mut frames = set.frames.clone();
    reorthogonalize(&mut skewed, &mut frames).unwrap();
    assert!(skewed.orthonormality_error() < 1e-12);
    for (f, b) in frames.iter().zip(&before) {
        let after = skewed.evaluate_raw(&f.coefficients).unwrap();
        for m in 0..4 {
            assert!((&after[m] - &b[m]).amax() < 1e-12);
        }
    }
}

#[test]
fn rank_deficient_basis_names_the_modality() {
    let (model, mut set) = small_set(9);
    let mut bases = model.bases().clone();
    let c = bases[Modality::Scale.index()].basis.column(0).into_owned();
    bases[Modality::Scale.index()].basis.set_column(1, &c);
    let mut broken = model.with_parts(bases, model.colors().to_vec()).unwrap();
    match reorthogonalize(&mut broken, &mut set.frames) {
        Err(GemError::RankDeficient { basis, component }) => {
            assert_eq!(basis, "scale");
            assert_eq!(component, 1);
        }
        other => panic!("{other:?}"),
    }
}

struct NanHook;

impl PerceptualHook for NanHook {
    fn loss(&self, render: &ImageBuffer, _: &ImageBuffer) -> gem_core::Result<(f64, ImageBuffer)> {
        Ok((f64::NAN, ImageBuffer::zeros(render.width(), render.height())))
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let (model, set) = small_set(10);
    let cfg = RefineConfig {
        steps: 5,
        perceptual_weight: 0.01,
        ..RefineConfig::default()
    };
    match refine_bases(&model, &set, &cfg, Some(&NanHook)) {
        Err(GemError::NonFiniteLoss { step, detail }) => {
            assert_eq!(step, 0);
            assert!(detail.contains("position"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_validation() {
    let bad = [
        RefineConfig {
            ssim_weight: 1.0,
            ..RefineConfig::default()
        },
        RefineConfig {
            orthogonalize_every: 0,
            ..RefineConfig::default()
        },
        RefineConfig {
            position_reg: -1.0,
            ..RefineConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err());
    }
    let json = r#"{"steps": 10, "orthogonalizeEvery": 5}"#;
    let cfg: RefineConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.steps, 10);
    assert_eq!(cfg.ssim_weight, 0.2);
    assert!(serde_json::from_str::<RefineConfig>(r#"{"stepz": 1}"#).is_err());
}

#[test]
fn history_csv_layout() {
    let (model, set) = small_set(11);
    let cfg = RefineConfig {
        steps: 3,
        ..RefineConfig::default()
    };
    let out = refine_bases(&model, &set, &cfg, None).unwrap();
    let mut buf = Vec::new();
    write_history_csv(&out.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,l1,dssim,total,psnr");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,"));
}

#[test]
fn refinement_is_deterministic() {
    let (model, set) = small_set(12);
    let cfg = RefineConfig {
        steps: 6,
        batch: 2,
        orthogonalize_every: 4,
        ..RefineConfig::default()
    };
    let a = refine_bases(&model, &set, &cfg, None).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| refine_bases(&model, &set, &cfg, None).unwrap());
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.history, b.history);
}


