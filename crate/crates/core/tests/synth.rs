use gem_core::eigenmodel::{CoefficientVector, GemModel};
use gem_core::image::ImageBuffer;
use gem_core::io::{load_obj, load_ply};
use gem_core::refine::training_psnr;
use gem_core::regressor::PairManifest;
use gem_core::render::RenderConfig;
use gem_core::synth::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> SynthSpec {
    SynthSpec {
        tex_resolution: 8,
        frame_count: 6,
        camera_count: 2,
        image_size: 24,
        mesh_resolution: [6, 10],
        feature_dim: 40,
        components: [4, 3, 3, 2],
        ..Default::default()
    }
}

fn singular_values(rows: &DMatrix<f64>) -> Vec<f64> {
    let mean = rows.row_mean();
    let mut c = rows.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    let mut s: Vec<f64> = c.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn generation_is_bitwise_deterministic() {
    let spec = SynthSpec {
        position_noise: 0.01,
        ..small()
    };
    let a = generate_sequence(&spec).unwrap();
    let b = generate_sequence(&spec).unwrap();
    assert_eq!(a.clouds, b.clouds);
    assert_eq!(a.meshes, b.meshes);
    let c = generate_sequence(&SynthSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.clouds[1].positions(), c.clouds[1].positions());
}

#[test]
fn first_frame_is_the_neutral_shape() {
    let seq = generate_sequence(&small()).unwrap();
    assert_eq!(seq.meshes[0].vertices(), seq.canonical.vertices());
    assert_ne!(seq.meshes[1].vertices(), seq.canonical.vertices());
}

#[test]
fn zero_amplitude_freezes_every_frame() {
    let mut spec = small();
    for b in &mut spec.blend_shapes {
        b.amplitude = 0.0;
    }
    let seq = generate_sequence(&spec).unwrap();
    for c in &seq.clouds[1..] {
        assert_eq!(c, &seq.clouds[0]);
    }
}

#[test]
fn a_single_shape_moves_positions_and_opacity_along_one_direction() {
    let spec = SynthSpec {
        frame_count: 12,
        blend_shapes: vec![BlendShape {
            amplitude: 1.0,
            frequency: 1.0,
            phase: 0.3,
        }],
        ..small()
    };
    let seq = generate_sequence(&spec).unwrap();
    let n = seq.clouds[0].len();
    let pos = DMatrix::from_fn(seq.clouds.len(), 3 * n, |t, j| seq.clouds[t].positions()[j / 3][j % 3]);
    let s = singular_values(&pos);
    assert!(s[0] > 1e-3);
    assert!(s[1] / s[0] < 1e-6, "position ratio {}", s[1] / s[0]);
    let op = DMatrix::from_fn(seq.clouds.len(), n, |t, j| seq.clouds[t].opacity_logits()[j]);
    let s = singular_values(&op);
    assert!(s[1] / s[0] < 1e-6, "opacity ratio {}", s[1] / s[0]);

    // Two shapes with distinct frequencies give rank two.
    let two = SynthSpec {
        blend_shapes: vec![spec.blend_shapes[0], BlendShape {
            amplitude: 0.5,
            frequency: 2.0,
            phase: 0.0,
        }],
        ..spec
    };
    let seq = generate_sequence(&two).unwrap();
    let pos = DMatrix::from_fn(seq.clouds.len(), 3 * n, |t, j| seq.clouds[t].positions()[j / 3][j % 3]);
    let s = singular_values(&pos);
    assert!(s[1] / s[0] > 1e-3 && s[2] / s[0] < 1e-6);
}

#[test]
fn gaussians_cover_the_full_map_and_stay_in_front_of_the_cameras() {
    let spec = small();
    let seq = generate_sequence(&spec).unwrap();
    assert_eq!(seq.clouds[0].len(), 64);
    assert_eq!(seq.cameras.len(), 2);
    let seq_img = render_ground_truth(&seq.clouds[..1], &seq.cameras, spec.background(), &RenderConfig::default())
        .unwrap();
    for img in &seq_img[0] {
        // The head covers the image center and leaves the corner empty.
        let c = img.pixel(12, 12);
        assert!(c.sum() > 0.5, "center {c:?}");
        assert_eq!(img.pixel(0, 0).sum(), 0.0);
    }
}

#[test]
fn features_are_a_linear_lift_of_normalized_coefficients() {
    let counts = [2, 1, 1, 1];
    let sigma = [2.0, 0.5, 1.0, 0.0, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ks: Vec<CoefficientVector> = (0..30)
        .map(|_| {
            let flat: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            CoefficientVector::from_flat(&flat, counts).unwrap()
        })
        .collect();
    let f = synthesize_features(&ks, &sigma, 64, 0.0, 3).unwrap();
    let (lift, bias) = feature_lift(5, 64, 3);
    // Independent evaluation of L (k / sigma) + b.
    for (i, k) in ks.iter().enumerate() {
        for d in 0..64 {
            let mut want = bias[d];
            for (j, v) in k.to_flat().iter().enumerate() {
                if sigma[j] > 0.0 {
                    want += lift[(d, j)] * v / sigma[j];
                }
            }
            assert!((f[(i, d)] - want).abs() < 1e-12);
        }
    }
    // Four informative coefficients: rank four after centering.
    let s = singular_values(&f);
    assert!(s[3] / s[0] > 1e-3 && s[4] / s[0] < 1e-10, "{s:?}");

    let zero = synthesize_features(&[CoefficientVector::zeros(counts)], &sigma, 64, 0.0, 3).unwrap();
    assert_eq!(zero.row(0).transpose(), bias);
    let noisy = synthesize_features(&ks, &sigma, 64, 0.1, 3).unwrap();
    assert_eq!(noisy, synthesize_features(&ks, &sigma, 64, 0.1, 3).unwrap());
    assert!((&noisy - &f).amax() > 0.01);
    assert!(synthesize_features(&ks, &sigma[..4], 64, 0.0, 3).is_err());
}

#[test]
fn written_dataset_is_complete_and_consistent() {
    let spec = small();
    let dir = tempfile::tempdir().unwrap();
    let (ds, summary) = write_dataset(&spec, dir.path()).unwrap();
    assert_eq!(summary.frames, 6);
    assert_eq!(summary.texels, 64);
    assert_eq!(summary.components, [4, 3, 3, 2]);
    let count = |sub: &str| std::fs::read_dir(dir.path().join(sub)).unwrap().count();
    assert_eq!(count("images"), 6 * 2);
    assert_eq!(count("meshes"), 6);
    assert_eq!(count("clouds"), 6);
    assert_eq!(count("cams"), 2);

    let ds2 = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds2.spec, spec);
    assert_eq!(ds2.layout().unwrap(), spec.layout());

    // Stored images match a fresh render of the regenerated sequence to
    // float32 precision.
    let seq = generate_sequence(&spec).unwrap();
    let imgs = render_ground_truth(&seq.clouds, &seq.cameras, spec.background(), &RenderConfig::default()).unwrap();
    for t in 0..6 {
        for c in 0..2 {
            let stored = ImageBuffer::load(&ds.image_path(t, c)).unwrap();
            let diff = stored
                .data()
                .iter()
                .zip(imgs[t][c].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-6, "frame {t} cam {c}: {diff}");
        }
        let mesh = load_obj(&ds.mesh_path(t)).unwrap();
        assert_eq!(mesh.vertices(), seq.meshes[t].vertices());
        let cloud = load_ply(&ds.cloud_path(t)).unwrap();
        assert_eq!(cloud.len(), 64);
    }
    assert_eq!(ds.cameras().unwrap(), seq.cameras);

    // Stored coefficients are the model's projection of each frame.
    let model = GemModel::load(&ds.model_path()).unwrap();
    let ks = ds.coefficients().unwrap();
    let clouds = ds.clouds().unwrap();
    for (k, cloud) in ks.iter().zip(&clouds) {
        let p = model.project(cloud).unwrap();
        let err = k.to_flat().iter().zip(p.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    let manifest = PairManifest::load(&dir.path().join("pairs.json")).unwrap();
    let (all, paired, targets) = manifest.resolve(dir.path()).unwrap();
    assert_eq!((all.nrows(), all.ncols()), (6, 40));
    assert_eq!(paired.nrows(), 6);
    assert_eq!(targets.len(), 6);

    let set = ds.training_set(&[0, 3], &ks).unwrap();
    assert_eq!(set.frames.len(), 2);
    assert_eq!(set.frames[1].views.len(), 2);
    let psnr = training_psnr(&model, &set, &RenderConfig::default()).unwrap();
    assert!(psnr > 20.0, "{psnr}");
    assert!(ds.training_set(&[6], &ks).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        SynthSpec {
            tex_resolution: 1,
            ..small()
        },
        SynthSpec {
            frame_count: 0,
            ..small()
        },
        SynthSpec {
            radii: [0.5, -1.0, 0.5],
            ..small()
        },
        SynthSpec {
            background: [2.0, 0.0, 0.0],
            ..small()
        },
    ];
    for s in bad {
        assert!(generate_sequence(&s).is_err());
    }
    assert!(serde_json::from_str::<SynthSpec>(r#"{"frames": 3}"#).is_err());
    let s: SynthSpec = serde_json::from_str(r#"{"frameCount": 3}"#).unwrap();
    assert_eq!(s.frame_count, 3);
    assert_eq!(s.tex_resolution, SynthSpec::default().tex_resolution);
}
