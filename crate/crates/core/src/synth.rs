//! Deterministic synthetic scenes: an ellipsoidal face proxy animated by
//! sinusoidal blend shapes, Gaussians bound to its texels, multi-view
//! renders, the distilled model with per-frame coefficients, and features
//! that are a fixed linear lift of those coefficients.
//!
//! Dataset layout:
//!
//! ```text
//! spec.json  layout.json  model.gem  coeffs.bin  features.bin  pairs.json
//! meshes/frame_%04d.obj  clouds/frame_%04d.ply
//! cams/cam_%02d.json     images/f%04d_c%02d.pfm
//! ```

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::deform::{apply_deformation, CorrespondenceMesh, DeformConfig};
use crate::eigenmodel::{distill, ColorSource};
use crate::eigenmodel::{CoefficientVector, GemModel, TexelLayout};
use crate::error::{invalid, Result};
use crate::gaussian::{rotation_to_quat, GaussianCloud};
use crate::image::ImageBuffer;
use crate::io;
use crate::refine::{TrainingFrame, TrainingSet, View};
use crate::regressor::{Pair, PairManifest, Provenance};
use crate::render::{render_forward, RenderConfig};

/// One animated displacement field, weighted by
/// `amplitude * sin(2 pi frequency t / frames + phase)` at frame `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BlendShape {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Side of the square Gaussian map.
    pub tex_resolution: usize,
    pub frame_count: usize,
    pub camera_count: usize,
    /// Side of the square renders.
    pub image_size: usize,
    /// Latitude and longitude subdivisions of the proxy mesh.
    pub mesh_resolution: [usize; 2],
    pub radii: [f64; 3],
    pub blend_shapes: Vec<BlendShape>,
    /// Peak displacement of a unit-weight blend shape, world units.
    pub displacement: f64,
    /// Opacity-logit change of a unit-weight blend shape.
    pub opacity_amplitude: f64,
    /// Per-frame Gaussian position jitter, world units.
    pub position_noise: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    /// Components per modality of the distilled model.
    pub components: [usize; 4],
    pub background: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            tex_resolution: 32,
            frame_count: 24,
            camera_count: 3,
            image_size: 64,
            mesh_resolution: [12, 24],
            radii: [0.55, 0.7, 0.6],
            blend_shapes: vec![
                BlendShape {
                    amplitude: 1.0,
                    frequency: 1.0,
                    phase: 0.0,
                },
                BlendShape {
                    amplitude: 0.8,
                    frequency: 2.0,
                    phase: 0.0,
                },
                BlendShape {
                    amplitude: 0.6,
                    frequency: 3.0,
                    phase: 0.0,
                },
            ],
            displacement: 0.06,
            opacity_amplitude: 0.5,
            position_noise: 0.0,
            feature_dim: 2048,
            feature_noise: 0.0,
            components: [10, 10, 10, 10],
            background: [0.0, 0.0, 0.0],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let [lat, lon] = self.mesh_resolution;
        let checks = [
            (self.tex_resolution >= 2, "texResolution must be at least 2"),
            (self.frame_count >= 1, "frameCount must be at least 1"),
            (self.camera_count >= 1, "cameraCount must be at least 1"),
            (self.image_size >= 1, "imageSize must be positive"),
            (lat >= 2 && lon >= 3, "meshResolution must be at least [2, 3]"),
            (self.radii.iter().all(|r| *r > 0.0 && r.is_finite()), "radii must be positive"),
            (self.feature_dim >= 1, "featureDim must be positive"),
            (
                self.position_noise >= 0.0 && self.feature_noise >= 0.0,
                "noise levels must be non-negative",
            ),
            (
                self.background.iter().all(|c| (0.0..=1.0).contains(c)),
                "background must lie in [0, 1]",
            ),
            (
                self.blend_shapes
                    .iter()
                    .all(|b| b.amplitude.is_finite() && b.frequency.is_finite() && b.phase.is_finite())
                    && self.displacement.is_finite()
                    && self.opacity_amplitude.is_finite(),
                "blend shape parameters must be finite",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(invalid(*msg)),
            None => Ok(()),
        }
    }

    pub fn layout(&self) -> TexelLayout {
        TexelLayout::full(self.tex_resolution, self.tex_resolution)
    }

    pub fn background(&self) -> Vector3<f64> {
        Vector3::from(self.background)
    }

    /// Blend-shape weights at frame `t`.
    pub fn weights(&self, t: usize) -> Vec<f64> {
        let n = self.frame_count.max(1) as f64;
        self.blend_shapes
            .iter()
            .map(|b| b.amplitude * (TAU * b.frequency * t as f64 / n + b.phase).sin())
            .collect()
    }
}

/// Isotropic bump on the unit sphere.
#[derive(Clone, Copy, Debug)]
struct Bump {
    center: Vector3<f64>,
    width: f64,
    height: f64,
}

impl Bump {
    fn at(&self, d: &Vector3<f64>) -> f64 {
        let r2 = (d - self.center).norm_squared();
        self.height * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

fn field(bumps: &[Bump], d: &Vector3<f64>) -> f64 {
    bumps.iter().map(|b| b.at(d)).sum()
}

fn random_direction(rng: &mut ChaCha8Rng, front: f64) -> Vector3<f64> {
    // Biased toward the face side (-z).
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal) - front,
        );
        if let Some(v) = v.try_normalize(1e-9) {
            return v;
        }
    }
}

/// Static shape of the face proxy plus the animated fields.
struct Proxy {
    radii: Vector3<f64>,
    detail: Vec<Bump>,
    shapes: Vec<Vec<Bump>>,
    opacity: Vec<Vec<Bump>>,
}

impl Proxy {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let f = |x: f64, y: f64, z: f64| Vector3::new(x, y, z).normalize();
        let mut detail = vec![
            Bump {
                center: f(0.0, -0.05, -1.0),
                width: 0.18,
                height: 0.12,
            },
            Bump {
                center: f(-0.3, 0.3, -1.0),
                width: 0.15,
                height: 0.04,
            },
            Bump {
                center: f(0.3, 0.3, -1.0),
                width: 0.15,
                height: 0.04,
            },
            Bump {
                center: f(0.0, -0.75, -0.7),
                width: 0.25,
                height: 0.05,
            },
        ];
        for _ in 0..3 {
            detail.push(Bump {
                center: random_direction(&mut rng, 0.0),
                width: rng.random_range(0.2..0.4),
                height: rng.random_range(-0.03..0.03),
            });
        }
        let mut shapes = Vec::new();
        let mut opacity = Vec::new();
        for _ in &spec.blend_shapes {
            shapes.push(
                (0..4)
                    .map(|_| Bump {
                        center: random_direction(&mut rng, 1.5),
                        width: rng.random_range(0.25..0.5),
                        height: rng.random_range(-1.0..1.0),
                    })
                    .collect(),
            );
            opacity.push(
                (0..2)
                    .map(|_| Bump {
                        center: random_direction(&mut rng, 1.0),
                        width: rng.random_range(0.3..0.6),
                        height: rng.random_range(-1.0..1.0),
                    })
                    .collect(),
            );
        }
        Self {
            radii: Vector3::from(spec.radii),
            detail,
            shapes,
            opacity,
        }
    }

    fn normal(&self, d: &Vector3<f64>) -> Vector3<f64> {
        d.component_div(&self.radii).normalize()
    }

    fn base(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.radii.component_mul(d) + self.normal(d) * field(&self.detail, d)
    }
}

/// Unit direction of lat-long grid point `(i, j)`; longitude 0 faces `+z`,
/// away from the cameras, so the UV seam is at the back of the head.
fn grid_direction(lat: usize, lon: usize, i: usize, j: usize) -> Vector3<f64> {
    // Open caps keep every triangle non-degenerate.
    let cap = 0.12 * PI;
    let theta = cap + (PI - 2.0 * cap) * i as f64 / lat as f64;
    let phi = TAU * (j % lon) as f64 / lon as f64;
    Vector3::new(theta.sin() * phi.sin(), theta.cos(), theta.sin() * phi.cos())
}

fn grid_index(lon: usize, i: usize, j: usize) -> usize {
    i * (lon + 1) + j
}

fn proxy_mesh(spec: &SynthSpec, proxy: &Proxy) -> Result<(CorrespondenceMesh, Vec<Vector3<f64>>)> {
    let [lat, lon] = spec.mesh_resolution;
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut dirs = Vec::new();
    for i in 0..=lat {
        for j in 0..=lon {
            let d = grid_direction(lat, lon, i, j);
            vertices.push(proxy.base(&d));
            uv.push(Vector2::new(j as f64 / lon as f64, i as f64 / lat as f64));
            dirs.push(d);
        }
    }
    let mut triangles = Vec::new();
    for i in 0..lat {
        for j in 0..lon {
            let (a, b) = (grid_index(lon, i, j), grid_index(lon, i, j + 1));
            let (c, d) = (grid_index(lon, i + 1, j + 1), grid_index(lon, i + 1, j));
            triangles.push([a, c, b]);
            triangles.push([a, d, c]);
        }
    }
    let mesh = CorrespondenceMesh::new(vertices, triangles, uv)?.bind(&spec.layout())?;
    Ok((mesh, dirs))
}

fn skin_color(d: &Vector3<f64>, rng_field: &[Bump]) -> Vector3<f64> {
    let mut c = Vector3::new(0.86, 0.64, 0.52) * (1.0 + field(rng_field, d));
    let dark = |center: Vector3<f64>, w: f64| (-(d - center.normalize()).norm_squared() / (2.0 * w * w)).exp();
    let eyes = dark(Vector3::new(-0.33, 0.22, -1.0), 0.07) + dark(Vector3::new(0.33, 0.22, -1.0), 0.07);
    c = c * (1.0 - 0.8 * eyes.min(1.0));
    let mouth = dark(Vector3::new(0.0, -0.4, -1.0), 0.1).min(1.0);
    c = c.lerp(&Vector3::new(0.7, 0.25, 0.25), mouth);
    let hair = ((d.y - 0.45) * 6.0).clamp(0.0, 1.0);
    c = c.lerp(&Vector3::new(0.25, 0.17, 0.1), hair);
    c.map(|v| v.clamp(0.0, 1.0))
}

/// Canonical mesh, per-frame meshes and clouds, and the cameras.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub canonical: CorrespondenceMesh,
    pub meshes: Vec<CorrespondenceMesh>,
    pub clouds: Vec<GaussianCloud>,
    pub cameras: Vec<Camera>,
}

pub fn generate_cameras(spec: &SynthSpec) -> Result<Vec<Camera>> {
    let n = spec.camera_count;
    (0..n)
        .map(|i| {
            let a = (i as f64 - (n as f64 - 1.0) / 2.0) * 0.5;
            let e: f64 = 0.1;
            let eye = Vector3::new(a.sin() * e.cos(), e.sin(), -a.cos() * e.cos()) * 2.6;
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                spec.image_size,
                spec.image_size,
                40f64.to_radians(),
            )
        })
        .collect()
}

fn canonical_cloud(spec: &SynthSpec, mesh: &CorrespondenceMesh, dirs: &[Vector3<f64>]) -> Result<GaussianCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc010);
    let tint: Vec<Bump> = (0..5)
        .map(|_| Bump {
            center: random_direction(&mut rng, 0.0),
            width: rng.random_range(0.2..0.5),
            height: rng.random_range(-0.12..0.12),
        })
        .collect();
    let texels = (spec.tex_resolution * spec.tex_resolution) as f64;
    let mut cloud = GaussianCloud::default();
    for b in mesh.binding() {
        let tri = mesh.triangles()[b.triangle];
        let [v0, v1, v2] = mesh.triangle_vertices(b.triangle);
        let t = (v1 - v0).normalize();
        let n = (v1 - v0).cross(&(v2 - v0)).normalize();
        let frame = Matrix3::from_columns(&[t, n.cross(&t), n]);
        let [u0, u1, u2] = tri.map(|i| mesh.uv()[i]);
        let uv_area = 0.5 * (u1 - u0).perp(&(u2 - u0)).abs();
        let area = 0.5 * (v1 - v0).cross(&(v2 - v0)).norm();
        // Surface area per texel sets the in-plane footprint.
        let s = 0.75 * (area / (uv_area * texels)).sqrt();
        let d: Vector3<f64> = (0..3).map(|k| dirs[tri[k]] * b.weights[k]).sum::<Vector3<f64>>().normalize();
        cloud.push(
            mesh.surface_point(b),
            rotation_to_quat(&frame),
            Vector3::new(s.ln(), s.ln(), (0.3 * s).ln()),
            2.0 + 0.5 * (3.0 * d.x).sin(),
            skin_color(&d, &tint),
        )?;
    }
    Ok(cloud)
}

pub fn generate_sequence(spec: &SynthSpec) -> Result<Sequence> {
    spec.validate()?;
    let proxy = Proxy::new(spec);
    let (canonical, dirs) = proxy_mesh(spec, &proxy)?;
    let base = canonical_cloud(spec, &canonical, &dirs)?;
    let normals: Vec<Vector3<f64>> = dirs.iter().map(|d| proxy.normal(d)).collect();
    // Blend-shape displacements per vertex, and opacity fields per texel.
    let shapes: Vec<Vec<Vector3<f64>>> = proxy
        .shapes
        .iter()
        .map(|bumps| {
            dirs.iter()
                .zip(&normals)
                .map(|(d, n)| n * (spec.displacement * field(bumps, d)))
                .collect()
        })
        .collect();
    let texel_dirs: Vec<Vector3<f64>> = canonical
        .binding()
        .iter()
        .map(|b| {
            let tri = canonical.triangles()[b.triangle];
            (0..3).map(|k| dirs[tri[k]] * b.weights[k]).sum::<Vector3<f64>>().normalize()
        })
        .collect();
    let fades: Vec<Vec<f64>> = proxy
        .opacity
        .iter()
        .map(|bumps| texel_dirs.iter().map(|d| spec.opacity_amplitude * field(bumps, d)).collect())
        .collect();

    let frames: Vec<(CorrespondenceMesh, GaussianCloud)> = (0..spec.frame_count)
        .into_par_iter()
        .map(|t| {
            let w = spec.weights(t);
            let mut vertices = canonical.vertices().to_vec();
            let mut logits = base.opacity_logits().to_vec();
            for (wi, (shape, fade)) in w.iter().zip(shapes.iter().zip(&fades)) {
                for (v, d) in vertices.iter_mut().zip(shape) {
                    *v += d * *wi;
                }
                for (o, f) in logits.iter_mut().zip(fade) {
                    *o += wi * f;
                }
            }
            let mesh = canonical.with_vertices(vertices)?;
            let (moved, _) = apply_deformation(&base, &canonical, &mesh, &DeformConfig::default())?;
            let mut positions = moved.positions().to_vec();
            if spec.position_noise > 0.0 {
                let mut rng = frame_rng(spec.seed, t);
                for p in &mut positions {
                    *p += Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * spec.position_noise;
                }
            }
            let cloud = GaussianCloud::new(
                positions,
                moved.rotations().to_vec(),
                moved.log_scales().to_vec(),
                logits,
                moved.colors().to_vec(),
            )?;
            Ok((mesh, cloud))
        })
        .collect::<Result<_>>()?;
    let (meshes, clouds) = frames.into_iter().unzip();
    Ok(Sequence {
        canonical,
        meshes,
        clouds,
        cameras: generate_cameras(spec)?,
    })
}

/// Independent stream per frame, so parallel generation cannot change output.
pub fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64 + 1);
    rng
}

/// Renders of every frame from every camera, `[frame][camera]`.
pub fn render_ground_truth(
    clouds: &[GaussianCloud],
    cameras: &[Camera],
    background: Vector3<f64>,
    render: &RenderConfig,
) -> Result<Vec<Vec<ImageBuffer>>> {
    clouds
        .par_iter()
        .map(|cloud| {
            cameras
                .iter()
                .map(|cam| Ok(render_forward(cloud, cam, background, render)?.0))
                .collect()
        })
        .collect()
}

/// Rows `L (k / sigma) + b + noise`, with `L` and `b` drawn from `seed`.
/// Coefficients with zero deviation are ignored. Zero coefficients without
/// noise give exactly the bias, the neutral feature.
pub fn synthesize_features(
    coefficients: &[CoefficientVector],
    sigma: &[f64],
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let k = sigma.len();
    if let Some(i) = coefficients.iter().position(|c| c.len() != k) {
        return Err(invalid(format!("frame {i} has {} coefficients, expected {k}", coefficients[i].len())));
    }
    let (lift, bias) = feature_lift(k, feature_dim, seed);
    let mut out = DMatrix::zeros(coefficients.len(), feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    for (i, c) in coefficients.iter().enumerate() {
        let z = DVector::from_iterator(
            k,
            c.to_flat().iter().zip(sigma).map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 }),
        );
        let mut f = &lift * z + &bias;
        if noise > 0.0 {
            f.apply(|v| *v += noise * rng.sample::<f64, _>(StandardNormal));
        }
        out.set_row(i, &f.transpose());
    }
    Ok(out)
}

/// The lift matrix (`dim x k`) and bias used by [`synthesize_features`].
pub fn feature_lift(k: usize, feature_dim: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7);
    let scale = 1.0 / (k.max(1) as f64).sqrt();
    let lift = DMatrix::from_fn(feature_dim, k, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    let bias = DVector::from_fn(feature_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    (lift, bias)
}

/// Paths of a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub spec: SynthSpec,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(&std::fs::read_to_string(root.join("spec.json"))?)?;
        spec.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            spec,
        })
    }

    pub fn mesh_path(&self, t: usize) -> PathBuf {
        self.root.join("meshes").join(format!("frame_{t:04}.obj"))
    }

    pub fn cloud_path(&self, t: usize) -> PathBuf {
        self.root.join("clouds").join(format!("frame_{t:04}.ply"))
    }

    pub fn camera_path(&self, c: usize) -> PathBuf {
        self.root.join("cams").join(format!("cam_{c:02}.json"))
    }

    pub fn image_path(&self, t: usize, c: usize) -> PathBuf {
        self.root.join("images").join(format!("f{t:04}_c{c:02}.pfm"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.root.join("model.gem")
    }

    pub fn layout(&self) -> Result<TexelLayout> {
        let layout: TexelLayout = serde_json::from_str(&std::fs::read_to_string(self.root.join("layout.json"))?)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.spec.camera_count).map(|c| Camera::load(&self.camera_path(c))).collect()
    }

    pub fn clouds(&self) -> Result<Vec<GaussianCloud>> {
        (0..self.spec.frame_count)
            .into_par_iter()
            .map(|t| io::load_ply(&self.cloud_path(t)))
            .collect()
    }

    pub fn coefficients(&self) -> Result<Vec<CoefficientVector>> {
        Ok(io::load_coefficients(&self.root.join("coeffs.bin"))?.0)
    }

    /// Targets for the given frames, paired with per-frame coefficients.
    pub fn training_set(&self, frames: &[usize], coefficients: &[CoefficientVector]) -> Result<TrainingSet> {
        let cams = self.cameras()?;
        let frames = frames
            .iter()
            .map(|&t| {
                let k = coefficients
                    .get(t)
                    .ok_or_else(|| invalid(format!("no coefficients for frame {t}")))?
                    .clone();
                let views = cams
                    .iter()
                    .enumerate()
                    .map(|(c, cam)| View::new(cam.clone(), ImageBuffer::load(&self.image_path(t, c))?))
                    .collect::<Result<_>>()?;
                Ok(TrainingFrame {
                    coefficients: k,
                    views,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainingSet {
            frames,
            background: self.spec.background(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetSummary {
    pub frames: usize,
    pub cameras: usize,
    pub texels: usize,
    pub components: [usize; 4],
    pub feature_dim: usize,
}

/// Generates the sequence, renders it, distills the model and writes the
/// whole dataset under `root`.
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<(Dataset, DatasetSummary)> {
    let seq = generate_sequence(spec)?;
    for sub in ["meshes", "clouds", "cams", "images"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let ds = Dataset {
        root: root.to_path_buf(),
        spec: spec.clone(),
    };
    std::fs::write(root.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    let layout = spec.layout();
    std::fs::write(root.join("layout.json"), serde_json::to_string(&layout)?)?;
    for (c, cam) in seq.cameras.iter().enumerate() {
        cam.save(&ds.camera_path(c))?;
    }
    let images = render_ground_truth(&seq.clouds, &seq.cameras, spec.background(), &RenderConfig::default())?;
    (0..spec.frame_count).into_par_iter().try_for_each(|t| -> Result<()> {
        io::save_obj(&seq.meshes[t], &ds.mesh_path(t))?;
        io::save_ply(&seq.clouds[t], &ds.cloud_path(t))?;
        for (c, img) in images[t].iter().enumerate() {
            img.save(&ds.image_path(t, c))?;
        }
        Ok(())
    })?;

    let model = dataset_model(&seq.clouds, &layout, spec.components)?;
    model.save(&ds.model_path())?;
    let ks: Vec<CoefficientVector> = seq.clouds.iter().map(|c| model.project(c)).collect::<Result<_>>()?;
    let counts = model.component_counts();
    io::save_coefficients(&ks, counts, &root.join("coeffs.bin"))?;
    let features = synthesize_features(&ks, &model.stddevs_flat(), spec.feature_dim, spec.feature_noise, spec.seed)?;
    io::save_features(&features, &root.join("features.bin"))?;
    PairManifest {
        features: "features.bin".into(),
        coefficients: "coeffs.bin".into(),
        provenance: Provenance::Projected,
        neutral: 0,
        pairs: (0..spec.frame_count)
            .map(|t| Pair {
                feature: t,
                coefficients: t,
            })
            .collect(),
    }
    .save(&root.join("pairs.json"))?;
    let summary = DatasetSummary {
        frames: spec.frame_count,
        cameras: spec.camera_count,
        texels: layout.texel_count(),
        components: counts,
        feature_dim: spec.feature_dim,
    };
    Ok((ds, summary))
}

/// Distills with as many components as the sequence supports, up to the
/// requested counts.
fn dataset_model(clouds: &[GaussianCloud], layout: &TexelLayout, components: [usize; 4]) -> Result<GemModel> {
    let t = layout.texel_count();
    let dims = [3, 4, 3, 1];
    let capped = [0, 1, 2, 3].map(|m| components[m].min(dims[m] * t));
    Ok(distill(clouds, layout, capped, ColorSource::Average)?.0)
}
