//! Image files, coefficient JSON and the default camera.

use std::io::Cursor;
use std::path::Path;

use gem_core::eigenmodel::{CoefficientVector, GemModel, Modality};
use gem_core::render::{render_forward, RenderConfig};
use gem_core::{Camera, ImageBuffer};
use image::{ImageFormat, RgbImage};
use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::{data, usage, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Png,
    Ppm,
    Pfm,
}

impl ImageKind {
    pub fn from_path(path: &Path) -> CliResult<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("png") => Ok(ImageKind::Png),
            Some("ppm") => Ok(ImageKind::Ppm),
            Some("pfm") => Ok(ImageKind::Pfm),
            _ => Err(usage(format!("{}: expected a .png, .ppm or .pfm file", path.display()))),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "png" => Some(ImageKind::Png),
            "ppm" => Some(ImageKind::Ppm),
            "pfm" => Some(ImageKind::Pfm),
            _ => None,
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageKind::Png => "image/png",
            ImageKind::Ppm => "image/x-portable-pixmap",
            ImageKind::Pfm => "application/octet-stream",
        }
    }
}

/// 8-bit PNG, no color management.
pub fn encode_png(img: &ImageBuffer) -> Vec<u8> {
    let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer length matches the image size");
    let mut out = Cursor::new(Vec::new());
    rgb.write_to(&mut out, ImageFormat::Png).expect("PNG encoding to memory cannot fail");
    out.into_inner()
}

pub fn encode_image(img: &ImageBuffer, kind: ImageKind) -> Vec<u8> {
    match kind {
        ImageKind::Png => encode_png(img),
        ImageKind::Ppm => img.encode_ppm(),
        ImageKind::Pfm => img.encode_pfm(),
    }
}

pub fn save_image(img: &ImageBuffer, path: &Path) -> CliResult<()> {
    let kind = ImageKind::from_path(path)?;
    std::fs::write(path, encode_image(img, kind))?;
    Ok(())
}

pub fn load_image(path: &Path) -> CliResult<ImageBuffer> {
    crate::require(path)?;
    match ImageKind::from_path(path)? {
        ImageKind::Png => {
            let rgb = image::open(path).map_err(|e| data(format!("{}: {e}", path.display())))?.to_rgb8();
            let values = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok(ImageBuffer::from_data(rgb.width() as usize, rgb.height() as usize, values)?)
        }
        _ => Ok(ImageBuffer::load(path)?),
    }
}

/// Coefficients as JSON, one array per modality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoefficientJson {
    pub position: Vec<f64>,
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl CoefficientJson {
    pub fn from_vector(k: &CoefficientVector) -> Self {
        let v = |m: Modality| k.get(m).iter().copied().collect();
        Self {
            position: v(Modality::Position),
            rotation: v(Modality::Rotation),
            scale: v(Modality::Scale),
            opacity: v(Modality::Opacity),
        }
    }

    pub fn to_vector(&self) -> CoefficientVector {
        let d = |v: &Vec<f64>| DVector::from_vec(v.clone());
        CoefficientVector {
            blocks: [d(&self.position), d(&self.rotation), d(&self.scale), d(&self.opacity)],
        }
    }
}

pub fn load_coefficients_json(path: &Path, model: &GemModel) -> CliResult<CoefficientVector> {
    crate::require(path)?;
    let text = std::fs::read_to_string(path)?;
    let parsed: CoefficientJson = serde_json::from_str(&text).map_err(|e| data(format!("{}: {e}", path.display())))?;
    let k = parsed.to_vector();
    model.check_coefficients(&k)?;
    Ok(k)
}

pub fn save_coefficients_json(k: &CoefficientVector, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(&CoefficientJson::from_vector(k)).map_err(|e| data(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Looks at the mean cloud from `-z`, far enough that its bounding sphere
/// fits a 40 degree field of view.
pub fn default_camera(model: &GemModel, size: usize) -> CliResult<Camera> {
    let mean = &model.basis(Modality::Position).mean;
    let t = model.texel_count();
    let points: Vec<Vector3<f64>> = (0..t).map(|i| Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2])).collect();
    let center = if t == 0 {
        Vector3::zeros()
    } else {
        points.iter().sum::<Vector3<f64>>() / t as f64
    };
    let radius = points.iter().map(|p| (p - center).norm()).fold(0.0, f64::max).max(1e-3);
    let fov = 40f64.to_radians();
    let distance = 1.15 * radius / (fov / 2.0).sin();
    Ok(Camera::look_at(
        center - Vector3::z() * distance,
        center,
        Vector3::y(),
        size,
        size,
        fov,
    )?)
}

/// The one rendering path shared by `render`, `traverse` and `/render`.
pub fn render_model(
    model: &GemModel,
    k: &CoefficientVector,
    camera: &Camera,
    background: Vector3<f64>,
    render: &RenderConfig,
) -> CliResult<ImageBuffer> {
    let cloud = model.evaluate(k)?;
    Ok(render_forward(&cloud, camera, background, render)?.0)
}
