//! Pinhole camera with a rigid world-to-camera transform.
//!
//! Camera space follows the usual computer-vision convention: +x right,
//! +y down, +z forward. Pixel `(u, v)` covers `[u, u+1) x [v, v+1)` and is
//! sampled at its center `(u + 0.5, v + 0.5)`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GemError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    world_to_camera: Matrix4<f64>,
}

/// JSON form: `worldToCamera` is 16 floats, row-major.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CameraJson {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: Vec<f64>,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("camera image size must be positive"));
        }
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(invalid(format!("bad intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")));
        }
        if !world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite world-to-camera transform"));
        }
        let r = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(invalid(format!("world-to-camera rotation is not orthonormal (error {err:e})")));
        }
        let last = world_to_camera.row(3);
        if (last[0], last[1], last[2], last[3]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(invalid("world-to-camera bottom row must be (0, 0, 0, 1)"));
        }
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` pointing up in the image.
    /// `fov_y` is the vertical field of view in radians; the principal point is
    /// the image center.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        fov_y: f64,
    ) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| invalid("eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| invalid("up is parallel to the viewing direction"))?;
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(
            width,
            height,
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            rigid(&r, &t),
        )
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    /// Upper-left 3x3 block (W in `J W Sigma W^T J^T`).
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World-space camera center.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Same intrinsics, new extrinsics.
    pub fn with_world_to_camera(&self, world_to_camera: Matrix4<f64>) -> Result<Self> {
        Self::new(self.width, self.height, self.fx, self.fy, self.cx, self.cy, world_to_camera)
    }

    /// The camera that sees the world transformed by `x -> R x + t` exactly as
    /// this camera sees the untransformed world.
    pub fn co_moved(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        // W' = W * M^-1 with M = [R t; 0 1].
        let inv = rigid(&rotation.transpose(), &-(rotation.transpose() * translation));
        self.with_world_to_camera(self.world_to_camera * inv)
    }

    pub fn to_json(&self) -> String {
        let m = &self.world_to_camera;
        let row_major = (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)])).collect();
        serde_json::to_string_pretty(&CameraJson {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            world_to_camera: row_major,
        })
        .expect("camera serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CameraJson = serde_json::from_str(text)?;
        if raw.world_to_camera.len() != 16 {
            return Err(invalid(format!(
                "worldToCamera needs 16 values, found {}",
                raw.world_to_camera.len()
            )));
        }
        let m = Matrix4::from_row_slice(&raw.world_to_camera);
        Self::new(raw.width, raw.height, raw.fx, raw.fy, raw.cx, raw.cy, m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(GemError::from)
    }
}

/// `[R t; 0 1]`.
pub fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}
