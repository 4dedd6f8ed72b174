//! Pinhole cameras, plane-sweep warping and the normalized inverse-depth
//! parameterization.
//!
//! Pixel coordinates follow the centre convention: integer `(x, y)` is the
//! centre of its cell, so a position `x` at one resolution maps to
//! `(x + 0.5) * s - 0.5` at a resolution `s` times as fine.

use std::path::Path;

use itermvs_tensor::Tensor;
use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{MvsError, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Source-frame depths at or below this are behind the camera.
pub const MIN_WARP_DEPTH: f64 = 1e-8;

/// Intrinsics `k`, world-to-camera `r`/`t` and the depth range of a view.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Mat3,
    pub r: Mat3,
    pub t: Vec3,
    pub d_min: f64,
    pub d_max: f64,
}

impl Camera {
    pub fn new(k: Mat3, r: Mat3, t: Vec3, d_min: f64, d_max: f64) -> Result<Self> {
        let cam = Camera {
            k,
            r,
            t,
            d_min,
            d_max,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.r.transpose() * self.r;
        if (rtr - Mat3::identity()).abs().max() > 1e-6 || self.r.determinant() <= 0.0 {
            return Err(MvsError::Camera("rotation is not orthonormal".into()));
        }
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(MvsError::Camera("intrinsics are not upper-triangular".into()));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(MvsError::Camera("focal lengths must be positive".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max && self.d_max.is_finite()) {
            return Err(MvsError::Camera(format!(
                "depth range [{}, {}] is not 0 < d_min < d_max",
                self.d_min, self.d_max
            )));
        }
        if !self.k.iter().chain(self.r.iter()).chain(self.t.iter()).all(|v| v.is_finite()) {
            return Err(MvsError::Camera("non-finite entries".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        -(self.r.transpose() * self.t)
    }

    /// Pixel position and camera-frame depth of a world point, or `None`
    /// when it is behind the camera.
    pub fn project(&self, world: &Vec3) -> Option<(f64, f64, f64)> {
        let pc = self.r * world + self.t;
        if pc.z <= MIN_WARP_DEPTH {
            return None;
        }
        let q = self.k * pc;
        Some((q.x / q.z, q.y / q.z, pc.z))
    }

    /// World point seen at pixel `(x, y)` at camera depth `d`.
    pub fn backproject(&self, x: f64, y: f64, d: f64) -> Vec3 {
        let ray = self.k_inv() * Vec3::new(x, y, 1.0);
        self.r.transpose() * (ray * d - self.t)
    }

    pub fn k_inv(&self) -> Mat3 {
        // Upper-triangular with positive diagonal, always invertible.
        self.k.try_inverse().expect("validated intrinsics are invertible")
    }

    /// The same camera with intrinsics for a resolution `factor` times the
    /// original (0.5 halves the image).
    pub fn rescaled(&self, factor: f64) -> Camera {
        Camera {
            k: scale_intrinsics(&self.k, factor),
            ..self.clone()
        }
    }

    /// Scene scaled by `s` about the world origin: translations and the
    /// depth range scale, rotations and intrinsics do not.
    pub fn scene_scaled(&self, s: f64) -> Camera {
        Camera {
            t: self.t * s,
            d_min: self.d_min * s,
            d_max: self.d_max * s,
            ..self.clone()
        }
    }

    /// 4x4 world-to-camera matrix.
    pub fn extrinsic(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }
}

/// A camera together with its image, `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct CameraView {
    pub camera: Camera,
    pub image: Tensor<f32>,
}

impl CameraView {
    pub fn new(camera: Camera, image: Tensor<f32>) -> Result<Self> {
        camera.validate()?;
        let d = image.dims();
        if d.len() != 3 || d[0] != 3 {
            return Err(MvsError::Scene(format!("image shape {d:?} is not [3,H,W]")));
        }
        Ok(CameraView { camera, image })
    }

    pub fn height(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[2]
    }
}

/// Transform from the reference camera frame to a source camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePose {
    pub r: Mat3,
    pub t: Vec3,
}

impl RelativePose {
    pub fn identity() -> Self {
        RelativePose {
            r: Mat3::identity(),
            t: Vec3::zeros(),
        }
    }
}

pub fn relative_pose(reference: &Camera, source: &Camera) -> RelativePose {
    let r = source.r * reference.r.transpose();
    RelativePose {
        t: source.t - r * reference.t,
        r,
    }
}

/// Result of warping one reference pixel at one depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub x: f64,
    pub y: f64,
    /// Source-frame depth before de-homogenization.
    pub z: f64,
    pub dx_dd: f64,
    pub dy_dd: f64,
    pub behind: bool,
}

/// Plane-sweep warp between two views. The homogeneous source position is
/// affine in the reference depth, `q(d) = m p d + b`, which is all the
/// per-pixel state the warp needs.
#[derive(Clone, Debug)]
pub struct Warper {
    m: Mat3,
    b: Vec3,
}

impl Warper {
    pub fn new(k0: &Mat3, ki: &Mat3, pose: &RelativePose) -> Self {
        let k0_inv = k0.try_inverse().expect("intrinsics must be invertible");
        Warper {
            m: ki * pose.r * k0_inv,
            b: ki * pose.t,
        }
    }

    pub fn warp(&self, x: f64, y: f64, d: f64) -> Warp {
        let a = self.m * Vec3::new(x, y, 1.0);
        let q = a * d + self.b;
        if q.z <= MIN_WARP_DEPTH {
            return Warp {
                x: f64::NAN,
                y: f64::NAN,
                z: q.z,
                dx_dd: 0.0,
                dy_dd: 0.0,
                behind: true,
            };
        }
        let z2 = q.z * q.z;
        Warp {
            x: q.x / q.z,
            y: q.y / q.z,
            z: q.z,
            dx_dd: (a.x * q.z - q.x * a.z) / z2,
            dy_dd: (a.y * q.z - q.y * a.z) / z2,
            behind: false,
        }
    }
}

/// Position in the source view of reference pixel `p` at depth `d`.
pub fn warp_pixel(p: (f64, f64), d: f64, k0: &Mat3, ki: &Mat3, pose: &RelativePose) -> Warp {
    Warper::new(k0, ki, pose).warp(p.0, p.1, d)
}

/// The `j`-th of `count` inverse depths spaced evenly over
/// `[1/d_max, 1/d_min]`.
pub fn inverse_sample(d_min: f64, d_max: f64, count: usize, j: usize) -> f64 {
    let (far, near) = (1.0 / d_max, 1.0 / d_min);
    far + (near - far) * j as f64 / (count - 1) as f64
}

/// Depths whose inverses are evenly spaced, endpoints included, ordered by
/// increasing inverse depth.
pub fn sample_inverse_uniform(d_min: f64, d_max: f64, count: usize) -> Vec<f64> {
    assert!(count >= 2, "need at least two depth samples");
    (0..count)
        .map(|j| 1.0 / inverse_sample(d_min, d_max, count, j))
        .collect()
}

/// Normalized inverse depth in `[0, 1]` (1 at `d_min`). The flag reports
/// whether `d` had to be clamped into the range first.
pub fn normalize_inv(d: f64, d_min: f64, d_max: f64) -> (f64, bool) {
    let clamped = !(d >= d_min && d <= d_max);
    let dc = if d.is_nan() { d_max } else { d.clamp(d_min, d_max) };
    let (far, near) = (1.0 / d_max, 1.0 / d_min);
    (((1.0 / dc - far) / (near - far)).clamp(0.0, 1.0), clamped)
}

pub fn denormalize_inv(eta: f64, d_min: f64, d_max: f64) -> f64 {
    let (far, near) = (1.0 / d_max, 1.0 / d_min);
    1.0 / (far + eta * (near - far))
}

/// Intrinsics for an image `factor` times the resolution, keeping pixel
/// centres aligned.
pub fn scale_intrinsics(k: &Mat3, factor: f64) -> Mat3 {
    let mut out = *k;
    out[(0, 0)] *= factor;
    out[(0, 1)] *= factor;
    out[(1, 1)] *= factor;
    out[(0, 2)] = rescale_coord(k[(0, 2)], factor);
    out[(1, 2)] = rescale_coord(k[(1, 2)], factor);
    out
}

/// Intrinsics at pyramid level `level` (resolution `1 / 2^level`).
pub fn intrinsics_at_level(k: &Mat3, level: u32) -> Mat3 {
    scale_intrinsics(k, 0.5f64.powi(level as i32))
}

/// Maps a pixel coordinate to a resolution `factor` times as fine.
pub fn rescale_coord(x: f64, factor: f64) -> f64 {
    (x + 0.5) * factor - 0.5
}

/// Parses an MVSNet-style camera file: an `extrinsic` 4x4 block, an
/// `intrinsic` 3x3 block and a final `d_min d_interval d_count d_max` line.
pub fn parse_cam(text: &str, path: &Path) -> Result<Camera> {
    let mut toks = Tokens::new(text, path);
    toks.expect_word("extrinsic")?;
    let mut ext = [0.0; 16];
    for v in &mut ext {
        *v = toks.number()?;
    }
    toks.expect_word("intrinsic")?;
    let mut int = [0.0; 9];
    for v in &mut int {
        *v = toks.number()?;
    }
    let d_min = toks.number()?;
    let _interval = toks.number()?;
    let _count = toks.number()?;
    let d_max = toks.number()?;
    let r = Mat3::from_row_slice(&[
        ext[0], ext[1], ext[2], ext[4], ext[5], ext[6], ext[8], ext[9], ext[10],
    ]);
    let t = Vec3::new(ext[3], ext[7], ext[11]);
    let k = Mat3::from_row_slice(&int);
    Camera::new(k, r, t, d_min, d_max)
        .map_err(|e| MvsError::parse(path, text.len(), e.to_string()))
}

/// Inverse of [`parse_cam`]; values print in shortest round-trip form.
pub fn format_cam(cam: &Camera, d_count: usize) -> String {
    let mut s = String::from("extrinsic\n");
    let e = cam.extrinsic();
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| e[(i, j)].to_string()).collect();
        s += &row.join(" ");
        s.push('\n');
    }
    s += "\nintrinsic\n";
    for i in 0..3 {
        let row: Vec<String> = (0..3).map(|j| cam.k[(i, j)].to_string()).collect();
        s += &row.join(" ");
        s.push('\n');
    }
    let interval = (cam.d_max - cam.d_min) / (d_count.max(2) - 1) as f64;
    s += &format!("\n{} {} {} {}\n", cam.d_min, interval, d_count, cam.d_max);
    s
}

/// Whitespace tokenizer that remembers byte offsets for error messages.
struct Tokens<'a> {
    text: &'a str,
    pos: usize,
    path: &'a Path,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        Tokens { text, pos: 0, path }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let start = self.pos + rest.len() - rest.trim_start().len();
        let tail = &self.text[start..];
        if tail.is_empty() {
            self.pos = self.text.len();
            return None;
        }
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        self.pos = start + len;
        Some((start, &tail[..len]))
    }

    fn expect_word(&mut self, word: &str) -> Result<()> {
        match self.next() {
            Some((_, w)) if w == word => Ok(()),
            Some((at, w)) => Err(MvsError::parse(self.path, at, format!("expected '{word}', found '{w}'"))),
            None => Err(MvsError::parse(self.path, self.pos, format!("expected '{word}'"))),
        }
    }

    fn number(&mut self) -> Result<f64> {
        match self.next() {
            Some((at, w)) => w
                .parse()
                .map_err(|_| MvsError::parse(self.path, at, format!("bad number '{w}'"))),
            None => Err(MvsError::parse(self.path, self.pos, "unexpected end of file")),
        }
    }
}
