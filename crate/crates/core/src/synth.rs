//! Synthetic scenes with exact ground truth: textured planar quads in
//! front of a background plane, rendered by per-pixel ray casting from
//! cameras on an arc.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MvsError, Result};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::io::{DepthMap, RgbImage};
use crate::scene::{pairs_by_distance, Scene, SceneView};

/// Smallest ray parameter counted as a hit.
const MIN_HIT: f64 = 1e-6;

/// Per-channel value noise over the surface coordinates, two octaves,
/// tinted by a base colour. Depends only on the surface point, so every
/// view sees the same texture.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub base: [f64; 3],
    /// Lattice frequency in cycles per unit; 0 gives a flat colour.
    pub freq: f64,
    pub seed: u64,
}

fn hash(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let h = hash(seed ^ hash((ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smoothly interpolated lattice noise in `[0, 1]`.
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
    let (ix, iy) = (fx as i64, fy as i64);
    let top = lattice(ix, iy, seed) * (1.0 - sx) + lattice(ix + 1, iy, seed) * sx;
    let bottom = lattice(ix, iy + 1, seed) * (1.0 - sx) + lattice(ix + 1, iy + 1, seed) * sx;
    top * (1.0 - sy) + bottom * sy
}

impl Texture {
    pub fn flat(base: [f64; 3]) -> Self {
        Texture { base, freq: 0.0, seed: 0 }
    }

    pub fn random<R: Rng>(rng: &mut R, freq: f64) -> Self {
        let base = [rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0)];
        Texture {
            base,
            freq: freq * rng.gen_range(0.75..1.33),
            seed: rng.gen(),
        }
    }

    pub fn shade(&self, a: f64, b: f64) -> [f64; 3] {
        if self.freq == 0.0 {
            return self.base;
        }
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let s = self.seed.wrapping_add(c as u64 * 0x1000);
            let (x, y) = (a * self.freq, b * self.freq);
            let n = 0.6 * value_noise(x, y, s) + 0.4 * value_noise(2.0 * x + 0.37, 2.0 * y + 0.71, s + 1);
            *o = (self.base[c] * (0.15 + 0.85 * n)).clamp(0.02, 0.98);
        }
        out
    }
}

/// A plane through `origin` spanned by orthonormal `u`, `v`; bounded to
/// `|a| <= half.0, |b| <= half.1` when `half` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half: Option<(f64, f64)>,
    pub texture: Texture,
}

impl Surface {
    pub fn normal(&self) -> Vec3 {
        self.u.cross(&self.v)
    }

    /// Plane offset `c` in `n . X = c`.
    pub fn offset(&self) -> f64 {
        self.normal().dot(&self.origin)
    }

    /// Ray parameter and surface coordinates of the hit, if any.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.offset() - n.dot(origin)) / denom;
        if s <= MIN_HIT {
            return None;
        }
        let rel = origin + dir * s - self.origin;
        let (a, b) = (rel.dot(&self.u), rel.dot(&self.v));
        match self.half {
            Some((ha, hb)) if a.abs() > ha || b.abs() > hb => None,
            _ => Some((s, a, b)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneGeometry {
    pub surfaces: Vec<Surface>,
}

impl SceneGeometry {
    /// Nearest hit along `origin + s * dir`: `(s, surface, a, b)`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize, f64, f64)> {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, surf) in self.surfaces.iter().enumerate() {
            if let Some((s, a, b)) = surf.intersect(origin, dir) {
                if best.is_none_or(|bst| s < bst.0) {
                    best = Some((s, i, a, b));
                }
            }
        }
        best
    }

    /// Camera-frame depth at the pixel centre `(x, y)`, if anything is hit.
    pub fn depth_at(&self, cam: &Camera, x: f64, y: f64) -> Option<f64> {
        let (c, dir) = pixel_ray(cam, x, y);
        // `dir` has unit camera-z component, so the ray parameter is depth.
        self.cast(&c, &dir).map(|h| h.0)
    }

    /// Image (colour averaged over `ss x ss` subpixels) and exact depth at
    /// pixel centres; missed pixels are black with NaN depth.
    pub fn render(&self, cam: &Camera, h: usize, w: usize, ss: usize) -> (RgbImage, DepthMap) {
        let mut img = vec![0u8; 3 * h * w];
        let mut depth = vec![f32::NAN; h * w];
        for y in 0..h {
            for x in 0..w {
                if let Some(d) = self.depth_at(cam, x as f64, y as f64) {
                    depth[y * w + x] = d as f32;
                }
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let ox = (sx as f64 + 0.5) / ss as f64 - 0.5;
                        let oy = (sy as f64 + 0.5) / ss as f64 - 0.5;
                        let (c, dir) = pixel_ray(cam, x as f64 + ox, y as f64 + oy);
                        if let Some((_, i, a, b)) = self.cast(&c, &dir) {
                            let col = self.surfaces[i].texture.shade(a, b);
                            for k in 0..3 {
                                acc[k] += col[k];
                            }
                        }
                    }
                }
                for k in 0..3 {
                    img[3 * (y * w + x) + k] = (acc[k] / (ss * ss) as f64 * 255.0).round() as u8;
                }
            }
        }
        (
            RgbImage { height: h, width: w, data: img },
            DepthMap { height: h, width: w, data: depth },
        )
    }
}

/// World-space ray through a pixel: camera centre and a direction whose
/// camera-z component is 1.
pub fn pixel_ray(cam: &Camera, x: f64, y: f64) -> (Vec3, Vec3) {
    let ray_cam = cam.k_inv() * Vec3::new(x, y, 1.0);
    (cam.center(), cam.r.transpose() * ray_cam)
}

/// Rotation whose camera looks from `eye` towards `target`, image y
/// pointing down along world +y.
pub fn look_at(eye: &Vec3, target: &Vec3) -> Mat3 {
    let z = (target - eye).normalize();
    let x = Vec3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub quads: usize,
    /// Texture frequency in cycles per scene unit.
    pub texture_freq: f64,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Subpixel samples per axis for colour.
    pub supersample: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            quads: 4,
            texture_freq: 2.5,
            views: 5,
            height: 64,
            width: 64,
            supersample: 3,
        }
    }
}

/// Distance from the arc to its look-at point, and the angle between
/// neighbouring cameras.
const ARC_RADIUS: f64 = 3.5;
const ARC_STEP: f64 = 0.3;

/// Random geometry for `spec`: quads with slanted normals between depth
/// 1.8 and 3.8 in front of a background plane near depth 5.
pub fn random_geometry<R: Rng>(rng: &mut R, spec: &SynthSpec) -> SceneGeometry {
    let mut surfaces = Vec::with_capacity(spec.quads + 1);
    let tilt = |rng: &mut R, max: f64| (rng.gen_range(-max..max), rng.gen_range(-max..max));
    let oriented = |ax: f64, ay: f64| {
        let rot = nalgebra::Rotation3::from_euler_angles(ax, ay, 0.0);
        (rot * Vec3::x(), rot * Vec3::y())
    };
    let (bx, by) = tilt(rng, 0.35);
    let (u, v) = oriented(bx, by);
    surfaces.push(Surface {
        origin: Vec3::new(0.0, 0.0, rng.gen_range(4.6..5.4)),
        u,
        v,
        half: None,
        texture: Texture::random(rng, 0.8 * spec.texture_freq),
    });
    for _ in 0..spec.quads {
        let z = rng.gen_range(1.8..3.8);
        let spread = 0.28 * z;
        let center = Vec3::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), z);
        let (ax, ay) = tilt(rng, 0.7);
        let (u, v) = oriented(ax, ay);
        let spin = rng.gen_range(0.0..PI);
        let (u, v) = (u * spin.cos() + v * spin.sin(), v * spin.cos() - u * spin.sin());
        let half = (rng.gen_range(0.2..0.6) * z / 2.5, rng.gen_range(0.2..0.6) * z / 2.5);
        surfaces.push(Surface {
            origin: center,
            u,
            v,
            half: Some(half),
            texture: Texture::random(rng, spec.texture_freq * 5.0 / z),
        });
    }
    SceneGeometry { surfaces }
}

/// Cameras on a horizontal arc around `(0, 0, ARC_RADIUS)`, with a small
/// random vertical offset per view.
pub fn arc_cameras<R: Rng>(rng: &mut R, views: usize, h: usize, w: usize) -> Vec<(Mat3, Vec3, Mat3)> {
    let f = 1.1 * w.max(h) as f64;
    let k = Mat3::new(f, 0.0, w as f64 / 2.0 - 0.5, 0.0, f, h as f64 / 2.0 - 0.5, 0.0, 0.0, 1.0);
    let target = Vec3::new(0.0, 0.0, ARC_RADIUS);
    (0..views)
        .map(|i| {
            let th = ARC_STEP * (i as f64 - (views as f64 - 1.0) / 2.0);
            let eye = Vec3::new(ARC_RADIUS * th.sin(), rng.gen_range(-0.08..0.08), ARC_RADIUS * (1.0 - th.cos()));
            let r = look_at(&eye, &target);
            (k, -(r * eye), r)
        })
        .collect()
}

/// Renders `geometry` from the given cameras, deriving each depth range
/// from the ground truth with a 5% margin.
pub fn render_scene(geometry: &SceneGeometry, cameras: &[(Mat3, Vec3, Mat3)], spec: &SynthSpec) -> Result<Scene> {
    if !spec.height.is_multiple_of(8) || !spec.width.is_multiple_of(8) || spec.height == 0 || spec.width == 0 {
        return Err(MvsError::Generation(format!(
            "image size {}x{} must be a positive multiple of 8",
            spec.height, spec.width
        )));
    }
    let mut views = Vec::with_capacity(cameras.len());
    for (i, &(k, t, r)) in cameras.iter().enumerate() {
        let probe = Camera::new(k, r, t, 1.0, 2.0).map_err(|e| MvsError::Generation(e.to_string()))?;
        let (image, depth) = geometry.render(&probe, spec.height, spec.width, spec.supersample.max(1));
        let finite = depth.data.iter().filter(|d| d.is_finite() && **d > 0.0);
        let (lo, hi) = finite.fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d as f64), hi.max(d as f64)));
        if !lo.is_finite() || hi <= 0.0 {
            return Err(MvsError::Generation(format!("view {i} sees no geometry")));
        }
        let camera =
            Camera::new(k, r, t, 0.95 * lo, 1.05 * hi).map_err(|e| MvsError::Generation(format!("view {i}: {e}")))?;
        views.push(SceneView {
            camera,
            image,
            depth: Some(depth),
        });
    }
    let pairs = pairs_by_distance(&views.iter().map(|v| &v.camera).collect::<Vec<_>>());
    Ok(Scene { views, pairs })
}

/// Seeded scene: same spec, bitwise identical output.
pub fn synth_scene(spec: &SynthSpec) -> Result<Scene> {
    if spec.views < 2 {
        return Err(MvsError::Generation("need at least two views".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = random_geometry(&mut rng, spec);
    let cameras = arc_cameras(&mut rng, spec.views, spec.height, spec.width);
    render_scene(&geometry, &cameras, spec)
}
