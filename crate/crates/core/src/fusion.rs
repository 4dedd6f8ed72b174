//! Confidence and multi-view geometric filtering of depth maps, and fusion
//! of the surviving pixels into one coloured point cloud.

use itermvs_tensor::Exec;

use crate::config::FusionConfig;
use crate::error::{MvsError, Result};
use crate::geometry::{Camera, Vec3};
use crate::io::{DepthMap, RgbImage};
use crate::ply::PointCloud;

/// `conf >= tau`, per pixel.
pub fn confidence_filter(conf: &[f32], tau: f64) -> Vec<bool> {
    conf.iter().map(|&c| c as f64 >= tau).collect()
}

fn usable(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// Outcome of checking one reference pixel against one source view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Check {
    /// Projection falls outside the source image or behind its camera,
    /// or the looked-up depth is invalid.
    Unseen,
    /// Reprojection distance in pixels and relative depth difference.
    Reprojected { dist: f64, rel_depth: f64 },
}

/// Forward-projects reference pixel `(x, y)` at depth `d0` into the
/// source, reads the source depth at the nearest pixel, and reprojects
/// that point into the reference.
pub fn reproject(reference: &Camera, x: usize, y: usize, d0: f64, source: &Camera, src_depth: &DepthMap) -> Check {
    let world = reference.backproject(x as f64, y as f64, d0);
    let Some((xs, ys, _)) = source.project(&world) else {
        return Check::Unseen;
    };
    let (xi, yi) = (xs.round(), ys.round());
    if !(xi >= 0.0 && yi >= 0.0 && xi < src_depth.width as f64 && yi < src_depth.height as f64) {
        return Check::Unseen;
    }
    let di = src_depth.at(yi as usize, xi as usize);
    if !usable(di) {
        return Check::Unseen;
    }
    let back = source.backproject(xi, yi, di as f64);
    let Some((xr, yr, dr)) = reference.project(&back) else {
        return Check::Unseen;
    };
    Check::Reprojected {
        dist: ((xr - x as f64).powi(2) + (yr - y as f64).powi(2)).sqrt(),
        rel_depth: (dr - d0).abs() / d0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoResult {
    pub mask: Vec<bool>,
    /// Consistent source views per reference pixel.
    pub counts: Vec<usize>,
    /// Per source, per pixel consistency.
    pub votes: Vec<Vec<bool>>,
}

/// A pixel is consistent with a source when the reprojection lands within
/// `delta` pixels and `epsilon` relative depth; it is accepted with at
/// least `n_geo` consistent sources.
pub fn geometric_filter(
    reference: &Camera,
    ref_depth: &DepthMap,
    sources: &[(&Camera, &DepthMap)],
    cfg: &FusionConfig,
) -> GeoResult {
    let (h, w) = (ref_depth.height, ref_depth.width);
    let votes: Vec<Vec<bool>> = sources
        .iter()
        .map(|(cam, depth)| {
            (0..h * w)
                .map(|i| {
                    let d0 = ref_depth.data[i];
                    if !usable(d0) {
                        return false;
                    }
                    match reproject(reference, i % w, i / w, d0 as f64, cam, depth) {
                        Check::Reprojected { dist, rel_depth } => dist < cfg.delta && rel_depth < cfg.epsilon,
                        Check::Unseen => false,
                    }
                })
                .collect()
        })
        .collect();
    let counts: Vec<usize> = (0..h * w).map(|i| votes.iter().filter(|v| v[i]).count()).collect();
    let mask = (0..h * w)
        .map(|i| usable(ref_depth.data[i]) && counts[i] >= cfg.n_geo)
        .collect();
    GeoResult { mask, counts, votes }
}

/// One view's estimate as consumed by fusion.
#[derive(Clone, Debug)]
pub struct FusionView {
    pub camera: Camera,
    pub image: RgbImage,
    pub depth: DepthMap,
    /// `None` skips the confidence test.
    pub confidence: Option<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewStats {
    pub confident: usize,
    pub consistent: usize,
    pub accepted: usize,
    pub mask: Vec<bool>,
}

/// World point and reference colour for every accepted pixel of `view`.
pub fn points_of(view: &FusionView, mask: &[bool]) -> PointCloud {
    let w = view.depth.width;
    let mut pc = PointCloud::default();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % w, i / w);
        let p: Vec3 = view.camera.backproject(x as f64, y as f64, view.depth.data[i] as f64);
        pc.push([p.x as f32, p.y as f32, p.z as f32], view.image.pixel(y, x));
    }
    pc
}

/// Filters every view against its `pairs` sources and concatenates the
/// accepted points in view order. Views are processed independently.
pub fn fuse(views: &[FusionView], pairs: &[Vec<usize>], cfg: &FusionConfig, exec: Exec) -> Result<(PointCloud, Vec<ViewStats>)> {
    if pairs.len() != views.len() {
        return Err(MvsError::Config(format!("{} pair entries for {} views", pairs.len(), views.len())));
    }
    for v in views {
        if (v.image.height, v.image.width) != (v.depth.height, v.depth.width)
            || v.confidence.as_ref().is_some_and(|c| c.len() != v.depth.data.len())
        {
            return Err(MvsError::Config("image, depth and confidence sizes differ".into()));
        }
    }
    let per_view = exec.map_range(views.len(), |r| {
        let view = &views[r];
        let conf = match &view.confidence {
            Some(c) => confidence_filter(c, cfg.tau),
            None => vec![true; view.depth.data.len()],
        };
        let sources: Vec<(&Camera, &DepthMap)> = pairs[r].iter().map(|&s| (&views[s].camera, &views[s].depth)).collect();
        let geo = geometric_filter(&view.camera, &view.depth, &sources, cfg);
        let mask: Vec<bool> = conf.iter().zip(&geo.mask).map(|(&a, &b)| a && b).collect();
        let stats = ViewStats {
            confident: conf.iter().filter(|&&m| m).count(),
            consistent: geo.mask.iter().filter(|&&m| m).count(),
            accepted: mask.iter().filter(|&&m| m).count(),
            mask,
        };
        (points_of(view, &stats.mask), stats)
    });
    let mut cloud = PointCloud::default();
    let mut stats = Vec::with_capacity(views.len());
    for (pc, s) in per_view {
        cloud.extend(pc);
        stats.push(s);
    }
    Ok((cloud, stats))
}
