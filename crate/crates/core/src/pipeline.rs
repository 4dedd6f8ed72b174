//! Inference over every reference view of a scene, and the glue from
//! per-view estimates to fusion.

use std::fmt::Write as _;
use std::path::Path;

use itermvs_tensor::{Bound, Exec, ParamStore, Tape, Tensor};

use crate::config::FusionConfig;
use crate::error::Result;
use crate::fusion::{fuse, FusionView, ViewStats};
use crate::io::{load_depth, save_depth, DepthMap};
use crate::model::IterMvs;
use crate::ply::PointCloud;
use crate::scene::Scene;

#[derive(Clone, Debug)]
pub struct ViewEstimate {
    pub reference: usize,
    /// Full resolution, cropped to the image size.
    pub depth: DepthMap,
    pub confidence: DepthMap,
    /// Normalized inverse depth at 1/4 resolution for `k = 0..=K`.
    pub eta: Vec<Vec<f64>>,
    /// Last-iteration distribution `[D2, P]` at 1/4 resolution.
    pub prob: Tensor<f32>,
    pub quarter: (usize, usize),
}

fn crop(data: &[f32], wp: usize, (h, w): (usize, usize)) -> DepthMap {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&data[y * wp..y * wp + w]);
    }
    DepthMap { height: h, width: w, data: out }
}

/// Runs the network for one reference view with its first `n_views - 1`
/// pair sources.
pub fn infer_view(model: &IterMvs, store: &ParamStore<f32>, scene: &Scene, reference: usize, n_views: usize, iters: usize) -> Result<ViewEstimate> {
    let views = scene.input_views(reference, n_views)?;
    let input = scene.model_input::<f32>(&views);
    let tape = Tape::new();
    let p = Bound::new(&tape, store, false);
    let pred = model.forward(&tape, &p, &input, iters)?;
    let size = scene.size();
    let depth = crop(tape.value(pred.depth_full).data(), pred.full.1, size);
    let confidence = crop(tape.value(pred.confidence_full).data(), pred.full.1, size);
    let eta = pred
        .iterations
        .iter()
        .map(|it| tape.value(it.eta).data().iter().map(|&v| v as f64).collect())
        .collect();
    Ok(ViewEstimate {
        reference,
        depth,
        confidence,
        eta,
        prob: tape.value(pred.last().prob),
        quarter: pred.quarter,
    })
}

/// Every view as a reference, independently.
pub fn infer_scene(model: &IterMvs, store: &ParamStore<f32>, scene: &Scene, n_views: usize, iters: usize, exec: Exec) -> Result<Vec<ViewEstimate>> {
    exec.map_range(scene.len(), |r| infer_view(model, store, scene, r, n_views, iters))
        .into_iter()
        .collect()
}

/// `x,y,p_0,...` per 1/4-resolution pixel of the last distribution.
pub fn probability_csv(est: &ViewEstimate) -> String {
    let (h, w) = est.quarter;
    let d = est.prob.dims()[0];
    let data = est.prob.data();
    let mut s = String::from("x,y");
    for j in 0..d {
        write!(s, ",p{j}").expect("string write");
    }
    s.push('\n');
    for p in 0..h * w {
        write!(s, "{},{}", p % w, p / w).expect("string write");
        for j in 0..d {
            write!(s, ",{}", data[j * h * w + p]).expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn depth_path(dir: &Path, view: usize) -> std::path::PathBuf {
    dir.join(format!("depth/{view:04}.pfm"))
}

pub fn confidence_path(dir: &Path, view: usize) -> std::path::PathBuf {
    dir.join(format!("confidence/{view:04}.pfm"))
}

pub fn save_estimates(dir: &Path, estimates: &[ViewEstimate], with_prob: bool) -> Result<()> {
    for e in estimates {
        save_depth(&depth_path(dir, e.reference), &e.depth)?;
        save_depth(&confidence_path(dir, e.reference), &e.confidence)?;
        if with_prob {
            let path = dir.join(format!("prob/{:04}.csv", e.reference));
            crate::io::write_bytes(&path, probability_csv(e).as_bytes())?;
        }
    }
    Ok(())
}

/// Fusion inputs from saved estimates (`depth/`, `confidence/`).
pub fn load_fusion_views(scene: &Scene, dir: &Path) -> Result<Vec<FusionView>> {
    (0..scene.len())
        .map(|i| {
            let depth = load_depth(&depth_path(dir, i))?;
            let conf = load_depth(&confidence_path(dir, i))?;
            Ok(FusionView {
                camera: scene.views[i].camera.clone(),
                image: scene.views[i].image.clone(),
                depth,
                confidence: Some(conf.data),
            })
        })
        .collect()
}

pub fn fusion_views(scene: &Scene, estimates: &[ViewEstimate]) -> Vec<FusionView> {
    estimates
        .iter()
        .map(|e| FusionView {
            camera: scene.views[e.reference].camera.clone(),
            image: scene.views[e.reference].image.clone(),
            depth: e.depth.clone(),
            confidence: Some(e.confidence.data.clone()),
        })
        .collect()
}

/// Fuses against every other view, nearest first.
pub fn fuse_scene(scene: &Scene, views: &[FusionView], cfg: &FusionConfig, exec: Exec) -> Result<(PointCloud, Vec<ViewStats>)> {
    fuse(views, &scene.pairs, cfg, exec)
}
