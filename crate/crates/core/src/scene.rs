//! Scenes on disk: `images/NNNN.ppm`, `cams/NNNN_cam.txt`,
//! `depths_gt/NNNN.pfm` (optional) and `pair.txt`.

use std::fmt::Write as _;
use std::path::Path;

use itermvs_tensor::{Real, Tensor};

use crate::error::{MvsError, Result};
use crate::geometry::{format_cam, parse_cam, Camera, CameraView};
use crate::io::{load_depth, load_image, read_bytes, save_depth, save_image, write_bytes, DepthMap, RgbImage};
use crate::model::ModelInput;

/// Depth-sample count written into camera files.
const CAM_D_COUNT: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneView {
    pub camera: Camera,
    pub image: RgbImage,
    pub depth: Option<DepthMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub views: Vec<SceneView>,
    /// Per reference view, source indices from best to worst.
    pub pairs: Vec<Vec<usize>>,
}

/// Orders the other views by camera-centre distance to each view, ties
/// broken by index.
pub fn pairs_by_distance(cameras: &[&Camera]) -> Vec<Vec<usize>> {
    let centers: Vec<_> = cameras.iter().map(|c| c.center()).collect();
    (0..cameras.len())
        .map(|r| {
            let mut others: Vec<usize> = (0..cameras.len()).filter(|&i| i != r).collect();
            others.sort_by(|&a, &b| {
                let da = (centers[a] - centers[r]).norm();
                let db = (centers[b] - centers[r]).norm();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            others
        })
        .collect()
}

pub fn format_pairs(pairs: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for (r, src) in pairs.iter().enumerate() {
        write!(s, "{r} {}", src.len()).expect("string write");
        for i in src {
            write!(s, " {i}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Parses `reference count sources...` lines for `n` views.
pub fn parse_pairs(text: &str, n: usize, path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut pairs = vec![None; n];
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let mut nums = Vec::new();
        let mut pos = offset;
        for tok in line.split_whitespace() {
            let at = pos + line[pos - offset..].find(tok).expect("token is in line");
            pos = at + tok.len();
            let v: usize = tok
                .parse()
                .map_err(|_| MvsError::parse(path, at, format!("expected an index, found '{tok}'")))?;
            nums.push((v, at));
        }
        if !nums.is_empty() {
            let bad = |at: usize, m: String| Err(MvsError::parse(path, at, m));
            let (r, at) = nums[0];
            if r >= n {
                return bad(at, format!("reference {r} out of range for {n} views"));
            }
            let count = nums.get(1).map(|c| c.0).unwrap_or(usize::MAX);
            if nums.len() != count.saturating_add(2) {
                return bad(at, "source count does not match the listed indices".into());
            }
            let src: Vec<usize> = nums[2..].iter().map(|s| s.0).collect();
            if let Some(&(s, at)) = nums[2..].iter().find(|s| s.0 >= n || s.0 == r) {
                return bad(at, format!("invalid source {s} for reference {r}"));
            }
            pairs[r] = Some(src);
        }
        offset += line.len();
    }
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| MvsError::Scene(format!("{}: no pair entry for view {i}", path.display()))))
        .collect()
}

impl Scene {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        (self.views[0].image.height, self.views[0].image.width)
    }

    pub fn camera_view(&self, i: usize) -> Result<CameraView> {
        CameraView::new(self.views[i].camera.clone(), self.views[i].image.to_tensor())
    }

    /// Nearest depth extent covering all views: `max d_max - min d_min`.
    pub fn depth_extent(&self) -> f64 {
        let lo = self.views.iter().map(|v| v.camera.d_min).fold(f64::INFINITY, f64::min);
        let hi = self.views.iter().map(|v| v.camera.d_max).fold(0.0, f64::max);
        hi - lo
    }

    /// Reference `reference` with its first `n_views - 1` pair sources.
    pub fn input_views(&self, reference: usize, n_views: usize) -> Result<Vec<usize>> {
        let src = &self.pairs[reference];
        if n_views < 2 || src.len() + 1 < n_views {
            return Err(MvsError::Config(format!(
                "view {reference} has {} sources, {n_views} views requested",
                src.len()
            )));
        }
        Ok(std::iter::once(reference).chain(src[..n_views - 1].iter().copied()).collect())
    }

    /// Network input for the given view indices (first is the reference),
    /// with images padded to multiples of 8 by edge replication.
    pub fn model_input<T: Real>(&self, views: &[usize]) -> ModelInput<T> {
        ModelInput {
            cameras: views.iter().map(|&i| self.views[i].camera.clone()).collect(),
            images: views.iter().map(|&i| pad_to_multiple(&self.views[i].image.to_tensor(), 8).cast()).collect(),
        }
    }

    /// A copy with the scene scaled by `s` about the world origin.
    pub fn scaled(&self, s: f64) -> Scene {
        Scene {
            views: self
                .views
                .iter()
                .map(|v| SceneView {
                    camera: v.camera.scene_scaled(s),
                    image: v.image.clone(),
                    depth: v.depth.as_ref().map(|d| DepthMap {
                        data: d.data.iter().map(|&x| (x as f64 * s) as f32).collect(),
                        ..d.clone()
                    }),
                })
                .collect(),
            pairs: self.pairs.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, v) in self.views.iter().enumerate() {
            save_image(&dir.join(format!("images/{i:04}.ppm")), &v.image)?;
            write_bytes(&dir.join(format!("cams/{i:04}_cam.txt")), format_cam(&v.camera, CAM_D_COUNT).as_bytes())?;
            if let Some(d) = &v.depth {
                save_depth(&dir.join(format!("depths_gt/{i:04}.pfm")), d)?;
            }
        }
        write_bytes(&dir.join("pair.txt"), format_pairs(&self.pairs).as_bytes())
    }

    /// Loads every `images/NNNN.ppm` with its camera; ground-truth depth
    /// is attached where present. Without `pair.txt` the distance rule
    /// is applied.
    pub fn load(dir: &Path) -> Result<Scene> {
        let images = dir.join("images");
        let entries = std::fs::read_dir(&images).map_err(|e| MvsError::io(&images, e))?;
        let mut ids: Vec<usize> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".ppm")?.parse().ok()
            })
            .collect();
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(MvsError::Scene(format!("{}: no images", images.display())));
        }
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(MvsError::Scene(format!("{}: images must be numbered from 0000 without gaps", images.display())));
        }
        let mut views = Vec::with_capacity(ids.len());
        for i in ids {
            let image = load_image(&images.join(format!("{i:04}.ppm")))?;
            let cam_path = dir.join(format!("cams/{i:04}_cam.txt"));
            if !cam_path.exists() {
                return Err(MvsError::Scene(format!("view {i}: missing camera file {}", cam_path.display())));
            }
            let text = String::from_utf8(read_bytes(&cam_path)?)
                .map_err(|e| MvsError::parse(&cam_path, e.utf8_error().valid_up_to(), "not UTF-8"))?;
            let camera = parse_cam(&text, &cam_path)?;
            let gt_path = dir.join(format!("depths_gt/{i:04}.pfm"));
            let depth = if gt_path.exists() {
                let d = load_depth(&gt_path)?;
                if (d.height, d.width) != (image.height, image.width) {
                    return Err(MvsError::Scene(format!("view {i}: depth and image sizes differ")));
                }
                Some(d)
            } else {
                None
            };
            views.push(SceneView { camera, image, depth });
        }
        let size = (views[0].image.height, views[0].image.width);
        if views.iter().any(|v| (v.image.height, v.image.width) != size) {
            return Err(MvsError::Scene("all images must share one size".into()));
        }
        let pair_path = dir.join("pair.txt");
        let pairs = if pair_path.exists() {
            let text = String::from_utf8_lossy(&read_bytes(&pair_path)?).into_owned();
            parse_pairs(&text, views.len(), &pair_path)?
        } else {
            pairs_by_distance(&views.iter().map(|v| &v.camera).collect::<Vec<_>>())
        };
        Ok(Scene { views, pairs })
    }
}

/// Pads the trailing two axes of `[C, H, W]` up to multiples of `m` by
/// repeating the last row and column. The camera is unaffected because
/// padding happens on the bottom and right.
pub fn pad_to_multiple<T: Real>(img: &Tensor<T>, m: usize) -> Tensor<T> {
    let d = img.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return img.clone();
    }
    let src = img.data();
    Tensor::from_fn([c, hp, wp], |i| {
        let (ch, y, x) = (i / (hp * wp), (i / wp) % hp, i % wp);
        src[ch * h * w + y.min(h - 1) * w + x.min(w - 1)]
    })
}
