//! Two-view group-wise similarities, pixel-wise view weights, weighted
//! multi-view integration and per-level spatial aggregation.
//!
//! Similarity volumes are laid out `[D, G, P]` (hypothesis, group, pixel),
//! so the view-weight CNN can treat hypotheses as a batch and the U-Nets
//! can treat `D * G` as channels without a transpose.

use itermvs_tensor::{Bound, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::features::{FeaturePyramid, FEATURE_CHANNELS};
use crate::geometry::{rescale_coord, Warper};
use crate::nn::{register_all, Conv, UNet};
use crate::ops::{group_correlation, integrate, warp_coords};

/// One source view as seen by the matcher: its features and, per pyramid
/// level, the warp from the reference view.
pub struct SourceView {
    pub features: FeaturePyramid,
    /// `warpers[l - 1]` maps level-`l` reference pixels into level-`l`
    /// source pixels.
    pub warpers: [Warper; 3],
}

/// Similarity of one source view over a set of hypotheses.
pub struct Similarity {
    /// `[D, G, P]`.
    pub s: Var,
    /// Per `(d, p)`: the warped sample fell inside the source image and in
    /// front of the camera.
    pub valid: Vec<bool>,
}

/// Warps `depth` (`[D, P]`) from the reference pixels `(px, py)` of level
/// `level` into `src`, samples its features and correlates them with the
/// reference features `f0` (`[C, P]`).
pub fn view_similarity<T: Real>(
    tape: &Tape<T>,
    level: usize,
    f0: Var,
    depth: Var,
    px: &[f64],
    py: &[f64],
    src: &SourceView,
    groups: usize,
) -> Result<Similarity> {
    let wc = warp_coords(tape, depth, px, py, &src.warpers[level - 1])?;
    let (fi, inside) = tape.bilinear_sample(src.features.level(level), wc.xs, wc.ys)?;
    let valid = inside.iter().zip(&wc.behind).map(|(&i, &b)| i && !b).collect();
    Ok(Similarity {
        s: group_correlation(tape, f0, fi, groups)?,
        valid,
    })
}

/// Reference features at continuous level positions, with positions
/// clamped into the map so border pixels read the nearest edge.
pub fn sample_reference<T: Real>(tape: &Tape<T>, map: Var, px: &[f64], py: &[f64]) -> Result<Var> {
    let d = tape.dims(map);
    let (h, w) = (d[1] as f64, d[2] as f64);
    let xs = Tensor::new([px.len()], px.iter().map(|&x| T::c(x.clamp(0.0, w - 1.0))).collect())?;
    let ys = Tensor::new([py.len()], py.iter().map(|&y| T::c(y.clamp(0.0, h - 1.0))).collect())?;
    let (xs, ys) = (tape.constant(xs), tape.constant(ys));
    Ok(tape.bilinear_sample(map, xs, ys)?.0)
}

/// Positions at pyramid level `level` of the pixel centres of a
/// `(h, w)` map at 1/4 resolution, as `(xs, ys)` with x fastest.
pub fn quarter_positions(h: usize, w: usize, level: usize) -> (Vec<f64>, Vec<f64>) {
    let f = 2f64.powi(2 - level as i32);
    let mut xs = Vec::with_capacity(h * w);
    let mut ys = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            xs.push(rescale_coord(x as f64, f));
            ys.push(rescale_coord(y as f64, f));
        }
    }
    (xs, ys)
}

/// Learned parts of matching: the view-weight CNN, the initialization
/// U-Net and one U-Net per pyramid level (shared across iterations).
#[derive(Clone, Debug)]
pub struct MatchingNet {
    pub groups: usize,
    view_weight: [Conv; 2],
    init_unet: UNet,
    level_unets: [UNet; 3],
}

impl MatchingNet {
    pub fn new(groups: usize, d1: usize, level_counts: [usize; 3], base: usize) -> Self {
        let lu = |l: usize| UNet::new(&format!("match.unet{}", l + 1), level_counts[l] * groups, level_counts[l], base);
        MatchingNet {
            groups,
            view_weight: [
                Conv::new("match.vw0", groups, 16, 3, 1),
                Conv::new("match.vw1", 16, 1, 3, 1),
            ],
            init_unet: UNet::new("match.unet_init", d1 * groups, d1, base),
            level_unets: [lu(0), lu(1), lu(2)],
        }
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v: Vec<&Conv> = self.view_weight.iter().collect();
        v.extend(self.init_unet.convs());
        for u in &self.level_unets {
            v.extend(u.convs());
        }
        v
    }

    pub fn register<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        register_all(&self.convs(), store, rng)
    }

    pub fn view_weight_head(&self) -> &Conv {
        &self.view_weight[1]
    }

    /// Per-view depth distribution and view weight from a level-3
    /// similarity `[D, G, h * w]`. Invalid samples get logit 0.
    /// Returns `(w [P], prob [D, P])`.
    pub fn view_weight<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        sim: &Similarity,
        (h, w): (usize, usize),
    ) -> Result<(Var, Var)> {
        let d = tape.dims(sim.s)[0];
        let x = tape.reshape(sim.s, [d, self.groups, h, w])?;
        let x = self.view_weight[0].forward_act(tape, p, x)?;
        let logits = self.view_weight[1].forward(tape, p, x)?;
        let logits = tape.reshape(logits, [d, h * w])?;
        let logits = tape.masked_fill(logits, &sim.valid, 0.0)?;
        let prob = tape.softmax(logits, 0)?;
        let (wmax, _) = tape.max_axis(prob, 0)?;
        Ok((wmax, prob))
    }

    /// U-Net aggregation of an integrated similarity `[D, G, h * w]` into
    /// one score per hypothesis, `[1, D, h, w]`.
    pub fn aggregate<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        unet: Option<usize>,
        s: Var,
        (h, w): (usize, usize),
    ) -> Result<Var> {
        let d = tape.dims(s)[0];
        let x = tape.reshape(s, [1, d * self.groups, h, w])?;
        let net = match unet {
            None => &self.init_unet,
            Some(l) => &self.level_unets[l - 1],
        };
        net.forward(tape, p, x)
    }

    /// Multi-scale similarity for one iteration at 1/4 resolution.
    ///
    /// `hyps[l - 1]` holds the `[N_l, P]` hypothesis depths for level `l`,
    /// `f0[l - 1]` the reference features sampled at the level positions
    /// `pos[l - 1]`, and `weights` the upsampled view weights (`[P]` per
    /// source). Returns `[1, N_1 + N_2 + N_3, h, w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn multiscale_similarity<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        sources: &[SourceView],
        f0: &[Var; 3],
        pos: &[(Vec<f64>, Vec<f64>); 3],
        hyps: &[Var; 3],
        weights: &[Var],
        hw: (usize, usize),
    ) -> Result<Var> {
        let mut per_level = Vec::with_capacity(3);
        for l in 1..=3 {
            let (px, py) = &pos[l - 1];
            let sims = sources
                .iter()
                .map(|src| Ok(view_similarity(tape, l, f0[l - 1], hyps[l - 1], px, py, src, self.groups)?.s))
                .collect::<Result<Vec<_>>>()?;
            let s = integrate(tape, &sims, weights)?;
            per_level.push(self.aggregate(tape, p, Some(l), s, hw)?);
        }
        Ok(tape.concat(&per_level, 1)?)
    }
}

/// Checks that feature channels split evenly into `groups` at every level.
pub fn check_groups(groups: usize) -> bool {
    groups > 0 && FEATURE_CHANNELS.iter().all(|c| c % groups == 0)
}
