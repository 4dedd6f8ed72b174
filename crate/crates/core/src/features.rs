//! Three-level feature pyramid at 1/2, 1/4 and 1/8 resolution.

use itermvs_tensor::{Bound, ParamStore, Real, Tape, Var};
use rand::Rng;

use crate::error::{MvsError, Result};
use crate::nn::{register_all, Conv};

/// Channels at levels 1, 2, 3.
pub const FEATURE_CHANNELS: [usize; 3] = [16, 32, 64];
/// Width of the top-down path.
const TOP_DOWN: usize = 64;

/// `levels[l - 1]` is the `[C_l, H / 2^l, W / 2^l]` map of level `l`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 3],
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> Var {
        self.levels[l - 1]
    }
}

#[derive(Clone, Debug)]
pub struct FeatureNet {
    enc: [Conv; 6],
    lateral: [Conv; 3],
    out: [Conv; 3],
}

impl Default for FeatureNet {
    fn default() -> Self {
        let [c1, c2, c3] = FEATURE_CHANNELS;
        let e = |i: usize, cin, cout, s| Conv::new(format!("fpn.enc{i}"), cin, cout, 3, s);
        FeatureNet {
            enc: [
                e(0, 3, c1, 2),
                e(1, c1, c1, 1),
                e(2, c1, c2, 2),
                e(3, c2, c2, 1),
                e(4, c2, c3, 2),
                e(5, c3, c3, 1),
            ],
            lateral: [
                Conv::new("fpn.lat1", c1, TOP_DOWN, 1, 1),
                Conv::new("fpn.lat2", c2, TOP_DOWN, 1, 1),
                Conv::new("fpn.lat3", c3, TOP_DOWN, 1, 1),
            ],
            out: [
                Conv::new("fpn.out1", TOP_DOWN, c1, 3, 1),
                Conv::new("fpn.out2", TOP_DOWN, c2, 3, 1),
                Conv::new("fpn.out3", TOP_DOWN, c3, 3, 1),
            ],
        }
    }
}

impl FeatureNet {
    pub fn convs(&self) -> Vec<&Conv> {
        self.enc.iter().chain(&self.lateral).chain(&self.out).collect()
    }

    pub fn register<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        register_all(&self.convs(), store, rng)
    }

    /// `image` is `[3, H, W]` with `H` and `W` multiples of 8.
    pub fn extract<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, image: Var) -> Result<FeaturePyramid> {
        let d = tape.dims(image);
        if d.len() != 3 || d[0] != 3 || !d[1].is_multiple_of(8) || !d[2].is_multiple_of(8) {
            return Err(MvsError::Tensor(itermvs_tensor::TensorError::Shape {
                op: "extract",
                detail: format!("image {d:?} must be [3, H, W] with H, W multiples of 8"),
            }));
        }
        let mut x = tape.reshape(image, [1, 3, d[1], d[2]])?;
        let mut bottom_up = Vec::with_capacity(3);
        for stage in self.enc.chunks(2) {
            x = stage[0].forward_act(tape, p, x)?;
            x = stage[1].forward_act(tape, p, x)?;
            bottom_up.push(x);
        }
        let mut top = self.lateral[2].forward(tape, p, bottom_up[2])?;
        let mut outs = [top; 3];
        outs[2] = self.out[2].forward(tape, p, top)?;
        for l in (0..2).rev() {
            let bd = tape.dims(bottom_up[l]);
            let up = tape.resize_bilinear(top, bd[2], bd[3])?;
            let lat = self.lateral[l].forward(tape, p, bottom_up[l])?;
            top = tape.add(up, lat)?;
            outs[l] = self.out[l].forward(tape, p, top)?;
        }
        let mut levels = outs;
        for (l, v) in levels.iter_mut().enumerate() {
            let od = tape.dims(*v);
            *v = tape.reshape(*v, [od[1], od[2], od[3]])?;
            debug_assert_eq!(od[1], FEATURE_CHANNELS[l]);
        }
        Ok(FeaturePyramid { levels })
    }
}
