//! Full-resolution outputs: learned convex upsampling of depth and
//! bilinear upsampling of confidence.

use itermvs_tensor::{Bound, ParamStore, Real, Tape, Var};
use rand::Rng;

use crate::error::Result;
use crate::features::FEATURE_CHANNELS;
use crate::nn::{register_all, Conv};
use crate::ops::convex_upsample;

/// Upsampling factor from the GRU resolution to the input.
pub const FACTOR: usize = 4;

#[derive(Clone, Debug)]
pub struct UpsampleNet {
    mask: [Conv; 2],
}

impl Default for UpsampleNet {
    fn default() -> Self {
        UpsampleNet {
            mask: [
                Conv::new("up.mask0", FEATURE_CHANNELS[1], 64, 3, 1),
                Conv::new("up.mask1", 64, 9 * FACTOR * FACTOR, 3, 1),
            ],
        }
    }
}

impl UpsampleNet {
    pub fn convs(&self) -> Vec<&Conv> {
        self.mask.iter().collect()
    }

    pub fn register<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        register_all(&self.convs(), store, rng)
    }

    pub fn mask_head(&self) -> &Conv {
        &self.mask[1]
    }

    /// Convex weights `[9, 16, h * w]` predicted from the level-2 reference
    /// features `[32, h, w]`, normalized over the 9 neighbours.
    pub fn mask<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, feat: Var) -> Result<Var> {
        let d = tape.dims(feat);
        let x = tape.reshape(feat, [1, d[0], d[1], d[2]])?;
        let x = self.mask[0].forward_act(tape, p, x)?;
        let x = self.mask[1].forward(tape, p, x)?;
        let x = tape.reshape(x, [9, FACTOR * FACTOR, d[1] * d[2]])?;
        Ok(tape.softmax(x, 0)?)
    }

    /// Depth `[P]` at `(h, w)` to `[FACTOR h, FACTOR w]`.
    pub fn upsample_depth<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, feat: Var, depth: Var, (h, w): (usize, usize)) -> Result<Var> {
        let m = self.mask(tape, p, feat)?;
        let d = tape.reshape(depth, [h, w])?;
        convex_upsample(tape, m, d, FACTOR)
    }
}

/// Bilinear 4x upsampling of a `[P]` confidence map at `(h, w)`.
pub fn upsample_confidence<T: Real>(tape: &Tape<T>, conf: Var, (h, w): (usize, usize)) -> Result<Var> {
    let c = tape.reshape(conf, [1, h, w])?;
    let up = tape.resize_bilinear(c, FACTOR * h, FACTOR * w)?;
    Ok(tape.reshape(up, [FACTOR * h, FACTOR * w])?)
}
