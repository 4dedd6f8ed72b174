//! Ground-truth preparation and the training objective.
//!
//! Every term is measured in normalized inverse depth, so jointly scaling
//! depths, translations and depth ranges leaves the loss unchanged.

use itermvs_tensor::{Real, Tape, Tensor, Var};

use crate::config::{LossConfig, ModelConfig};
use crate::error::{MvsError, Result};
use crate::estimator::normalized_inverse;
use crate::geometry::normalize_inv;
use crate::model::Prediction;

/// Natural log of the probability floor used by both cross-entropies.
pub fn log_floor() -> f64 {
    1e-12f64.ln()
}

/// Ground truth at one resolution, row-major.
#[derive(Clone, Debug)]
pub struct LevelGt {
    pub size: (usize, usize),
    pub depth: Vec<f64>,
    pub eta: Vec<f64>,
    pub valid: Vec<bool>,
}

impl LevelGt {
    fn from_depth(depth: Vec<f64>, size: (usize, usize), d_min: f64, d_max: f64) -> Self {
        let mut eta = Vec::with_capacity(depth.len());
        let mut valid = Vec::with_capacity(depth.len());
        for &d in &depth {
            let ok = d.is_finite() && d > 0.0;
            let (e, clamped) = normalize_inv(if ok { d } else { d_max }, d_min, d_max);
            valid.push(ok && !clamped);
            eta.push(e);
        }
        LevelGt { size, depth, eta, valid }
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub full: LevelGt,
    /// 1/4 resolution, nearest-neighbour from `full`.
    pub quarter: LevelGt,
    /// Per quarter pixel: index of the nearest of `d2` inverse-depth
    /// samples (lower index on ties). The one-hot target peaks here.
    pub x_gt: Vec<usize>,
    pub d2: usize,
}

/// Nearest of `d2` evenly spaced samples in normalized inverse depth,
/// rounding exact midpoints down.
pub fn nearest_sample(eta: f64, d2: usize) -> usize {
    let t = eta * (d2 - 1) as f64;
    let lo = t.floor();
    let j = if t - lo > 0.5 { lo + 1.0 } else { lo };
    (j.max(0.0) as usize).min(d2 - 1)
}

/// Prepares ground truth from a full-resolution depth map (`h * w`
/// values; non-finite, non-positive or out-of-range entries are invalid).
/// Fails with [`MvsError::NoValidGroundTruth`] when nothing is usable at
/// 1/4 resolution.
pub fn make_gt(depth: &[f32], (h, w): (usize, usize), d_min: f64, d_max: f64, d2: usize) -> Result<GroundTruth> {
    if depth.len() != h * w || h % 4 != 0 || w % 4 != 0 {
        return Err(MvsError::Config(format!("depth map of {} values for {h}x{w}", depth.len())));
    }
    let full = LevelGt::from_depth(depth.iter().map(|&d| d as f64).collect(), (h, w), d_min, d_max);
    let (h4, w4) = (h / 4, w / 4);
    let mut q = Vec::with_capacity(h4 * w4);
    for y in 0..h4 {
        for x in 0..w4 {
            q.push(full.depth[(4 * y + 2) * w + 4 * x + 2]);
        }
    }
    let quarter = LevelGt::from_depth(q, (h4, w4), d_min, d_max);
    if quarter.n_valid() == 0 {
        return Err(MvsError::NoValidGroundTruth);
    }
    let x_gt = quarter.eta.iter().map(|&e| nearest_sample(e, d2)).collect();
    Ok(GroundTruth { full, quarter, x_gt, d2 })
}

fn zero<T: Real>(tape: &Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Mean cross-entropy against the one-hot target over valid pixels.
/// `log_prob` is `[D2, P]`.
pub fn loss_class<T: Real>(tape: &Tape<T>, log_prob: Var, gt: &GroundTruth) -> Result<Var> {
    let q = &gt.quarter;
    let np = q.valid.len();
    let n = q.n_valid();
    if n == 0 {
        return Ok(zero(tape));
    }
    let mut wts = vec![T::zero(); gt.d2 * np];
    for p in 0..np {
        if q.valid[p] {
            wts[gt.x_gt[p] * np + p] = T::c(1.0 / n as f64);
        }
    }
    let lp = tape.clamp(log_prob, log_floor(), f64::INFINITY);
    let s = tape.weighted_sum(lp, &wts)?;
    Ok(tape.scale(s, -1.0))
}

/// `beta` times the mean `|eta - eta_gt|` over the valid pixels whose
/// argmax lies within `radius` samples of the target; 0 if none do.
pub fn loss_regress<T: Real>(
    tape: &Tape<T>,
    eta: Var,
    argmax: &[usize],
    gt: &GroundTruth,
    radius: usize,
    beta: f64,
) -> Result<Var> {
    let q = &gt.quarter;
    let gate: Vec<bool> = (0..q.valid.len())
        .map(|p| q.valid[p] && gt.x_gt[p].abs_diff(argmax[p]) <= radius)
        .collect();
    masked_l1(tape, eta, &q.eta, &gate, beta)
}

fn masked_l1<T: Real>(tape: &Tape<T>, eta: Var, target: &[f64], mask: &[bool], beta: f64) -> Result<Var> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Ok(zero(tape));
    }
    let shape = tape.shape(eta);
    let gt = tape.constant(Tensor::new(shape, target.iter().map(|&v| T::c(v)).collect())?);
    let diff = tape.sub(eta, gt)?;
    let diff = tape.abs(diff);
    let wts: Vec<T> = mask.iter().map(|&m| if m { T::c(beta / n as f64) } else { T::zero() }).collect();
    Ok(tape.weighted_sum(diff, &wts)?)
}

/// Confidence labels: 1 where the prediction is within `gamma` of the
/// target (boundary included).
pub fn confidence_labels(eta: &[f64], gt: &GroundTruth, gamma: f64) -> Vec<bool> {
    eta.iter().zip(&gt.quarter.eta).map(|(&e, &g)| (g - e).abs() <= gamma).collect()
}

/// Binary cross-entropy of the confidence `[P]` against
/// [`confidence_labels`], averaged over valid pixels.
pub fn loss_conf<T: Real>(tape: &Tape<T>, conf: Var, eta: &[f64], gt: &GroundTruth, gamma: f64) -> Result<Var> {
    let q = &gt.quarter;
    let n = q.n_valid();
    if n == 0 {
        return Ok(zero(tape));
    }
    let labels = confidence_labels(eta, gt, gamma);
    let inv_n = 1.0 / n as f64;
    let w1: Vec<T> = (0..labels.len()).map(|p| T::c(if q.valid[p] && labels[p] { inv_n } else { 0.0 })).collect();
    let w0: Vec<T> = (0..labels.len()).map(|p| T::c(if q.valid[p] && !labels[p] { inv_n } else { 0.0 })).collect();
    let log_c = tape.log_clamped(conf, 1e-12);
    let one_minus = tape.affine(conf, -1.0, 1.0);
    let log_1c = tape.log_clamped(one_minus, 1e-12);
    let a = tape.weighted_sum(log_c, &w1)?;
    let b = tape.weighted_sum(log_1c, &w0)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0))
}

/// `beta` times the mean absolute normalized-inverse-depth error of a depth
/// map against ground truth at the same resolution.
pub fn loss_depth_l1<T: Real>(tape: &Tape<T>, depth: Var, gt: &LevelGt, range: (f64, f64), beta: f64) -> Result<Var> {
    let eta = normalized_inverse(tape, depth, range.0, range.1);
    let eta = tape.reshape(eta, [gt.valid.len()])?;
    masked_l1(tape, eta, &gt.eta, &gt.valid, beta)
}

/// Component values of one evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub initial: f64,
    pub class: Vec<f64>,
    pub regress: Vec<f64>,
    pub conf: Vec<f64>,
    pub upsample: f64,
    pub full: f64,
    /// Regression and confidence terms were left out.
    pub warmup: bool,
}

impl LossBreakdown {
    /// The weighted sum the full loss is defined as, recomputed from the
    /// components.
    pub fn weighted_sum(&self, alpha: f64) -> f64 {
        let k = self.class.len() - 1;
        let mut total = alpha.powi(k as i32 + 1) * self.initial + self.upsample;
        for i in 0..=k {
            let mut term = self.class[i];
            if !self.warmup {
                term += self.regress[i] + self.conf[i];
            }
            total += alpha.powi((k - i) as i32) * term;
        }
        total
    }

    pub fn mean_class(&self) -> f64 {
        self.class.iter().sum::<f64>() / self.class.len() as f64
    }
}

/// The full objective over all iterations of a prediction.
pub fn loss_full<T: Real>(
    tape: &Tape<T>,
    pred: &Prediction,
    gt: &GroundTruth,
    range: (f64, f64),
    model: &ModelConfig,
    cfg: &LossConfig,
    warmup: bool,
) -> Result<(Var, LossBreakdown)> {
    let k = pred.iterations.len() - 1;
    let value = |v: Var| tape.value(v).item().f64();
    let initial = loss_depth_l1(tape, pred.init_depth, &gt.quarter, range, cfg.beta)?;
    let upsample = loss_depth_l1(tape, pred.depth_full, &gt.full, range, cfg.beta)?;
    let mut bd = LossBreakdown {
        initial: value(initial),
        upsample: value(upsample),
        warmup,
        ..LossBreakdown::default()
    };
    let first = tape.scale(initial, cfg.alpha.powi(k as i32 + 1));
    let mut total = tape.add(first, upsample)?;
    for (i, it) in pred.iterations.iter().enumerate() {
        let class = loss_class(tape, it.log_prob, gt)?;
        let regress = loss_regress(tape, it.eta, &it.argmax, gt, model.radius, cfg.beta)?;
        let eta_now: Vec<f64> = tape.value(it.eta).data().iter().map(|v| v.f64()).collect();
        let conf = loss_conf(tape, it.confidence, &eta_now, gt, cfg.gamma)?;
        bd.class.push(value(class));
        bd.regress.push(value(regress));
        bd.conf.push(value(conf));
        let mut term = class;
        if !warmup {
            term = tape.add(term, regress)?;
            term = tape.add(term, conf)?;
        }
        let term = tape.scale(term, cfg.alpha.powi((k - i) as i32));
        total = tape.add(total, term)?;
    }
    bd.full = value(total);
    Ok((total, bd))
}
