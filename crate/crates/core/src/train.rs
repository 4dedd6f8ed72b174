//! The optimization loop: batches of augmented samples, Adam with a step
//! schedule, a classification-only warm-up, and a CSV metrics log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use itermvs_tensor::checkpoint;
use itermvs_tensor::{Adam, AdamConfig, Bound, Exec, ParamStore, Real, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{MvsError, Result};
use crate::loss::{loss_full, make_gt, GroundTruth, LossBreakdown};
use crate::model::{IterMvs, ModelInput};
use crate::scene::Scene;

/// One training example after augmentation draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub scene: usize,
    /// Reference first.
    pub views: Vec<usize>,
    pub scale: f64,
}

/// Network input and ground truth for the reference of `views`, with the
/// scene scaled by `scale`.
pub fn prepare<T: Real>(scene: &Scene, views: &[usize], scale: f64, d2: usize) -> Result<(ModelInput<T>, GroundTruth)> {
    let mut input = scene.model_input::<T>(views);
    for c in &mut input.cameras {
        *c = c.scene_scaled(scale);
    }
    let reference = &scene.views[views[0]];
    let depth = reference
        .depth
        .as_ref()
        .ok_or_else(|| MvsError::Scene(format!("view {} has no ground-truth depth", views[0])))?;
    let (h, w) = input.size();
    if (depth.height, depth.width) != (h, w) {
        return Err(MvsError::Scene("training images must be multiples of 8".into()));
    }
    let scaled: Vec<f32> = depth.data.iter().map(|&d| (d as f64 * scale) as f32).collect();
    let cam = &input.cameras[0];
    let gt = make_gt(&scaled, (h, w), cam.d_min, cam.d_max, d2)?;
    Ok((input, gt))
}

/// Mean `|eta - eta_gt|` over valid 1/4-resolution pixels.
pub fn eta_error(eta: &[f64], gt: &GroundTruth) -> f64 {
    let q = &gt.quarter;
    let (mut s, mut n) = (0.0, 0usize);
    for p in 0..eta.len() {
        if q.valid[p] {
            s += (eta[p] - q.eta[p]).abs();
            n += 1;
        }
    }
    s / n.max(1) as f64
}

/// Loss, its components, gradients per parameter, and the final
/// iteration's inverse-depth error for one sample.
pub struct SampleResult<T> {
    pub breakdown: LossBreakdown,
    pub grads: Vec<Vec<T>>,
    pub eta_error: f64,
}

pub fn sample_gradients<T: Real>(
    model: &IterMvs,
    store: &ParamStore<T>,
    input: &ModelInput<T>,
    gt: &GroundTruth,
    cfg: &TrainConfig,
    warmup: bool,
) -> Result<SampleResult<T>> {
    let tape = Tape::new();
    let p = Bound::new(&tape, store, true);
    let pred = model.forward(&tape, &p, input, cfg.model.iters)?;
    let range = (input.cameras[0].d_min, input.cameras[0].d_max);
    let (loss, breakdown) = loss_full(&tape, &pred, gt, range, &cfg.model, &cfg.loss, warmup)?;
    let eta: Vec<f64> = tape.value(pred.last().eta).data().iter().map(|v| v.f64()).collect();
    let mut g = tape.backward(loss)?;
    let grads = p.vars().iter().map(|&v| g.take(v)).collect();
    Ok(SampleResult {
        breakdown,
        grads,
        eta_error: eta_error(&eta, gt),
    })
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch mean of each component.
    pub breakdown: LossBreakdown,
    pub eta_error: f64,
    pub samples: usize,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let k = parts[0].class.len();
    let vec_avg = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| (0..k).map(|i| parts.iter().map(|b| f(b)[i]).sum::<f64>() / n).collect();
    LossBreakdown {
        initial: avg(&|b| b.initial),
        class: vec_avg(&|b| &b.class),
        regress: vec_avg(&|b| &b.regress),
        conf: vec_avg(&|b| &b.conf),
        upsample: avg(&|b| b.upsample),
        full: avg(&|b| b.full),
        warmup: parts[0].warmup,
    }
}

fn csv_header(k: usize) -> String {
    let mut h = String::from("step,epoch,lr,L_full,L_initial,L_upsample");
    for name in ["L_class", "L_regress", "L_conf"] {
        for i in 0..=k {
            h += &format!(",{name}_{i}");
        }
    }
    h + ",eta_error\n"
}

fn csv_row(r: &StepRecord) -> String {
    let b = &r.breakdown;
    let mut s = format!("{},{},{},{},{},{}", r.step, r.epoch, r.lr, b.full, b.initial, b.upsample);
    for v in b.class.iter().chain(&b.regress).chain(&b.conf) {
        s += &format!(",{v}");
    }
    s + &format!(",{}\n", r.eta_error)
}

pub struct TrainResult {
    pub store: ParamStore<f32>,
    pub history: Vec<StepRecord>,
    pub skipped: usize,
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MvsError::io(dir, e))?;
    }
    Ok(())
}

fn save_checkpoint(store: &ParamStore<f32>, path: Option<&Path>) -> Result<()> {
    if let Some(path) = path {
        create_parent(path)?;
        checkpoint::save(store, path)?;
    }
    Ok(())
}

/// Draws sources for `reference`: `views - 1` distinct entries from the
/// first `source_pool` of its pair list.
pub fn draw_sources<R: Rng>(scene: &Scene, reference: usize, cfg: &TrainConfig, rng: &mut R) -> Result<Vec<usize>> {
    let pool = &scene.pairs[reference];
    let pool = &pool[..cfg.source_pool.min(pool.len())];
    if pool.len() + 1 < cfg.views {
        return Err(MvsError::Config(format!(
            "view {reference} offers {} sources, {} views requested",
            pool.len(),
            cfg.views
        )));
    }
    let mut picked: Vec<usize> = pool.choose_multiple(rng, cfg.views - 1).copied().collect();
    picked.insert(0, reference);
    Ok(picked)
}

/// Trains from `init` (or fresh seeded parameters) on every
/// `(scene, reference view)` pair. All random draws happen on this thread
/// in a fixed order, so results do not depend on `exec`.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    init: Option<ParamStore<f32>>,
    exec: Exec,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainResult> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(MvsError::Config("no training scenes".into()));
    }
    let model = IterMvs::new(cfg.model.clone())?;
    let mut store = match init {
        Some(s) => s,
        None => model.init_params::<f32>(cfg.seed)?,
    };
    let mut adam = Adam::new(
        &store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_2F5D);
    let mut samples: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| (0..sc.len()).filter(move |&r| sc.views[r].depth.is_some()).map(move |r| (s, r)))
        .collect();
    if samples.is_empty() {
        return Err(MvsError::Config("no view carries ground-truth depth".into()));
    }
    let mut log = match &cfg.metrics {
        Some(path) => {
            create_parent(path)?;
            let f = File::create(path).map_err(|e| MvsError::io(path, e))?;
            let mut w = BufWriter::new(f);
            w.write_all(csv_header(cfg.model.iters).as_bytes())
                .map_err(|e| MvsError::io(path, e))?;
            Some((w, path.clone()))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut skipped = 0;
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let warmup = epoch < cfg.warmup_epochs;
        samples.shuffle(&mut rng);
        for chunk in samples.chunks(cfg.batch) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut draws = Vec::with_capacity(chunk.len());
            for &(s, r) in chunk {
                let views = draw_sources(&scenes[s], r, cfg, &mut rng)?;
                let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
                draws.push(Draw { scene: s, views, scale });
            }
            let results = exec.map(&draws, |d| {
                let (input, gt) = match prepare::<f32>(&scenes[d.scene], &d.views, d.scale, cfg.model.d2) {
                    Ok(v) => v,
                    Err(MvsError::NoValidGroundTruth) => return Ok(None),
                    Err(e) => return Err(e),
                };
                sample_gradients(&model, &store, &input, &gt, cfg, warmup).map(Some)
            });
            let mut parts = Vec::new();
            let mut sum: Option<Vec<Vec<f32>>> = None;
            let mut err = 0.0;
            for r in results {
                let Some(r) = r? else {
                    skipped += 1;
                    continue;
                };
                if !r.breakdown.full.is_finite() || r.grads.iter().flatten().any(|g| !g.is_finite()) {
                    save_checkpoint(&store, cfg.checkpoint.as_deref())?;
                    return Err(MvsError::Training(format!(
                        "non-finite loss or gradient at step {step}; last good parameters saved"
                    )));
                }
                err += r.eta_error;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += *y;
                            }
                        }
                    }
                }
                parts.push(r.breakdown);
            }
            let Some(mut grads) = sum else { continue };
            let n = parts.len() as f32;
            for g in grads.iter_mut().flatten() {
                *g /= n;
            }
            adam.step(&mut store, &grads)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                breakdown: mean_breakdown(&parts),
                eta_error: err / parts.len() as f64,
                samples: parts.len(),
            };
            if let Some((w, path)) = &mut log {
                w.write_all(csv_row(&rec).as_bytes()).map_err(|e| MvsError::io(path.as_path(), e))?;
            }
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| MvsError::io(path, e))?;
    }
    save_checkpoint(&store, cfg.checkpoint.as_deref())?;
    Ok(TrainResult { store, history, skipped })
}
