//! Central-difference checks, in 64-bit mode, of every differentiable
//! operation and of the full training loss on small synthetic samples.
//!
//! Each case draws random inputs and fixed projection weights per
//! instance, so any output shape reduces to one scalar whose gradient
//! covers every output entry.

use std::time::{Duration, Instant};

use itermvs_tensor::gradcheck::{check, project, GradCheckConfig, GradCheckReport};
use itermvs_tensor::{Bound, ParamStore, Result as TResult, Tape, Tensor, TensorError, Var};
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossConfig, ModelConfig};
use crate::error::{MvsError, Result};
use crate::estimator::{generate_hypotheses, inverse_samples, normalized_inverse, EstimatorNet};
use crate::features::FeaturePyramid;
use crate::geometry::{Mat3, RelativePose, Vec3, Warper};
use crate::loss::{loss_class, loss_conf, loss_depth_l1, loss_full, loss_regress, make_gt, GroundTruth};
use crate::matching::{view_similarity, SourceView};
use crate::model::IterMvs;
use crate::ops::{convex_upsample, group_correlation, hybrid_readout, integrate, inverse_expectation, warp_coords};
use crate::synth::{synth_scene, SynthSpec};

type Objective = Box<dyn Fn(&Tape<f64>, &[Var]) -> TResult<Var>>;
type Instance = (Vec<Tensor<f64>>, Objective);
type Builder = Box<dyn Fn(&mut ChaCha8Rng) -> Instance>;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Random instances per case.
    pub instances: usize,
    pub seed: u64,
    /// Only run cases whose name contains this string.
    pub filter: Option<String>,
    /// Entries checked per parameter tensor in the full-model case; the
    /// largest-gradient entry is always one of them.
    pub model_entries: usize,
    /// GRU iterations in the full-model case.
    pub model_iters: usize,
    /// Run the full-model case (the slow one).
    pub include_model: bool,
    pub check: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 20,
            seed: 0,
            filter: None,
            model_entries: 2,
            model_iters: 2,
            include_model: true,
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<22} instances {:>3} checked {:>6} kinks {:>4} max_rel {:.2e} ({:.1?})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.report.checked,
            self.report.skipped_at_kinks,
            self.report.max_rel_err,
            self.elapsed
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(CaseReport::passed)
    }

    pub fn failing(&self) -> Vec<&CaseReport> {
        self.cases.iter().filter(|c| !c.passed()).collect()
    }
}

fn lift<T>(r: Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        MvsError::Tensor(t) => t,
        other => TensorError::Shape {
            op: "gradsuite",
            detail: other.to_string(),
        },
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

struct Case {
    name: &'static str,
    entries: Option<usize>,
    roundoff_ulps: f64,
    build: Builder,
}

fn case(name: &'static str, build: impl Fn(&mut ChaCha8Rng) -> Instance + 'static) -> Case {
    Case {
        name,
        entries: None,
        roundoff_ulps: 0.0,
        build: Box::new(build),
    }
}

fn unary(name: &'static str, op: fn(&Tape<f64>, Var) -> Var, lo: f64, hi: f64) -> Case {
    case(name, move |rng| {
        let x = rand_tensor(rng, &[2, 3, 4], lo, hi);
        let w = weights(rng, 24);
        (vec![x], Box::new(move |t, v| project(t, op(t, v[0]), &w)))
    })
}

fn binary(name: &'static str, op: fn(&Tape<f64>, Var, Var) -> TResult<Var>) -> Case {
    case(name, move |rng| {
        let a = rand_tensor(rng, &[3, 5], -2.0, 2.0);
        let b = rand_tensor(rng, &[3, 5], 0.5, 2.0);
        let w = weights(rng, 15);
        (vec![a, b], Box::new(move |t, v| project(t, op(t, v[0], v[1])?, &w)))
    })
}

fn tensor_cases() -> Vec<Case> {
    let mut cases = vec![
        unary("sigmoid", |t, x| t.sigmoid(x), -3.0, 3.0),
        unary("tanh", |t, x| t.tanh(x), -3.0, 3.0),
        unary("exp", |t, x| t.exp(x), -2.0, 2.0),
        unary("log", |t, x| t.log_clamped(x, 1e-12), 0.1, 3.0),
        unary("recip", |t, x| t.recip(x), 0.5, 3.0),
        unary("leaky_relu", |t, x| t.leaky_relu(x, 0.01), -2.0, 2.0),
        unary("abs", |t, x| t.abs(x), -2.0, 2.0),
        unary("clamp", |t, x| t.clamp(x, -0.5, 0.5), -1.0, 1.0),
        unary("affine", |t, x| t.affine(x, -1.5, 0.25), -1.0, 1.0),
        binary("add", |t, a, b| t.add(a, b)),
        binary("sub", |t, a, b| t.sub(a, b)),
        binary("mul", |t, a, b| t.mul(a, b)),
        binary("div", |t, a, b| t.div(a, b)),
    ];
    cases.push(case("softmax", |rng| {
        let x = rand_tensor(rng, &[3, 4, 5], -3.0, 3.0);
        let axis = rng.gen_range(0..3);
        let w = weights(rng, 60);
        (vec![x], Box::new(move |t, v| project(t, t.softmax(v[0], axis)?, &w)))
    }));
    cases.push(case("log_softmax", |rng| {
        let x = rand_tensor(rng, &[3, 4, 5], -3.0, 3.0);
        let axis = rng.gen_range(0..3);
        let w = weights(rng, 60);
        (vec![x], Box::new(move |t, v| project(t, t.log_softmax(v[0], axis)?, &w)))
    }));
    cases.push(case("max_axis", |rng| {
        let x = rand_tensor(rng, &[4, 6], -3.0, 3.0);
        let w = weights(rng, 6);
        (vec![x], Box::new(move |t, v| project(t, t.max_axis(v[0], 0)?.0, &w)))
    }));
    cases.push(case("concat_narrow_reshape", |rng| {
        let a = rand_tensor(rng, &[2, 3, 4], -1.0, 1.0);
        let b = rand_tensor(rng, &[2, 2, 4], -1.0, 1.0);
        let w = weights(rng, 24);
        (
            vec![a, b],
            Box::new(move |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let sq = t.mul(c, c)?;
                let n = t.narrow(sq, 1, 1, 3)?;
                project(t, t.reshape(n, [24])?, &w)
            }),
        )
    }));
    for (name, stride) in [("conv2d_stride1", 1), ("conv2d_stride2", 2)] {
        cases.push(case(name, move |rng| {
            let (n, c, h, w, o, k, pad) = (2, 3, 7, 6, 4, 3, 1);
            let x = rand_tensor(rng, &[n, c, h, w], -1.0, 1.0);
            let wt = rand_tensor(rng, &[o, c, k, k], -0.5, 0.5);
            let b = rand_tensor(rng, &[o], -0.5, 0.5);
            let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
            let pw = weights(rng, n * o * ho * wo);
            (
                vec![x, wt, b],
                Box::new(move |t, v| project(t, t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?, &pw)),
            )
        }));
    }
    cases.push(case("bilinear_sample", |rng| {
        let grid = rand_tensor(rng, &[3, 5, 6], -1.0, 1.0);
        // A few samples fall outside the map and read zero.
        let xs = rand_tensor(rng, &[10], -0.5, 5.5);
        let ys = rand_tensor(rng, &[10], -0.5, 4.5);
        let w = weights(rng, 30);
        (
            vec![grid, xs, ys],
            Box::new(move |t, v| project(t, t.bilinear_sample(v[0], v[1], v[2])?.0, &w)),
        )
    }));
    cases.push(case("resize_bilinear", |rng| {
        let x = rand_tensor(rng, &[2, 4, 5], -1.0, 1.0);
        let (oh, ow) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let w = weights(rng, 2 * oh * ow);
        (vec![x], Box::new(move |t, v| project(t, t.resize_bilinear(v[0], oh, ow)?, &w)))
    }));
    cases.push(case("weighted_sum_mean", |rng| {
        let x = rand_tensor(rng, &[4, 4], -1.0, 1.0);
        let w = weights(rng, 16);
        (
            vec![x],
            Box::new(move |t, v| {
                let a = t.weighted_sum(v[0], &w)?;
                let sq = t.mul(v[0], v[0])?;
                let b = t.mean_all(sq);
                let s = t.sum_all(sq);
                let ab = t.add(a, b)?;
                t.add(ab, s)
            }),
        )
    }));
    cases.push(case("masked_fill", |rng| {
        let x = rand_tensor(rng, &[3, 5], -1.0, 1.0);
        let keep: Vec<bool> = (0..15).map(|_| rng.gen_bool(0.6)).collect();
        let w = weights(rng, 15);
        (
            vec![x],
            Box::new(move |t, v| {
                let e = t.exp(v[0]);
                project(t, t.masked_fill(e, &keep, 0.0)?, &w)
            }),
        )
    }));
    cases
}

/// A reference camera at the origin and a source with a small random
/// rotation and baseline, both with `f` near 20 on a 16-pixel image.
fn random_warper(rng: &mut ChaCha8Rng) -> Warper {
    let f = rng.gen_range(15.0..25.0);
    let k = Mat3::new(f, 0.0, 7.5, 0.0, f, 7.5, 0.0, 0.0, 1.0);
    let r = Rotation3::from_euler_angles(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.05..0.05));
    let pose = RelativePose {
        r: *r.matrix(),
        t: Vec3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
    };
    Warper::new(&k, &k, &pose)
}

fn random_pixels(rng: &mut ChaCha8Rng, n: usize, size: f64) -> (Vec<f64>, Vec<f64>) {
    ((0..n).map(|_| rng.gen_range(0.0..size)).collect(), (0..n).map(|_| rng.gen_range(0.0..size)).collect())
}

/// Ground truth for a 16x16 map with a few invalid pixels.
fn random_gt(rng: &mut ChaCha8Rng, d2: usize) -> GroundTruth {
    let depth: Vec<f32> = (0..256)
        .map(|_| if rng.gen_bool(0.15) { f32::NAN } else { rng.gen_range(1.0..4.0) })
        .collect();
    match make_gt(&depth, (16, 16), 1.0, 4.0, d2) {
        Ok(gt) => gt,
        Err(_) => random_gt(rng, d2),
    }
}

/// Small estimator used for the GRU and head cases.
fn small_estimator(rng: &mut ChaCha8Rng) -> (EstimatorNet, ParamStore<f64>, ModelConfig) {
    let cfg = ModelConfig {
        d1: 4,
        d2: 8,
        hidden: 4,
        level_counts: [2, 2, 2],
        ..ModelConfig::default()
    };
    let net = EstimatorNet::new(&cfg);
    let mut store = ParamStore::new();
    net.register(&mut store, rng).expect("fresh store");
    // Nonzero biases so the zero-initialized ones are checked too.
    for i in 0..store.len() {
        let dims = store.iter().nth(i).expect("index in range").value.dims().to_vec();
        if dims.len() == 1 {
            store.set(i, rand_tensor(rng, &dims, -0.3, 0.3)).expect("same shape");
        }
    }
    (net, store, cfg)
}

fn store_tensors(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store.iter().map(|p| p.value.clone()).collect()
}

fn domain_cases() -> Vec<Case> {
    let mut cases = Vec::new();
    cases.push(case("warp_coords", |rng| {
        let warper = random_warper(rng);
        let (px, py) = random_pixels(rng, 6, 16.0);
        let depth = rand_tensor(rng, &[3, 6], 1.0, 4.0);
        let (wx, wy) = (weights(rng, 18), weights(rng, 18));
        (
            vec![depth],
            Box::new(move |t, v| {
                let wc = lift(warp_coords(t, v[0], &px, &py, &warper))?;
                let a = project(t, wc.xs, &wx)?;
                let b = project(t, wc.ys, &wy)?;
                t.add(a, b)
            }),
        )
    }));
    cases.push(case("group_correlation", |rng| {
        let f0 = rand_tensor(rng, &[8, 5], -1.0, 1.0);
        let fi = rand_tensor(rng, &[8, 15], -1.0, 1.0);
        let w = weights(rng, 3 * 4 * 5);
        (
            vec![f0, fi],
            Box::new(move |t, v| project(t, lift(group_correlation(t, v[0], v[1], 4))?, &w)),
        )
    }));
    cases.push(case("integrate", |rng| {
        let mut inputs: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(rng, &[4, 2, 5], -1.0, 1.0)).collect();
        inputs.extend((0..3).map(|_| rand_tensor(rng, &[5], 0.2, 1.5)));
        let w = weights(rng, 40);
        (
            inputs,
            Box::new(move |t, v| project(t, lift(integrate(t, &v[..3], &v[3..]))?, &w)),
        )
    }));
    cases.push(case("inverse_expectation", |rng| {
        let logits = rand_tensor(rng, &[6, 5], -2.0, 2.0);
        let inv = inverse_samples(1.0, 4.0, 6);
        let w = weights(rng, 5);
        (
            vec![logits],
            Box::new(move |t, v| {
                let p = t.softmax(v[0], 0)?;
                project(t, lift(inverse_expectation(t, p, &inv))?, &w)
            }),
        )
    }));
    cases.push(case("hybrid_readout", |rng| {
        let logits = rand_tensor(rng, &[12, 5], -2.0, 2.0);
        let inv = inverse_samples(1.0, 4.0, 12);
        let radius = rng.gen_range(1..4);
        let w = weights(rng, 5);
        (
            vec![logits],
            Box::new(move |t, v| {
                let p = t.softmax(v[0], 0)?;
                project(t, lift(hybrid_readout(t, p, &inv, radius))?.0, &w)
            }),
        )
    }));
    cases.push(case("generate_hypotheses", |rng| {
        let eta = rand_tensor(rng, &[5], 0.0, 1.0);
        let offsets = vec![-0.125, -0.05, 0.05, 0.125];
        let w = weights(rng, 20);
        (
            vec![eta],
            Box::new(move |t, v| project(t, lift(generate_hypotheses(t, v[0], &offsets, 1.0, 4.0))?, &w)),
        )
    }));
    cases.push(case("normalized_inverse", |rng| {
        let depth = rand_tensor(rng, &[8], 0.8, 4.5);
        let w = weights(rng, 8);
        (vec![depth], Box::new(move |t, v| project(t, normalized_inverse(t, v[0], 1.0, 4.0), &w)))
    }));
    cases.push(case("convex_upsample", |rng| {
        let logits = rand_tensor(rng, &[9, 4, 6], -2.0, 2.0);
        let depth = rand_tensor(rng, &[2, 3], 1.0, 4.0);
        let w = weights(rng, 24);
        (
            vec![logits, depth],
            Box::new(move |t, v| {
                let m = t.softmax(v[0], 0)?;
                project(t, lift(convex_upsample(t, m, v[1], 2))?, &w)
            }),
        )
    }));
    cases.push(case("view_similarity", |rng| {
        let warper = random_warper(rng);
        let (px, py) = random_pixels(rng, 5, 8.0);
        let f0 = rand_tensor(rng, &[8, 5], -1.0, 1.0);
        let depth = rand_tensor(rng, &[3, 5], 1.0, 4.0);
        let grid = rand_tensor(rng, &[8, 8, 8], -1.0, 1.0);
        let w = weights(rng, 3 * 4 * 5);
        (
            vec![f0, depth, grid],
            Box::new(move |t, v| {
                let src = SourceView {
                    features: FeaturePyramid { levels: [v[2]; 3] },
                    warpers: [warper.clone(), warper.clone(), warper.clone()],
                };
                let sim = lift(view_similarity(t, 1, v[0], v[1], &px, &py, &src, 4))?;
                project(t, sim.s, &w)
            }),
        )
    }));
    let mut gru = case("gru_update", |rng| {
        let (net, store, cfg) = small_estimator(rng);
        let n = store.len();
        let mut inputs = store_tensors(&store);
        inputs.push(rand_tensor(rng, &[1, cfg.hidden, 3, 3], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[1, 1 + cfg.similarity_channels(), 3, 3], -1.0, 1.0));
        let w = weights(rng, cfg.hidden * 9);
        (
            inputs,
            Box::new(move |t, v| {
                let p = Bound::from_vars(&store, v[..n].to_vec())?;
                project(t, lift(net.gru_update(t, &p, v[n], v[n + 1]))?, &w)
            }),
        )
    });
    gru.entries = Some(6);
    cases.push(gru);
    let mut heads = case("heads", |rng| {
        let (net, store, cfg) = small_estimator(rng);
        let n = store.len();
        let mut inputs = store_tensors(&store);
        inputs.push(rand_tensor(rng, &[1, cfg.hidden, 3, 3], -1.0, 1.0));
        inputs.push(rand_tensor(rng, &[1, cfg.d1, 2, 2], -1.0, 1.0));
        let (wp, wl, wc, wh) = (weights(rng, 72), weights(rng, 72), weights(rng, 9), weights(rng, cfg.hidden * 16));
        (
            inputs,
            Box::new(move |t, v| {
                let p = Bound::from_vars(&store, v[..n].to_vec())?;
                let (prob, log_prob) = lift(net.predict_probability(t, &p, v[n]))?;
                let conf = lift(net.predict_confidence(t, &p, v[n]))?;
                let h0 = lift(net.init_hidden(t, &p, v[n + 1]))?;
                let terms = [
                    project(t, prob, &wp)?,
                    project(t, log_prob, &wl)?,
                    project(t, conf, &wc)?,
                    project(t, h0, &wh)?,
                ];
                let ab = t.add(terms[0], terms[1])?;
                let cd = t.add(terms[2], terms[3])?;
                t.add(ab, cd)
            }),
        )
    });
    heads.entries = Some(6);
    cases.push(heads);
    cases.push(case("loss_class", |rng| {
        let gt = random_gt(rng, 8);
        let logits = rand_tensor(rng, &[8, 16], -3.0, 3.0);
        (
            vec![logits],
            Box::new(move |t, v| {
                let lp = t.log_softmax(v[0], 0)?;
                lift(loss_class(t, lp, &gt))
            }),
        )
    }));
    cases.push(case("loss_regress", |rng| {
        let gt = random_gt(rng, 8);
        let eta = rand_tensor(rng, &[16], 0.0, 1.0);
        let argmax: Vec<usize> = gt.x_gt.iter().map(|&x| (x + rng.gen_range(0..4)).min(7)).collect();
        (
            vec![eta],
            Box::new(move |t, v| lift(loss_regress(t, v[0], &argmax, &gt, 2, 2.0))),
        )
    }));
    cases.push(case("loss_conf", |rng| {
        let gt = random_gt(rng, 8);
        let logits = rand_tensor(rng, &[16], -3.0, 3.0);
        let eta: Vec<f64> = gt.quarter.eta.iter().map(|&e| e + rng.gen_range(-0.02..0.02)).collect();
        (
            vec![logits],
            Box::new(move |t, v| {
                let c = t.sigmoid(v[0]);
                lift(loss_conf(t, c, &eta, &gt, 0.01))
            }),
        )
    }));
    cases.push(case("loss_depth_l1", |rng| {
        let gt = random_gt(rng, 8);
        let depth = rand_tensor(rng, &[256], 1.0, 4.0);
        (
            vec![depth],
            Box::new(move |t, v| lift(loss_depth_l1(t, v[0], &gt.full, (1.0, 4.0), 2.0))),
        )
    }));
    cases
}

/// Round-off allowance for the full loss. Its value is near 100 and is
/// a sum over thousands of rounded terms, so two evaluations differ by a
/// few units in the last place; divided by the step this is ~1e-8 in the
/// difference quotient, the size of the smallest parameter gradients.
pub const LOSS_ROUNDOFF_ULPS: f64 = 16.0;

/// The full loss of the default model on a random 16x16 two-view
/// synthetic sample, differentiated with respect to every parameter.
fn full_model_case(iters: usize, entries: usize) -> Case {
    let build = move |rng: &mut ChaCha8Rng| -> Instance {
        let spec = SynthSpec {
            seed: rng.gen(),
            views: 2,
            height: 16,
            width: 16,
            ..SynthSpec::default()
        };
        let scene = synth_scene(&spec).expect("16x16 synthetic scene");
        let model = IterMvs::new(ModelConfig::default()).expect("default config is valid");
        let mut store = model.init_params::<f64>(rng.gen()).expect("fresh store");
        for i in 0..store.len() {
            let dims = store.iter().nth(i).expect("index in range").value.dims().to_vec();
            if dims.len() == 1 {
                store.set(i, rand_tensor(rng, &dims, -0.05, 0.05)).expect("same shape");
            }
        }
        let input = scene.model_input::<f64>(&[0, 1]);
        let cam = &scene.views[0].camera;
        let range = (cam.d_min, cam.d_max);
        let depth = scene.views[0].depth.as_ref().expect("synthetic depth");
        let gt = make_gt(&depth.data, (16, 16), range.0, range.1, model.cfg.d2).expect("valid ground truth");
        let inputs = store_tensors(&store);
        let loss_cfg = LossConfig::default();
        (
            inputs,
            Box::new(move |t, v| {
                let p = Bound::from_vars(&store, v.to_vec())?;
                let pred = lift(model.forward(t, &p, &input, iters))?;
                Ok(lift(loss_full(t, &pred, &gt, range, &model.cfg, &loss_cfg, false))?.0)
            }),
        )
    };
    Case {
        name: "loss_full",
        entries: Some(entries),
        roundoff_ulps: LOSS_ROUNDOFF_ULPS,
        build: Box::new(build),
    }
}

/// Names of every case, in run order.
pub fn case_names() -> Vec<&'static str> {
    let cfg = SuiteConfig::default();
    all_cases(&cfg).iter().map(|c| c.name).collect()
}

fn all_cases(cfg: &SuiteConfig) -> Vec<Case> {
    let mut cases = tensor_cases();
    cases.extend(domain_cases());
    if cfg.include_model {
        cases.push(full_model_case(cfg.model_iters, cfg.model_entries));
    }
    cases
}

fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Runs every selected case; `on_case` sees each report as it finishes.
pub fn run_suite(cfg: &SuiteConfig, mut on_case: impl FnMut(&CaseReport)) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut out = SuiteReport::default();
    for c in all_cases(cfg) {
        if let Some(f) = &cfg.filter {
            if !c.name.contains(f.as_str()) {
                continue;
            }
        }
        let t0 = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ name_seed(c.name));
        let check_cfg = GradCheckConfig {
            entries_per_input: c.entries,
            roundoff_ulps: c.roundoff_ulps,
            ..cfg.check
        };
        let mut report = GradCheckReport::default();
        for _ in 0..cfg.instances {
            let (inputs, f) = (c.build)(&mut rng);
            report.merge(check(f, &inputs, &check_cfg, &mut rng)?);
        }
        let r = CaseReport {
            name: c.name,
            instances: cfg.instances,
            report,
            elapsed: t0.elapsed(),
        };
        on_case(&r);
        out.cases.push(r);
    }
    out.elapsed = start.elapsed();
    Ok(out)
}
