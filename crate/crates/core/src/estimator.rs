//! Recurrent depth-probability estimator: hidden-state initialization,
//! hypothesis generation, the convolutional GRU, and the probability and
//! confidence heads with the hybrid depth readout.

use itermvs_tensor::{Bound, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::geometry::inverse_sample;
use crate::nn::{register_all, Conv};
use crate::ops::{hybrid_readout, inverse_expectation, offset_clamped};

/// Inverse depths `1/d_max .. 1/d_min` of `count` evenly spaced samples.
pub fn inverse_samples(d_min: f64, d_max: f64, count: usize) -> Vec<f64> {
    (0..count).map(|j| inverse_sample(d_min, d_max, count, j)).collect()
}

/// Normalized inverse depth of a depth map, differentiable, clamped to
/// `[0, 1]`.
pub fn normalized_inverse<T: Real>(tape: &Tape<T>, depth: Var, d_min: f64, d_max: f64) -> Var {
    let (far, near) = (1.0 / d_max, 1.0 / d_min);
    let inv = tape.recip(depth);
    let eta = tape.affine(inv, 1.0 / (near - far), -far / (near - far));
    tape.clamp(eta, 0.0, 1.0)
}

/// Depth of normalized inverse depths.
pub fn denormalized<T: Real>(tape: &Tape<T>, eta: Var, d_min: f64, d_max: f64) -> Var {
    let (far, near) = (1.0 / d_max, 1.0 / d_min);
    let inv = tape.affine(eta, near - far, far);
    tape.recip(inv)
}

/// Hypotheses around the current estimate `eta` (`[P]`): evenly spaced
/// offsets, clamped to `[0, 1]`, as depths `[N, P]`.
pub fn generate_hypotheses<T: Real>(
    tape: &Tape<T>,
    eta: Var,
    offsets: &[f64],
    d_min: f64,
    d_max: f64,
) -> Result<Var> {
    let y = offset_clamped(tape, eta, offsets)?;
    Ok(denormalized(tape, y, d_min, d_max))
}

/// Per-iteration outputs, all at 1/4 resolution with `P` pixels.
#[derive(Clone, Debug)]
pub struct IterationOutput {
    /// `[D2, P]`, normalized along axis 0.
    pub prob: Var,
    pub log_prob: Var,
    /// `[P]` depth from the hybrid readout.
    pub depth: Var,
    /// `[P]` normalized inverse depth of `depth`.
    pub eta: Var,
    pub argmax: Vec<usize>,
    /// `[P]` in `(0, 1)`.
    pub confidence: Var,
}

#[derive(Clone, Debug)]
pub struct EstimatorNet {
    cfg: ModelConfig,
    h0: [Conv; 2],
    gru_z: Conv,
    gru_r: Conv,
    gru_h: Conv,
    prob: [Conv; 2],
    conf: [Conv; 2],
}

impl EstimatorNet {
    pub fn new(cfg: &ModelConfig) -> Self {
        let hid = cfg.hidden;
        let xin = 1 + cfg.similarity_channels();
        EstimatorNet {
            cfg: cfg.clone(),
            h0: [
                Conv::new("est.h0a", cfg.d1, hid, 3, 1),
                Conv::new("est.h0b", hid, hid, 3, 1),
            ],
            gru_z: Conv::new("est.gru_z", hid + xin, hid, 3, 1),
            gru_r: Conv::new("est.gru_r", hid + xin, hid, 3, 1),
            gru_h: Conv::new("est.gru_h", hid + xin, hid, 3, 1),
            prob: [
                Conv::new("est.prob0", hid, 64, 3, 1),
                Conv::new("est.prob1", 64, cfg.d2, 1, 1),
            ],
            conf: [
                Conv::new("est.conf0", hid, 16, 3, 1),
                Conv::new("est.conf1", 16, 1, 1, 1),
            ],
        }
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut v: Vec<&Conv> = self.h0.iter().collect();
        v.extend([&self.gru_z, &self.gru_r, &self.gru_h]);
        v.extend(self.prob.iter());
        v.extend(self.conf.iter());
        v
    }

    pub fn register<T: Real, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        register_all(&self.convs(), store, rng)
    }

    pub fn gru_convs(&self) -> [&Conv; 3] {
        [&self.gru_z, &self.gru_r, &self.gru_h]
    }

    pub fn h0_convs(&self) -> &[Conv; 2] {
        &self.h0
    }

    pub fn prob_head(&self) -> &Conv {
        &self.prob[1]
    }

    pub fn conf_head(&self) -> &Conv {
        &self.conf[1]
    }

    /// Depth at 1/8 resolution from the aggregated initial similarity
    /// `[1, D1, h, w]`: inverse of the full inverse-depth expectation.
    pub fn initial_depth<T: Real>(&self, tape: &Tape<T>, s_bar: Var, inv: &[f64]) -> Result<Var> {
        let d = tape.dims(s_bar);
        let logits = tape.reshape(s_bar, [d[1], d[2] * d[3]])?;
        let prob = tape.softmax(logits, 0)?;
        inverse_expectation(tape, prob, inv)
    }

    /// Initial hidden state `[1, hidden, 2h, 2w]` from `[1, D1, h, w]`.
    pub fn init_hidden<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, s_bar: Var) -> Result<Var> {
        let d = tape.dims(s_bar);
        let x = self.h0[0].forward_act(tape, p, s_bar)?;
        let x = self.h0[1].forward(tape, p, x)?;
        let x = tape.resize_bilinear(x, 2 * d[2], 2 * d[3])?;
        Ok(tape.tanh(x))
    }

    /// One convolutional GRU step; `h` is `[1, hidden, H, W]`, `x` is
    /// `[1, 1 + sum N_l, H, W]`.
    pub fn gru_update<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, h: Var, x: Var) -> Result<Var> {
        let hx = tape.concat(&[h, x], 1)?;
        let z = self.gru_z.forward(tape, p, hx)?;
        let z = tape.sigmoid(z);
        let r = self.gru_r.forward(tape, p, hx)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhx = tape.concat(&[rh, x], 1)?;
        let q = self.gru_h.forward(tape, p, rhx)?;
        let q = tape.tanh(q);
        let keep = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(keep, h)?;
        let b = tape.mul(z, q)?;
        Ok(tape.add(a, b)?)
    }

    /// `(P, log P)`, both `[D2, H * W]`.
    pub fn predict_probability<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, h: Var) -> Result<(Var, Var)> {
        let d = tape.dims(h);
        let x = self.prob[0].forward_act(tape, p, h)?;
        let x = self.prob[1].forward(tape, p, x)?;
        let logits = tape.reshape(x, [self.cfg.d2, d[2] * d[3]])?;
        Ok((tape.softmax(logits, 0)?, tape.log_softmax(logits, 0)?))
    }

    /// `[H * W]` confidence in `(0, 1)`.
    pub fn predict_confidence<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, h: Var) -> Result<Var> {
        let d = tape.dims(h);
        let x = self.conf[0].forward_act(tape, p, h)?;
        let x = self.conf[1].forward(tape, p, x)?;
        let x = tape.reshape(x, [d[2] * d[3]])?;
        Ok(tape.sigmoid(x))
    }

    /// All head outputs for one hidden state.
    pub fn predict<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        h: Var,
        (d_min, d_max): (f64, f64),
    ) -> Result<IterationOutput> {
        let (prob, log_prob) = self.predict_probability(tape, p, h)?;
        let inv = inverse_samples(d_min, d_max, self.cfg.d2);
        let (depth, argmax) = hybrid_readout(tape, prob, &inv, self.cfg.radius)?;
        Ok(IterationOutput {
            prob,
            log_prob,
            eta: normalized_inverse(tape, depth, d_min, d_max),
            depth,
            argmax,
            confidence: self.predict_confidence(tape, p, h)?,
        })
    }
}

/// Zeroes the weights and sets the bias of a layer in `store`.
pub fn set_constant_layer<T: Real>(store: &mut ParamStore<T>, conv: &Conv, bias: f64) -> Result<()> {
    let id = store.position(&conv.weight_name())?;
    store.set(id, Tensor::zeros([conv.cout, conv.cin, conv.k, conv.k]))?;
    let id = store.position(&conv.bias_name())?;
    store.set(id, Tensor::full([conv.cout], T::c(bias)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use itermvs_tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &ModelConfig) -> (EstimatorNet, ParamStore<f64>) {
        let net = EstimatorNet::new(cfg);
        let mut s = ParamStore::new();
        net.register(&mut s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (net, s)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d2: 16,
            hidden: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn hypothesis_examples() {
        let tape = Tape::<f64>::new();
        let cfg = ModelConfig::default();
        let eta = tape.constant(Tensor::new([3], vec![0.5, 0.0, 1.0]).unwrap());
        let d = generate_hypotheses(&tape, eta, &cfg.level_offsets(1), 1.0, 4.0).unwrap();
        let back = normalized_inverse(&tape, d, 1.0, 4.0);
        let v = tape.value(back);
        let r = cfg.level_radii[0];
        for (i, e) in [0.5 - r, 0.5 - r / 3.0, 0.5 + r / 3.0, 0.5 + r].iter().enumerate() {
            assert!((v.data()[i * 3] - e).abs() < 1e-12);
        }
        // eta = 0 keeps every sample inside [0, R].
        for i in 0..4 {
            let x = v.data()[i * 3 + 1];
            assert!((0.0..=r + 1e-12).contains(&x));
        }
        let d3 = generate_hypotheses(&tape, eta, &cfg.level_offsets(3), 1.0, 4.0).unwrap();
        let v3 = tape.value(normalized_inverse(&tape, d3, 1.0, 4.0));
        assert!((v3.data()[0] - 0.375).abs() < 1e-12 && (v3.data()[3] - 0.625).abs() < 1e-12);
        assert!((v3.data()[2] - 0.875).abs() < 1e-12 && v3.data()[5] == 1.0);
    }

    #[test]
    fn initial_depth_examples() {
        let cfg = ModelConfig::default();
        let (net, _) = setup(&cfg);
        let inv = inverse_samples(1.0, 2.0, 3);
        let tape = Tape::<f64>::new();
        let zero = tape.constant(Tensor::zeros([1, 3, 1, 1]));
        let d = tape.value(net.initial_depth(&tape, zero, &inv).unwrap()).item();
        assert!((d - 4.0 / 3.0).abs() < 1e-15);
        let peaked = tape.constant(Tensor::new([1, 3, 1, 1], vec![0.0, 800.0, 0.0]).unwrap());
        let d = tape.value(net.initial_depth(&tape, peaked, &inv).unwrap()).item();
        assert_eq!(d, 1.0 / inv[1]);
    }

    #[test]
    fn gru_zero_weights_and_bounds() {
        let cfg = small();
        let (net, mut store) = setup(&cfg);
        for c in net.gru_convs() {
            set_constant_layer(&mut store, c, 0.0).unwrap();
        }
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::from_fn([1, 4, 3, 3], |i| ((i as f64) * 0.7).sin()));
        let x = tape.constant(Tensor::from_fn([1, 11, 3, 3], |i| (i as f64).cos()));
        let hn = tape.value(net.gru_update(&tape, &p, h, x).unwrap());
        for (a, b) in hn.data().iter().zip(tape.value(h).data()) {
            assert_eq!(*a, 0.5 * b);
        }

        // z forced to ~0 through a very negative bias: h passes through.
        let (net, mut store) = setup(&cfg);
        set_constant_layer(&mut store, net.gru_convs()[0], -50.0).unwrap();
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::from_fn([1, 4, 3, 3], |i| 0.1 + (i as f64 * 0.3).sin() * 0.8));
        let x = tape.constant(Tensor::from_fn([1, 11, 3, 3], |i| (i as f64).cos()));
        let hn = tape.value(net.gru_update(&tape, &p, h, x).unwrap());
        for (a, b) in hn.data().iter().zip(tape.value(h).data()) {
            assert!((a - b).abs() < 1e-15);
        }

        // Convex-combination bound with random weights.
        let (net, store) = setup(&cfg);
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::from_fn([1, 4, 5, 5], |i| 3.0 * (i as f64 * 0.9).sin()));
        let x = tape.constant(Tensor::from_fn([1, 11, 5, 5], |i| (i as f64 * 1.3).cos()));
        let hn = tape.value(net.gru_update(&tape, &p, h, x).unwrap());
        for (a, b) in hn.data().iter().zip(tape.value(h).data()) {
            assert!(a.abs() <= b.abs().max(1.0) + 1e-12);
        }
    }

    /// Scalar reference of the GRU step written directly from its formulas.
    fn gru_reference(w: [&[f64]; 3], b: [&[f64]; 3], h: &[f64], x: &[f64], hid: usize, xin: usize, n: usize) -> Vec<f64> {
        let cin = hid + xin;
        let at = |v: &[f64], c: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= n as isize || xx >= n as isize {
                0.0
            } else {
                v[(c * n + y as usize) * n + xx as usize]
            }
        };
        let conv = |wt: &[f64], bias: &[f64], input: &dyn Fn(usize, isize, isize) -> f64, o: usize, y: usize, xx: usize| {
            let mut acc = bias[o];
            for c in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = input(c, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                        acc += wt[((o * cin + c) * 3 + ky) * 3 + kx] * v;
                    }
                }
            }
            acc
        };
        let hx = |c: usize, y: isize, xx: isize| if c < hid { at(h, c, y, xx) } else { at(x, c - hid, y, xx) };
        let mut r = vec![0.0; hid * n * n];
        let mut z = vec![0.0; hid * n * n];
        for o in 0..hid {
            for y in 0..n {
                for xx in 0..n {
                    z[(o * n + y) * n + xx] = sigmoid(conv(w[0], b[0], &hx, o, y, xx));
                    r[(o * n + y) * n + xx] = sigmoid(conv(w[1], b[1], &hx, o, y, xx));
                }
            }
        }
        let rhx = |c: usize, y: isize, xx: isize| {
            if c < hid {
                at(&r, c, y, xx) * at(h, c, y, xx)
            } else {
                at(x, c - hid, y, xx)
            }
        };
        let mut out = vec![0.0; hid * n * n];
        for o in 0..hid {
            for y in 0..n {
                for xx in 0..n {
                    let i = (o * n + y) * n + xx;
                    let q = conv(w[2], b[2], &rhx, o, y, xx).tanh();
                    out[i] = (1.0 - z[i]) * h[i] + z[i] * q;
                }
            }
        }
        out
    }

    #[test]
    fn gru_matches_scalar_reference() {
        let cfg = small();
        let (net, store) = setup(&cfg);
        let n = 4;
        let hv: Vec<f64> = (0..4 * n * n).map(|i| (i as f64 * 0.37).sin()).collect();
        let xv: Vec<f64> = (0..11 * n * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::new([1, 4, n, n], hv.clone()).unwrap());
        let x = tape.constant(Tensor::new([1, 11, n, n], xv.clone()).unwrap());
        let got = tape.value(net.gru_update(&tape, &p, h, x).unwrap());
        let g = net.gru_convs();
        let w = g.map(|c| store.get(&c.weight_name()).unwrap().data());
        let b = g.map(|c| store.get(&c.bias_name()).unwrap().data());
        let expect = gru_reference(w, b, &hv, &xv, 4, 11, n);
        for (a, e) in got.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_zero_and_normalized() {
        let cfg = small();
        let (net, mut store) = setup(&cfg);
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::from_fn([1, 4, 3, 5], |i| (i as f64 * 0.5).sin()));
        let (prob, _) = net.predict_probability(&tape, &p, h).unwrap();
        let pv = tape.value(prob);
        assert_eq!(pv.dims(), &[16, 15]);
        for px in 0..15 {
            let s: f64 = (0..16).map(|j| pv.data()[j * 15 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let c = tape.value(net.predict_confidence(&tape, &p, h).unwrap());
        assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));

        set_constant_layer(&mut store, net.prob_head(), 0.0).unwrap();
        set_constant_layer(&mut store, net.conf_head(), 0.0).unwrap();
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let h = tape.constant(Tensor::from_fn([1, 4, 3, 5], |i| (i as f64 * 0.5).sin()));
        let out = net.predict(&tape, &p, h, (1.0, 3.0)).unwrap();
        assert!(tape.value(out.prob).data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(tape.value(out.confidence).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_hidden_range_and_zero_case() {
        let cfg = small();
        let (net, mut store) = setup(&cfg);
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let s = tape.constant(Tensor::from_fn([1, 32, 2, 3], |i| 5.0 * (i as f64).sin()));
        let h = tape.value(net.init_hidden(&tape, &p, s).unwrap());
        assert_eq!(h.dims(), &[1, 4, 4, 6]);
        assert!(h.data().iter().all(|&v| v > -1.0 && v < 1.0));
        set_constant_layer(&mut store, &net.h0_convs()[1], 0.0).unwrap();
        let tape = Tape::<f64>::new();
        let p = Bound::new(&tape, &store, false);
        let s = tape.constant(Tensor::from_fn([1, 32, 2, 3], |i| 5.0 * (i as f64).sin()));
        let h = tape.value(net.init_hidden(&tape, &p, s).unwrap());
        assert!(h.data().iter().all(|&v| v == 0.0));
    }
}
