use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

fn check_axis(op: &'static str, shape: &Shape, axis: usize) -> Result<()> {
    if axis >= shape.rank() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.rank(),
        });
    }
    Ok(())
}

fn drop_axis(shape: &Shape, axis: usize) -> Shape {
    let mut dims: Vec<usize> = shape.dims().to_vec();
    dims.remove(axis);
    if dims.is_empty() {
        Shape::scalar()
    } else {
        Shape::new(&dims)
    }
}

/// Index of the largest value along `axis` for every other position.
/// Ties go to the lowest index; NaN never wins.
pub fn argmax<T: Real>(t: &Tensor<T>, axis: usize) -> Result<Vec<usize>> {
    check_axis("argmax", t.shape(), axis)?;
    let (outer, n, inner) = t.shape().split_at_axis(axis);
    let d = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut best = 0;
            let mut best_v = d[base];
            for j in 1..n {
                let v = d[base + j * inner];
                if v > best_v || (best_v.is_nan() && !v.is_nan()) {
                    best = j;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.data().iter().copied().sum();
        self.record(Tensor::scalar(s), &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value_ref(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i w_i x_i` with constant weights (masks, one-hot targets,
    /// per-pixel normalisers).
    pub fn weighted_sum(&self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(shape_err(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), xv.shape()),
            ));
        }
        let s: T = xv.data().iter().zip(weights).map(|(&a, &w)| a * w).sum();
        let w = weights.to_vec();
        Ok(self.record(Tensor::scalar(s), &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                for (d, &wi) in gx.iter_mut().zip(&w) {
                    *d += g[0] * wi;
                }
            }
        }))
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, n, inner) = xv.shape().split_at_axis(axis);
        let mut y = vec![T::zero(); xv.numel()];
        let d = xv.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..n {
                    m = m.max(d[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (d[base + j * inner] - m).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    y[base + j * inner] /= s;
                }
            }
        }
        let yv = Tensor::from_parts(xv.shape().clone(), y);
        let ys = yv.clone();
        Ok(self.record(yv, &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                let y = ys.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
        }))
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("log_softmax", xv.shape(), axis)?;
        let (outer, n, inner) = xv.shape().split_at_axis(axis);
        let d = xv.data();
        let mut y = vec![T::zero(); xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..n {
                    m = m.max(d[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    s += (d[base + j * inner] - m).exp();
                }
                let lse = m + s.ln();
                for j in 0..n {
                    y[base + j * inner] = d[base + j * inner] - lse;
                }
            }
        }
        let yv = Tensor::from_parts(xv.shape().clone(), y);
        let ys = yv.clone();
        Ok(self.record(yv, &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                let y = ys.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut gs = T::zero();
                        for j in 0..n {
                            gs += g[base + j * inner];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] += g[k] - y[k].exp() * gs;
                        }
                    }
                }
            }
        }))
    }

    /// Maximum along `axis` (removed from the output shape) and the
    /// winning indices. The gradient flows to the winner only.
    pub fn max_axis(&self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let xv = self.value(x);
        let idx = argmax(&xv, axis)?;
        self.note_all(idx.iter().map(|&i| i as u64));
        let (_, n, inner) = xv.shape().split_at_axis(axis);
        let src: Vec<usize> = idx
            .iter()
            .enumerate()
            .map(|(k, &j)| (k / inner) * n * inner + j * inner + k % inner)
            .collect();
        let out: Vec<T> = src.iter().map(|&s| xv.data()[s]).collect();
        let shape = drop_axis(xv.shape(), axis);
        let v = self.record(Tensor::from_parts(shape, out), &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                for (k, &s) in src.iter().enumerate() {
                    gx[s] += g[k];
                }
            }
        });
        Ok((v, idx))
    }
}
