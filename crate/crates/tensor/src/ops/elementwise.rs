use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `f` maps x to y, `df(x, y)` is dy/dx.
    fn unary<F, D>(&self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let xv = self.value(x);
        let yv = xv.map(f);
        let y_saved = yv.clone();
        self.record(yv, &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                let (xs, ys) = (xv.data(), y_saved.data());
                for i in 0..g.len() {
                    gx[i] += g[i] * df(xs[i], ys[i]);
                }
            }
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.record(Tensor::from_parts(av.shape().clone(), out), &[a, b], move |g, sink| {
            sink.add(a, g);
            sink.add(b, g);
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.record(Tensor::from_parts(av.shape().clone(), out), &[a, b], move |g, sink| {
            sink.add(a, g);
            if let Some(gb) = sink.buf(b) {
                for (d, &v) in gb.iter_mut().zip(g) {
                    *d -= v;
                }
            }
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.record(Tensor::from_parts(av.shape().clone(), out), &[a, b], move |g, sink| {
            if let Some(ga) = sink.buf(a) {
                for ((d, &v), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += v * y;
                }
            }
            if let Some(gb) = sink.buf(b) {
                for ((d, &v), &x) in gb.iter_mut().zip(g).zip(av.data()) {
                    *d += v * x;
                }
            }
        }))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x / y).collect();
        Ok(self.record(Tensor::from_parts(av.shape().clone(), out), &[a, b], move |g, sink| {
            if let Some(ga) = sink.buf(a) {
                for ((d, &v), &y) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *d += v / y;
                }
            }
            if let Some(gb) = sink.buf(b) {
                for (i, d) in gb.iter_mut().enumerate() {
                    let y = bv.data()[i];
                    *d -= g[i] * av.data()[i] / (y * y);
                }
            }
        }))
    }

    /// `a * x + b` with constant scalars.
    pub fn affine(&self, x: Var, a: f64, b: f64) -> Var {
        let (ta, tb) = (T::c(a), T::c(b));
        let xv = self.value(x);
        let yv = xv.map(|v| ta * v + tb);
        self.record(yv, &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d += ta * v;
                }
            }
        })
    }

    pub fn scale(&self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    pub fn add_scalar(&self, x: Var, b: f64) -> Var {
        self.affine(x, 1.0, b)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, |v| T::one() / v, |_, y| -(y * y))
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(&self, x: Var, floor: f64) -> Var {
        let fl = T::c(floor);
        if self.tracks_decisions() {
            let xv = self.value(x);
            self.note_all(xv.data().iter().map(|&v| (v < fl) as u64));
        }
        self.unary(
            x,
            move |v| v.max(fl).ln(),
            move |x, _| if x < fl { T::zero() } else { T::one() / x },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = T::c(slope);
        if self.tracks_decisions() {
            let xv = self.value(x);
            self.note_all(xv.data().iter().map(|&v| (v > T::zero()) as u64));
        }
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { s * v },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn abs(&self, x: Var) -> Var {
        if self.tracks_decisions() {
            let xv = self.value(x);
            self.note_all(xv.data().iter().map(|&v| (v >= T::zero()) as u64));
        }
        self.unary(
            x,
            |v| v.abs(),
            |x, _| if x >= T::zero() { T::one() } else { -T::one() },
        )
    }

    /// Clamps into `[lo, hi]`; zero gradient on the clamped side.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::c(lo), T::c(hi));
        if self.tracks_decisions() {
            let xv = self.value(x);
            self.note_all(
                xv.data()
                    .iter()
                    .map(|&v| (v < lo) as u64 | (((v > hi) as u64) << 1)),
            );
        }
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    /// Replaces entries where `keep` is false by `fill`; those entries get
    /// no gradient.
    pub fn masked_fill(&self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(shape_err(
                "masked_fill",
                format!("mask of {} for {:?}", keep.len(), xv.dims()),
            ));
        }
        let fill = T::c(fill);
        let data = xv.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { fill });
        let yv = Tensor::new(xv.shape().clone(), data.collect())?;
        let keep = keep.to_vec();
        Ok(self.record(yv, &[x], move |g, sink| {
            if let Some(gx) = sink.buf(x) {
                for i in 0..g.len() {
                    if keep[i] {
                        gx[i] += g[i];
                    }
                }
            }
        }))
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1]));
        assert_eq!(tape.value(tape.sigmoid(x)).item(), 0.5);
        assert_eq!(tape.value(tape.tanh(x)).item(), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!(sigmoid(-50.0f32) > 0.0);
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.mul(a, b).is_err());
    }

    #[test]
    fn log_clamp_floor() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([2], vec![0.0, 1.0]).unwrap(), true);
        let y = tape.log_clamped(x, 1e-12);
        assert!((tape.value(y).data()[0] - (1e-12f64).ln()).abs() < 1e-12);
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = tape.masked_fill(x, &[true, false, true], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 3.0]);
        let s = tape.sum_all(y);
        assert_eq!(tape.backward(s).unwrap().get(x).data(), &[1.0, 0.0, 1.0]);
        assert!(tape.masked_fill(x, &[true], 0.0).is_err());
    }
}
