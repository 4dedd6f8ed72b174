use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

impl<T: Real> Tape<T> {
    pub fn reshape(&self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let xv = self.value(x);
        let y = xv.reshape(shape)?;
        Ok(self.record(y, &[x], move |g, sink| sink.add(x, g)))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let s0 = self.shape(*first);
        if axis >= s0.rank() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: s0.rank(),
            });
        }
        let values: Vec<Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let mut lens = Vec::with_capacity(xs.len());
        for v in &values {
            let s = v.shape();
            let compatible = s.rank() == s0.rank()
                && (0..s0.rank()).all(|a| a == axis || s.dim(a) == s0.dim(a));
            if !compatible {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            lens.push(s.dim(axis));
        }
        let (outer, _, inner) = s0.split_at_axis(axis);
        let total: usize = lens.iter().sum();
        let mut dims = s0.dims().to_vec();
        dims[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let parents = xs.to_vec();
        Ok(self.record(
            Tensor::from_parts(Shape::new(&dims), out),
            xs,
            move |g, sink| {
                let mut offset = 0;
                for (&p, &len) in parents.iter().zip(&lens) {
                    let chunk = len * inner;
                    if let Some(gp) = sink.buf(p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            for (d, &v) in gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(&g[src..src + chunk])
                            {
                                *d += v;
                            }
                        }
                    }
                    offset += chunk;
                }
            },
        ))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().clone();
        if axis >= s.rank() {
            return Err(TensorError::Axis {
                op: "narrow",
                axis,
                rank: s.rank(),
            });
        }
        if len == 0 || start + len > s.dim(axis) {
            return Err(shape_err(
                "narrow",
                format!("[{start}, {}) out of extent {} on axis {axis}", start + len, s.dim(axis)),
            ));
        }
        let (outer, n, inner) = s.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut dims = s.dims().to_vec();
        dims[axis] = len;
        Ok(self.record(
            Tensor::from_parts(Shape::new(&dims), out),
            &[x],
            move |g, sink| {
                if let Some(gx) = sink.buf(x) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        for (d, &v) in gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += v;
                        }
                    }
                }
            },
        ))
    }
}
