use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad`
    /// falls inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((self.w as isize - off + s - 1) / s).clamp(0, self.wo as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }
}

fn im2col<T: Real>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &Geometry, cols: &[T], x: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.stride + kx - g.pad] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation over `[N, C, H, W]` with square `[O, C, k, k]`
    /// kernels, zero padding and an optional `[O]` bias.
    pub fn conv2d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (xd, wd) = (xv.dims(), wv.dims());
        if xd.len() != 4 || wd.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input {xd:?} and weight {wd:?} must both be rank 4"),
            ));
        }
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (o, k) = (wd[0], wd[2]);
        if wd[1] != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels, weight expects {}", wd[1]),
            ));
        }
        if wd[3] != k {
            return Err(shape_err("conv2d", format!("non-square kernel {wd:?}")));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        if let Some(b) = bias {
            if self.value_ref(b).dims() != [o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} for {o} outputs", self.dims(b)),
                ));
            }
        }
        let geo = Geometry {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        };
        let (rows, ncols) = (geo.rows(), geo.cols());
        let bv = bias.map(|b| self.value(b));
        let mut out = vec![T::zero(); n * o * ncols];
        let mut cols = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncols]
        };
        for b in 0..n {
            let xin = &xv.data()[b * c * h * w..(b + 1) * c * h * w];
            let cm: &[T] = if geo.is_pointwise() {
                xin
            } else {
                im2col(&geo, xin, &mut cols);
                &cols
            };
            let dst = &mut out[b * o * ncols..(b + 1) * o * ncols];
            if let Some(bv) = &bv {
                for (oc, &bias) in bv.data().iter().enumerate() {
                    dst[oc * ncols..(oc + 1) * ncols].fill(bias);
                }
            }
            T::gemm(
                o,
                rows,
                ncols,
                wd_slice(&wv),
                (rows as isize, 1),
                cm,
                (ncols as isize, 1),
                T::one(),
                dst,
                (ncols as isize, 1),
            );
        }
        let out = Tensor::from_parts(Shape::new(&[n, o, geo.ho, geo.wo]), out);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.record(out, &parents, move |g, sink| {
            let xin_all = xv.data();
            let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * ncols }];
            let mut gcols = vec![T::zero(); rows * ncols];
            if let Some(gb) = bias.and_then(|b| sink.buf(b)) {
                for b in 0..n {
                    for (oc, d) in gb.iter_mut().enumerate() {
                        let base = (b * o + oc) * ncols;
                        *d += g[base..base + ncols].iter().copied().sum::<T>();
                    }
                }
            }
            let want_w = sink.wants(weight);
            let want_x = sink.wants(x);
            for b in 0..n {
                let gout = &g[b * o * ncols..(b + 1) * o * ncols];
                if want_w {
                    let xin = &xin_all[b * c * h * w..(b + 1) * c * h * w];
                    let cm: &[T] = if geo.is_pointwise() {
                        xin
                    } else {
                        im2col(&geo, xin, &mut cols);
                        &cols
                    };
                    let gw = sink.buf(weight).expect("weight gradient requested");
                    T::gemm(
                        o,
                        ncols,
                        rows,
                        gout,
                        (ncols as isize, 1),
                        cm,
                        (1, ncols as isize),
                        T::one(),
                        gw,
                        (rows as isize, 1),
                    );
                }
                if want_x {
                    T::gemm(
                        rows,
                        o,
                        ncols,
                        wd_slice(&wv),
                        (1, rows as isize),
                        gout,
                        (ncols as isize, 1),
                        T::zero(),
                        &mut gcols,
                        (ncols as isize, 1),
                    );
                    let gx = sink.buf(x).expect("input gradient requested");
                    let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
                    if geo.is_pointwise() {
                        for (d, &v) in gxb.iter_mut().zip(&gcols) {
                            *d += v;
                        }
                    } else {
                        col2im_add(&geo, &gcols, gxb);
                    }
                }
            }
        }))
    }
}

fn wd_slice<T: Real>(w: &Tensor<T>) -> &[T] {
    w.data()
}
