use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Bilinear stencil of one sample: top-left texel and fractional offsets.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
}

/// Stencil for a continuous position, or `None` outside `[0, w-1] x [0, h-1]`.
fn stencil(x: f64, y: f64, w: usize, h: usize) -> Option<Stencil> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    Some(Stencil {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

/// Source coordinate of output index `o` when resizing `n_in -> n_out`
/// with pixel centres aligned, clamped to the valid range.
pub fn resize_source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

impl<T: Real> Tape<T> {
    /// Samples every channel of `grid` `[C, H, W]` at the continuous pixel
    /// positions `(xs[m], ys[m])`, giving `[C, M]`.
    ///
    /// Positions outside `[0, W-1] x [0, H-1]` (or non-finite) yield zeros
    /// and are reported invalid. Differentiable in the grid values and in
    /// both coordinate inputs.
    pub fn bilinear_sample(&self, grid: Var, xs: Var, ys: Var) -> Result<(Var, Vec<bool>)> {
        let gv = self.value(grid);
        let (xv, yv) = (self.value(xs), self.value(ys));
        let gd = gv.dims();
        if gd.len() != 3 {
            return Err(shape_err("bilinear_sample", format!("grid {gd:?} is not [C,H,W]")));
        }
        if xv.numel() != yv.numel() {
            return Err(shape_err(
                "bilinear_sample",
                format!("{} x-coords vs {} y-coords", xv.numel(), yv.numel()),
            ));
        }
        let (c, h, w) = (gd[0], gd[1], gd[2]);
        let m = xv.numel();
        let stencils: Vec<Option<Stencil>> = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(&x, &y)| stencil(x.f64(), y.f64(), w, h))
            .collect();
        if self.tracks_decisions() {
            self.note_all(stencils.iter().map(|s| match s {
                Some(s) => ((s.y0 as u64) << 32) | s.x0 as u64,
                None => u64::MAX,
            }));
        }
        let mut out = vec![T::zero(); c * m];
        let g = gv.data();
        for (i, s) in stencils.iter().enumerate() {
            let Some(s) = s else { continue };
            let (fx, fy) = (T::c(s.fx), T::c(s.fy));
            let w00 = (T::one() - fx) * (T::one() - fy);
            let w01 = fx * (T::one() - fy);
            let w10 = (T::one() - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                let p = &g[ch * h * w..(ch + 1) * h * w];
                out[ch * m + i] = w00 * p[s.y0 * w + s.x0]
                    + w01 * p[s.y0 * w + s.x1]
                    + w10 * p[s.y1 * w + s.x0]
                    + w11 * p[s.y1 * w + s.x1];
            }
        }
        let valid: Vec<bool> = stencils.iter().map(Option::is_some).collect();
        let out = Tensor::from_parts(Shape::new(&[c, m]), out);
        let var = self.record(out, &[grid, xs, ys], move |go, sink| {
            let g = gv.data();
            if let Some(gg) = sink.buf(grid) {
                for (i, s) in stencils.iter().enumerate() {
                    let Some(s) = s else { continue };
                    let (fx, fy) = (T::c(s.fx), T::c(s.fy));
                    for ch in 0..c {
                        let v = go[ch * m + i];
                        let p = &mut gg[ch * h * w..(ch + 1) * h * w];
                        p[s.y0 * w + s.x0] += v * (T::one() - fx) * (T::one() - fy);
                        p[s.y0 * w + s.x1] += v * fx * (T::one() - fy);
                        p[s.y1 * w + s.x0] += v * (T::one() - fx) * fy;
                        p[s.y1 * w + s.x1] += v * fx * fy;
                    }
                }
            }
            let want_x = sink.wants(xs);
            let want_y = sink.wants(ys);
            if !(want_x || want_y) {
                return;
            }
            let mut dx = vec![T::zero(); m];
            let mut dy = vec![T::zero(); m];
            for (i, s) in stencils.iter().enumerate() {
                let Some(s) = s else { continue };
                let (fx, fy) = (T::c(s.fx), T::c(s.fy));
                // At the far border the stencil collapses and the
                // one-sided derivative is zero.
                let ex = if s.x1 == s.x0 { T::zero() } else { T::one() };
                let ey = if s.y1 == s.y0 { T::zero() } else { T::one() };
                for ch in 0..c {
                    let p = &g[ch * h * w..(ch + 1) * h * w];
                    let (v00, v01) = (p[s.y0 * w + s.x0], p[s.y0 * w + s.x1]);
                    let (v10, v11) = (p[s.y1 * w + s.x0], p[s.y1 * w + s.x1]);
                    let gv = go[ch * m + i];
                    dx[i] += gv * ex * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                    dy[i] += gv * ey * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                }
            }
            if want_x {
                sink.add(xs, &dx);
            }
            if want_y {
                sink.add(ys, &dy);
            }
        });
        Ok((var, valid))
    }

    /// Bilinear resize of the two trailing (spatial) axes to `out_h x out_w`
    /// with aligned pixel centres and edge replication.
    pub fn resize_bilinear(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.dims().to_vec();
        if d.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "resize_bilinear",
                format!("{d:?} -> {out_h}x{out_w}"),
            ));
        }
        let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
        let planes: usize = d[..d.len() - 2].iter().product();
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, T)> {
            (0..n_out)
                .map(|o| {
                    let s = resize_source_coord(o, n_in, n_out);
                    let i0 = (s.floor() as usize).min(n_in - 1);
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, T::c(s - i0 as f64))
                })
                .collect()
        };
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let mut od = d.clone();
        let r = od.len();
        od[r - 2] = out_h;
        od[r - 1] = out_w;
        Ok(self.record(
            Tensor::from_parts(Shape::new(&od), out),
            &[x],
            move |g, sink| {
                if let Some(gx) = sink.buf(x) {
                    for p in 0..planes {
                        let gsrc = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                        let dst = &mut gx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let v = gsrc[oy * out_w + ox];
                                dst[y0 * w + x0] += v * (T::one() - fx) * (T::one() - fy);
                                dst[y0 * w + x1] += v * fx * (T::one() - fy);
                                dst[y1 * w + x0] += v * (T::one() - fx) * fy;
                                dst[y1 * w + x1] += v * fx * fy;
                            }
                        }
                    }
                }
            },
        ))
    }
}
