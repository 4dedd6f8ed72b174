//! Differentiable operations specific to plane-sweep stereo, recorded on
//! the generic tape.

use itermvs_tensor::{argmax, Real, Tape, Tensor, TensorError, Var};

use crate::error::Result;
use crate::geometry::Warper;

/// Coordinate given to samples that land behind the source camera; any
/// out-of-image value works because sampling treats it as invalid.
const BEHIND: f64 = -1.0e6;

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Source-view sample positions for reference pixels at given depths.
pub struct WarpedCoords {
    pub xs: Var,
    pub ys: Var,
    /// Per sample: source-frame depth at or below the camera plane.
    pub behind: Vec<bool>,
}

/// Warps reference pixels `(px[p], py[p])` at depths `depth[n, p]` (any
/// shape with `numel = N * P`, pixel index fastest) into a source view.
/// Both outputs are differentiable in the depths.
pub fn warp_coords<T: Real>(
    tape: &Tape<T>,
    depth: Var,
    px: &[f64],
    py: &[f64],
    warper: &Warper,
) -> Result<WarpedCoords> {
    let dv = tape.value(depth);
    let np = px.len();
    if py.len() != np || np == 0 || !dv.numel().is_multiple_of(np) {
        return Err(shape_err("warp_coords", format!("{} depths for {} pixels", dv.numel(), np)).into());
    }
    let n = dv.numel();
    let (mut xs, mut ys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut dxs, mut dys) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut behind = Vec::with_capacity(n);
    for (i, &d) in dv.data().iter().enumerate() {
        let p = i % np;
        let w = warper.warp(px[p], py[p], d.f64());
        behind.push(w.behind);
        if w.behind {
            xs.push(T::c(BEHIND));
            ys.push(T::c(BEHIND));
        } else {
            xs.push(T::c(w.x));
            ys.push(T::c(w.y));
        }
        dxs.push(T::c(w.dx_dd));
        dys.push(T::c(w.dy_dd));
    }
    if tape.tracks_decisions() {
        tape.note_all(behind.iter().map(|&b| b as u64));
    }
    let shape = dv.shape().clone();
    let record = |vals: Vec<T>, deriv: Vec<T>| -> Result<Var> {
        Ok(tape.record(Tensor::new(shape.clone(), vals)?, &[depth], move |g, sink| {
            if let Some(gd) = sink.buf(depth) {
                for i in 0..g.len() {
                    gd[i] += g[i] * deriv[i];
                }
            }
        }))
    };
    Ok(WarpedCoords {
        xs: record(xs, dxs)?,
        ys: record(ys, dys)?,
        behind,
    })
}

/// Group-wise correlation. `f0` is `[C, P]`, `fi` is `[C, N * P]` (the
/// source features sampled at `N` hypotheses per pixel). Returns
/// `[N, G, P]` with `s[n, g, p] = (G / C) <f0^g[p], fi^g[n, p]>`.
pub fn group_correlation<T: Real>(tape: &Tape<T>, f0: Var, fi: Var, groups: usize) -> Result<Var> {
    let (a, b) = (tape.value(f0), tape.value(fi));
    let (ad, bd) = (a.dims().to_vec(), b.dims().to_vec());
    if ad.len() != 2 || bd.len() != 2 || ad[0] != bd[0] || bd[1] % ad[1] != 0 {
        return Err(shape_err("group_correlation", format!("{ad:?} vs {bd:?}")).into());
    }
    let (c, np) = (ad[0], ad[1]);
    if groups == 0 || c % groups != 0 {
        return Err(shape_err("group_correlation", format!("{c} channels into {groups} groups")).into());
    }
    let nh = bd[1] / np;
    let cg = c / groups;
    let scale = T::c(groups as f64 / c as f64);
    let mut out = vec![T::zero(); nh * groups * np];
    let (ad_, bd_) = (a.data(), b.data());
    for ch in 0..c {
        let g = ch / cg;
        let arow = &ad_[ch * np..(ch + 1) * np];
        for n in 0..nh {
            let brow = &bd_[ch * nh * np + n * np..ch * nh * np + (n + 1) * np];
            let orow = &mut out[(n * groups + g) * np..(n * groups + g + 1) * np];
            for p in 0..np {
                orow[p] += arow[p] * brow[p];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let y = Tensor::new([nh, groups, np], out)?;
    Ok(tape.record(y, &[f0, fi], move |g, sink| {
        let (ad_, bd_) = (a.data(), b.data());
        if let Some(ga) = sink.buf(f0) {
            for ch in 0..c {
                let grp = ch / cg;
                for n in 0..nh {
                    let go = &g[(n * groups + grp) * np..(n * groups + grp + 1) * np];
                    let brow = &bd_[ch * nh * np + n * np..ch * nh * np + (n + 1) * np];
                    for p in 0..np {
                        ga[ch * np + p] += scale * go[p] * brow[p];
                    }
                }
            }
        }
        if let Some(gb) = sink.buf(fi) {
            for ch in 0..c {
                let grp = ch / cg;
                let arow = &ad_[ch * np..(ch + 1) * np];
                for n in 0..nh {
                    let go = &g[(n * groups + grp) * np..(n * groups + grp + 1) * np];
                    let base = ch * nh * np + n * np;
                    for p in 0..np {
                        gb[base + p] += scale * go[p] * arow[p];
                    }
                }
            }
        }
    }))
}

/// View-weighted mean of per-view similarities. Each `sims[i]` has the
/// same shape with the pixel axis last (`P` entries); each `weights[i]` is
/// `[P]` and positive.
pub fn integrate<T: Real>(tape: &Tape<T>, sims: &[Var], weights: &[Var]) -> Result<Var> {
    if sims.is_empty() || sims.len() != weights.len() {
        return Err(shape_err("integrate", format!("{} similarities, {} weights", sims.len(), weights.len())).into());
    }
    let svals: Vec<Tensor<T>> = sims.iter().map(|&s| tape.value(s)).collect();
    let wvals: Vec<Tensor<T>> = weights.iter().map(|&w| tape.value(w)).collect();
    let shape = svals[0].shape().clone();
    let np = wvals[0].numel();
    for (s, w) in svals.iter().zip(&wvals) {
        if s.shape() != &shape || w.numel() != np || !shape.numel().is_multiple_of(np) {
            return Err(shape_err("integrate", format!("{:?} with weights {:?}", s.dims(), w.dims())).into());
        }
    }
    let total: Vec<T> = (0..np).map(|p| wvals.iter().map(|w| w.data()[p]).sum()).collect();
    // Normalized weights first: one view then gives exactly weight one.
    let norm: Vec<Vec<T>> = wvals
        .iter()
        .map(|w| {
            w.data()
                .iter()
                .zip(&total)
                .map(|(&wi, &tot)| {
                    assert!(tot > T::zero(), "view weights must be positive");
                    wi / tot
                })
                .collect()
        })
        .collect();
    let mut out = vec![T::zero(); shape.numel()];
    for (s, nw) in svals.iter().zip(&norm) {
        for (i, o) in out.iter_mut().enumerate() {
            *o += nw[i % np] * s.data()[i];
        }
    }
    let out_t = Tensor::new(shape.clone(), out)?;
    let mean = out_t.clone();
    let sims_v = sims.to_vec();
    let weights_v = weights.to_vec();
    let mut parents = sims_v.clone();
    parents.extend_from_slice(&weights_v);
    Ok(tape.record(out_t, &parents, move |g, sink| {
        for (k, &sv) in sims_v.iter().enumerate() {
            if let Some(gs) = sink.buf(sv) {
                for i in 0..g.len() {
                    gs[i] += g[i] * norm[k][i % np];
                }
            }
        }
        for (k, &wv) in weights_v.iter().enumerate() {
            if let Some(gw) = sink.buf(wv) {
                let s = svals[k].data();
                for i in 0..g.len() {
                    let p = i % np;
                    gw[p] += g[i] * (s[i] - mean.data()[i]) / total[p];
                }
            }
        }
    }))
}

/// Inverse of the probability-weighted mean inverse depth:
/// `d[p] = 1 / sum_j inv[j] prob[j, p]`, clamped into the depth range
/// spanned by `inv`. `prob` is `[D, P]` and normalized along axis 0.
pub fn inverse_expectation<T: Real>(tape: &Tape<T>, prob: Var, inv: &[f64]) -> Result<Var> {
    let pv = tape.value(prob);
    let d = pv.dims().to_vec();
    if d.len() != 2 || d[0] != inv.len() {
        return Err(shape_err("inverse_expectation", format!("{d:?} with {} samples", inv.len())).into());
    }
    let window: Vec<(usize, usize)> = vec![(0, inv.len() - 1); d[1]];
    Ok(windowed_inverse_mean(tape, prob, &pv, inv, window))
}

/// Hybrid readout: per pixel, the argmax sample `X` (lowest index on ties)
/// and the inverse of the renormalized inverse-depth expectation over the
/// window `[X - r, X + r]` clipped to valid indices.
pub fn hybrid_readout<T: Real>(tape: &Tape<T>, prob: Var, inv: &[f64], radius: usize) -> Result<(Var, Vec<usize>)> {
    let pv = tape.value(prob);
    let d = pv.dims().to_vec();
    if d.len() != 2 || d[0] != inv.len() {
        return Err(shape_err("hybrid_readout", format!("{d:?} with {} samples", inv.len())).into());
    }
    let idx = argmax(&pv, 0)?;
    if tape.tracks_decisions() {
        tape.note_all(idx.iter().map(|&i| i as u64));
    }
    let window = idx
        .iter()
        .map(|&x| (x.saturating_sub(radius), (x + radius).min(inv.len() - 1)))
        .collect();
    Ok((windowed_inverse_mean(tape, prob, &pv, inv, window), idx))
}

fn windowed_inverse_mean<T: Real>(
    tape: &Tape<T>,
    prob: Var,
    pv: &Tensor<T>,
    inv: &[f64],
    window: Vec<(usize, usize)>,
) -> Var {
    let np = pv.dims()[1];
    let u: Vec<T> = inv.iter().map(|&v| T::c(v)).collect();
    let p = pv.data();
    let mut out = Vec::with_capacity(np);
    let mut sums = Vec::with_capacity(np);
    let mut clamped = Vec::with_capacity(np);
    for (px, &(lo, hi)) in window.iter().enumerate() {
        let (mut a, mut b) = (T::zero(), T::zero());
        for j in lo..=hi {
            a += p[j * np + px];
            b += u[j] * p[j * np + px];
        }
        let (umin, umax) = (u[lo].min(u[hi]), u[lo].max(u[hi]));
        let d = a / b;
        let (dlo, dhi) = (T::one() / umax, T::one() / umin);
        let c = !(d >= dlo && d <= dhi);
        clamped.push(c);
        out.push(if c { d.max(dlo).min(dhi) } else { d });
        sums.push((a, b));
    }
    if tape.tracks_decisions() {
        tape.note_all(clamped.iter().map(|&c| c as u64));
    }
    let y = Tensor::new([np], out).expect("one value per pixel");
    tape.record(y, &[prob], move |g, sink| {
        if let Some(gp) = sink.buf(prob) {
            for (px, &(lo, hi)) in window.iter().enumerate() {
                if clamped[px] {
                    continue;
                }
                let (a, b) = sums[px];
                // d = a / b  =>  dd/dp_j = (b - a u_j) / b^2
                let b2 = b * b;
                for j in lo..=hi {
                    gp[j * np + px] += g[px] * (b - a * u[j]) / b2;
                }
            }
        }
    })
}

/// `y[n, p] = clamp(eta[p] + offsets[n], 0, 1)` for a `[P]` input.
pub fn offset_clamped<T: Real>(tape: &Tape<T>, eta: Var, offsets: &[f64]) -> Result<Var> {
    let ev = tape.value(eta);
    let np = ev.numel();
    let n = offsets.len();
    let mut out = Vec::with_capacity(n * np);
    let mut inside = Vec::with_capacity(n * np);
    for &o in offsets {
        for &e in ev.data() {
            let v = e + T::c(o);
            let ok = v >= T::zero() && v <= T::one();
            inside.push(ok);
            out.push(v.max(T::zero()).min(T::one()));
        }
    }
    if tape.tracks_decisions() {
        tape.note_all(inside.iter().map(|&b| b as u64));
    }
    Ok(tape.record(Tensor::new([n, np], out)?, &[eta], move |g, sink| {
        if let Some(ge) = sink.buf(eta) {
            for i in 0..g.len() {
                if inside[i] {
                    ge[i % np] += g[i];
                }
            }
        }
    }))
}

/// Offset of neighbour `k` in a 3x3 window, row-major from the top-left.
pub fn neighbour_offset(k: usize) -> (isize, isize) {
    ((k / 3) as isize - 1, (k % 3) as isize - 1)
}

/// Convex upsampling by `factor`. `weights` is `[9, factor^2, H * W]`,
/// already normalized over its first axis; `depth` is `[H, W]`. Output
/// pixel `(f y + sy, f x + sx)` is `sum_k weights[k, sy f + sx, y W + x] *
/// depth[neighbour k of (y, x)]` with edge replication at the borders.
pub fn convex_upsample<T: Real>(tape: &Tape<T>, weights: Var, depth: Var, factor: usize) -> Result<Var> {
    let (wv, dv) = (tape.value(weights), tape.value(depth));
    let (wd, dd) = (wv.dims().to_vec(), dv.dims().to_vec());
    if dd.len() != 2 || wd != [9, factor * factor, dd[0] * dd[1]] {
        return Err(shape_err("convex_upsample", format!("weights {wd:?} for depth {dd:?}")).into());
    }
    let (h, w) = (dd[0], dd[1]);
    let (oh, ow) = (h * factor, w * factor);
    let ff = factor * factor;
    let np = h * w;
    let nb = move |y: usize, x: usize, k: usize| -> usize {
        let (dy, dx) = neighbour_offset(k);
        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        yy * w + xx
    };
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            for sy in 0..factor {
                for sx in 0..factor {
                    let s = sy * factor + sx;
                    let mut acc = T::zero();
                    for k in 0..9 {
                        acc += wv.data()[(k * ff + s) * np + p] * dv.data()[nb(y, x, k)];
                    }
                    out[(y * factor + sy) * ow + x * factor + sx] = acc;
                }
            }
        }
    }
    Ok(tape.record(Tensor::new([oh, ow], out)?, &[weights, depth], move |g, sink| {
        let want_w = sink.wants(weights);
        let want_d = sink.wants(depth);
        let mut gw = if want_w { vec![T::zero(); wv.numel()] } else { Vec::new() };
        let mut gd = if want_d { vec![T::zero(); dv.numel()] } else { Vec::new() };
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for sy in 0..factor {
                    for sx in 0..factor {
                        let s = sy * factor + sx;
                        let go = g[(y * factor + sy) * ow + x * factor + sx];
                        for k in 0..9 {
                            let q = nb(y, x, k);
                            let wi = (k * ff + s) * np + p;
                            if want_w {
                                gw[wi] += go * dv.data()[q];
                            }
                            if want_d {
                                gd[q] += go * wv.data()[wi];
                            }
                        }
                    }
                }
            }
        }
        if want_w {
            sink.add(weights, &gw);
        }
        if want_d {
            sink.add(depth, &gd);
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{relative_pose, Camera, Mat3, Vec3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t<const N: usize>(dims: [usize; N], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(dims, v).unwrap()
    }

    #[test]
    fn group_correlation_cases() {
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::full([16, 5], 1.0));
        let ones_n = tape.constant(Tensor::full([16, 15], 1.0));
        let s = tape.value(group_correlation(&tape, ones, ones_n, 8).unwrap());
        assert_eq!(s.dims(), &[3, 8, 5]);
        assert!(s.data().iter().all(|&v| v == 1.0));
        let zeros = tape.constant(Tensor::zeros([16, 15]));
        let s = tape.value(group_correlation(&tape, ones, zeros, 8).unwrap());
        assert!(s.data().iter().all(|&v| v == 0.0));
        assert!(group_correlation(&tape, ones, ones_n, 3).is_err());

        // Oracle: explicit per-group dot products.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, n, p, g) = (32, 3, 7, 8);
        let a: Vec<f64> = (0..c * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c * n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let av = tape.constant(t([c, p], a.clone()));
        let bv = tape.constant(t([c, n * p], b.clone()));
        let s = tape.value(group_correlation(&tape, av, bv, g).unwrap());
        for ni in 0..n {
            for gi in 0..g {
                for pi in 0..p {
                    let dot: f64 = (gi * 4..gi * 4 + 4).map(|ch| a[ch * p + pi] * b[(ch * n + ni) * p + pi]).sum();
                    assert!((s.data()[(ni * g + gi) * p + pi] - dot * 8.0 / 32.0).abs() < 1e-6);
                }
            }
        }
        // Bilinearity in the reference features.
        let a2 = tape.constant(t([c, p], a.iter().map(|v| v * 2.5).collect()));
        let s2 = tape.value(group_correlation(&tape, a2, bv, g).unwrap());
        for (x, y) in s.data().iter().zip(s2.data()) {
            assert!((x * 2.5 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn integrate_cases() {
        let tape = Tape::<f64>::new();
        let s1 = tape.constant(t([2, 3], vec![0.1, 0.7, -3.3, 1.0 / 3.0, 5.0, 0.2]));
        let w = tape.constant(t([3], vec![0.3, 0.77, 0.031]));
        let out = tape.value(integrate(&tape, &[s1], &[w]).unwrap());
        assert_eq!(out.data(), tape.value(s1).data());

        let s2 = tape.constant(t([2, 3], vec![1.0, 0.5, 3.3, 2.0, 1.0, 0.0]));
        let eq = tape.constant(t([3], vec![0.2, 0.2, 0.2]));
        let out = tape.value(integrate(&tape, &[s1, s2], &[eq, eq]).unwrap());
        for i in 0..6 {
            let mean = (tape.value(s1).data()[i] + tape.value(s2).data()[i]) / 2.0;
            assert!((out.data()[i] - mean).abs() < 1e-15);
        }

        let a = tape.constant(Tensor::full([1, 1], 1.0));
        let b = tape.constant(Tensor::full([1, 1], 0.0));
        let wa = tape.constant(Tensor::full([1], 0.9));
        let wb = tape.constant(Tensor::full([1], 0.1));
        let out = tape.value(integrate(&tape, &[a, b], &[wa, wb]).unwrap());
        assert!((out.item() - 0.9).abs() < 1e-15);

        // Scaling every weight by a constant changes nothing.
        let w3 = tape.constant(t([3], vec![0.6, 1.54, 0.062]));
        let x = tape.value(integrate(&tape, &[s1, s2], &[w, eq]).unwrap());
        let eq2 = tape.constant(t([3], vec![0.4, 0.4, 0.4]));
        let y = tape.value(integrate(&tape, &[s1, s2], &[w3, eq2]).unwrap());
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn inverse_expectation_cases() {
        let inv = [0.5, 0.75, 1.0];
        let tape = Tape::<f64>::new();
        let uniform = tape.constant(Tensor::full([3, 1], 1.0 / 3.0));
        let d = tape.value(inverse_expectation(&tape, uniform, &inv).unwrap()).item();
        assert!((d - 4.0 / 3.0).abs() < 1e-15);
        for j in 0..3 {
            let oh = tape.constant(Tensor::from_fn([3, 1], |i| (i == j) as u8 as f64));
            let d = tape.value(inverse_expectation(&tape, oh, &inv).unwrap()).item();
            assert_eq!(d, 1.0 / inv[j]);
        }
    }

    /// Brute-force windowed expectation, written out per pixel.
    fn readout_oracle(p: &[f64], inv: &[f64], r: usize) -> (f64, usize) {
        let mut x = 0;
        for j in 0..p.len() {
            if p[j] > p[x] {
                x = j;
            }
        }
        let lo = x.saturating_sub(r);
        let hi = (x + r).min(p.len() - 1);
        let z: f64 = p[lo..=hi].iter().sum();
        let e: f64 = (lo..=hi).map(|j| inv[j] * p[j] / z).sum();
        (1.0 / e, x)
    }

    #[test]
    fn hybrid_readout_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inv: Vec<f64> = (0..256).map(|j| crate::geometry::inverse_sample(0.5, 4.0, 256, j)).collect();
        let np = 40;
        let mut raw: Vec<f64> = (0..256 * np).map(|_| rng.gen_range(0.0..1.0f64).powi(8)).collect();
        // Peaks at the ends exercise window truncation.
        raw[0] = 5.0;
        raw[255 * np + 1] = 5.0;
        let mut data = raw.clone();
        for p in 0..np {
            let z: f64 = (0..256).map(|j| raw[j * np + p]).sum();
            for j in 0..256 {
                data[j * np + p] /= z;
            }
        }
        let tape = Tape::<f64>::new();
        let pv = tape.constant(t([256, np], data.clone()));
        let (d, idx) = hybrid_readout(&tape, pv, &inv, 4).unwrap();
        let d = tape.value(d);
        for p in 0..np {
            let col: Vec<f64> = (0..256).map(|j| data[j * np + p]).collect();
            let (od, ox) = readout_oracle(&col, &inv, 4);
            assert_eq!(idx[p], ox);
            assert!((d.data()[p] - od).abs() < 1e-7);
            assert!(d.data()[p] >= 0.5 && d.data()[p] <= 4.0);
        }
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 255);
    }

    #[test]
    fn readout_ties_and_one_hot() {
        let inv = [0.25, 0.5, 0.75, 1.0];
        let tape = Tape::<f64>::new();
        let tie = tape.constant(t([4, 1], vec![0.0, 0.5, 0.5, 0.0]));
        assert_eq!(hybrid_readout(&tape, tie, &inv, 1).unwrap().1, vec![1]);
        let mut prev = f64::INFINITY;
        for j in 0..4 {
            let oh = tape.constant(Tensor::from_fn([4, 1], |i| (i == j) as u8 as f64));
            let d = tape.value(hybrid_readout(&tape, oh, &inv, 1).unwrap().0).item();
            assert_eq!(d, 1.0 / inv[j]);
            assert!(d < prev);
            prev = d;
        }
    }

    #[test]
    fn offsets_clamp() {
        let tape = Tape::<f64>::new();
        let eta = tape.constant(t([2], vec![0.5, 0.0]));
        let y = tape.value(offset_clamped(&tape, eta, &[-0.125, 0.125]).unwrap());
        assert_eq!(y.data(), &[0.375, 0.0, 0.625, 0.125]);
    }

    #[test]
    fn warp_coords_identity_and_behind() {
        let k = Mat3::new(20.0, 0.0, 8.0, 0.0, 20.0, 8.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(k, Mat3::identity(), Vec3::zeros(), 1.0, 4.0).unwrap();
        let w = Warper::new(&k, &k, &relative_pose(&cam, &cam));
        let tape = Tape::<f64>::new();
        let d = tape.constant(Tensor::full([2, 3], 2.0));
        let wc = warp_coords(&tape, d, &[0.0, 1.5, 3.0], &[2.0, 2.0, 7.0], &w).unwrap();
        assert_eq!(tape.value(wc.xs).data(), &[0.0, 1.5, 3.0, 0.0, 1.5, 3.0]);
        assert!(wc.behind.iter().all(|&b| !b));

        let back = Camera::new(k, Mat3::identity(), Vec3::new(0.0, 0.0, -3.0), 1.0, 4.0).unwrap();
        let w = Warper::new(&k, &k, &relative_pose(&cam, &back));
        let wc = warp_coords(&tape, d, &[0.0, 1.5, 3.0], &[2.0, 2.0, 7.0], &w).unwrap();
        assert!(wc.behind.iter().all(|&b| b));
    }

    #[test]
    fn convex_upsample_cases() {
        let (h, w) = (3, 4);
        let tape = Tape::<f64>::new();
        let depth: Vec<f64> = (0..h * w).map(|i| 1.0 + i as f64 * 0.5).collect();
        let dv = tape.constant(t([h, w], depth.clone()));
        // Centre neighbour only: nearest-neighbour replication.
        let centre = tape.constant(Tensor::from_fn([9, 16, h * w], |i| (i / (16 * h * w) == 4) as u8 as f64));
        let up = tape.value(convex_upsample(&tape, centre, dv, 4).unwrap());
        for y in 0..4 * h {
            for x in 0..4 * w {
                assert_eq!(up.data()[y * 4 * w + x], depth[(y / 4) * w + x / 4]);
            }
        }
        // Random convex weights against a per-pixel loop.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut wts = vec![0.0; 9 * 16 * h * w];
        for s in 0..16 * h * w {
            let raw: Vec<f64> = (0..9).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for k in 0..9 {
                wts[k * 16 * h * w + s] = raw[k] / z;
            }
        }
        let wv = tape.constant(t([9, 16, h * w], wts.clone()));
        let up = tape.value(convex_upsample(&tape, wv, dv, 4).unwrap());
        for y in 0..4 * h {
            for x in 0..4 * w {
                let (cy, cx, s) = (y / 4, x / 4, (y % 4) * 4 + x % 4);
                let mut acc = 0.0;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let k = ((dy + 1) * 3 + dx + 1) as usize;
                        let yy = (cy as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (cx as isize + dx).clamp(0, w as isize - 1) as usize;
                        let v = depth[yy * w + xx];
                        acc += wts[(k * 16 + s) * h * w + cy * w + cx] * v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let got = up.data()[y * 4 * w + x];
                assert!((got - acc).abs() < 1e-6);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
        let constant = tape.constant(Tensor::full([h, w], 2.5));
        let up = tape.value(convex_upsample(&tape, wv, constant, 4).unwrap());
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
