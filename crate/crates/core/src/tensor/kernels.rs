//! Raw loops behind the graph ops. All reductions run in a fixed index order.

use super::{GemmDims, Scalar, Triple};

/// Output positions `o` whose input coordinate `o * stride + k - pad` lands in `[0, input)`.
#[inline]
fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    if input + pad <= k {
        return (0, 0);
    }
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = out.min((input - 1 + pad - k) / stride + 1);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: Triple,
    pub kernel: Triple,
    pub output: Triple,
    pub stride: Triple,
    pub pad: Triple,
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (kernel offset, output row, input row) triple that overlaps.
    /// `f(kernel_index, out_row_start, in_row_start, row_len)`; the input row is
    /// strided by `stride[2]`.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [t_in, h_in, w_in] = self.input;
        let [t_out, h_out, w_out] = self.output;
        let [kt_n, kh_n, kw_n] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        for kt in 0..kt_n {
            let (t_lo, t_hi) = valid_range(t_out, t_in, kt, st, pt);
            for kh in 0..kh_n {
                let (h_lo, h_hi) = valid_range(h_out, h_in, kh, sh, ph);
                for kw in 0..kw_n {
                    let (w_lo, w_hi) = valid_range(w_out, w_in, kw, sw, pw);
                    if w_lo == w_hi {
                        continue;
                    }
                    let k_index = (kt * kh_n + kh) * kw_n + kw;
                    let iw0 = w_lo * sw + kw - pw;
                    for ot in t_lo..t_hi {
                        let it = ot * st + kt - pt;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + kh - ph;
                            f(
                                k_index,
                                (ot * h_out + oh) * w_out + w_lo,
                                (it * h_in + ih) * w_in + iw0,
                                w_hi - w_lo,
                            );
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds one sample `[Cin, T, H, W]` into `[Cin·kvol, P]` columns, zero where
/// the kernel overlaps padding.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S]) {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let sw = g.stride[2];
    col.fill(S::zero());
    for ci in 0..g.cin {
        let in_plane = &x[ci * ip..][..ip];
        let rows = &mut col[ci * kv * op..][..kv * op];
        g.for_each_row(|k, o0, i0, len| {
            let dst = &mut rows[k * op + o0..][..len];
            if sw == 1 {
                dst.copy_from_slice(&in_plane[i0..i0 + len]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = in_plane[i0 + j * sw];
                }
            }
        });
    }
}

/// Folds column gradients back onto one sample, accumulating overlaps.
fn col2im<S: Scalar>(g: &ConvGeom, col: &[S], gin: &mut [S]) {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let sw = g.stride[2];
    for ci in 0..g.cin {
        let gin_plane = &mut gin[ci * ip..][..ip];
        let rows = &col[ci * kv * op..][..kv * op];
        g.for_each_row(|k, o0, i0, len| {
            let src = &rows[k * op + o0..][..len];
            if sw == 1 {
                for (d, &v) in gin_plane[i0..i0 + len].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    gin_plane[i0 + j * sw] += v;
                }
            }
        });
    }
}

pub(crate) fn conv3d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let kdim = g.cin * kv;
    let mut out = vec![S::zero(); g.n * g.cout * op];
    let mut col = vec![S::zero(); kdim * op];
    for n in 0..g.n {
        im2col(g, &x[n * g.cin * ip..][..g.cin * ip], &mut col);
        let out_n = &mut out[n * g.cout * op..][..g.cout * op];
        for (co, plane) in out_n.chunks_mut(op).enumerate() {
            plane.fill(b[co]);
        }
        S::gemm(
            GemmDims { m: g.cout, k: kdim, n: op },
            S::one(),
            w,
            (kdim as isize, 1),
            &col,
            (op as isize, 1),
            S::one(),
            out_n,
            op,
        );
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv3d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    gout: &[S],
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let kdim = g.cin * kv;
    let mut gb = vec![S::zero(); g.cout];
    for n in 0..g.n {
        for (co, acc) in gb.iter_mut().enumerate() {
            for &v in &gout[(n * g.cout + co) * op..][..op] {
                *acc += v;
            }
        }
    }
    let mut gin = need_input.then(|| vec![S::zero(); g.n * g.cin * ip]);
    let mut gw = need_weight.then(|| vec![S::zero(); g.cout * kdim]);
    let mut col = vec![S::zero(); kdim * op];
    for n in 0..g.n {
        let gout_n = &gout[n * g.cout * op..][..g.cout * op];
        if let Some(gw) = gw.as_mut() {
            im2col(g, &x[n * g.cin * ip..][..g.cin * ip], &mut col);
            S::gemm(
                GemmDims { m: g.cout, k: op, n: kdim },
                S::one(),
                gout_n,
                (op as isize, 1),
                &col,
                (1, op as isize),
                S::one(),
                gw,
                kdim,
            );
        }
        if let Some(gin) = gin.as_mut() {
            S::gemm(
                GemmDims { m: kdim, k: g.cout, n: op },
                S::one(),
                w,
                (1, kdim as isize),
                gout_n,
                (op as isize, 1),
                S::zero(),
                &mut col,
                op,
            );
            col2im(g, &col, &mut gin[n * g.cin * ip..][..g.cin * ip]);
        }
    }
    (gin, gw, gb)
}

/// Max pooling over a `[planes, T, H, W]` view. Returns values and, per output,
/// the flat input index of the first maximum in row-major scan order.
pub(crate) fn maxpool3d_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    input: Triple,
    window: Triple,
    stride: Triple,
    output: Triple,
) -> (Vec<S>, Vec<usize>) {
    let [ti, hi, wi] = input;
    let [to, ho, wo] = output;
    let ip = ti * hi * wi;
    let mut vals = Vec::with_capacity(planes * to * ho * wo);
    let mut idx = Vec::with_capacity(planes * to * ho * wo);
    for p in 0..planes {
        let base = p * ip;
        for ot in 0..to {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_i = usize::MAX;
                    let mut best = S::neg_infinity();
                    for kt in 0..window[0] {
                        let t = ot * stride[0] + kt;
                        for kh in 0..window[1] {
                            let h = oh * stride[1] + kh;
                            for kw in 0..window[2] {
                                let wv = ow * stride[2] + kw;
                                let i = base + (t * hi + h) * wi + wv;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    idx.push(best_i);
                }
            }
        }
    }
    (vals, idx)
}

#[inline]
fn adaptive_bounds(o: usize, input: usize, output: usize) -> (usize, usize) {
    let start = o * input / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end)
}

/// Adaptive average pooling of `[planes, T, H, W]` onto `output` extents.
pub(crate) fn adaptive_avg_forward<S: Scalar>(
    x: &[S],
    planes: usize,
    input: Triple,
    output: Triple,
) -> Vec<S> {
    let [ti, hi, wi] = input;
    let [to, ho, wo] = output;
    let mut out = Vec::with_capacity(planes * to * ho * wo);
    for p in 0..planes {
        let base = p * ti * hi * wi;
        for ot in 0..to {
            let (t0, t1) = adaptive_bounds(ot, ti, to);
            for oh in 0..ho {
                let (h0, h1) = adaptive_bounds(oh, hi, ho);
                for ow in 0..wo {
                    let (w0, w1) = adaptive_bounds(ow, wi, wo);
                    let mut acc = S::zero();
                    for t in t0..t1 {
                        for h in h0..h1 {
                            for w in w0..w1 {
                                acc += x[base + (t * hi + h) * wi + w];
                            }
                        }
                    }
                    let count = ((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64;
                    out.push(acc / S::from_f64(count));
                }
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward<S: Scalar>(
    gout: &[S],
    planes: usize,
    input: Triple,
    output: Triple,
) -> Vec<S> {
    let [ti, hi, wi] = input;
    let [to, ho, wo] = output;
    let mut gin = vec![S::zero(); planes * ti * hi * wi];
    let mut k = 0;
    for p in 0..planes {
        let base = p * ti * hi * wi;
        for ot in 0..to {
            let (t0, t1) = adaptive_bounds(ot, ti, to);
            for oh in 0..ho {
                let (h0, h1) = adaptive_bounds(oh, hi, ho);
                for ow in 0..wo {
                    let (w0, w1) = adaptive_bounds(ow, wi, wo);
                    let count = ((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64;
                    let share = gout[k] / S::from_f64(count);
                    k += 1;
                    for t in t0..t1 {
                        for h in h0..h1 {
                            for w in w0..w1 {
                                gin[base + (t * hi + h) * wi + w] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for input in 1..7 {
            for k in 1..4 {
                for stride in 1..3 {
                    for pad in 0..3 {
                        let Some(out) = conv_out_extent(input, k, stride, pad) else {
                            continue;
                        };
                        for kk in 0..k {
                            let brute: Vec<_> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + kk) as isize - pad as isize;
                                    i >= 0 && (i as usize) < input
                                })
                                .collect();
                            let (lo, hi) = valid_range(out, input, kk, stride, pad);
                            assert_eq!(brute, (lo..hi).collect::<Vec<_>>());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_identity_when_extents_match() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let y = adaptive_avg_forward(&x, 1, [2, 3, 4], [2, 3, 4]);
        assert_eq!(x, y);
    }
}
