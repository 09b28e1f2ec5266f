//! Duality-based TV-L1 optical flow, coarse to fine.
//!
//! The estimator minimizes `λ·Σ|I1(x + u) − I0(x)| + Σ(|∇u₁| + |∇u₂|)` by
//! linearizing the data term around the current warp and alternating a
//! pointwise thresholding step on an auxiliary field with a projected dual
//! ascent on the total-variation term. Flow `(u, v)` follows the convention
//! `I1(x + u, y + v) ≈ I0(x, y)`.

pub mod cache;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("frames have different shapes: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("frame of {width}x{height} is smaller than the minimum level size {min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("non-finite pixel in input frame")]
    NonFinite,
    #[error("invalid TV-L1 parameters: {0}")]
    Params(String),
    #[error("a flow clip needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("expected an RGB clip [3, T, H, W], got {0:?}")]
    ClipShape(Vec<usize>),
}

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(width * height, data.len(), "plane buffer does not match {width}x{height}");
        Self { width, height, data }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample with coordinates clamped to the border.
    #[inline]
    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let xm = (self.width - 1) as f32;
        let ym = (self.height - 1) as f32;
        let x = x.clamp(0.0, xm);
        let y = y.clamp(0.0, ym);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Central-difference gradient; one-sided at the border.
    fn gradient(&self) -> (Plane, Plane) {
        let (w, h) = (self.width, self.height);
        let gx = Plane::from_fn(w, h, |x, y| {
            let l = self.at(x.saturating_sub(1), y);
            let r = self.at((x + 1).min(w - 1), y);
            let span = ((x + 1).min(w - 1) - x.saturating_sub(1)).max(1) as f32;
            (r - l) / span
        });
        let gy = Plane::from_fn(w, h, |x, y| {
            let t = self.at(x, y.saturating_sub(1));
            let b = self.at(x, (y + 1).min(h - 1));
            let span = ((y + 1).min(h - 1) - y.saturating_sub(1)).max(1) as f32;
            (b - t) / span
        });
        (gx, gy)
    }

    /// Separable [1 4 6 4 1]/16 blur with clamped borders.
    fn smooth(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let (w, h) = (self.width as isize, self.height as isize);
        let clampi = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let horiz = Plane::from_fn(self.width, self.height, |x, y| {
            K.iter()
                .enumerate()
                .map(|(i, k)| k * self.at(clampi(x as isize + i as isize - 2, w), y))
                .sum()
        });
        Plane::from_fn(self.width, self.height, |x, y| {
            K.iter()
                .enumerate()
                .map(|(i, k)| k * horiz.at(x, clampi(y as isize + i as isize - 2, h)))
                .sum()
        })
    }

    /// Bilinear resize with pixel-center alignment.
    fn resize(&self, width: usize, height: usize) -> Plane {
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Plane::from_fn(width, height, |x, y| {
            self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    }
}

/// Per-pixel displacement between two frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            u: Plane::zeros(width, height),
            v: Plane::zeros(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width
    }

    pub fn height(&self) -> usize {
        self.u.height
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u.data.iter().chain(&self.v.data).fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Mean endpoint error against a constant displacement over pixels at
    /// least `margin` away from the border.
    pub fn mean_endpoint_error(&self, truth: (f32, f32), margin: usize) -> f32 {
        let (w, h) = (self.width(), self.height());
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for y in margin..h.saturating_sub(margin) {
            for x in margin..w.saturating_sub(margin) {
                let du = self.u.at(x, y) - truth.0;
                let dv = self.v.at(x, y) - truth.1;
                sum += ((du * du + dv * dv) as f64).sqrt();
                n += 1;
            }
        }
        (sum / n.max(1) as f64) as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvL1Params {
    /// Data-term weight.
    pub lambda: f32,
    /// Coupling between the flow and the auxiliary field.
    pub theta: f32,
    /// Dual step size; at most 0.25 for a stable ascent.
    pub tau: f32,
    pub warps_per_level: usize,
    pub iterations_per_warp: usize,
    pub pyramid_scale: f32,
    pub min_level_size: usize,
    /// Final flow is clamped to ±clip_limit pixels.
    pub clip_limit: f32,
}

impl Default for TvL1Params {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps_per_level: 3,
            iterations_per_warp: 25,
            pyramid_scale: 0.5,
            min_level_size: 16,
            clip_limit: 20.0,
        }
    }
}

impl TvL1Params {
    pub fn validate(&self) -> Result<(), FlowError> {
        let bad = |m: &str| Err(FlowError::Params(m.into()));
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau must lie in (0, 0.25]");
        }
        if !(self.lambda > 0.0 && self.theta > 0.0) {
            return bad("lambda and theta must be positive");
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad("pyramid_scale must lie in (0, 1)");
        }
        if self.warps_per_level == 0 || self.iterations_per_warp == 0 || self.min_level_size == 0 {
            return bad("warps, iterations and min_level_size must be positive");
        }
        if !(self.clip_limit > 0.0) {
            return bad("clip_limit must be positive");
        }
        Ok(())
    }

    /// (width, height) of each pyramid level, finest first.
    pub fn pyramid_sizes(&self, width: usize, height: usize) -> Result<Vec<(usize, usize)>, FlowError> {
        if width.min(height) < self.min_level_size {
            return Err(FlowError::TooSmall {
                width,
                height,
                min: self.min_level_size,
            });
        }
        let mut sizes = vec![(width, height)];
        let mut factor = self.pyramid_scale as f64;
        loop {
            let w = (width as f64 * factor).round() as usize;
            let h = (height as f64 * factor).round() as usize;
            if w.min(h) < self.min_level_size || (w, h) == *sizes.last().unwrap() {
                break;
            }
            sizes.push((w, h));
            factor *= self.pyramid_scale as f64;
        }
        Ok(sizes)
    }
}

/// Samples `img` at `(x + u, y + v)` with border clamping.
pub fn warp_image(img: &Plane, flow: &FlowField) -> Plane {
    Plane::from_fn(img.width, img.height, |x, y| {
        let i = y * img.width + x;
        img.sample(x as f32 + flow.u.data[i], y as f32 + flow.v.data[i])
    })
}

/// Whether each pixel's displaced position lands inside the frame; samples
/// that leave it carry no data term.
fn in_bounds(flow: &FlowField) -> Vec<bool> {
    let (w, h) = (flow.width(), flow.height());
    let (xm, ym) = ((w - 1) as f32, (h - 1) as f32);
    (0..w * h)
        .map(|i| {
            let x = (i % w) as f32 + flow.u.data[i];
            let y = (i / w) as f32 + flow.v.data[i];
            (0.0..=xm).contains(&x) && (0.0..=ym).contains(&y)
        })
        .collect()
}

/// Forward differences, zero at the last row/column.
fn forward_gradient(f: &Plane) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = (f.width, f.height);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                gx[i] = f.data[i + 1] - f.data[i];
            }
            if y + 1 < h {
                gy[i] = f.data[i + w] - f.data[i];
            }
        }
    }
    (gx, gy)
}

/// Backward-difference divergence, the negative adjoint of [`forward_gradient`].
fn divergence(px: &[f32], py: &[f32], w: usize, h: usize) -> Vec<f32> {
    let mut div = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = if x == 0 {
                px[i]
            } else if x + 1 == w {
                -px[i - 1]
            } else {
                px[i] - px[i - 1]
            };
            let dy = if y == 0 {
                py[i]
            } else if y + 1 == h {
                -py[i - w]
            } else {
                py[i] - py[i - w]
            };
            div[i] = dx + dy;
        }
    }
    div
}

/// Intensities in `[0, 1]` are stretched to `[0, 255]` before solving, the
/// range the default λ is calibrated for.
pub const INTENSITY_SCALE: f32 = 255.0;

/// `λ·Σ|I1(x+u) − I0| + Σ|∇u| + Σ|∇v|` with isotropic gradient norms, for
/// frames in `[0, 1]` (the residual is measured on the stretched range).
pub fn tvl1_energy(frame0: &Plane, frame1: &Plane, flow: &FlowField, lambda: f32) -> f64 {
    raw_energy(frame0, frame1, flow, lambda * INTENSITY_SCALE)
}

fn raw_energy(frame0: &Plane, frame1: &Plane, flow: &FlowField, lambda: f32) -> f64 {
    let warped = warp_image(frame1, flow);
    let inside = in_bounds(flow);
    let data: f64 = (0..warped.data.len())
        .filter(|&i| inside[i])
        .map(|i| (warped.data[i] - frame0.data[i]).abs() as f64)
        .sum();
    let tv = |p: &Plane| -> f64 {
        let (gx, gy) = forward_gradient(p);
        gx.iter().zip(&gy).map(|(a, b)| ((a * a + b * b) as f64).sqrt()).sum()
    };
    lambda as f64 * data + tv(&flow.u) + tv(&flow.v)
}

/// Flow estimate plus the finest-level energy at every warp boundary
/// (before the first warp and after each one).
#[derive(Clone, Debug)]
pub struct FlowTrace {
    pub flow: FlowField,
    pub finest_energies: Vec<f64>,
}

pub fn compute_flow(frame0: &Plane, frame1: &Plane, params: &TvL1Params) -> Result<FlowField, FlowError> {
    Ok(solve(frame0, frame1, params, false)?.flow)
}

pub fn compute_flow_traced(frame0: &Plane, frame1: &Plane, params: &TvL1Params) -> Result<FlowTrace, FlowError> {
    solve(frame0, frame1, params, true)
}

fn solve(frame0: &Plane, frame1: &Plane, params: &TvL1Params, trace: bool) -> Result<FlowTrace, FlowError> {
    params.validate()?;
    if (frame0.width, frame0.height) != (frame1.width, frame1.height) {
        return Err(FlowError::ShapeMismatch(
            (frame0.width, frame0.height),
            (frame1.width, frame1.height),
        ));
    }
    if frame0.data.iter().chain(&frame1.data).any(|v| !v.is_finite()) {
        return Err(FlowError::NonFinite);
    }
    let sizes = params.pyramid_sizes(frame0.width, frame0.height)?;
    let stretch = |f: &Plane| Plane::new(f.width, f.height, f.data.iter().map(|v| v * INTENSITY_SCALE).collect());
    let mut pyr0 = vec![stretch(frame0)];
    let mut pyr1 = vec![stretch(frame1)];
    for &(w, h) in &sizes[1..] {
        let prev0 = pyr0.last().unwrap().smooth();
        let prev1 = pyr1.last().unwrap().smooth();
        pyr0.push(prev0.resize(w, h));
        pyr1.push(prev1.resize(w, h));
    }

    let coarsest = *sizes.last().unwrap();
    let mut flow = FlowField::zeros(coarsest.0, coarsest.1);
    let mut energies = Vec::new();
    for level in (0..sizes.len()).rev() {
        let (w, h) = sizes[level];
        if (flow.width(), flow.height()) != (w, h) {
            let (sx, sy) = (w as f32 / flow.width() as f32, h as f32 / flow.height() as f32);
            let mut u = flow.u.resize(w, h);
            let mut v = flow.v.resize(w, h);
            u.data.iter_mut().for_each(|x| *x *= sx);
            v.data.iter_mut().for_each(|x| *x *= sy);
            flow = FlowField { u, v };
        }
        let finest = level == 0 && trace;
        solve_level(&pyr0[level], &pyr1[level], &mut flow, params, finest.then_some(&mut energies));
    }
    let lim = params.clip_limit;
    for x in flow.u.data.iter_mut().chain(flow.v.data.iter_mut()) {
        *x = x.clamp(-lim, lim);
    }
    Ok(FlowTrace {
        flow,
        finest_energies: energies,
    })
}

fn solve_level(i0: &Plane, i1: &Plane, flow: &mut FlowField, params: &TvL1Params, mut energies: Option<&mut Vec<f64>>) {
    let (w, h) = (i0.width, i0.height);
    let n = w * h;
    let l_t = params.lambda * params.theta;
    let taut = params.tau / params.theta;
    let (i1x, i1y) = i1.gradient();
    let mut p11 = vec![0.0f32; n];
    let mut p12 = vec![0.0f32; n];
    let mut p21 = vec![0.0f32; n];
    let mut p22 = vec![0.0f32; n];
    if let Some(e) = energies.as_deref_mut() {
        e.push(raw_energy(i0, i1, flow, params.lambda));
    }
    for _ in 0..params.warps_per_level {
        let i1w = warp_image(i1, flow);
        let mut i1wx = warp_image(&i1x, flow);
        let mut i1wy = warp_image(&i1y, flow);
        let inside = in_bounds(flow);
        let mut i1w = i1w;
        for i in (0..n).filter(|&i| !inside[i]) {
            // no data term: the linearized residual is identically zero
            i1wx.data[i] = 0.0;
            i1wy.data[i] = 0.0;
            i1w.data[i] = i0.data[i];
        }
        let grad: Vec<f32> = i1wx.data.iter().zip(&i1wy.data).map(|(a, b)| a * a + b * b).collect();
        let rho_c: Vec<f32> = (0..n)
            .map(|i| i1w.data[i] - i1wx.data[i] * flow.u.data[i] - i1wy.data[i] * flow.v.data[i] - i0.data[i])
            .collect();
        let mut v1 = vec![0.0f32; n];
        let mut v2 = vec![0.0f32; n];
        for _ in 0..params.iterations_per_warp {
            for i in 0..n {
                let (gx, gy) = (i1wx.data[i], i1wy.data[i]);
                let (u1, u2) = (flow.u.data[i], flow.v.data[i]);
                let rho = rho_c[i] + gx * u1 + gy * u2;
                let (d1, d2) = if rho < -l_t * grad[i] {
                    (l_t * gx, l_t * gy)
                } else if rho > l_t * grad[i] {
                    (-l_t * gx, -l_t * gy)
                } else if grad[i] > f32::EPSILON {
                    let k = -rho / grad[i];
                    (k * gx, k * gy)
                } else {
                    (0.0, 0.0)
                };
                v1[i] = u1 + d1;
                v2[i] = u2 + d2;
            }
            let div1 = divergence(&p11, &p12, w, h);
            let div2 = divergence(&p21, &p22, w, h);
            for i in 0..n {
                flow.u.data[i] = v1[i] + params.theta * div1[i];
                flow.v.data[i] = v2[i] + params.theta * div2[i];
            }
            let (u1x, u1y) = forward_gradient(&flow.u);
            let (u2x, u2y) = forward_gradient(&flow.v);
            for i in 0..n {
                let ng1 = 1.0 + taut * (u1x[i] * u1x[i] + u1y[i] * u1y[i]).sqrt();
                let ng2 = 1.0 + taut * (u2x[i] * u2x[i] + u2y[i] * u2y[i]).sqrt();
                p11[i] = (p11[i] + taut * u1x[i]) / ng1;
                p12[i] = (p12[i] + taut * u1y[i]) / ng1;
                p21[i] = (p21[i] + taut * u2x[i]) / ng2;
                p22[i] = (p22[i] + taut * u2y[i]) / ng2;
            }
        }
        if let Some(e) = energies.as_deref_mut() {
            e.push(raw_energy(i0, i1, flow, params.lambda));
        }
    }
}

/// Luma of an RGB clip `[3, T, H, W]`, one plane per frame.
pub fn clip_to_gray(clip: &Tensor<f32>) -> Result<Vec<Plane>, FlowError> {
    let &[c, t, h, w] = clip.shape() else {
        return Err(FlowError::ClipShape(clip.shape().to_vec()));
    };
    if c != 3 {
        return Err(FlowError::ClipShape(clip.shape().to_vec()));
    }
    let plane = t * h * w;
    let d = clip.data();
    Ok((0..t)
        .map(|ti| {
            let off = ti * h * w;
            let data = (0..h * w)
                .map(|i| 0.299 * d[off + i] + 0.587 * d[plane + off + i] + 0.114 * d[2 * plane + off + i])
                .collect();
            Plane::new(w, h, data)
        })
        .collect())
}

/// Flow clip `[2, T, H, W]` for an RGB clip `[3, T, H, W]`: flow between
/// consecutive frames, last field repeated, scaled by `1 / clip_limit`.
pub fn clip_to_flow_clip(clip: &Tensor<f32>, params: &TvL1Params) -> Result<Tensor<f32>, FlowError> {
    let frames = clip_to_gray(clip)?;
    let t = frames.len();
    if t < 2 {
        return Err(FlowError::TooFewFrames(t));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let mut fields = Vec::with_capacity(t);
    for pair in frames.windows(2) {
        fields.push(compute_flow(&pair[0], &pair[1], params)?);
    }
    fields.push(fields[t - 2].clone());
    let scale = 1.0 / params.clip_limit;
    let mut data = Vec::with_capacity(2 * t * h * w);
    for f in &fields {
        data.extend(f.u.data.iter().map(|x| x * scale));
    }
    for f in &fields {
        data.extend(f.v.data.iter().map(|x| x * scale));
    }
    Ok(Tensor::new(vec![2, t, h, w], data).expect("flow clip shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Plane {
        Plane::from_fn(w, h, |x, _| x as f32)
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let img = Plane::from_fn(7, 5, |x, y| (x * 3 + y * 11) as f32 % 5.0);
        assert_eq!(warp_image(&img, &FlowField::zeros(7, 5)), img);
    }

    #[test]
    fn warp_integer_shift_on_ramp() {
        let img = ramp(8, 4);
        let mut flow = FlowField::zeros(8, 4);
        flow.u.data.fill(1.0);
        let out = warp_image(&img, &flow);
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(out.at(x, y), img.at(x + 1, y));
            }
            assert_eq!(out.at(7, y), 7.0);
        }
    }

    #[test]
    fn warp_half_pixel_averages_neighbours() {
        let img = Plane::from_fn(6, 3, |x, y| (x * x + y) as f32);
        let mut flow = FlowField::zeros(6, 3);
        flow.u.data.fill(0.5);
        let out = warp_image(&img, &flow);
        for x in 0..5 {
            assert_eq!(out.at(x, 1), 0.5 * (img.at(x, 1) + img.at(x + 1, 1)));
        }
    }

    #[test]
    fn pyramid_sizes() {
        let p = TvL1Params::default();
        assert_eq!(p.pyramid_sizes(64, 64).unwrap(), vec![(64, 64), (32, 32), (16, 16)]);
        assert_eq!(p.pyramid_sizes(32, 32).unwrap().len(), 2);
        assert_eq!(p.pyramid_sizes(16, 16).unwrap().len(), 1);
        assert!(matches!(p.pyramid_sizes(15, 64), Err(FlowError::TooSmall { .. })));
    }

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let (w, h) = (5, 4);
        let f = Plane::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 5) as f32 - 2.0);
        let px: Vec<f32> = (0..w * h).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
        let py: Vec<f32> = (0..w * h).map(|i| ((i * 5) % 3) as f32 - 1.0).collect();
        let (gx, gy) = forward_gradient(&f);
        let lhs: f32 = (0..w * h).map(|i| gx[i] * px[i] + gy[i] * py[i]).sum();
        let div = divergence(&px, &py, w, h);
        let rhs: f32 = -(0..w * h).map(|i| f.data[i] * div[i]).sum::<f32>();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = Plane::from_fn(32, 32, |x, y| ((x as f32 * 0.4).sin() * (y as f32 * 0.3).cos() + 1.0) / 2.0);
        let flow = compute_flow(&f, &f, &TvL1Params::default()).unwrap();
        assert!(flow.max_magnitude() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = TvL1Params::default();
        let a = Plane::zeros(16, 16);
        let b = Plane::zeros(17, 16);
        assert!(matches!(compute_flow(&a, &b, &p), Err(FlowError::ShapeMismatch(..))));
        let mut nan = a.clone();
        nan.data[3] = f32::NAN;
        assert_eq!(compute_flow(&a, &nan, &p), Err(FlowError::NonFinite));
        let small = Plane::zeros(8, 8);
        assert!(matches!(compute_flow(&small, &small, &p), Err(FlowError::TooSmall { .. })));
        let bad_tau = TvL1Params { tau: 0.3, ..p };
        assert!(compute_flow(&a, &a, &bad_tau).is_err());
    }

    #[test]
    fn flow_clip_shape_and_static_clip() {
        let clip = Tensor::full(&[3, 8, 16, 16], 0.4);
        let fc = clip_to_flow_clip(&clip, &TvL1Params::default()).unwrap();
        assert_eq!(fc.shape(), &[2, 8, 16, 16]);
        assert!(fc.data().iter().all(|&v| v == 0.0));
        let one = Tensor::full(&[3, 1, 16, 16], 0.4);
        assert_eq!(clip_to_flow_clip(&one, &TvL1Params::default()), Err(FlowError::TooFewFrames(1)));
    }
    fn texture(x: f32, y: f32) -> f32 {
        let tau = std::f32::consts::TAU;
        0.5 + 0.2 * (tau * x / 16.0).sin() * (tau * y / 16.0).cos()
            + 0.15 * (tau * (x + 2.0 * y) / 32.0).sin()
            + 0.1 * (tau * (3.0 * x - y) / 64.0).cos()
    }

    fn translated_pair(dx: i32, dy: i32) -> (Plane, Plane) {
        let f0 = Plane::from_fn(64, 64, |x, y| texture(x as f32, y as f32));
        let f1 = Plane::from_fn(64, 64, |x, y| texture(x as f32 - dx as f32, y as f32 - dy as f32));
        (f0, f1)
    }

    /// Exhaustive integer search minimizing SSD over the interior window.
    fn block_match(f0: &Plane, f1: &Plane, radius: i32, margin: usize) -> (i32, i32) {
        let mut best = (f32::INFINITY, (0, 0));
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let mut ssd = 0.0;
                for y in margin..f0.height - margin {
                    for x in margin..f0.width - margin {
                        let d = f1.at((x as i32 + dx) as usize, (y as i32 + dy) as usize) - f0.at(x, y);
                        ssd += d * d;
                    }
                }
                if ssd < best.0 {
                    best = (ssd, (dx, dy));
                }
            }
        }
        best.1
    }

    #[test]
    fn translation_matches_block_matching_oracle() {
        let p = TvL1Params::default();
        for (dx, dy) in [(2, 0), (0, -3), (4, 1), (-1, 2)] {
            let (f0, f1) = translated_pair(dx, dy);
            let oracle = block_match(&f0, &f1, 6, 8);
            assert_eq!(oracle, (dx, dy));
            let flow = compute_flow(&f0, &f1, &p).unwrap();
            let epe = flow.mean_endpoint_error((oracle.0 as f32, oracle.1 as f32), 8);
            assert!(epe < 0.5, "({dx},{dy}): epe {epe}");
        }
    }

    #[test]
    fn finest_energy_is_non_increasing() {
        let (f0, f1) = translated_pair(2, 1);
        let trace = compute_flow_traced(&f0, &f1, &TvL1Params::default()).unwrap();
        assert_eq!(trace.finest_energies.len(), 4);
        for w in trace.finest_energies.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", trace.finest_energies);
        }
    }

    #[test]
    fn uniform_clip_translation_scales_into_unit_range() {
        let p = TvL1Params::default();
        let (t, h, w) = (4, 32, 32);
        let mut data = vec![0.0f32; 3 * t * h * w];
        for c in 0..3 {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        // frame ti is frame 0 moved right by ti pixels
                        data[((c * t + ti) * h + y) * w + x] = texture(x as f32 - ti as f32, y as f32 + c as f32);
                    }
                }
            }
        }
        let clip = Tensor::new(vec![3, t, h, w], data).unwrap();
        let frames = clip_to_gray(&clip).unwrap();
        assert_eq!(block_match(&frames[0], &frames[1], 3, 6), (1, 0));
        let fc = clip_to_flow_clip(&clip, &p).unwrap();
        let plane = t * h * w;
        let interior_mean = |off: usize| {
            let mut acc = 0.0f64;
            let mut n = 0;
            for ti in 0..t {
                for y in 6..h - 6 {
                    for x in 6..w - 6 {
                        acc += fc.data()[off + (ti * h + y) * w + x] as f64;
                        n += 1;
                    }
                }
            }
            acc / n as f64
        };
        assert!((interior_mean(0) - 1.0 / 20.0).abs() < 0.1 / 20.0, "{}", interior_mean(0));
        assert!(interior_mean(plane).abs() < 0.1 / 20.0);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn zero_motion_is_a_fixed_point(pixels in proptest::collection::vec(0.0f32..=1.0, 16 * 16)) {
            let f = Plane::new(16, 16, pixels);
            let flow = compute_flow(&f, &f, &TvL1Params::default()).unwrap();
            proptest::prop_assert!(flow.max_magnitude() < 1e-6);
        }
    }

    #[test]
    fn deterministic() {
        let (f0, f1) = translated_pair(1, 1);
        let p = TvL1Params::default();
        let a = compute_flow(&f0, &f1, &p).unwrap();
        let b = compute_flow(&f0, &f1, &p).unwrap();
        assert!(a.u.data.iter().chain(&a.v.data).zip(b.u.data.iter().chain(&b.v.data)).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
