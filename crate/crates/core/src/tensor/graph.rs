use super::kernels::{self, ConvGeom};
use super::optim::{ParamId, ParamSet};
use super::{Scalar, Tensor, TensorError, Triple};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Relu { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, volume: usize },
    AdaptiveAvgPool { x: Var, planes: usize, input: Triple, output: Triple },
    Linear { x: Var, w: Var, b: Var },
    Mse { a: Var, b: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    ConcatCols { a: Var, b: Var },
    Scale { x: Var, factor: S },
    Add { a: Var, b: Var },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Eagerly evaluated tape. Every op computes its value immediately and records
/// enough to run the vector-Jacobian product in [`Graph::backward`].
pub struct Graph<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool, name: &'static str) -> Result<Var, TensorError> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut value: Tensor<S>, needs_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives gradient (inputs, labels, teacher features).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// A free leaf that accumulates gradient; used by gradient checks.
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Binds a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, params: &ParamSet<S>, id: ParamId) -> Var {
        let p = params.get(id);
        let var = self.leaf(p.tensor.clone(), !p.frozen);
        if !p.frozen {
            self.bindings.push((var, id));
        }
        var
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// FNV-1a hash of every ReLU mask and max-pool argmax on the tape. Two
    /// evaluations with equal signatures sit on the same linear piece of
    /// every kink, which is what finite-difference checks need.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => self.value(*x).data().iter().for_each(|&v| mix((v > S::zero()) as u64)),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Gradient of the last backward target with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: Triple, padding: Triple) -> Result<Var, TensorError> {
        const OP: &str = "conv3d";
        let [n, cin, t, h, wd] = self.value(x).dims5(OP)?;
        let [cout, wcin, kt, kh, kw] = self.value(w).dims5(OP)?;
        if wcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels".into(),
                expected: wcin,
                actual: cin,
            });
        }
        if self.value(b).shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length".into(),
                expected: cout,
                actual: self.value(b).len(),
            });
        }
        if stride.contains(&0) {
            return Err(TensorError::Invalid {
                op: OP,
                reason: "stride components must be >= 1".into(),
            });
        }
        let mut output = [0; 3];
        for (axis, name) in ["time", "height", "width"].iter().enumerate() {
            let (inp, k) = ([t, h, wd][axis], [kt, kh, kw][axis]);
            output[axis] = match kernels::conv_out_extent(inp, k, stride[axis], padding[axis]) {
                Some(o) => o,
                None => {
                    return Err(TensorError::ShapeMismatch {
                        op: OP,
                        dim: format!("{name} (kernel vs padded input)"),
                        expected: inp + 2 * padding[axis],
                        actual: k,
                    })
                }
            };
        }
        let geom = ConvGeom {
            n,
            cin,
            cout,
            input: [t, h, wd],
            kernel: [kt, kh, kw],
            output,
            stride,
            pad: padding,
        };
        let data = kernels::conv3d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let value = Tensor::new(vec![n, cout, output[0], output[1], output[2]], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv3d { x, w, b, geom }, needs, OP)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push(value, Op::Relu { x }, needs, "relu")
    }

    pub fn maxpool3d(&mut self, x: Var, window: Triple, stride: Triple) -> Result<Var, TensorError> {
        const OP: &str = "maxpool3d";
        let [n, c, t, h, w] = self.value(x).dims5(OP)?;
        if stride.contains(&0) || window.contains(&0) {
            return Err(TensorError::Invalid {
                op: OP,
                reason: "window and stride must be >= 1".into(),
            });
        }
        let input = [t, h, w];
        let mut output = [0; 3];
        for (axis, name) in ["time", "height", "width"].iter().enumerate() {
            if window[axis] > input[axis] {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim: format!("{name} (window exceeds input)"),
                    expected: input[axis],
                    actual: window[axis],
                });
            }
            output[axis] = (input[axis] - window[axis]) / stride[axis] + 1;
        }
        let (vals, argmax) = kernels::maxpool3d_forward(self.value(x).data(), n * c, input, window, stride, output);
        let value = Tensor::new(vec![n, c, output[0], output[1], output[2]], vals)?;
        let needs = self.needs(x);
        self.push(value, Op::MaxPool { x, argmax }, needs, OP)
    }

    /// Mean over (T, H, W): `[N, C, T, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, t, h, w] = self.value(x).dims5("global_avg_pool")?;
        let volume = t * h * w;
        let denom = S::from_f64(volume as f64);
        let data = self
            .value(x)
            .data()
            .chunks(volume)
            .map(|plane| {
                let mut acc = S::zero();
                for &v in plane {
                    acc += v;
                }
                acc / denom
            })
            .collect();
        let value = Tensor::new(vec![n, c], data)?;
        let needs = self.needs(x);
        self.push(value, Op::GlobalAvgPool { x, volume }, needs, "global_avg_pool")
    }

    /// Average-pools (T, H, W) onto `output` extents with bins
    /// `[floor(o·I/O), ceil((o+1)·I/O))`; identity when extents match.
    pub fn adaptive_avg_pool3d(&mut self, x: Var, output: Triple) -> Result<Var, TensorError> {
        const OP: &str = "adaptive_avg_pool3d";
        let [n, c, t, h, w] = self.value(x).dims5(OP)?;
        let input = [t, h, w];
        if output.contains(&0) {
            return Err(TensorError::Invalid {
                op: OP,
                reason: format!("cannot pool {input:?} onto {output:?}"),
            });
        }
        let data = kernels::adaptive_avg_forward(self.value(x).data(), n * c, input, output);
        let value = Tensor::new(vec![n, c, output[0], output[1], output[2]], data)?;
        let needs = self.needs(x);
        self.push(
            value,
            Op::AdaptiveAvgPool {
                x,
                planes: n * c,
                input,
                output,
            },
            needs,
            OP,
        )
    }

    /// `x · weightᵀ + bias` for `x: [N, Din]`, `weight: [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "linear";
        let (n, din) = self.value(x).dims2(OP)?;
        let (dout, wdin) = self.value(w).dims2(OP)?;
        if wdin != din {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "inner dimension".into(),
                expected: wdin,
                actual: din,
            });
        }
        if self.value(b).shape() != [dout] {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length".into(),
                expected: dout,
                actual: self.value(b).len(),
            });
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * dout);
        for row in xd.chunks(din) {
            for (o, wrow) in wd.chunks(din).enumerate() {
                let mut acc = S::zero();
                for (&a, &c) in row.iter().zip(wrow) {
                    acc += a * c;
                }
                data.push(acc + bd[o]);
            }
        }
        let value = Tensor::new(vec![n, dout], data)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Linear { x, w, b }, needs, OP)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Invalid {
                op: "mse",
                reason: format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            });
        }
        let mut acc = S::zero();
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / S::from_f64(ta.len() as f64));
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mse { a, b }, needs, "mse")
    }

    /// Batch-mean of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let (n, c) = self.value(logits).dims2(OP)?;
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "batch".into(),
                expected: n,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = S::zero();
        for (row, (z, &y)) in probs.chunks_mut(c).zip(self.value(logits).data().chunks(c).zip(labels)) {
            let max = z.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &v in z {
                sum += (v - max).exp();
            }
            total += sum.ln() - (z[y] - max);
            row.copy_from_slice(z);
            kernels::softmax_in_place(row);
        }
        let value = Tensor::scalar(total / S::from_f64(n as f64));
        let needs = self.needs(logits);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            OP,
        )
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_cols";
        let (n, ca) = self.value(a).dims2(OP)?;
        let (nb, cb) = self.value(b).dims2(OP)?;
        if n != nb {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "batch".into(),
                expected: n,
                actual: nb,
            });
        }
        let mut data = Vec::with_capacity(n * (ca + cb));
        for (ra, rb) in self.value(a).data().chunks(ca).zip(self.value(b).data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![n, ca + cb], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatCols { a, b }, needs, OP)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let factor = S::from_f64(factor);
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| v * factor).collect())?;
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs, "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::Invalid {
                op: "add",
                reason: format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add { a, b }, needs, "add")
    }

    /// Reverse pass from a one-element `target`. Gradients are retained only on leaves.
    pub fn backward(&mut self, target: Var) -> Result<(), TensorError> {
        if self.value(target).len() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                reason: format!("target has shape {:?}, expected a scalar", self.value(target).shape()),
            });
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(vec![S::one()]);
        for i in (0..=target.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let (gin, gw, gb) = kernels::conv3d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.needs(*x),
                    self.needs(*w),
                );
                if let Some(gin) = gin {
                    accumulate(grads, *x, gin);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Relu { x } => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &d)| if v > S::zero() { d } else { S::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![S::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(g) {
                    gx[src] += d;
                }
                accumulate(grads, *x, gx);
            }
            Op::GlobalAvgPool { x, volume } => {
                let denom = S::from_f64(*volume as f64);
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for &d in g {
                    let share = d / denom;
                    gx.extend(std::iter::repeat_n(share, *volume));
                }
                accumulate(grads, *x, gx);
            }
            Op::AdaptiveAvgPool { x, planes, input, output } => {
                accumulate(grads, *x, kernels::adaptive_avg_backward(g, *planes, *input, *output));
            }
            Op::Linear { x, w, b } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (_, din) = (value.shape()[0], self.value(*x).shape()[1]);
                let dout = value.shape()[1];
                if self.needs(*x) {
                    let mut gx = vec![S::zero(); xd.len()];
                    for (gxr, gr) in gx.chunks_mut(din).zip(g.chunks(dout)) {
                        for (o, &d) in gr.iter().enumerate() {
                            for (acc, &wv) in gxr.iter_mut().zip(&wd[o * din..(o + 1) * din]) {
                                *acc += d * wv;
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![S::zero(); wd.len()];
                    for (xr, gr) in xd.chunks(din).zip(g.chunks(dout)) {
                        for (o, &d) in gr.iter().enumerate() {
                            for (acc, &xv) in gw[o * din..(o + 1) * din].iter_mut().zip(xr) {
                                *acc += d * xv;
                            }
                        }
                    }
                    accumulate(grads, *w, gw);
                }
                if self.needs(*b) {
                    let mut gb = vec![S::zero(); dout];
                    for gr in g.chunks(dout) {
                        for (acc, &d) in gb.iter_mut().zip(gr) {
                            *acc += d;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = S::from_f64(2.0) * g[0] / S::from_f64(ad.len() as f64);
                if self.needs(*a) {
                    accumulate(grads, *a, ad.iter().zip(bd).map(|(&x, &y)| k * (x - y)).collect());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, ad.iter().zip(bd).map(|(&x, &y)| k * (y - x)).collect());
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).shape()[1];
                let k = g[0] / S::from_f64(labels.len() as f64);
                let mut gz: Vec<S> = probs.iter().map(|&p| p * k).collect();
                for (row, &y) in gz.chunks_mut(c).zip(labels) {
                    row[y] -= k;
                }
                accumulate(grads, *logits, gz);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for row in g.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if self.needs(*a) {
                    accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|&d| d * *factor).collect());
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
        }
    }

    /// Copies leaf gradients into the bound parameters. Frozen parameters are
    /// never bound, so their gradient stays absent.
    pub fn write_param_grads(&self, params: &mut ParamSet<S>) {
        for &(var, id) in &self.bindings {
            let len = self.value(var).len();
            let grad = self.grad(var).map(<[S]>::to_vec).unwrap_or_else(|| vec![S::zero(); len]);
            params.get_mut(id).tensor.grad = Some(grad);
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(g) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
