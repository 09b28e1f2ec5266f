//! The homologous 3D ConvNet shared by the RGB and flow streams, its tap
//! points, and the adapters that align a teacher tap with a student tap.
//!
//! Each block is `conv3d(k=3, same padding) → relu → maxpool3d`. The first
//! block pools 1×2×2 so the early temporal resolution survives; every later
//! block pools 2×2×2. After the last block a global average pool yields the
//! output feature and a linear layer yields the logits.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{init, Graph, ParamSet, Scalar, Tensor, TensorError, Triple, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("invalid stream spec: {0}")]
    Spec(String),
    #[error("clip extents {clip:?} underflow the pooling schedule at block {block}")]
    PoolingUnderflow { clip: Triple, block: usize },
    #[error("parameter {0} missing from parameter set")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamKind {
    Rgb,
    Flow,
}

impl StreamKind {
    pub fn in_channels(self) -> usize {
        match self {
            StreamKind::Rgb => 3,
            StreamKind::Flow => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Rgb => "rgb",
            StreamKind::Flow => "flow",
        }
    }

    pub fn other(self) -> StreamKind {
        match self {
            StreamKind::Rgb => StreamKind::Flow,
            StreamKind::Flow => StreamKind::Rgb,
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named activation sites. Front/Medium/Rear follow blocks 1, 2 and 3;
/// Output is the pooled pre-logit vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapPoint {
    Front,
    Medium,
    Rear,
    Output,
}

impl TapPoint {
    /// The three taps eligible for an intermediate bridge, in sweep order.
    pub const INTERMEDIATE: [TapPoint; 3] = [TapPoint::Front, TapPoint::Medium, TapPoint::Rear];

    /// Block index (1-based) whose activation the tap exposes.
    pub fn block(self) -> Option<usize> {
        match self {
            TapPoint::Front => Some(1),
            TapPoint::Medium => Some(2),
            TapPoint::Rear => Some(3),
            TapPoint::Output => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TapPoint::Front => "front",
            TapPoint::Medium => "medium",
            TapPoint::Rear => "rear",
            TapPoint::Output => "output",
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "front" => Ok(TapPoint::Front),
            "medium" => Ok(TapPoint::Medium),
            "rear" => Ok(TapPoint::Rear),
            "output" => Ok(TapPoint::Output),
            _ => Err(format!("unknown tap point {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub num_classes: usize,
    pub block_channels: Vec<usize>,
    /// (T, H, W) of the input clip.
    pub clip_shape: Triple,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            block_channels: vec![8, 16, 32, 64],
            clip_shape: [8, 32, 32],
        }
    }
}

impl StreamSpec {
    fn pool_window(block: usize) -> Triple {
        if block == 1 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    /// Spatiotemporal extents after each block, checking the pooling schedule.
    pub fn block_extents(&self) -> Result<Vec<Triple>, StreamError> {
        if self.block_channels.len() < 3 {
            return Err(StreamError::Spec(format!(
                "need at least 3 blocks for the front/medium/rear taps, got {}",
                self.block_channels.len()
            )));
        }
        if self.block_channels.contains(&0) || self.num_classes == 0 || self.clip_shape.contains(&0) {
            return Err(StreamError::Spec("channels, classes and clip extents must be positive".into()));
        }
        let mut ext = self.clip_shape;
        let mut out = Vec::with_capacity(self.block_channels.len());
        for block in 1..=self.block_channels.len() {
            let win = Self::pool_window(block);
            for axis in 0..3 {
                if ext[axis] < win[axis] {
                    return Err(StreamError::PoolingUnderflow {
                        clip: self.clip_shape,
                        block,
                    });
                }
                ext[axis] /= win[axis];
            }
            out.push(ext);
        }
        Ok(out)
    }

    pub fn last_channels(&self) -> usize {
        *self.block_channels.last().expect("validated nonempty")
    }

    /// Per-sample shape `[C, T, H, W]` of an intermediate tap, or `[C]` for Output.
    pub fn tap_shape(&self, tap: TapPoint) -> Result<Vec<usize>, StreamError> {
        let ext = self.block_extents()?;
        Ok(match tap.block() {
            Some(b) => {
                let [t, h, w] = ext[b - 1];
                vec![self.block_channels[b - 1], t, h, w]
            }
            None => vec![self.last_channels()],
        })
    }
}

fn param_name(kind: StreamKind, suffix: &str) -> String {
    format!("stream.{}.{}", kind.name(), suffix)
}

/// Graph handles for every tap of one forward pass.
#[derive(Clone, Debug)]
pub struct TapVars {
    pub front: Var,
    pub medium: Var,
    pub rear: Var,
    /// Activation of the final block (equal to `rear` for a 3-block spec).
    pub last_block: Var,
    pub output: Var,
    pub logits: Var,
}

impl TapVars {
    pub fn get(&self, tap: TapPoint) -> Var {
        match tap {
            TapPoint::Front => self.front,
            TapPoint::Medium => self.medium,
            TapPoint::Rear => self.rear,
            TapPoint::Output => self.output,
        }
    }
}

/// Concrete tap activations of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TapFeatures<S: Scalar = f32> {
    pub front: Tensor<S>,
    pub medium: Tensor<S>,
    pub rear: Tensor<S>,
    pub output: Tensor<S>,
    pub logits: Tensor<S>,
}

impl<S: Scalar> TapFeatures<S> {
    pub fn get(&self, tap: TapPoint) -> &Tensor<S> {
        match tap {
            TapPoint::Front => &self.front,
            TapPoint::Medium => &self.medium,
            TapPoint::Rear => &self.rear,
            TapPoint::Output => &self.output,
        }
    }

    pub fn from_graph(g: &Graph<S>, vars: &TapVars) -> Self {
        Self {
            front: g.value(vars.front).clone(),
            medium: g.value(vars.medium).clone(),
            rear: g.value(vars.rear).clone(),
            output: g.value(vars.output).clone(),
            logits: g.value(vars.logits).clone(),
        }
    }

    /// Sample `i` of every tap, keeping a batch axis of one.
    pub fn batch_item(&self, i: usize) -> Self {
        Self {
            front: self.front.batch_item(i),
            medium: self.medium.batch_item(i),
            rear: self.rear.batch_item(i),
            output: self.output.batch_item(i),
            logits: self.logits.batch_item(i),
        }
    }

    /// Concatenates single-sample features back into a batch.
    pub fn stack(items: &[&Self]) -> Result<Self, TensorError> {
        let cat = |f: fn(&Self) -> &Tensor<S>| -> Result<Tensor<S>, TensorError> {
            let parts: Vec<&Tensor<S>> = items.iter().map(|t| f(t)).collect();
            let stacked = Tensor::stack(&parts)?;
            let mut shape = stacked.shape()[1..].to_vec();
            shape[0] = items.len() * parts[0].shape()[0];
            stacked.reshape(&shape)
        };
        Ok(Self {
            front: cat(|t| &t.front)?,
            medium: cat(|t| &t.medium)?,
            rear: cat(|t| &t.rear)?,
            output: cat(|t| &t.output)?,
            logits: cat(|t| &t.logits)?,
        })
    }
}

/// One stream: architecture plus its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamNetwork {
    pub spec: StreamSpec,
    pub kind: StreamKind,
    pub params: ParamSet<f32>,
}

impl StreamNetwork {
    /// Builds a stream with He-initialized kernels and zero biases.
    /// Identical `(spec, kind, seed)` give bit-identical parameters.
    pub fn build(spec: &StreamSpec, kind: StreamKind, seed: u64) -> Result<Self, StreamError> {
        spec.block_extents()?;
        let mut params = ParamSet::new();
        let mut cin = kind.in_channels();
        for (i, &cout) in spec.block_channels.iter().enumerate() {
            let k = i + 1;
            params.push(init::he_normal(
                &param_name(kind, &format!("block{k}.conv")),
                &[cout, cin, 3, 3, 3],
                cin * 27,
                seed,
            ));
            params.push(init::zeros(&param_name(kind, &format!("block{k}.bias")), &[cout]));
            cin = cout;
        }
        params.push(init::he_normal(
            &param_name(kind, "classifier.w"),
            &[spec.num_classes, cin],
            cin,
            seed,
        ));
        params.push(init::zeros(&param_name(kind, "classifier.b"), &[spec.num_classes]));
        Ok(Self {
            spec: spec.clone(),
            kind,
            params,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Records a forward pass on `g`, reading parameters by name from `params`.
    /// Frozen parameters enter as constants.
    pub fn forward_graph<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        params: &ParamSet<S>,
        clip: Var,
    ) -> Result<TapVars, StreamError> {
        let shape = g.value(clip).shape().to_vec();
        let [t, h, w] = self.spec.clip_shape;
        if shape.len() != 5 || shape[1] != self.kind.in_channels() || shape[2..] != [t, h, w] {
            return Err(StreamError::Tensor(TensorError::Invalid {
                op: "stream forward",
                reason: format!(
                    "clip shape {shape:?} does not match [N, {}, {t}, {h}, {w}]",
                    self.kind.in_channels()
                ),
            }));
        }
        let bind = |g: &mut Graph<S>, suffix: &str| -> Result<Var, StreamError> {
            let name = param_name(self.kind, suffix);
            let id = params.id(&name).ok_or(StreamError::MissingParam(name))?;
            Ok(g.param(params, id))
        };
        let mut x = clip;
        let mut acts = Vec::with_capacity(self.spec.block_channels.len());
        for k in 1..=self.spec.block_channels.len() {
            let wv = bind(g, &format!("block{k}.conv"))?;
            let bv = bind(g, &format!("block{k}.bias"))?;
            x = g.conv3d(x, wv, bv, [1, 1, 1], [1, 1, 1])?;
            x = g.relu(x)?;
            let win = StreamSpec::pool_window(k);
            x = g.maxpool3d(x, win, win)?;
            acts.push(x);
        }
        let output = g.global_avg_pool(x)?;
        let cw = bind(g, "classifier.w")?;
        let cb = bind(g, "classifier.b")?;
        let logits = g.linear(output, cw, cb)?;
        Ok(TapVars {
            front: acts[0],
            medium: acts[1],
            rear: acts[2],
            last_block: x,
            output,
            logits,
        })
    }

    /// Gradient-free forward pass over this network's own parameters.
    pub fn forward(&self, clip: &Tensor<f32>) -> Result<TapFeatures<f32>, StreamError> {
        let mut g = Graph::new();
        let x = g.constant(clip.clone());
        let mut frozen = self.params.clone();
        frozen.freeze_all();
        let vars = self.forward_graph(&mut g, &frozen, x)?;
        Ok(TapFeatures::from_graph(&g, &vars))
    }
}

pub const ADAPTER_W: &str = "bridge.adapter.w";
pub const ADAPTER_B: &str = "bridge.adapter.b";

/// Aligns a teacher tap with a student tap: adaptive average pooling onto the
/// student's (T, H, W) (bins replicate when the student tap is larger), then a learned 1×1×1 channel projection. The teacher
/// feature always enters as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeAdapter {
    /// Per-sample `[C, T, H, W]` of the teacher tap.
    pub teacher_shape: Vec<usize>,
    /// Per-sample `[C, T, H, W]` of the student tap.
    pub target_shape: Vec<usize>,
    pub params: ParamSet<f32>,
}

impl BridgeAdapter {
    /// Identity projection when channel counts agree, He-normal otherwise.
    pub fn new(teacher_shape: &[usize], target_shape: &[usize], seed: u64) -> Result<Self, StreamError> {
        if teacher_shape.len() != 4 || target_shape.len() != 4 {
            return Err(StreamError::Spec("adapters connect 5-D taps only".into()));
        }
        let (ct, cs) = (teacher_shape[0], target_shape[0]);
        let mut params = ParamSet::new();
        let w = if ct == cs {
            let mut data = vec![0.0f32; cs * ct];
            for c in 0..cs {
                data[c * ct + c] = 1.0;
            }
            crate::tensor::Parameter::new(ADAPTER_W, Tensor::new(vec![cs, ct, 1, 1, 1], data)?)
        } else {
            init::he_normal(ADAPTER_W, &[cs, ct, 1, 1, 1], ct, seed)
        };
        params.push(w);
        params.push(init::zeros(ADAPTER_B, &[cs]));
        Ok(Self {
            teacher_shape: teacher_shape.to_vec(),
            target_shape: target_shape.to_vec(),
            params,
        })
    }

    pub fn between(spec: &StreamSpec, teacher_tap: TapPoint, student_tap: TapPoint, seed: u64) -> Result<Self, StreamError> {
        Self::new(&spec.tap_shape(teacher_tap)?, &spec.tap_shape(student_tap)?, seed)
    }

    /// Records the adapter on `g`. `teacher_feature` must be a constant.
    pub fn adapt_graph<S: Scalar>(&self, g: &mut Graph<S>, params: &ParamSet<S>, teacher_feature: Var) -> Result<Var, StreamError> {
        let bind = |g: &mut Graph<S>, name: &str| -> Result<Var, StreamError> {
            let id = params.id(name).ok_or_else(|| StreamError::MissingParam(name.into()))?;
            Ok(g.param(params, id))
        };
        let target = [self.target_shape[1], self.target_shape[2], self.target_shape[3]];
        let pooled = g.adaptive_avg_pool3d(teacher_feature, target)?;
        let w = bind(g, ADAPTER_W)?;
        let b = bind(g, ADAPTER_B)?;
        Ok(g.conv3d(pooled, w, b, [1, 1, 1], [0, 0, 0])?)
    }

    /// Gradient-free application on this adapter's own parameters.
    pub fn adapt(&self, teacher_feature: &Tensor<f32>) -> Result<Tensor<f32>, StreamError> {
        let mut g = Graph::new();
        let x = g.constant(teacher_feature.clone());
        let y = self.adapt_graph(&mut g, &self.params, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tap_shapes() {
        let spec = StreamSpec::default();
        assert_eq!(spec.block_extents().unwrap(), vec![[8, 16, 16], [4, 8, 8], [2, 4, 4], [1, 2, 2]]);
        assert_eq!(spec.tap_shape(TapPoint::Front).unwrap(), vec![8, 8, 16, 16]);
        assert_eq!(spec.tap_shape(TapPoint::Medium).unwrap(), vec![16, 4, 8, 8]);
        assert_eq!(spec.tap_shape(TapPoint::Rear).unwrap(), vec![32, 2, 4, 4]);
        assert_eq!(spec.tap_shape(TapPoint::Output).unwrap(), vec![64]);
    }

    #[test]
    fn forward_shapes_and_last_block() {
        let spec = StreamSpec::default();
        let net = StreamNetwork::build(&spec, StreamKind::Rgb, 3).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2, 3, 8, 32, 32], 0.5));
        let mut p = net.params.clone();
        p.freeze_all();
        let taps = net.forward_graph(&mut g, &p, x).unwrap();
        assert_eq!(g.value(taps.last_block).shape(), &[2, 64, 1, 2, 2]);
        assert_eq!(g.value(taps.rear).shape(), &[2, 32, 2, 4, 4]);
        assert_eq!(g.value(taps.output).shape(), &[2, 64]);
        assert_eq!(g.value(taps.logits).shape(), &[2, 8]);
    }

    #[test]
    fn pooling_underflow_is_reported() {
        let spec = StreamSpec {
            clip_shape: [4, 32, 32],
            ..Default::default()
        };
        assert!(matches!(
            StreamNetwork::build(&spec, StreamKind::Rgb, 0),
            Err(StreamError::PoolingUnderflow { block: 4, .. })
        ));
        let two_blocks = StreamSpec {
            block_channels: vec![4, 4],
            ..Default::default()
        };
        assert!(matches!(two_blocks.block_extents(), Err(StreamError::Spec(_))));
    }

    #[test]
    fn parameter_names() {
        let net = StreamNetwork::build(&StreamSpec::default(), StreamKind::Flow, 0).unwrap();
        let names = net.param_names();
        assert_eq!(names[0], "stream.flow.block1.conv");
        assert_eq!(names[1], "stream.flow.block1.bias");
        assert_eq!(names[names.len() - 2], "stream.flow.classifier.w");
        assert_eq!(names[names.len() - 1], "stream.flow.classifier.b");
    }

    #[test]
    fn homology_between_streams() {
        let spec = StreamSpec::default();
        let rgb = StreamNetwork::build(&spec, StreamKind::Rgb, 1).unwrap();
        let flow = StreamNetwork::build(&spec, StreamKind::Flow, 1).unwrap();
        for (a, b) in rgb.params.iter().zip(flow.params.iter()) {
            if a.name.ends_with("block1.conv") {
                assert_eq!(a.tensor.shape(), &[8, 3, 3, 3, 3]);
                assert_eq!(b.tensor.shape(), &[8, 2, 3, 3, 3]);
            } else {
                assert_eq!(a.tensor.shape(), b.tensor.shape(), "{}", a.name);
            }
        }
    }

    #[test]
    fn zero_clip_gives_uniform_softmax() {
        let spec = StreamSpec::default();
        let net = StreamNetwork::build(&spec, StreamKind::Flow, 9).unwrap();
        let taps = net.forward(&Tensor::zeros(&[1, 2, 8, 32, 32])).unwrap();
        let p = taps.logits.softmax_rows().unwrap();
        for &v in p.data() {
            assert!((v - 0.125).abs() < 1e-7);
        }
        let again = net.forward(&Tensor::zeros(&[1, 2, 8, 32, 32])).unwrap();
        assert_eq!(taps, again);
    }

    #[test]
    fn wrong_clip_shape_is_rejected() {
        let net = StreamNetwork::build(&StreamSpec::default(), StreamKind::Rgb, 0).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 2, 8, 32, 32])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 3, 8, 16, 32])).is_err());
    }

    #[test]
    fn adapter_identity_and_shapes() {
        let spec = StreamSpec::default();
        let same = BridgeAdapter::between(&spec, TapPoint::Medium, TapPoint::Medium, 0).unwrap();
        let feat = Tensor::new(vec![1, 16, 4, 8, 8], (0..4096).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        assert_eq!(same.adapt(&feat).unwrap(), feat);

        let hetero = BridgeAdapter::between(&spec, TapPoint::Medium, TapPoint::Rear, 0).unwrap();
        let out = hetero.adapt(&Tensor::zeros(&[3, 16, 4, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[3, 32, 2, 4, 4]);
    }

    #[test]
    fn adapter_constant_input_is_weight_sum() {
        let adapter = BridgeAdapter::new(&[3, 2, 2, 2], &[2, 1, 1, 1], 5).unwrap();
        let w = adapter.params.by_name(ADAPTER_W).unwrap().tensor.data().to_vec();
        let out = adapter.adapt(&Tensor::full(&[1, 3, 2, 2, 2], 0.5)).unwrap();
        for co in 0..2 {
            let expected: f32 = (0..3).map(|ci| w[co * 3 + ci] * 0.5).sum();
            assert!((out.data()[co] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn adapter_replicates_when_student_tap_is_larger() {
        let adapter = BridgeAdapter::new(&[2, 1, 1, 2], &[2, 2, 2, 4], 0).unwrap();
        let out = adapter.adapt(&Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2, 4]);
        assert_eq!(&out.data()[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&out.data()[16..20], &[3.0, 3.0, 4.0, 4.0]);
    }
}
