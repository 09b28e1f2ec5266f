//! Cross-stream enhancement: the stronger stream is trained alone, frozen,
//! and then supervises the weaker one through two mimicry terms next to the
//! usual cross-entropy:
//!
//! ```text
//! total = α·mse(student_tap, adapt(teacher_tap)) + β·mse(student_out, teacher_out) + γ·CE(student_logits, y)
//! ```
//!
//! Teacher features always enter the graph as constants. A last phase trains
//! a linear fusion layer over both frozen streams' logits.

mod metrics;
mod sweep;
mod train;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::stream::{BridgeAdapter, StreamError, StreamKind, TapFeatures, TapPoint, TapVars};
use crate::tensor::{Graph, OptimError, ParamSet, Scalar, Tensor, TensorError, Var};

pub use metrics::{fmt_sig6, metrics_csv, parse_metrics_csv, METRICS_HEADER};
pub use sweep::{select_best, sweep_bridges, sweep_summary_csv, SweepOutcome, SweepRun, SweepRunResult, SWEEP_HEADER};
pub use train::{
    evaluate_logits, freeze, fused_logits, stream_logits, train_fusion, train_student, train_teacher, Accuracy,
    FrozenTeacher, FusionRun, StreamRun, StudentRun, TrainConfig, FUSION_B, FUSION_W,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid loss weights: {0}")]
    Weights(String),
    #[error("invalid bridge: {0}")]
    Bridge(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{phase} training diverged at epoch {epoch}: {reason}")]
    Diverged {
        phase: Phase,
        epoch: usize,
        reason: String,
        /// Parameters after the last finite epoch.
        last_good: Box<ParamSet<f32>>,
        records: Vec<TrainRunRecord>,
    },
    #[error("streams disagree on class count: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("teacher is the {actual} stream but the direction needs {expected}")]
    WrongTeacher { expected: StreamKind, actual: StreamKind },
    #[error("teacher checkpoint checksum mismatch: expected {expected}, found {actual}")]
    Checksum { expected: String, actual: String },
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, DistillError> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(DistillError::Weights(format!("weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(DistillError::Weights("alpha, beta and gamma are all zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DistillDirection {
    FlowTeachesRgb,
    RgbTeachesFlow,
}

impl DistillDirection {
    pub fn teacher(self) -> StreamKind {
        match self {
            DistillDirection::FlowTeachesRgb => StreamKind::Flow,
            DistillDirection::RgbTeachesFlow => StreamKind::Rgb,
        }
    }

    pub fn student(self) -> StreamKind {
        self.teacher().other()
    }

    /// The direction whose teacher is `teacher`.
    pub fn with_teacher(teacher: StreamKind) -> Self {
        match teacher {
            StreamKind::Flow => DistillDirection::FlowTeachesRgb,
            StreamKind::Rgb => DistillDirection::RgbTeachesFlow,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DistillDirection::FlowTeachesRgb => "flow-teaches-rgb",
            DistillDirection::RgbTeachesFlow => "rgb-teaches-flow",
        }
    }
}

impl fmt::Display for DistillDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillDirection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "flow-teaches-rgb" => Ok(DistillDirection::FlowTeachesRgb),
            "rgb-teaches-flow" => Ok(DistillDirection::RgbTeachesFlow),
            _ => Err(format!("unknown direction `{s}` (flow-teaches-rgb | rgb-teaches-flow)")),
        }
    }
}

/// One intermediate bridge from a teacher tap to a student tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BridgeConfig {
    pub teacher_tap: TapPoint,
    pub student_tap: TapPoint,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            teacher_tap: TapPoint::Rear,
            student_tap: TapPoint::Rear,
        }
    }
}

impl BridgeConfig {
    /// The nine (teacher, student) pairs over front/medium/rear, teacher-major.
    pub fn all() -> [BridgeConfig; 9] {
        let taps = TapPoint::INTERMEDIATE;
        std::array::from_fn(|i| BridgeConfig {
            teacher_tap: taps[i / 3],
            student_tap: taps[i % 3],
        })
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if self.teacher_tap.block().is_none() || self.student_tap.block().is_none() {
            return Err(DistillError::Bridge(format!(
                "{self}: intermediate bridges connect front, medium or rear taps"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BridgeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.teacher_tap, self.student_tap)
    }
}

impl FromStr for BridgeConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (t, st) = s.split_once("->").ok_or_else(|| format!("expected `<teacher>-><student>`, got `{s}`"))?;
        let b = BridgeConfig {
            teacher_tap: t.trim().parse()?,
            student_tap: st.trim().parse()?,
        };
        b.validate().map_err(|e| e.to_string())?;
        Ok(b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Teacher,
    Student,
    Fusion,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Teacher => "teacher",
            Phase::Student => "student",
            Phase::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "teacher" => Ok(Phase::Teacher),
            "student" => Ok(Phase::Student),
            "fusion" => Ok(Phase::Fusion),
            _ => Err(format!("unknown phase `{s}`")),
        }
    }
}

/// One line of a metrics file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRunRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

/// Graph handles of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown {
            l1: g.value(self.l1).item().as_f64(),
            l2: g.value(self.l2).item().as_f64(),
            l3: g.value(self.l3).item().as_f64(),
            total: g.value(self.total).item().as_f64(),
        }
    }
}

/// `Σ wᵢ·lᵢ` over the terms with nonzero weight, summed left to right. Terms
/// with zero weight are left out of the graph entirely, so α = β = 0 yields
/// exactly `γ·l3` and the same gradients as plain cross-entropy training.
pub fn weighted_total<S: Scalar>(g: &mut Graph<S>, terms: &[(f64, Var)]) -> Result<Var, TensorError> {
    let mut total: Option<Var> = None;
    for &(w, l) in terms.iter().filter(|(w, _)| *w != 0.0) {
        let scaled = if w == 1.0 { l } else { g.scale(l, w)? };
        total = Some(match total {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    total.ok_or_else(|| TensorError::Invalid {
        op: "weighted_total",
        reason: "every term has zero weight".into(),
    })
}

/// Records the student loss on `g`. `teacher_tap` and `teacher_output` must be
/// constants (detached teacher features); `params` holds the adapter.
#[allow(clippy::too_many_arguments)]
pub fn student_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    student: &TapVars,
    teacher_tap: Var,
    teacher_output: Var,
    bridge: BridgeConfig,
    adapter: &BridgeAdapter,
    params: &ParamSet<S>,
    weights: LossWeights,
    labels: &[usize],
) -> Result<LossVars, DistillError> {
    bridge.validate()?;
    weights.validate()?;
    let adapted = adapter.adapt_graph(g, params, teacher_tap)?;
    let l1 = g.mse(student.get(bridge.student_tap), adapted)?;
    let l2 = g.mse(student.output, teacher_output)?;
    let l3 = g.softmax_cross_entropy(student.logits, labels)?;
    let total = weighted_total(g, &[(weights.alpha, l1), (weights.beta, l2), (weights.gamma, l3)])?;
    Ok(LossVars { l1, l2, l3, total })
}

/// Loss terms for already-computed features.
pub fn student_loss(
    student: &TapFeatures<f32>,
    teacher: &TapFeatures<f32>,
    bridge: BridgeConfig,
    adapter: &BridgeAdapter,
    weights: LossWeights,
    labels: &[usize],
) -> Result<LossBreakdown, DistillError> {
    let mut g = Graph::new();
    let constant = |g: &mut Graph<f32>, t: &Tensor<f32>| g.constant(t.clone());
    let vars = TapVars {
        front: constant(&mut g, &student.front),
        medium: constant(&mut g, &student.medium),
        rear: constant(&mut g, &student.rear),
        last_block: constant(&mut g, &student.rear),
        output: constant(&mut g, &student.output),
        logits: constant(&mut g, &student.logits),
    };
    let tt = constant(&mut g, teacher.get(bridge.teacher_tap));
    let to = constant(&mut g, &teacher.output);
    let loss = student_loss_graph(&mut g, &vars, tt, to, bridge, adapter, &adapter.params, weights, labels)?;
    Ok(loss.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{StreamNetwork, StreamSpec};

    fn small_spec() -> StreamSpec {
        StreamSpec {
            num_classes: 4,
            block_channels: vec![2, 3, 4],
            clip_shape: [4, 8, 8],
        }
    }

    fn features(kind: StreamKind, seed: u64) -> TapFeatures<f32> {
        let spec = small_spec();
        let net = StreamNetwork::build(&spec, kind, seed).unwrap();
        let n = 2 * kind.in_channels() * 4 * 8 * 8;
        let clip: Vec<f32> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 997) as f32 / 997.0).collect();
        net.forward(&Tensor::new(vec![2, kind.in_channels(), 4, 8, 8], clip).unwrap()).unwrap()
    }

    #[test]
    fn nine_bridges_in_teacher_major_order() {
        let all = BridgeConfig::all();
        assert_eq!(all.len(), 9);
        assert_eq!(all[0].to_string(), "front->front");
        assert_eq!(all[1].to_string(), "front->medium");
        assert_eq!(all[8].to_string(), "rear->rear");
        let mut sorted = all;
        sorted.sort();
        assert_eq!(sorted, all);
        assert_eq!("medium->rear".parse::<BridgeConfig>().unwrap(), all[5]);
        assert!("output->rear".parse::<BridgeConfig>().is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_ok());
    }

    #[test]
    fn degenerate_weights_give_exactly_scaled_ce() {
        let s = features(StreamKind::Rgb, 1);
        let t = features(StreamKind::Flow, 2);
        let bridge = BridgeConfig {
            teacher_tap: TapPoint::Medium,
            student_tap: TapPoint::Rear,
        };
        let adapter = BridgeAdapter::between(&small_spec(), bridge.teacher_tap, bridge.student_tap, 0).unwrap();
        let labels = [1, 3];
        for gamma in [1.0, 0.5, 3.0] {
            let b = student_loss(&s, &t, bridge, &adapter, LossWeights::new(0.0, 0.0, gamma).unwrap(), &labels).unwrap();
            assert_eq!(b.total, (b.l3 as f32 * gamma as f32) as f64);
            assert!(b.l1 > 0.0 && b.l2 > 0.0);
        }
        // output-only mimicry: l1 carries no weight
        let b = student_loss(&s, &t, bridge, &adapter, LossWeights::new(0.0, 1.0, 1.0).unwrap(), &labels).unwrap();
        assert_eq!(b.total, (b.l2 as f32 + b.l3 as f32) as f64);
    }

    #[test]
    fn equal_outputs_give_zero_l2() {
        let s = features(StreamKind::Rgb, 4);
        let mut t = features(StreamKind::Flow, 5);
        t.output = s.output.clone();
        let adapter = BridgeAdapter::between(&small_spec(), TapPoint::Front, TapPoint::Front, 0).unwrap();
        let b = student_loss(&s, &t, BridgeConfig::default(), &adapter, LossWeights::default(), &[0, 0]);
        let adapter_rear = BridgeAdapter::between(&small_spec(), TapPoint::Rear, TapPoint::Rear, 0).unwrap();
        assert!(b.is_err(), "adapter shape must match the bridge");
        let b = student_loss(&s, &t, BridgeConfig::default(), &adapter_rear, LossWeights::default(), &[0, 0]).unwrap();
        assert_eq!(b.l2, 0.0);
    }

    #[test]
    fn directions() {
        assert_eq!(DistillDirection::FlowTeachesRgb.teacher(), StreamKind::Flow);
        assert_eq!(DistillDirection::FlowTeachesRgb.student(), StreamKind::Rgb);
        assert_eq!(DistillDirection::with_teacher(StreamKind::Rgb), DistillDirection::RgbTeachesFlow);
        assert_eq!("rgb-teaches-flow".parse::<DistillDirection>().unwrap(), DistillDirection::RgbTeachesFlow);
    }
}
