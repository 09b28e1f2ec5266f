use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use super::{
    student_loss_graph, weighted_total, BridgeConfig, DistillDirection, DistillError, LossBreakdown, LossVars,
    LossWeights, Phase, TrainRunRecord,
};
use crate::checkpoint;
use crate::dataset::{ClipSet, Dataset};
use crate::stream::{BridgeAdapter, StreamKind, StreamNetwork, StreamSpec};
use crate::tensor::init::stream_seed;
use crate::tensor::{Graph, OptimError, OptimizerConfig, ParamSet, Parameter, Sgd, Tensor, TensorError, Var};

pub const FUSION_W: &str = "fusion.w";
pub const FUSION_B: &str = "fusion.b";

/// Clips per forward pass when only predictions are needed.
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Fill the `seconds` column with wall time; off keeps metrics files
    /// byte-identical across reruns.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 6,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if self.batch_size == 0 {
            return Err(DistillError::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    /// `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
}

/// Top-1 accuracy of `[N, C]` logits.
pub fn evaluate_logits(logits: &Tensor<f32>, labels: &[usize]) -> Result<Accuracy, DistillError> {
    if labels.is_empty() {
        return Err(DistillError::EmptySplit);
    }
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if n != labels.len() {
        return Err(DistillError::Config(format!("{n} predictions for {} labels", labels.len())));
    }
    let pred = logits.argmax_rows()?;
    let mut hits = vec![0usize; c];
    let mut counts = vec![0usize; c];
    for (&p, &y) in pred.iter().zip(labels) {
        if y >= c {
            return Err(TensorError::LabelOutOfRange { label: y, classes: c }.into());
        }
        counts[y] += 1;
        hits[y] += usize::from(p == y);
    }
    Ok(Accuracy {
        top1: hits.iter().sum::<usize>() as f64 / n as f64,
        per_class: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &k)| (k > 0).then(|| h as f64 / k as f64))
            .collect(),
    })
}

/// `[N, num_classes]` logits of a frozen stream over a whole split.
pub fn stream_logits(net: &StreamNetwork, set: &ClipSet) -> Result<Tensor<f32>, DistillError> {
    let all: Vec<usize> = (0..set.len()).collect();
    let mut parts = Vec::new();
    for chunk in all.chunks(EVAL_BATCH) {
        parts.push(net.forward(&set.batch(net.kind, chunk))?.logits);
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::concat(&refs)?)
}

/// A trained single stream (teacher phase or any CE-only baseline).
#[derive(Clone, Debug)]
pub struct StreamRun {
    pub network: StreamNetwork,
    pub records: Vec<TrainRunRecord>,
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub network: StreamNetwork,
    pub adapter: BridgeAdapter,
    pub records: Vec<TrainRunRecord>,
}

#[derive(Clone, Debug)]
pub struct FusionRun {
    /// `fusion.w` `[C, 2C]` over `[rgb | flow]` logits and `fusion.b` `[C]`.
    pub params: ParamSet<f32>,
    pub records: Vec<TrainRunRecord>,
}

/// A loaded, frozen teacher with the hash of the file it came from.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    pub network: StreamNetwork,
    pub hash: String,
}

/// Loads a teacher checkpoint and freezes every parameter. With
/// `expected_hash`, the file must hash to exactly that value.
pub fn freeze(
    path: &Path,
    spec: &StreamSpec,
    kind: StreamKind,
    expected_hash: Option<&str>,
) -> Result<FrozenTeacher, DistillError> {
    let hash = checkpoint::file_hash(path)?;
    if let Some(expected) = expected_hash {
        if expected != hash {
            return Err(DistillError::Checksum {
                expected: expected.to_string(),
                actual: hash,
            });
        }
    }
    let loaded = checkpoint::load(path)?;
    let mut network = StreamNetwork::build(spec, kind, 0)?;
    checkpoint::restore_into(&mut network.params, &loaded)?;
    network.params.freeze_all();
    Ok(FrozenTeacher { network, hash })
}

fn is_divergence(e: &DistillError) -> Option<String> {
    match e {
        DistillError::Tensor(TensorError::NonFinite { op }) => Some(format!("non-finite value in {op}")),
        DistillError::Optim(OptimError::NonFiniteGradient(name)) => Some(format!("non-finite gradient for {name}")),
        _ => None,
    }
}

/// Builds one minibatch loss; returns the loss handles and the logits node.
type BatchLoss<'a> = dyn FnMut(&mut Graph<f32>, &ParamSet<f32>, &[usize]) -> Result<(LossVars, Var), DistillError> + 'a;

/// Shared SGD loop: shuffles the train split with the run seed, one
/// optimizer step per minibatch, one record per epoch.
fn fit(
    phase: Phase,
    params: &mut ParamSet<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    batch_loss: &mut BatchLoss<'_>,
    test_accuracy: &mut dyn FnMut(&ParamSet<f32>) -> Result<f64, DistillError>,
) -> Result<Vec<TrainRunRecord>, DistillError> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg.optimizer.clone());
    let mut rng = SplitMix64::seed_from_u64(stream_seed(cfg.seed, "data.shuffle"));
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_good = params.clone();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut rng);
        let step = (|| -> Result<(LossBreakdown, f64), DistillError> {
            let mut sum = LossBreakdown::default();
            let mut correct = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let mut g = Graph::new();
                let (loss, logits) = batch_loss(&mut g, params, batch)?;
                g.backward(loss.total)?;
                params.zero_grads();
                g.write_param_grads(params);
                sgd.step(params)?;
                let b = loss.breakdown(&g);
                let k = batch.len() as f64;
                sum.l1 += b.l1 * k;
                sum.l2 += b.l2 * k;
                sum.l3 += b.l3 * k;
                sum.total += b.total * k;
                let pred = g.value(logits).argmax_rows()?;
                correct += batch.iter().zip(&pred).filter(|(&i, &p)| labels[i] == p).count();
            }
            let n = labels.len() as f64;
            let mean = LossBreakdown {
                l1: sum.l1 / n,
                l2: sum.l2 / n,
                l3: sum.l3 / n,
                total: sum.total / n,
            };
            Ok((mean, correct as f64 / n))
        })();
        let (loss, train_acc) = match step {
            Ok(v) => v,
            Err(e) => {
                let Some(reason) = is_divergence(&e) else { return Err(e) };
                return Err(DistillError::Diverged {
                    phase,
                    epoch,
                    reason,
                    last_good: Box::new(last_good),
                    records,
                });
            }
        };
        let test_acc = test_accuracy(params)?;
        params.zero_grads();
        last_good = params.clone();
        records.push(TrainRunRecord {
            phase,
            epoch,
            loss,
            train_acc,
            test_acc,
            seconds: if cfg.record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
        });
    }
    params.zero_grads();
    Ok(records)
}

fn stream_test_accuracy<'a>(spec: &StreamSpec, kind: StreamKind, test: &'a ClipSet) -> impl FnMut(&ParamSet<f32>) -> Result<f64, DistillError> + 'a {
    let spec = spec.clone();
    move |params| {
        if test.is_empty() {
            return Ok(0.0);
        }
        let net = StreamNetwork {
            spec: spec.clone(),
            kind,
            params: params.clone(),
        };
        Ok(evaluate_logits(&stream_logits(&net, test)?, &test.labels)?.top1)
    }
}

/// Trains one stream with cross-entropy only. With the same seed this is
/// also the bridge-free baseline for a student of the same kind.
pub fn train_teacher(data: &Dataset, kind: StreamKind, spec: &StreamSpec, cfg: &TrainConfig) -> Result<StreamRun, DistillError> {
    let mut network = StreamNetwork::build(spec, kind, cfg.seed)?;
    let arch = network.clone();
    let train = &data.train;
    let mut ce = |g: &mut Graph<f32>, params: &ParamSet<f32>, batch: &[usize]| {
        let x = g.constant(train.batch(kind, batch));
        let taps = arch.forward_graph(g, params, x)?;
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let l3 = g.softmax_cross_entropy(taps.logits, &labels)?;
        let zero = g.constant(Tensor::zeros(&[1]));
        Ok((LossVars { l1: zero, l2: zero, l3, total: l3 }, taps.logits))
    };
    let mut test_acc = stream_test_accuracy(spec, kind, &data.test);
    let records = fit(Phase::Teacher, &mut network.params, &train.labels, cfg, &mut ce, &mut test_acc)?;
    Ok(StreamRun { network, records })
}

/// Trains the student stream against a frozen teacher through one
/// intermediate bridge plus the output-level bridge.
pub fn train_student(
    data: &Dataset,
    teacher: &StreamNetwork,
    direction: DistillDirection,
    bridge: BridgeConfig,
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<StudentRun, DistillError> {
    bridge.validate()?;
    weights.validate()?;
    if teacher.kind != direction.teacher() {
        return Err(DistillError::WrongTeacher {
            expected: direction.teacher(),
            actual: teacher.kind,
        });
    }
    let spec = &teacher.spec;
    let kind = direction.student();
    let student = StreamNetwork::build(spec, kind, cfg.seed)?;
    let adapter = BridgeAdapter::between(spec, bridge.teacher_tap, bridge.student_tap, cfg.seed)?;

    // The teacher never changes, so its features are computed once per clip.
    let train = &data.train;
    let mut teacher_tap = Vec::with_capacity(train.len());
    let mut teacher_out = Vec::with_capacity(train.len());
    let all: Vec<usize> = (0..train.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let f = teacher.forward(&train.batch(teacher.kind, chunk))?;
        for i in 0..chunk.len() {
            teacher_tap.push(f.get(bridge.teacher_tap).batch_item(i));
            teacher_out.push(f.output.batch_item(i));
        }
    }

    let mut params = student.params.clone();
    params.extend(&adapter.params);
    let arch = student.clone();
    let mut loss = |g: &mut Graph<f32>, params: &ParamSet<f32>, batch: &[usize]| {
        let x = g.constant(train.batch(kind, batch));
        let taps = arch.forward_graph(g, params, x)?;
        let gather = |src: &[Tensor<f32>]| {
            let items: Vec<&Tensor<f32>> = batch.iter().map(|&i| &src[i]).collect();
            Tensor::concat(&items)
        };
        let tt = g.constant(gather(&teacher_tap)?);
        let to = g.constant(gather(&teacher_out)?);
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let vars = student_loss_graph(g, &taps, tt, to, bridge, &adapter, params, weights, &labels)?;
        Ok((vars, taps.logits))
    };
    let mut test_acc = stream_test_accuracy(spec, kind, &data.test);
    let records = fit(Phase::Student, &mut params, &train.labels, cfg, &mut loss, &mut test_acc)?;

    let mut network = student;
    let mut adapter = adapter;
    for p in params.iter() {
        let target = if p.name.starts_with("bridge.") { &mut adapter.params } else { &mut network.params };
        target.push(p.clone());
    }
    Ok(StudentRun {
        network,
        adapter,
        records,
    })
}

fn fusion_init(num_classes: usize) -> ParamSet<f32> {
    let c = num_classes;
    let mut w = vec![0.0f32; c * 2 * c];
    for i in 0..c {
        w[i * 2 * c + i] = 0.5;
        w[i * 2 * c + c + i] = 0.5;
    }
    let mut params = ParamSet::new();
    params.push(Parameter::new(FUSION_W, Tensor::new(vec![c, 2 * c], w).expect("fusion shape")));
    params.push(Parameter::new(FUSION_B, Tensor::zeros(&[c])));
    params
}

fn fusion_graph(g: &mut Graph<f32>, params: &ParamSet<f32>, rgb: Tensor<f32>, flow: Tensor<f32>) -> Result<Var, DistillError> {
    let a = g.constant(rgb);
    let b = g.constant(flow);
    let x = g.concat_cols(a, b)?;
    let w = g.param(params, params.id(FUSION_W).ok_or_else(|| DistillError::Config("missing fusion.w".into()))?);
    let bias = g.param(params, params.id(FUSION_B).ok_or_else(|| DistillError::Config("missing fusion.b".into()))?);
    Ok(g.linear(x, w, bias)?)
}

/// Fused logits `fusion.w · [rgb | flow] + fusion.b`.
pub fn fused_logits(fusion: &ParamSet<f32>, rgb: &Tensor<f32>, flow: &Tensor<f32>) -> Result<Tensor<f32>, DistillError> {
    let mut frozen = fusion.clone();
    frozen.freeze_all();
    let mut g = Graph::new();
    let y = fusion_graph(&mut g, &frozen, rgb.clone(), flow.clone())?;
    Ok(g.value(y).clone())
}

/// Trains the fusion layer over both frozen streams' logits.
pub fn train_fusion(data: &Dataset, rgb: &StreamNetwork, flow: &StreamNetwork, cfg: &TrainConfig) -> Result<FusionRun, DistillError> {
    let c = rgb.spec.num_classes;
    if flow.spec.num_classes != c {
        return Err(DistillError::ClassMismatch(c, flow.spec.num_classes));
    }
    let rows = |t: &Tensor<f32>, idx: &[usize]| -> Tensor<f32> {
        let items: Vec<Tensor<f32>> = idx.iter().map(|&i| t.batch_item(i)).collect();
        let refs: Vec<&Tensor<f32>> = items.iter().collect();
        Tensor::concat(&refs).expect("rows of one tensor")
    };
    let train_rgb = stream_logits(rgb, &data.train)?;
    let train_flow = stream_logits(flow, &data.train)?;
    let (test_rgb, test_flow) = if data.test.is_empty() {
        (None, None)
    } else {
        (Some(stream_logits(rgb, &data.test)?), Some(stream_logits(flow, &data.test)?))
    };
    let mut params = fusion_init(c);
    let labels = &data.train.labels;
    let mut loss = |g: &mut Graph<f32>, params: &ParamSet<f32>, batch: &[usize]| {
        let logits = fusion_graph(g, params, rows(&train_rgb, batch), rows(&train_flow, batch))?;
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let l3 = g.softmax_cross_entropy(logits, &y)?;
        let zero = g.constant(Tensor::zeros(&[1]));
        let total = weighted_total(g, &[(1.0, l3)])?;
        Ok((LossVars { l1: zero, l2: zero, l3, total }, logits))
    };
    let mut test_acc = |params: &ParamSet<f32>| match (&test_rgb, &test_flow) {
        (Some(r), Some(f)) => Ok(evaluate_logits(&fused_logits(params, r, f)?, &data.test.labels)?.top1),
        _ => Ok(0.0),
    };
    let records = fit(Phase::Fusion, &mut params, labels, cfg, &mut loss, &mut test_acc)?;
    Ok(FusionRun { params, records })
}
