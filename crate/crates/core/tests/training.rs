mod common;

use std::sync::OnceLock;

use crossnet::checkpoint;
use crossnet::dataset::Dataset;
use crossnet::distill::{
    evaluate_logits, freeze, fused_logits, stream_logits, student_loss_graph, sweep_bridges, train_fusion,
    train_student, train_teacher, BridgeConfig, DistillDirection, DistillError, LossWeights, TrainConfig,
};
use crossnet::stream::{BridgeAdapter, StreamKind, StreamNetwork, StreamSpec, TapPoint};
use crossnet::synth::{make_regime, DatasetConfig, Regime};
use crossnet::tensor::{Graph, ParamSet, Parameter, Tensor};

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

fn small() -> &'static (Dataset, StreamSpec) {
    static DATA: OnceLock<(Dataset, StreamSpec)> = OnceLock::new();
    DATA.get_or_init(|| {
        let c = common::small_config(3);
        (common::render(&c), common::small_spec(&c))
    })
}

/// The default motion-favored benchmark.
fn benchmark() -> &'static (Dataset, StreamSpec) {
    static DATA: OnceLock<(Dataset, StreamSpec)> = OnceLock::new();
    DATA.get_or_init(|| {
        let c = make_regime(Regime::MotionFavored, 0);
        let data = Dataset::render(&crossnet::synth::DatasetManifest::plan(&c).unwrap(), &Default::default()).unwrap();
        let spec = StreamSpec {
            num_classes: c.num_classes,
            clip_shape: c.clip_shape,
            ..StreamSpec::default()
        };
        (data, spec)
    })
}

fn assert_params_eq(a: &ParamSet<f32>, b: &ParamSet<f32>) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b.iter()) {
        assert_eq!(p.name, q.name);
        let pb: Vec<u32> = p.tensor.data().iter().map(|v| v.to_bits()).collect();
        let qb: Vec<u32> = q.tensor.data().iter().map(|v| v.to_bits()).collect();
        assert!(pb == qb, "{} differs", p.name);
    }
}

#[test]
fn cross_entropy_only_student_is_plain_training() {
    let (data, spec) = small();
    let c = cfg(4, 11);
    let teacher = train_teacher(data, StreamKind::Flow, spec, &c).unwrap().network;
    let baseline = train_teacher(data, StreamKind::Rgb, spec, &c).unwrap();
    for bridge in [BridgeConfig::default(), "front->medium".parse().unwrap()] {
        let w = LossWeights::new(0.0, 0.0, 1.0).unwrap();
        let student = train_student(data, &teacher, DistillDirection::FlowTeachesRgb, bridge, w, &c).unwrap();
        assert_eq!(student.records.len(), baseline.records.len());
        for (s, b) in student.records.iter().zip(&baseline.records) {
            assert_eq!(s.loss.l3.to_bits(), b.loss.l3.to_bits());
            assert_eq!(s.loss.total.to_bits(), b.loss.total.to_bits());
            assert_eq!(s.train_acc, b.train_acc);
            assert_eq!(s.test_acc, b.test_acc);
        }
        assert_params_eq(&student.network.params, &baseline.network.params);
    }
}

#[test]
fn pure_mimicry_shrinks_bridge_losses() {
    let (data, spec) = benchmark();
    let teacher = train_teacher(data, StreamKind::Flow, spec, &cfg(5, 0)).unwrap().network;
    let w = LossWeights::new(1.0, 1.0, 0.0).unwrap();
    let run = train_student(data, &teacher, DistillDirection::FlowTeachesRgb, BridgeConfig::default(), w, &cfg(5, 0)).unwrap();
    for pair in run.records.windows(2) {
        let (a, b) = (&pair[0].loss, &pair[1].loss);
        assert!(b.l1 <= a.l1, "l1 rose: {:?}", run.records);
        assert!(b.l2 <= a.l2, "l2 rose: {:?}", run.records);
        assert!((b.total - (b.l1 + b.l2)).abs() <= 1e-6 * b.total.abs());
    }
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let (data, spec) = small();
    let run = train_teacher(data, StreamKind::Rgb, spec, &cfg(0, 7)).unwrap();
    assert!(run.records.is_empty());
    assert_params_eq(&run.network.params, &StreamNetwork::build(spec, StreamKind::Rgb, 7).unwrap().params);

    let flow = StreamNetwork::build(spec, StreamKind::Flow, 8).unwrap();
    let fusion = train_fusion(data, &run.network, &flow, &cfg(0, 7)).unwrap();
    let rgb = stream_logits(&run.network, &data.test).unwrap();
    let fl = stream_logits(&flow, &data.test).unwrap();
    let avg: Vec<f32> = rgb.data().iter().zip(fl.data()).map(|(a, b)| (a + b) / 2.0).collect();
    let avg = Tensor::new(rgb.shape().to_vec(), avg).unwrap();
    let fused = fused_logits(&fusion.params, &rgb, &fl).unwrap();
    assert_eq!(fused.argmax_rows().unwrap(), avg.argmax_rows().unwrap());
}

#[test]
fn training_is_bit_reproducible() {
    let (data, spec) = small();
    let a = train_teacher(data, StreamKind::Flow, spec, &cfg(2, 4)).unwrap();
    let b = train_teacher(data, StreamKind::Flow, spec, &cfg(2, 4)).unwrap();
    assert_eq!(checkpoint::encode(&a.network.params), checkpoint::encode(&b.network.params));
    assert_eq!(a.records, b.records);
}

#[test]
fn colour_cue_toy_is_learned_quickly() {
    let c = DatasetConfig {
        num_classes: 2,
        clips_per_class: 20,
        speed: 0.0,
        appearance_cue: true,
        seed: 1,
        ..DatasetConfig::default()
    };
    let data = common::render(&c);
    let spec = StreamSpec {
        num_classes: 2,
        clip_shape: c.clip_shape,
        ..StreamSpec::default()
    };
    let run = train_teacher(&data, StreamKind::Rgb, &spec, &cfg(20, 0)).unwrap();
    let best = run.records.iter().map(|r| r.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.95, "best train accuracy {best}");
}

#[test]
fn untrained_networks_score_at_chance() {
    let (data, spec) = benchmark();
    let mut sum = 0.0;
    for seed in 0..10 {
        let net = StreamNetwork::build(spec, StreamKind::Rgb, seed).unwrap();
        let acc = evaluate_logits(&stream_logits(&net, &data.test).unwrap(), &data.test.labels).unwrap().top1;
        assert!((0.05..=0.25).contains(&acc), "seed {seed}: {acc}");
        sum += acc;
    }
    let mean = sum / 10.0;
    assert!((mean - 0.125).abs() <= 0.05, "mean {mean}");
}

/// Softmax regression on the middle frame's pixels.
#[test]
fn middle_frame_carries_no_label() {
    let (data, _) = benchmark();
    let [_, t, h, w] = data.train.rgb[0].shape().try_into().unwrap();
    let frame = |clip: &Tensor<f32>| -> Vec<f32> {
        let d = clip.data();
        (0..3).flat_map(|c| d[(c * t + t / 2) * h * w..][..h * w].to_vec()).collect()
    };
    let feats = |clips: &[Tensor<f32>]| {
        let rows: Vec<f32> = clips.iter().flat_map(frame).collect();
        Tensor::new(vec![clips.len(), 3 * h * w], rows).unwrap()
    };
    let (xtr, xte) = (feats(&data.train.rgb), feats(&data.test.rgb));
    let classes = data.num_classes();
    let mut params = ParamSet::new();
    let wid = params.push(Parameter::new("w", Tensor::zeros(&[classes, 3 * h * w])));
    let bid = params.push(Parameter::new("b", Tensor::zeros(&[classes])));
    let mut sgd = crossnet::tensor::Sgd::new(crossnet::tensor::OptimizerConfig {
        learning_rate: 0.05,
        ..Default::default()
    });
    let mut train_acc = 0.0;
    for _ in 0..200 {
        let mut g = Graph::new();
        let x = g.constant(xtr.clone());
        let (wv, bv) = (g.param(&params, wid), g.param(&params, bid));
        let logits = g.linear(x, wv, bv).unwrap();
        train_acc = evaluate_logits(g.value(logits), &data.train.labels).unwrap().top1;
        let loss = g.softmax_cross_entropy(logits, &data.train.labels).unwrap();
        g.backward(loss).unwrap();
        params.zero_grads();
        g.write_param_grads(&mut params);
        sgd.step(&mut params).unwrap();
    }
    let mut g = Graph::new();
    let x = g.constant(xte);
    let (wv, bv) = (g.param(&params, wid), g.param(&params, bid));
    let logits = g.linear(x, wv, bv).unwrap();
    let acc = evaluate_logits(g.value(logits), &data.test.labels).unwrap().top1;
    assert!(acc < 0.25, "single-frame test accuracy {acc} (train {train_acc})");
}

#[test]
fn teacher_backbone_gets_no_gradient() {
    let (data, spec) = small();
    let mut teacher = StreamNetwork::build(spec, StreamKind::Flow, 1).unwrap();
    teacher.params.freeze_all();
    let student = StreamNetwork::build(spec, StreamKind::Rgb, 2).unwrap();
    let bridge: BridgeConfig = "medium->rear".parse().unwrap();
    let adapter = BridgeAdapter::between(spec, bridge.teacher_tap, bridge.student_tap, 2).unwrap();
    let mut all = student.params.clone();
    all.extend(&adapter.params);
    all.extend(&teacher.params);

    let mut g = Graph::new();
    let tx = g.constant(data.train.batch(StreamKind::Flow, &[0, 1]));
    let tt = teacher.forward_graph(&mut g, &all, tx).unwrap();
    let sx = g.constant(data.train.batch(StreamKind::Rgb, &[0, 1]));
    let st = student.forward_graph(&mut g, &all, sx).unwrap();
    let labels = [data.train.labels[0], data.train.labels[1]];
    let loss = student_loss_graph(
        &mut g,
        &st,
        tt.get(bridge.teacher_tap),
        tt.output,
        bridge,
        &adapter,
        &all,
        LossWeights::default(),
        &labels,
    )
    .unwrap();
    g.backward(loss.total).unwrap();
    all.zero_grads();
    g.write_param_grads(&mut all);
    for p in all.iter() {
        let has_grad = p.tensor.grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0));
        if p.name.starts_with("stream.flow.") {
            assert!(!has_grad, "teacher parameter {} received gradient", p.name);
        } else if p.name.ends_with(".w") || p.name.contains("conv") {
            assert!(has_grad, "student-side parameter {} got no gradient", p.name);
        }
    }
}

#[test]
fn student_and_fusion_leave_the_teacher_file_alone() {
    let (data, spec) = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.x3dc");
    let c = cfg(2, 5);
    checkpoint::save(&path, &train_teacher(data, StreamKind::Rgb, spec, &c).unwrap().network.params).unwrap();
    let before = std::fs::read(&path).unwrap();
    let teacher = freeze(&path, spec, StreamKind::Rgb, None).unwrap();
    let direction = DistillDirection::RgbTeachesFlow;
    let student = train_student(data, &teacher.network, direction, BridgeConfig::default(), LossWeights::default(), &c).unwrap();
    train_fusion(data, &teacher.network, &student.network, &c).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(freeze(&path, spec, StreamKind::Rgb, Some(&teacher.hash)).unwrap().hash, teacher.hash);

    // one flipped payload byte is caught by the recorded hash
    let mut bytes = before.clone();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        freeze(&path, spec, StreamKind::Rgb, Some(&teacher.hash)),
        Err(DistillError::Checksum { .. })
    ));
}

#[test]
fn zero_epoch_sweep_ties_and_picks_the_first_bridge() {
    let (data, spec) = small();
    let teacher = StreamNetwork::build(spec, StreamKind::Flow, 3).unwrap();
    let w = LossWeights::default();
    let outcome = sweep_bridges(data, &teacher, "h", DistillDirection::FlowTeachesRgb, w, &cfg(0, 9), 2);
    assert_eq!(outcome.runs.len(), 9);
    let init = StreamNetwork::build(spec, StreamKind::Rgb, 9).unwrap();
    let init_acc = evaluate_logits(&stream_logits(&init, &data.test).unwrap(), &data.test.labels).unwrap().top1;
    for run in &outcome.runs {
        assert_eq!(run.result.as_ref().unwrap().student_acc, init_acc);
    }
    assert_eq!(outcome.best, Some(0));
    assert_eq!(outcome.runs[0].bridge, BridgeConfig { teacher_tap: TapPoint::Front, student_tap: TapPoint::Front });
}
