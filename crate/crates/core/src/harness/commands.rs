use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, HarnessError, RunConfig};
use crate::checkpoint;
use crate::dataset::Dataset;
use crate::distill::{
    self, evaluate_logits, fmt_sig6, freeze, fused_logits, metrics_csv, stream_logits, sweep_bridges, sweep_summary_csv,
    Accuracy, DistillError, FrozenTeacher, TrainRunRecord,
};
use crate::flow;
use crate::stream::{StreamKind, StreamNetwork};
use crate::synth::{self, DatasetManifest, MANIFEST_FILE};
use crate::tensor::ParamSet;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.x3dc";
pub const LAST_GOOD_FILE: &str = "last_good.x3dc";
pub const STUDENT_FILE: &str = "student.x3dc";
pub const ADAPTER_FILE: &str = "adapter.x3dc";
pub const FUSION_FILE: &str = "fusion.x3dc";
pub const TEACHER_HASH_FILE: &str = "teacher.sha256";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_HEADER: &str = "regime,pipeline,rgb,flow,fused";
pub const SWEEP_DIR: &str = "sweep";
pub const SWEEP_SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_BEST_FILE: &str = "best.txt";
const FLOW_PARAMS_FILE: &str = "flow/params.txt";
const PER_CLASS_FILE: &str = "eval_per_class.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf, HarnessError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(HarnessError::MissingCheckpoint(path))
    }
}

fn flow_params_text(cfg: &RunConfig) -> String {
    cfg.to_text().lines().filter(|l| l.starts_with("flow.")).map(|l| format!("{l}\n")).collect()
}

/// Writes the dataset (clips and manifest) into the data directory.
pub fn gen_data(cfg: &RunConfig) -> Result<DatasetManifest, HarnessError> {
    cfg.validate()?;
    Ok(synth::generate_dataset(&cfg.dataset_config(), &cfg.data_dir(), None)?)
}

/// Computes the flow cache for every clip, generating the data first if the
/// directory has none.
pub fn precompute_flow(cfg: &RunConfig) -> Result<usize, HarnessError> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    let manifest = ensure_data(cfg, &dir)?;
    for record in &manifest.clips {
        let clip = synth::load_clip(&synth::clip_path(&dir, &record.id))?;
        let fc = flow::clip_to_flow_clip(&clip, &cfg.flow).map_err(synth::SynthError::from)?;
        let path = synth::flow_path(&dir, &record.id);
        flow::cache::save(&path, &fc).map_err(|e| io_err(&path, e))?;
    }
    write(&dir.join(FLOW_PARAMS_FILE), flow_params_text(cfg))?;
    Ok(manifest.clips.len())
}

fn ensure_data(cfg: &RunConfig, dir: &Path) -> Result<DatasetManifest, HarnessError> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return gen_data(cfg);
    }
    let manifest = DatasetManifest::load(dir)?;
    if manifest.config != cfg.dataset_config() {
        return Err(HarnessError::Config(format!(
            "{} was generated from a different data config; use another data.dir",
            dir.display()
        )));
    }
    Ok(manifest)
}

/// Loads (generating when absent) the dataset the config describes.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    let dir = cfg.data_dir();
    ensure_data(cfg, &dir)?;
    let cached = dir.join(FLOW_PARAMS_FILE);
    if cached.is_file() && read(&cached)? != flow_params_text(cfg) {
        return Err(HarnessError::Config(format!(
            "flow cache in {} was computed with other flow.* settings; rerun precompute-flow",
            dir.display()
        )));
    }
    Ok(Dataset::load(&dir, &cfg.flow)?)
}

fn write_phase(dir: &Path, cfg: &RunConfig, records: &[TrainRunRecord]) -> Result<(), HarnessError> {
    write(&dir.join(CONFIG_FILE), cfg.to_text())?;
    write(&dir.join(METRICS_FILE), metrics_csv(records))
}

/// Saves what a diverged run left behind and passes the error on.
fn keep_last_good(dir: &Path, cfg: &RunConfig, err: DistillError) -> HarnessError {
    if let DistillError::Diverged { last_good, records, .. } = &err {
        let saved = write_phase(dir, cfg, records).and_then(|_| Ok(checkpoint::save(&dir.join(LAST_GOOD_FILE), last_good)?));
        if let Err(e) = saved {
            return e;
        }
    }
    err.into()
}

fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(checkpoint::save(path, params)?)
}

/// Phase 1: trains the stronger stream alone into `teacher.dir`.
pub fn train_teacher(cfg: &RunConfig) -> Result<Vec<TrainRunRecord>, HarnessError> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let dir = cfg.teacher_dir();
    let run = distill::train_teacher(&data, cfg.direction.teacher(), &cfg.stream_spec(), &cfg.train_config())
        .map_err(|e| keep_last_good(&dir, cfg, e))?;
    save_params(&dir.join(CHECKPOINT_FILE), &run.network.params)?;
    write_phase(&dir, cfg, &run.records)?;
    Ok(run.records)
}

fn load_teacher(cfg: &RunConfig, expected_hash: Option<&str>) -> Result<FrozenTeacher, HarnessError> {
    let path = require(cfg.teacher_dir().join(CHECKPOINT_FILE))?;
    Ok(freeze(&path, &cfg.stream_spec(), cfg.direction.teacher(), expected_hash)?)
}

fn load_network(path: PathBuf, cfg: &RunConfig, kind: StreamKind) -> Result<StreamNetwork, HarnessError> {
    let path = require(path)?;
    let mut net = StreamNetwork::build(&cfg.stream_spec(), kind, 0).map_err(DistillError::from)?;
    checkpoint::restore_into(&mut net.params, &checkpoint::load(&path)?)?;
    net.params.freeze_all();
    Ok(net)
}

fn recorded_hash(dir: &Path) -> Result<String, HarnessError> {
    let path = dir.join(TEACHER_HASH_FILE);
    if !path.is_file() {
        return Err(HarnessError::MissingRunData(format!("{} (train the student first)", path.display())));
    }
    Ok(read(&path)?.trim().to_string())
}

/// Phase 2: trains the weaker stream against the frozen teacher into
/// `<out>/student`.
pub fn train_student(cfg: &RunConfig) -> Result<Vec<TrainRunRecord>, HarnessError> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, None)?;
    let data = load_data(cfg)?;
    let dir = cfg.out.join("student");
    write(&dir.join(TEACHER_HASH_FILE), format!("{}\n", teacher.hash))?;
    let run = distill::train_student(&data, &teacher.network, cfg.direction, cfg.bridge, cfg.weights, &cfg.train_config())
        .map_err(|e| keep_last_good(&dir, cfg, e))?;
    save_params(&dir.join(STUDENT_FILE), &run.network.params)?;
    save_params(&dir.join(ADAPTER_FILE), &run.adapter.params)?;
    write_phase(&dir, cfg, &run.records)?;
    Ok(run.records)
}

/// The two trained streams as `(rgb, flow)`, checking the teacher against
/// the hash the student was trained with.
fn load_streams(cfg: &RunConfig) -> Result<(StreamNetwork, StreamNetwork), HarnessError> {
    let student_dir = cfg.out.join("student");
    let student = load_network(student_dir.join(STUDENT_FILE), cfg, cfg.direction.student())?;
    let hash = recorded_hash(&student_dir)?;
    let teacher = load_teacher(cfg, Some(&hash))?.network;
    Ok(match cfg.direction.student() {
        StreamKind::Rgb => (student, teacher),
        StreamKind::Flow => (teacher, student),
    })
}

/// Phase 3: trains the fusion layer over both frozen streams into
/// `<out>/fusion`.
pub fn train_fusion(cfg: &RunConfig) -> Result<Vec<TrainRunRecord>, HarnessError> {
    cfg.validate()?;
    let (rgb, flow) = load_streams(cfg)?;
    let data = load_data(cfg)?;
    let dir = cfg.out.join("fusion");
    let run = distill::train_fusion(&data, &rgb, &flow, &cfg.train_config()).map_err(|e| keep_last_good(&dir, cfg, e))?;
    save_params(&dir.join(FUSION_FILE), &run.params)?;
    write_phase(&dir, cfg, &run.records)?;
    Ok(run.records)
}

/// Test-split accuracies of one finished pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub regime: String,
    pub pipeline: String,
    pub rgb: f64,
    pub flow: f64,
    pub fused: f64,
}

fn per_class_lines(out: &mut String, name: &str, acc: &Accuracy) {
    for (class, a) in acc.per_class.iter().enumerate() {
        let v = a.map_or(String::from("nan"), fmt_sig6);
        let _ = writeln!(out, "{name},{class},{v}");
    }
}

/// Evaluates teacher, student and fusion on the test split and writes
/// `<out>/eval.csv` plus per-class accuracies.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalRow, HarnessError> {
    cfg.validate()?;
    let (rgb, flow) = load_streams(cfg)?;
    let fusion = checkpoint::load(&require(cfg.out.join("fusion").join(FUSION_FILE))?)?;
    let data = load_data(cfg)?;
    let test = &data.test;
    let rgb_logits = stream_logits(&rgb, test)?;
    let flow_logits = stream_logits(&flow, test)?;
    let fused = fused_logits(&fusion, &rgb_logits, &flow_logits)?;
    let accs = [
        ("rgb", evaluate_logits(&rgb_logits, &test.labels)?),
        ("flow", evaluate_logits(&flow_logits, &test.labels)?),
        ("fused", evaluate_logits(&fused, &test.labels)?),
    ];
    let row = EvalRow {
        regime: cfg.regime.name().to_string(),
        pipeline: cfg.pipeline_name().to_string(),
        rgb: accs[0].1.top1,
        flow: accs[1].1.top1,
        fused: accs[2].1.top1,
    };
    let eval = format!(
        "{EVAL_HEADER}\n{},{},{},{},{}\n",
        row.regime,
        row.pipeline,
        fmt_sig6(row.rgb),
        fmt_sig6(row.flow),
        fmt_sig6(row.fused)
    );
    write(&cfg.out.join(EVAL_FILE), eval)?;
    let mut per_class = String::from("stream,class,accuracy\n");
    for (name, acc) in &accs {
        per_class_lines(&mut per_class, name, acc);
    }
    write(&cfg.out.join(PER_CLASS_FILE), per_class)?;
    Ok(row)
}

/// Trains one student and fusion layer per bridge against the existing
/// teacher, writing `<out>/sweep/<teacher>-<student>/` per run, the summary
/// and the selected bridge.
pub fn sweep(cfg: &RunConfig) -> Result<distill::SweepOutcome, HarnessError> {
    cfg.validate()?;
    let teacher = load_teacher(cfg, None)?;
    let data = load_data(cfg)?;
    let outcome = sweep_bridges(
        &data,
        &teacher.network,
        &teacher.hash,
        cfg.direction,
        cfg.weights,
        &cfg.train_config(),
        cfg.parallel,
    );
    let root = cfg.out.join(SWEEP_DIR);
    for run in &outcome.runs {
        let dir = root.join(format!("{}-{}", run.bridge.teacher_tap, run.bridge.student_tap));
        let run_cfg = RunConfig {
            bridge: run.bridge,
            ..cfg.clone()
        };
        write(&dir.join(TEACHER_HASH_FILE), format!("{}\n", run.teacher_hash))?;
        match &run.result {
            Ok(r) => {
                save_params(&dir.join(STUDENT_FILE), &r.student.network.params)?;
                save_params(&dir.join(ADAPTER_FILE), &r.student.adapter.params)?;
                save_params(&dir.join(FUSION_FILE), &r.fusion.params)?;
                let records: Vec<TrainRunRecord> = r.student.records.iter().chain(&r.fusion.records).copied().collect();
                write_phase(&dir, &run_cfg, &records)?;
            }
            Err(e) => {
                write(&dir.join(CONFIG_FILE), run_cfg.to_text())?;
                write(&dir.join("error.txt"), format!("{e}\n"))?;
                if let DistillError::Diverged { last_good, records, .. } = e {
                    write(&dir.join(METRICS_FILE), metrics_csv(records))?;
                    save_params(&dir.join(LAST_GOOD_FILE), last_good)?;
                }
            }
        }
    }
    write(&root.join(SWEEP_SUMMARY_FILE), sweep_summary_csv(&outcome))?;
    let best = outcome
        .best
        .map_or(String::from("none\n"), |i| format!("{}\n", outcome.runs[i].bridge));
    write(&root.join(SWEEP_BEST_FILE), best)?;
    Ok(outcome)
}
