use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::metrics::fmt_sig6;
use super::train::{evaluate_logits, fused_logits, stream_logits, train_fusion, train_student, FusionRun, StudentRun, TrainConfig};
use super::{BridgeConfig, DistillDirection, DistillError, LossWeights};
use crate::dataset::Dataset;
use crate::stream::StreamKind;
use crate::stream::StreamNetwork;

pub const SWEEP_HEADER: &str = "teacher_tap,student_tap,student_acc,fused_acc,final_total";

#[derive(Clone, Debug)]
pub struct SweepRunResult {
    pub student: StudentRun,
    pub fusion: FusionRun,
    pub student_acc: f64,
    pub fused_acc: f64,
    /// Total loss of the last student epoch (0 when no epoch ran).
    pub final_total: f64,
}

#[derive(Debug)]
pub struct SweepRun {
    pub bridge: BridgeConfig,
    pub teacher_hash: String,
    pub result: Result<SweepRunResult, DistillError>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Always nine runs, in [`BridgeConfig::all`] order.
    pub runs: Vec<SweepRun>,
    /// Index of the selected run; `None` only if every run failed.
    pub best: Option<usize>,
}

/// Highest student accuracy, then lowest final total loss, then the earliest
/// bridge in teacher-major front/medium/rear order. Failed runs never win.
pub fn select_best(scores: &[Option<(f64, f64)>]) -> Option<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some((acc, total)) = *s else { continue };
        let better = match best {
            None => true,
            Some((_, bacc, btotal)) => acc > bacc || (acc == bacc && total < btotal),
        };
        if better {
            best = Some((i, acc, total));
        }
    }
    best.map(|b| b.0)
}

fn run_one(
    data: &Dataset,
    teacher: &StreamNetwork,
    direction: DistillDirection,
    bridge: BridgeConfig,
    weights: LossWeights,
    cfg: &TrainConfig,
) -> Result<SweepRunResult, DistillError> {
    let student = train_student(data, teacher, direction, bridge, weights, cfg)?;
    let (rgb, flow) = match direction.student() {
        StreamKind::Rgb => (&student.network, teacher),
        StreamKind::Flow => (teacher, &student.network),
    };
    let fusion = train_fusion(data, rgb, flow, cfg)?;
    let student_acc = evaluate_logits(&stream_logits(&student.network, &data.test)?, &data.test.labels)?.top1;
    let fused = fused_logits(
        &fusion.params,
        &stream_logits(rgb, &data.test)?,
        &stream_logits(flow, &data.test)?,
    )?;
    let fused_acc = evaluate_logits(&fused, &data.test.labels)?.top1;
    let final_total = student.records.last().map_or(0.0, |r| r.loss.total);
    Ok(SweepRunResult {
        student,
        fusion,
        student_acc,
        fused_acc,
        final_total,
    })
}

/// Trains one student (and its fusion layer) per bridge of
/// [`BridgeConfig::all`], each from the same seed and the same frozen
/// teacher. Up to `parallel` runs execute at once; results land in fixed
/// slots, so the outcome does not depend on scheduling.
pub fn sweep_bridges(
    data: &Dataset,
    teacher: &StreamNetwork,
    teacher_hash: &str,
    direction: DistillDirection,
    weights: LossWeights,
    cfg: &TrainConfig,
    parallel: usize,
) -> SweepOutcome {
    let bridges = BridgeConfig::all();
    let slots: Vec<Mutex<Option<Result<SweepRunResult, DistillError>>>> = bridges.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= bridges.len() {
            break;
        }
        let r = run_one(data, teacher, direction, bridges[i], weights, cfg);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    let workers = parallel.clamp(1, bridges.len());
    if workers == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(worker);
            }
        });
    }
    let runs: Vec<SweepRun> = bridges
        .iter()
        .zip(slots)
        .map(|(&bridge, slot)| SweepRun {
            bridge,
            teacher_hash: teacher_hash.to_string(),
            result: slot.into_inner().expect("slot lock").expect("every slot is filled"),
        })
        .collect();
    let scores: Vec<Option<(f64, f64)>> = runs
        .iter()
        .map(|r| r.result.as_ref().ok().map(|x| (x.student_acc, x.final_total)))
        .collect();
    SweepOutcome {
        best: select_best(&scores),
        runs,
    }
}

/// One row per successful run, in sweep order.
pub fn sweep_summary_csv(outcome: &SweepOutcome) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for run in &outcome.runs {
        if let Ok(r) = &run.result {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                run.bridge.teacher_tap,
                run.bridge.student_tap,
                fmt_sig6(r.student_acc),
                fmt_sig6(r.fused_acc),
                fmt_sig6(r.final_total)
            );
        }
    }
    out
}
