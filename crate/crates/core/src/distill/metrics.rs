use std::fmt::Write as _;

use super::{LossBreakdown, TrainRunRecord};

pub const METRICS_HEADER: &str = "phase,epoch,l1,l2,l3,total,train_acc,test_acc,seconds";

/// `%g`-style rendering with 6 significant digits: fixed notation for
/// exponents in `[-4, 6)`, scientific otherwise, trailing zeros dropped.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn metrics_csv(records: &[TrainRunRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.phase,
            r.epoch,
            fmt_sig6(r.loss.l1),
            fmt_sig6(r.loss.l2),
            fmt_sig6(r.loss.l3),
            fmt_sig6(r.loss.total),
            fmt_sig6(r.train_acc),
            fmt_sig6(r.test_acc),
            fmt_sig6(r.seconds),
        );
    }
    out
}

/// Reads a metrics file back (values carry only the printed precision).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<TrainRunRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err("metrics file lacks the expected header".into());
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(format!("metrics line {}: expected 9 fields", n + 2));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("metrics line {}: {e}", n + 2));
            Ok(TrainRunRecord {
                phase: f[0].parse()?,
                epoch: f[1].parse().map_err(|e| format!("metrics line {}: {e}", n + 2))?,
                loss: LossBreakdown {
                    l1: num(2)?,
                    l2: num(3)?,
                    l3: num(4)?,
                    total: num(5)?,
                },
                train_acc: num(6)?,
                test_acc: num(7)?,
                seconds: num(8)?,
            })
        })
        .collect()
}
