//! CSV output for training histories and AE on/off comparisons.

use std::io::{self, Write};

use crate::experiments::Provenance;
use crate::solver::{TrainHistory, TrainRecord};

pub const RUN_HEADER: &str = "step,loss,y0,runtime_s";
pub const COMPARE_HEADER: &str = "track,step,loss,y0,runtime_s";

/// Reference value printed in the footer of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footer {
    pub oracle: Option<f64>,
    pub oracle_std_error: f64,
    pub provenance: Option<Provenance>,
    /// Lower bound for American runs.
    pub floor: Option<f64>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

fn record_line(r: &TrainRecord) -> String {
    format!("{},{},{},{:.6}", r.step, r.loss, r.y0, r.elapsed_s)
}

pub fn relative_error(estimate: f64, reference: f64) -> f64 {
    (estimate - reference).abs() / reference.abs()
}

/// Header, one row per record, then `#` footers.
pub fn write_run_csv(mut w: impl Write, history: &TrainHistory, footer: &Footer) -> io::Result<()> {
    writeln!(w, "{RUN_HEADER}")?;
    for r in &history.records {
        writeln!(w, "{}", record_line(r))?;
    }
    match footer.status {
        RunStatus::Completed => writeln!(w, "# status=completed")?,
        RunStatus::Diverged { step } => writeln!(w, "# status=diverged step={step}")?,
    }
    match (footer.oracle, footer.provenance) {
        (Some(v), Some(p)) => {
            writeln!(w, "# oracle={v}")?;
            if footer.oracle_std_error > 0.0 {
                writeln!(w, "# oracle_std_error={}", footer.oracle_std_error)?;
            }
            writeln!(w, "# provenance={p}")?;
            if let Some(last) = history.last() {
                writeln!(w, "# final_relative_error={}", relative_error(last.y0, v))?;
            }
        }
        _ => writeln!(w, "# oracle=none")?,
    }
    if let Some(f) = footer.floor {
        writeln!(w, "# european_floor={f}")?;
    }
    Ok(())
}

/// Interleaves two histories by step. Rows carry `ae` or `no_ae` in the
/// `track` column.
pub fn write_compare_csv(mut w: impl Write, with_ae: &TrainHistory, without_ae: &TrainHistory) -> io::Result<()> {
    writeln!(w, "{COMPARE_HEADER}")?;
    let (mut i, mut j) = (0, 0);
    let (a, b) = (&with_ae.records, &without_ae.records);
    while i < a.len() || j < b.len() {
        let take_a = j >= b.len() || (i < a.len() && a[i].step <= b[j].step);
        if take_a {
            writeln!(w, "ae,{}", record_line(&a[i]))?;
            i += 1;
        } else {
            writeln!(w, "no_ae,{}", record_line(&b[j]))?;
            j += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, y0: f64) -> TrainRecord {
        TrainRecord { step, loss: 1.5, y0, elapsed_s: 0.25 }
    }

    #[test]
    fn run_csv_layout() {
        let h = TrainHistory { records: vec![rec(0, 8.0), rec(200, 8.4)] };
        let footer = Footer {
            oracle: Some(8.4),
            oracle_std_error: 0.0,
            provenance: Some(Provenance::ClosedForm),
            floor: None,
            status: RunStatus::Completed,
        };
        let mut buf = Vec::new();
        write_run_csv(&mut buf, &h, &footer).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], RUN_HEADER);
        assert_eq!(lines[1], "0,1.5,8,0.250000");
        assert_eq!(lines[2], "200,1.5,8.4,0.250000");
        assert!(lines[3..].iter().all(|l| l.starts_with('#')));
        assert!(text.contains("# final_relative_error=0\n"));
        assert!(text.contains("# provenance=closed-form"));
    }

    #[test]
    fn diverged_run_keeps_rows() {
        let h = TrainHistory { records: vec![rec(0, 1.0)] };
        let footer = Footer {
            oracle: None,
            oracle_std_error: 0.0,
            provenance: None,
            floor: None,
            status: RunStatus::Diverged { step: 17 },
        };
        let mut buf = Vec::new();
        write_run_csv(&mut buf, &h, &footer).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,loss,y0,runtime_s\n0,"));
        assert!(text.contains("# status=diverged step=17"));
    }

    #[test]
    fn compare_interleaves_by_step() {
        let a = TrainHistory { records: vec![rec(0, 1.0), rec(200, 2.0)] };
        let b = TrainHistory { records: vec![rec(0, 3.0), rec(200, 4.0)] };
        let mut buf = Vec::new();
        write_compare_csv(&mut buf, &a, &b).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let tracks: Vec<_> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(tracks, ["ae", "no_ae", "ae", "no_ae"]);
    }
}
