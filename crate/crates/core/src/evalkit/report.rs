use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::TurnState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub name: TurnState,
    /// `None` where the metric's denominator is zero.
    pub acc: Option<f64>,
    pub miss: Option<f64>,
    pub fa: Option<f64>,
    /// Samples labelled with this class.
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub test_set: String,
    pub classes: Vec<ClassResult>,
    pub overall_acc: f64,
    pub mean_latency_ms: Option<f64>,
    pub n_samples: usize,
}

/// Fraction rendered as a percentage with two decimals; `--` when undefined.
pub fn format_pct(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "--".to_string(),
    }
}

/// Plain-text table: one row per class, then overall accuracy and latency.
pub fn render_table(reports: &[Report]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "mode: {}  test set: {}  samples: {}", r.mode, r.test_set, r.n_samples);
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>6}", "class", "Acc(%)", "Miss(%)", "FA(%)", "n");
        for c in &r.classes {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8} {:>6}",
                c.name.as_str(),
                format_pct(c.acc),
                format_pct(c.miss),
                format_pct(c.fa),
                c.n
            );
        }
        let lat = r.mean_latency_ms.map_or("--".to_string(), |l| format!("{l:.2}"));
        let _ = writeln!(out, "overall Acc(%) {}  mean latency (ms) {}", format_pct(Some(r.overall_acc)), lat);
        out.push('\n');
    }
    out
}

/// Writes `<stem>.json` and `<stem>.txt`, after checking every class in
/// `required` is present.
pub fn emit_report(reports: &[Report], required: &[TurnState], dir: &Path, stem: &str) -> Result<(), EvalError> {
    for r in reports {
        if let Some(&missing) = required.iter().find(|s| !r.classes.iter().any(|c| c.name == **s)) {
            return Err(EvalError::MissingClass(missing));
        }
    }
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(reports).map_err(std::io::Error::from)?;
    std::fs::write(dir.join(format!("{stem}.json")), json + "\n")?;
    std::fs::write(dir.join(format!("{stem}.txt")), render_table(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> Report {
        Report {
            mode: "unified".into(),
            test_set: "toy".into(),
            classes: vec![ClassResult {
                name: TurnState::Complete,
                acc: Some(0.8),
                miss: Some(0.25),
                fa: None,
                n: 4,
            }],
            overall_acc: 0.8,
            mean_latency_ms: Some(1.5),
            n_samples: 10,
        }
    }

    #[test]
    fn percentages() {
        assert_eq!(format_pct(Some(0.8)), "80.00");
        assert_eq!(format_pct(Some(1.0 / 6.0)), "16.67");
        assert_eq!(format_pct(None), "--");
    }

    #[test]
    fn single_class_row_and_round_trip() {
        let r = report();
        let table = render_table(std::slice::from_ref(&r));
        assert_eq!(table.lines().filter(|l| l.starts_with("complete")).count(), 1);
        let back: Report = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            emit_report(&[r.clone()], &[TurnState::Wait], dir.path(), "x"),
            Err(EvalError::MissingClass(TurnState::Wait))
        ));
        emit_report(&[r], &[TurnState::Complete], dir.path(), "x").unwrap();
        assert!(dir.path().join("x.txt").exists());
    }
}
