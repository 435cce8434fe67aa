//! Summary table across evaluations: one row per (case, strategy) with AUC,
//! recall, precision and F2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plasma_views::evaluation::{f2, AlarmConfig, MetricsReport};
use plasma_views::Error;

use crate::commands::RunRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub case: String,
    pub new_machine: String,
    pub strategy: String,
    pub auc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    /// Recomputed from this row's own recall and precision.
    pub f2: f64,
    pub shots: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub rows: Vec<Row>,
    pub alarm: Option<AlarmConfig>,
    /// (root label, mean view DTW, mean tsaug DTW, Wilcoxon p) per run root.
    pub dtw: Vec<(String, f64, f64, Option<f64>)>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Gathers every `eval/<strategy>/` under each run root. Roots are labeled
/// relative to `base` so the table does not depend on where runs live.
pub fn collect(roots: &[PathBuf], base: &Path) -> Result<(Table, Vec<PathBuf>), Error> {
    let mut table = Table::default();
    let mut inputs = Vec::new();
    for root in roots {
        let eval = root.join("eval");
        if eval.is_dir() {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&eval)
                .map_err(|e| Error::Io {
                    path: eval.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("run.json").is_file() && p.join("metrics.json").is_file())
                .collect();
            dirs.sort();
            for dir in dirs {
                let run: RunRecord = read_json(&dir.join("run.json"))?;
                let metrics: MetricsReport = read_json(&dir.join("metrics.json"))?;
                table.alarm.get_or_insert(metrics.alarm);
                table.rows.push(Row {
                    case: run.case.map_or("-".into(), |c| c.to_string()),
                    new_machine: run.new_machine.map_or("-".into(), |m| m.to_string()),
                    strategy: run.strategy.to_string(),
                    auc: metrics.auc,
                    recall: metrics.recall,
                    precision: metrics.precision,
                    f2: f2(metrics.precision, metrics.recall),
                    shots: metrics.counts.total(),
                });
                inputs.push(dir.join("run.json"));
                inputs.push(dir.join("metrics.json"));
            }
        }
        let dtw = root.join("dtw").join("dtw_report.json");
        if dtw.is_file() {
            let r: plasma_views::analysis::ComparisonReport = read_json(&dtw)?;
            let label = crate::manifest::relative(base, root);
            table.dtw.push((
                if label.is_empty() { ".".into() } else { label },
                r.mean_view,
                r.mean_tsaug,
                r.wilcoxon.map(|w| w.p_value),
            ));
            inputs.push(dtw);
        }
    }
    table
        .rows
        .sort_by(|a, b| (&a.case, &a.new_machine, &a.strategy).cmp(&(&b.case, &b.new_machine, &b.strategy)));
    Ok((table, inputs))
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,new_machine,strategy,auc,recall,precision,f2,shots\n");
        for r in &self.rows {
            let auc = r.auc.map_or(String::new(), |a| a.to_string());
            let _ = writeln!(
                s,
                "{},{},{},{auc},{},{},{},{}",
                r.case, r.new_machine, r.strategy, r.recall, r.precision, r.f2, r.shots
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(a) = &self.alarm {
            let _ = writeln!(
                s,
                "operating point: t_high = {}, t_low = {}, h = {}, dt_req = {} ms (chosen here, not a published value)",
                a.t_high, a.t_low, a.hysteresis, a.dt_req_ms
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:<8} {:<10} {:>7} {:>7} {:>9} {:>7} {:>6}",
            "case", "machine", "strategy", "AUC", "recall", "precision", "F2", "shots"
        );
        for r in &self.rows {
            let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.3}"));
            let _ = writeln!(
                s,
                "{:<16} {:<8} {:<10} {:>7} {:>7.3} {:>9.3} {:>7.3} {:>6}",
                r.case, r.new_machine, r.strategy, auc, r.recall, r.precision, r.f2, r.shots
            );
        }
        for (root, view, tsaug, p) in &self.dtw {
            let p = p.map_or("-".to_string(), |p| format!("{p:.3e}"));
            let _ = writeln!(s, "DTW to originals ({root}): views {view:.3}, tsaug {tsaug:.3}, Wilcoxon p {p}");
        }
        s
    }
}
