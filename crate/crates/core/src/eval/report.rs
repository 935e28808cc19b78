use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{extract_features, linear_probe, rankme, FeatureKind, ProbeConfig};
use crate::data::{ImageSample, TASK_CLASS, TASK_COUNT, TASK_DIST};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::trainer::TrainState;

pub const REPORT_CSV_HEADER: &str = "checkpoint,mode,task,metric,value";
const METRIC_ACCURACY: &str = "probe_accuracy";
const METRIC_RANKME: &str = "rankme";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskGroup {
    /// Semantic recognition.
    High,
    /// Counting and geometry.
    Low,
    Other,
}

pub fn task_group(task: &str) -> TaskGroup {
    match task {
        TASK_CLASS | "coarse_class" => TaskGroup::High,
        TASK_COUNT | TASK_DIST => TaskGroup::Low,
        _ => TaskGroup::Other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub checkpoint: String,
    pub mode: Mode,
    /// Empty for per-checkpoint metrics.
    pub task: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<ReportRow>,
    pub checkpoints: Vec<(String, Mode)>,
    /// High-level tasks first, then low-level, then the rest.
    pub tasks: Vec<String>,
    pub feature_kind: FeatureKind,
}

/// Probes every checkpoint on every task and computes RankMe per checkpoint.
/// Rankings are reported, never asserted.
pub fn ablation_report(
    checkpoints: &[(&str, &TrainState)],
    samples: &[ImageSample],
    tasks: &[&str],
    kind: FeatureKind,
    probe: &ProbeConfig,
) -> Result<AblationReport> {
    if checkpoints.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a comparison needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to report".into()));
    }
    let mut ordered: Vec<String> = tasks.iter().map(|t| t.to_string()).collect();
    ordered.sort_by_key(|t| task_group(t));

    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (id, state) in checkpoints {
        let mode = state.model.mode;
        ids.push((id.to_string(), mode));
        let emb = extract_features(&state.context.encoder, &state.model, samples, kind, id)?;
        for task in &ordered {
            let res = linear_probe(&emb.features, emb.task_labels(task)?, task, probe)?;
            rows.push(ReportRow {
                checkpoint: id.to_string(),
                mode,
                task: task.clone(),
                metric: METRIC_ACCURACY.into(),
                value: res.accuracy,
            });
        }
        rows.push(ReportRow {
            checkpoint: id.to_string(),
            mode,
            task: String::new(),
            metric: METRIC_RANKME.into(),
            value: rankme(&emb.features)?,
        });
    }
    Ok(AblationReport {
        rows,
        checkpoints: ids,
        tasks: ordered,
        feature_kind: kind,
    })
}

impl AblationReport {
    pub fn accuracy(&self, checkpoint: &str, task: &str) -> Option<f64> {
        self.find(checkpoint, task, METRIC_ACCURACY)
    }

    pub fn rankme(&self, checkpoint: &str) -> Option<f64> {
        self.find(checkpoint, "", METRIC_RANKME)
    }

    fn find(&self, checkpoint: &str, task: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.checkpoint == checkpoint && r.task == task && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.checkpoint, r.mode, r.task, r.metric, r.value).expect("writing to a String");
        }
        out
    }

    /// First checkpoint trained in `mode`.
    fn by_mode(&self, mode: Mode) -> Option<&str> {
        self.checkpoints.iter().find(|(_, m)| *m == mode).map(|(id, _)| id.as_str())
    }

    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let id_w = self
            .checkpoints
            .iter()
            .map(|(id, _)| id.len())
            .chain(["checkpoint".len(), "without [CLS] loss".len()])
            .max()
            .unwrap_or(10);
        let mode_w = self.checkpoints.iter().map(|(_, m)| m.as_str().len()).max().unwrap_or(4).max(4);
        let task_w = self.tasks.iter().map(String::len).max().unwrap_or(6).max(8);

        let mut out = String::new();
        writeln!(out, "features: {}", self.feature_kind).unwrap();
        let groups: Vec<String> = [
            (TaskGroup::High, "high-level"),
            (TaskGroup::Low, "low-level"),
            (TaskGroup::Other, "other"),
        ]
        .iter()
        .filter_map(|(g, label)| {
            let members: Vec<&str> = self
                .tasks
                .iter()
                .filter(|t| task_group(t) == *g)
                .map(String::as_str)
                .collect();
            (!members.is_empty()).then(|| format!("{label}: {}", members.join(" ")))
        })
        .collect();
        writeln!(out, "{}", groups.join(" | ")).unwrap();
        write!(out, "{:<id_w$}  {:<mode_w$}", "checkpoint", "mode").unwrap();
        for t in &self.tasks {
            write!(out, "  {t:>task_w$}").unwrap();
        }
        writeln!(out, "  {:>task_w$}", "rankme").unwrap();
        for (id, mode) in &self.checkpoints {
            write!(out, "{id:<id_w$}  {:<mode_w$}", mode.as_str()).unwrap();
            for t in &self.tasks {
                write!(out, "  {:>task_w$}", cell(self.accuracy(id, t))).unwrap();
            }
            writeln!(out, "  {:>task_w$}", cell(self.rankme(id))).unwrap();
        }

        writeln!(out, "\n[CLS] ablation").unwrap();
        write!(out, "{:<id_w$}", "").unwrap();
        for t in &self.tasks {
            write!(out, "  {t:>task_w$}").unwrap();
        }
        out.push('\n');
        for (label, mode) in [("without [CLS] loss", Mode::PilamimNoCls), ("with [CLS] loss", Mode::Pilamim)] {
            write!(out, "{label:<id_w$}").unwrap();
            let id = self.by_mode(mode);
            for t in &self.tasks {
                write!(out, "  {:>task_w$}", cell(id.and_then(|id| self.accuracy(id, t)))).unwrap();
            }
            out.push('\n');
        }

        writeln!(out, "\nranking by probe accuracy (recorded, not asserted)").unwrap();
        for t in &self.tasks {
            let mut scored: Vec<(&str, f64)> = self
                .checkpoints
                .iter()
                .filter_map(|(id, _)| self.accuracy(id, t).map(|v| (id.as_str(), v)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            let names: Vec<&str> = scored.iter().map(|(id, _)| *id).collect();
            writeln!(out, "{t:<task_w$}  {}", names.join(" > ")).unwrap();
        }
        out
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        let txt = dir.join("report.txt");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        Ok((csv, txt))
    }
}
