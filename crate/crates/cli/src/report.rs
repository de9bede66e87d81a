//! Markdown and TSV rendering. Every number is printed with four decimals and
//! rows follow configuration order, so equal inputs give byte-equal files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cams_core::aggregators::AggregatorKind;
use cams_core::metrics::{MetricKind, WorkerQuality};
use cams_core::model::{DatasetStats, WorkerRole};
use cams_core::pipeline::ResourceSelection;

use crate::CliError;

pub const QUALITY_STATS: [&str; 5] = ["MIN", "MEAN", "MAX", "STD", "TIAA"];

const NOTES: &str = "\
- TIAA: per instance with at least two answers from the role, the mean of (G(a,b) + G(b,a)) / 2 over unordered answer pairs; averaged over those instances only.
- METEOR_LITE uses exact and Porter-stem matching without a synonym stage; its values are not comparable with full METEOR.
- Per-worker quality is the mean over that worker's answered instances; MEAN weights workers equally and STD is the population deviation.
";

#[derive(Debug, Clone)]
pub struct CellScore {
    pub selection: ResourceSelection,
    pub kind: AggregatorKind,
    pub metric: MetricKind,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub label: String,
    pub stats: DatasetStats,
    /// Per metric, per role present in the data.
    pub quality: Vec<(MetricKind, BTreeMap<WorkerRole, WorkerQuality>)>,
    pub selections: Vec<ResourceSelection>,
    pub kinds: Vec<AggregatorKind>,
    pub cells: Vec<CellScore>,
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn quality_value(q: Option<&WorkerQuality>, stat: &str) -> String {
    let Some(q) = q else { return "-".into() };
    match stat {
        "MIN" => f4(q.min),
        "MEAN" => f4(q.mean),
        "MAX" => f4(q.max),
        "STD" => f4(q.std),
        _ => q.tiaa.map(f4).unwrap_or_else(|| "-".into()),
    }
}

fn mark(sel: &ResourceSelection, role: WorkerRole) -> String {
    if !sel.includes(role) {
        return String::new();
    }
    match (&sel.la_subset, role) {
        (Some(s), WorkerRole::LlmAggregator) => format!("O({})", s.len()),
        _ => "O".into(),
    }
}

impl Report {
    fn score(&self, sel: &ResourceSelection, kind: AggregatorKind, metric: MetricKind) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| &c.selection == sel && c.kind == kind && c.metric == metric)
            .map(|c| c.score)
    }

    fn metrics(&self) -> Vec<MetricKind> {
        self.quality.iter().map(|(m, _)| *m).collect()
    }

    fn quality_header() -> Vec<String> {
        let mut h = vec!["Data".to_string()];
        for stat in QUALITY_STATS {
            for role in WorkerRole::ALL {
                h.push(format!("{stat} {}", role.label()));
            }
        }
        h
    }

    fn quality_row(&self, per_role: &BTreeMap<WorkerRole, WorkerQuality>) -> Vec<String> {
        let mut row = vec![self.label.clone()];
        for stat in QUALITY_STATS {
            for role in WorkerRole::ALL {
                row.push(quality_value(per_role.get(&role), stat));
            }
        }
        row
    }

    fn aggregation_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["Group", "C.C.", "C.A.", "L.A."].iter().map(|s| s.to_string()).collect();
        h.extend(self.kinds.iter().map(|k| k.name().to_string()));
        h
    }

    fn aggregation_rows(&self, metric: MetricKind) -> Vec<Vec<String>> {
        self.selections
            .iter()
            .map(|sel| {
                let mut row = vec![sel.group().to_string()];
                row.extend(WorkerRole::ALL.iter().map(|r| mark(sel, *r)));
                row.extend(
                    self.kinds
                        .iter()
                        .map(|k| self.score(sel, *k, metric).map(f4).unwrap_or_else(|| "-".into())),
                );
                row
            })
            .collect()
    }

    pub fn markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Answer aggregation report: {}\n", self.label);

        let mut header = vec!["Data".to_string(), "Instances".to_string()];
        let mut row = vec![self.label.clone(), self.stats.instances.to_string()];
        for role in WorkerRole::ALL {
            let s = self.stats.role(role);
            header.push(format!("{} workers", role.label()));
            header.push(format!("{} answers", role.label()));
            row.push(s.workers.to_string());
            row.push(s.answers.to_string());
        }
        md_table(&mut out, &header, &[row]);

        if let Some(subset) = self.selections.iter().find_map(|s| s.la_subset.as_ref()) {
            let names: Vec<String> = subset.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(out, "L.A. ensemble ({}): {}\n", names.len(), names.join(", "));
        }

        let _ = writeln!(out, "## Quality of individual answers\n");
        for (metric, per_role) in &self.quality {
            let _ = writeln!(out, "### {metric}\n");
            md_table(&mut out, &Self::quality_header(), &[self.quality_row(per_role)]);
        }

        let _ = writeln!(out, "## Aggregation results\n");
        for metric in self.metrics() {
            let _ = writeln!(out, "### {metric}\n");
            md_table(&mut out, &self.aggregation_header(), &self.aggregation_rows(metric));
        }

        let _ = writeln!(out, "## Notes\n");
        out.push_str(NOTES);
        out
    }

    pub fn quality_tsv(&self, metric: MetricKind) -> String {
        let per_role = self
            .quality
            .iter()
            .find(|(m, _)| *m == metric)
            .map(|(_, q)| q.clone())
            .unwrap_or_default();
        tsv(&Self::quality_header(), &[self.quality_row(&per_role)])
    }

    pub fn aggregation_tsv(&self, metric: MetricKind) -> String {
        let mut header = self.aggregation_header();
        header.insert(0, "Selection".into());
        let rows: Vec<Vec<String>> = self
            .selections
            .iter()
            .zip(self.aggregation_rows(metric))
            .map(|(sel, mut row)| {
                row.insert(0, sel.label());
                row
            })
            .collect();
        tsv(&header, &rows)
    }
}

pub fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| CliError::io(path, e))
}

fn md_table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for row in rows {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out.push('\n');
}

pub fn tsv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}
