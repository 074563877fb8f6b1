//! Report rows and CSV files.
//!
//! Every report the tool writes — training reports, evaluation reports,
//! ablation tables — shares one frozen row schema so `report` can merge
//! them without guessing. Floats are rendered with Rust's shortest
//! round-trip formatting, so identical runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use vibmil::synthgen::Corruption;

use crate::CliError;

/// The frozen column order of every report CSV. Changing this breaks the
/// golden-file test on purpose.
pub const CSV_HEADER: &str = "kind,parameter,value,status,macro_auc,macro_f1,v_score,\
gate_recall,knn_mean,knn_max,val_recall,corruptions";

/// Header of the per-epoch training log, which is a trace rather than a
/// report and is therefore not merged by `report`.
pub const LOG_HEADER: &str = "stage,epoch,loss,ce,kl,val_recall";

/// One report row. `kind`/`parameter`/`value` identify what was measured:
/// `model,model,finetuned` for pipeline reports, `head,head,attention` for
/// evaluation rows, `ablation,beta,0.1` for sweep rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub kind: String,
    pub parameter: String,
    pub value: String,
    /// "ok" or "diverged".
    pub status: String,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    pub v_score: Option<f64>,
    pub gate_recall: Option<f64>,
    pub knn_mean: Option<f64>,
    pub knn_max: Option<f64>,
    pub val_recall: Option<f64>,
    /// `-` when the dataset is pristine, else `kind:severity:seed`
    /// entries joined by `;` in application order.
    pub corruptions: String,
}

impl ReportRow {
    pub fn new(kind: &str, parameter: &str, value: &str) -> ReportRow {
        ReportRow {
            kind: kind.into(),
            parameter: parameter.into(),
            value: value.into(),
            status: "ok".into(),
            corruptions: "-".into(),
            ..ReportRow::default()
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut line = String::new();
        write!(
            line,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            self.parameter,
            self.value,
            self.status,
            cell(self.macro_auc),
            cell(self.macro_f1),
            cell(self.v_score),
            cell(self.gate_recall),
            cell(self.knn_mean),
            cell(self.knn_max),
            cell(self.val_recall),
            self.corruptions,
        )
        .expect("writing to a String cannot fail");
        line
    }

    /// Parses one data line; `None` when the field count is wrong.
    pub fn parse(line: &str) -> Option<ReportRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return None;
        }
        Some(ReportRow {
            kind: fields[0].to_string(),
            parameter: fields[1].to_string(),
            value: fields[2].to_string(),
            status: fields[3].to_string(),
            macro_auc: parse_cell(fields[4])?,
            macro_f1: parse_cell(fields[5])?,
            v_score: parse_cell(fields[6])?,
            gate_recall: parse_cell(fields[7])?,
            knn_mean: parse_cell(fields[8])?,
            knn_max: parse_cell(fields[9])?,
            val_recall: parse_cell(fields[10])?,
            corruptions: fields[11].to_string(),
        })
    }
}

/// Renders an optional metric: the shortest round-trip decimal, or empty.
pub(crate) fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Option<Option<f64>> {
    if s.is_empty() {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

/// Renders a dataset's corruption trail for the report column.
pub fn corruption_tag(corruptions: &[Corruption]) -> String {
    if corruptions.is_empty() {
        return "-".into();
    }
    corruptions
        .iter()
        .map(|c| format!("{}:{}:{}", c.kind, c.severity, c.seed))
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes a report CSV (header plus rows) atomically.
pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_line());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Reads a report CSV written by `write_report_csv`. Returns `None` when
/// the file does not carry the canonical header (it is some other CSV).
pub fn read_report_csv(path: &Path) -> Result<Option<Vec<ReportRow>>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Ok(None);
    }
    let mut rows = vec![];
    for (i, line) in lines.enumerate() {
        let row = ReportRow::parse(line).ok_or_else(|| {
            CliError::Io(format!("malformed row {} in {}", i + 2, path.display()))
        })?;
        rows.push(row);
    }
    Ok(Some(rows))
}

/// Writes a file via a temporary sibling and an atomic rename, so reruns
/// overwrite rather than append and a crash never leaves a half file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Io(format!("cannot write {}: {e}", path.display()));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}
