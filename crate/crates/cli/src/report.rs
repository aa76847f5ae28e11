use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use wcond::io::write_atomic;

use crate::Format;

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: Vec<String>,
    pub seeds: Vec<u64>,
    pub results: Value,
    pub tool_version: String,
    pub wall_time_s: f64,
}

/// Header plus rows of already-formatted fields.
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, fields: Vec<String>) {
        debug_assert_eq!(fields.len(), self.header.len());
        self.rows.push(fields);
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Quotes a free-text field when it contains a delimiter, quote or newline.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `<stem>.json` and `<stem>.csv` atomically when a stem is given,
/// and prints the chosen format to stdout.
pub fn write_outputs(stem: Option<&Path>, format: Format, report: &RunReport, csv: &Csv) -> wcond::Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    let csv = csv.render();
    if let Some(stem) = stem {
        write_atomic(&with_suffix(stem, ".json"), json.as_bytes())?;
        write_atomic(&with_suffix(stem, ".csv"), csv.as_bytes())?;
    }
    match format {
        Format::Json => println!("{json}"),
        Format::Csv => print!("{csv}"),
    }
    Ok(())
}

/// `<stem><suffix>` in the stem's directory.
pub fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = stem.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    stem.with_file_name(name)
}
