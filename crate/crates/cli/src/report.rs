use std::io::Write;

use clap::ValueEnum;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Md,
}

/// A command's output: the full JSON document, a flat table for CSV and
/// markdown, and summary lines shown above the markdown table.
pub struct Report {
    pub json: Value,
    pub summary: Vec<(String, String)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(json: Value, header: &[&str]) -> Self {
        Self { json, summary: Vec::new(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    pub fn render(&self, format: Format) -> std::io::Result<Vec<u8>> {
        match format {
            Format::Json => {
                let mut out = serde_json::to_vec_pretty(&self.json)?;
                out.push(b'\n');
                Ok(out)
            }
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(&self.header)?;
                for r in &self.rows {
                    w.write_record(r)?;
                }
                w.into_inner().map_err(|e| e.into_error())
            }
            Format::Md => {
                let mut out = Vec::new();
                for (k, v) in &self.summary {
                    writeln!(out, "- **{k}**: {v}")?;
                }
                if !self.summary.is_empty() {
                    writeln!(out)?;
                }
                let cell = |s: &String| s.replace('|', "\\|");
                writeln!(out, "| {} |", self.header.iter().map(cell).collect::<Vec<_>>().join(" | "))?;
                writeln!(out, "|{}", " --- |".repeat(self.header.len()))?;
                for r in &self.rows {
                    writeln!(out, "| {} |", r.iter().map(cell).collect::<Vec<_>>().join(" | "))?;
                }
                Ok(out)
            }
        }
    }
}

pub fn tokens_cell(texts: &[&str]) -> String {
    texts.join(" ")
}

pub fn num(v: f64) -> String {
    format!("{v:.6e}")
}
