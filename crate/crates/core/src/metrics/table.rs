use std::fmt::Write;

use serde::{Deserialize, Serialize};

/// A labelled numeric table: one row per configuration, one column per
/// language, with an optional trailing "Overall" column.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub row_header: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn new(title: impl Into<String>, row_header: impl Into<String>, columns: Vec<String>) -> Self {
        Self { title: title.into(), row_header: row_header.into(), columns, rows: Vec::new() }
    }

    /// Language columns followed by "Overall".
    pub fn per_language(title: impl Into<String>, row_header: impl Into<String>, languages: &[String]) -> Self {
        let mut cols = languages.to_vec();
        cols.push("Overall".into());
        Self::new(title, row_header, cols)
    }

    pub fn push(&mut self, label: impl Into<String>, values: Vec<f64>) {
        self.rows.push((label.into(), values));
    }

    pub fn to_markdown(&self, decimals: usize) -> String {
        let mut s = String::new();
        if !self.title.is_empty() {
            let _ = writeln!(s, "### {}\n", self.title);
        }
        let _ = writeln!(s, "| {} | {} |", self.row_header, self.columns.join(" | "));
        let _ = writeln!(s, "|---|{}", "---:|".repeat(self.columns.len()));
        for (label, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.decimals$}")).collect();
            let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{},{}", self.row_header, self.columns.join(","));
        for (label, vals) in &self.rows {
            let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{label},{}", cells.join(","));
        }
        s
    }
}
