//! Side-by-side cost tables: computed values next to the stored reference
//! constants, with per-cell deltas.
//!
//! `run_cost_tables` renders all five published cost tables and writes a
//! plain-text and a JSON artifact. Rendering pulls references straight from
//! the versioned constants file, so the display and the reproduction checks
//! can never drift apart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ArchConfig;
use crate::error::Result;

use super::quantities::{computed_quantities, quantity};
use super::reference::ReferenceFile;

/// One value cell: computed, plus the published number when stored.
#[derive(Clone, Debug, Serialize)]
pub struct TableEntry {
    pub row: String,
    pub column: String,
    pub unit: &'static str,
    pub computed: f64,
    pub reference: Option<f64>,
    /// Percent deviation from the reference, when one exists.
    pub delta_pct: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostTable {
    pub id: String,
    pub title: String,
    pub entries: Vec<TableEntry>,
}

impl CostTable {
    fn rows(&self) -> Vec<&str> {
        let mut rows: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !rows.contains(&e.row.as_str()) {
                rows.push(&e.row);
            }
        }
        rows
    }

    fn columns(&self) -> Vec<(&str, &'static str)> {
        let mut cols: Vec<(&str, &'static str)> = Vec::new();
        for e in &self.entries {
            if !cols.iter().any(|(c, _)| *c == e.column) {
                cols.push((&e.column, e.unit));
            }
        }
        cols
    }

    /// Fixed-width text rendering, one row per model, reference beside the
    /// computed value.
    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let columns = self.columns();
        let mut grid: Vec<Vec<String>> = Vec::with_capacity(rows.len() + 1);

        let mut header = vec!["model".to_string()];
        header.extend(columns.iter().map(|(c, u)| format!("{c} ({u})")));
        grid.push(header);

        for row in &rows {
            let mut line = vec![row.to_string()];
            for (col, _) in &columns {
                let entry = self
                    .entries
                    .iter()
                    .find(|e| e.row == *row && e.column == *col)
                    .expect("every row/column pair is filled");
                let cell = match (entry.reference, entry.delta_pct) {
                    (Some(r), Some(d)) => {
                        format!("{r:.3} ref / {:.3} computed ({d:+.1}%)", entry.computed)
                    }
                    _ => format!("{:.3} computed", entry.computed),
                };
                line.push(cell);
            }
            grid.push(line);
        }

        let widths: Vec<usize> = (0..grid[0].len())
            .map(|i| grid.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!("# {}: {}\n", self.id, self.title);
        for (i, line) in grid.iter().enumerate() {
            let rendered: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(rendered.join(" | ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("-|-"));
                out.push('\n');
            }
        }
        out
    }
}

/// The five tables plus where they were written.
#[derive(Clone, Debug, Serialize)]
pub struct CostTablesReport {
    pub reference_version: u32,
    pub tables: Vec<CostTable>,
}

impl CostTablesReport {
    pub fn table(&self, id: &str) -> Option<&CostTable> {
        self.tables.iter().find(|t| t.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&t.to_text());
            out.push('\n');
        }
        let _ = write!(out, "reference constants: version {}\n", self.reference_version);
        out
    }
}

fn entry(
    map: &BTreeMap<String, f64>,
    file: &ReferenceFile,
    table: &str,
    row: &str,
    column: &str,
    unit: &'static str,
    quantity_id: &str,
) -> Result<TableEntry> {
    let computed = quantity(map, quantity_id)?;
    let reference = file.display_reference(table, quantity_id);
    let delta_pct = reference.map(|r| (computed - r) / r * 100.0);
    Ok(TableEntry {
        row: row.to_string(),
        column: column.to_string(),
        unit,
        computed,
        reference,
        delta_pct,
    })
}

/// Build all five cost tables from fresh computations.
pub fn cost_tables() -> Result<CostTablesReport> {
    let file = ReferenceFile::load()?;
    let map = computed_quantities()?;
    let mut tables = Vec::with_capacity(5);

    let totals =
        |table: &str, rows: &[&str], map: &BTreeMap<String, f64>| -> Result<Vec<TableEntry>> {
            let mut entries = Vec::new();
            for row in rows {
                entries.push(entry(map, &file, table, row, "params", "M", &format!("{row}/params"))?);
                entries.push(entry(map, &file, table, row, "flops", "B", &format!("{row}/flops"))?);
            }
            Ok(entries)
        };

    tables.push(CostTable {
        id: "table1".into(),
        title: "vision feature extractors".into(),
        entries: totals("table1", &["grid-r50", "grid-x101", "r101-f", "tee-0"], &map)?,
    });

    tables.push(CostTable {
        id: "table2".into(),
        title: "transformer structures at 50 regions + 35 text tokens".into(),
        entries: totals("table2", ArchConfig::transformer_preset_names(), &map)?,
    });

    let components = |table: &str, metric: &str, unit: &'static str| -> Result<Vec<TableEntry>> {
        let mut entries = Vec::new();
        for row in ["r101-f", "tee-0"] {
            for column in ["backbone", "rpn", "box-head"] {
                entries.push(entry(
                    &map,
                    &file,
                    table,
                    row,
                    column,
                    unit,
                    &format!("{row}/{column}/{metric}"),
                )?);
            }
            entries.push(entry(&map, &file, table, row, "total", unit, &format!("{row}/{metric}"))?);
        }
        Ok(entries)
    };

    tables.push(CostTable {
        id: "table3".into(),
        title: "extractor parameters by component".into(),
        entries: components("table3", "params", "M")?,
    });
    tables.push(CostTable {
        id: "table4".into(),
        title: "extractor FLOPs by component".into(),
        entries: components("table4", "flops", "B")?,
    });

    tables.push(CostTable {
        id: "table8".into(),
        title: "detector scaling family".into(),
        entries: totals("table8", ArchConfig::detector_preset_names(), &map)?,
    });

    Ok(CostTablesReport { reference_version: file.version, tables })
}

/// Compute the tables and write `cost_tables.txt` + `cost_tables.json`
/// under `dir`. Returns the report plus the written paths.
pub fn run_cost_tables(dir: &Path) -> Result<(CostTablesReport, PathBuf, PathBuf)> {
    let report = cost_tables()?;
    fs::create_dir_all(dir)?;
    let text_path = dir.join("cost_tables.txt");
    fs::write(&text_path, report.to_text())?;
    let json_path = dir.join("cost_tables.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    Ok((report, text_path, json_path))
}
