//! Per-cell reproduction checks against the stored constants.
//!
//! `reproduce("table2")` recomputes every quantity the target's cells cite
//! and grades each cell at its own tolerance, producing one PASS/FAIL line
//! per cell. The operation touches no weights and no corpora — everything
//! comes from the closed-form cost model.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

use super::quantities::{computed_quantities, quantity};
use super::reference::{ReferenceCell, ReferenceFile};

/// Valid reproduction targets, in report order.
pub const REPRODUCE_TARGETS: [&str; 5] = ["table1", "table2", "table3", "table4", "table8"];

/// One graded cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellOutcome {
    pub id: String,
    /// Human-readable comparison, e.g. computed/reference/delta/tolerance.
    pub detail: String,
    pub citation: String,
    pub pass: bool,
}

/// The pass/fail report for one target.
#[derive(Clone, Debug, Serialize)]
pub struct ReproduceReport {
    pub target: String,
    pub reference_version: u32,
    pub cells: Vec<CellOutcome>,
}

impl ReproduceReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| !c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0
    }

    /// One line per cell plus a summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for cell in &self.cells {
            let mark = if cell.pass { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{mark}  {target}  {id}: {detail}  [{cite}]\n",
                target = self.target,
                id = cell.id,
                detail = cell.detail,
                cite = cell.citation,
            ));
        }
        let failures = self.failures();
        out.push_str(&format!(
            "{target}: {passed}/{total} cells pass{tail}\n",
            target = self.target,
            passed = self.cells.len() - failures,
            total = self.cells.len(),
            tail = if failures == 0 {
                String::new()
            } else {
                format!(", {failures} FAILED")
            },
        ));
        out
    }

    /// Error out (for a nonzero exit) if any cell failed.
    pub fn require_pass(&self) -> Result<()> {
        if self.all_pass() {
            Ok(())
        } else {
            Err(Error::ReproductionFailed {
                target: self.target.clone(),
                failures: self.failures(),
                cells: self.cells.len(),
            })
        }
    }
}

fn grade(cell: &ReferenceCell, map: &BTreeMap<String, f64>) -> Result<Option<CellOutcome>> {
    let outcome = match cell {
        ReferenceCell::Relative { quantity: q, reference, tolerance, citation, .. } => {
            let computed = quantity(map, q)?;
            let delta = (computed - reference) / reference;
            CellOutcome {
                id: cell.id(),
                detail: format!(
                    "computed {computed:.4}, reference {reference:.4}, \
                     delta {delta:+.2}% (tolerance ±{tol:.0}%)",
                    delta = delta * 100.0,
                    tol = tolerance * 100.0,
                ),
                citation: citation.clone(),
                pass: delta.abs() <= *tolerance,
            }
        }
        ReferenceCell::Band { quantity: q, lo, hi, citation, .. } => {
            let computed = quantity(map, q)?;
            CellOutcome {
                id: cell.id(),
                detail: format!("computed {computed:.4} against band [{lo:.4}, {hi:.4}]"),
                citation: citation.clone(),
                pass: (*lo..=*hi).contains(&computed),
            }
        }
        ReferenceCell::Less { smaller, larger, factor, citation, .. } => {
            let a = quantity(map, smaller)?;
            let b = quantity(map, larger)?;
            let detail = if *factor > 1.0 {
                format!("computed {a:.4} x {factor} = {:.4} < {b:.4}", a * factor)
            } else {
                format!("computed {a:.4} < {b:.4}")
            };
            CellOutcome { id: cell.id(), detail, citation: citation.clone(), pass: a * factor < b }
        }
        // Display cells carry no check.
        ReferenceCell::Display { .. } => return Ok(None),
    };
    Ok(Some(outcome))
}

/// Grade every cell of one target. Unknown targets list the valid ones.
pub fn reproduce(target: &str) -> Result<ReproduceReport> {
    if !REPRODUCE_TARGETS.contains(&target) {
        return Err(Error::InvalidArgument(format!(
            "unknown reproduction target `{target}`; valid targets: {}",
            REPRODUCE_TARGETS.join(", ")
        )));
    }
    let file = ReferenceFile::load()?;
    let map = computed_quantities()?;
    let mut cells = Vec::new();
    for cell in file.cells_for(target) {
        if let Some(outcome) = grade(cell, &map)? {
            cells.push(outcome);
        }
    }
    Ok(ReproduceReport { target: target.into(), reference_version: file.version, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_target_lists_valid_ones() {
        let err = reproduce("table9").unwrap_err().to_string();
        assert!(err.contains("table9"));
        for t in REPRODUCE_TARGETS {
            assert!(err.contains(t), "error should list {t}");
        }
    }

    #[test]
    fn every_target_passes_every_cell() {
        for target in REPRODUCE_TARGETS {
            let report = reproduce(target).unwrap();
            assert!(!report.cells.is_empty());
            assert!(
                report.all_pass(),
                "{target} failures:\n{}",
                report.to_text()
            );
            report.require_pass().unwrap();
        }
    }

    #[test]
    fn report_text_has_one_line_per_cell() {
        let report = reproduce("table2").unwrap();
        let text = report.to_text();
        assert_eq!(text.lines().count(), report.cells.len() + 1);
        assert!(text.contains("PASS"));
        assert!(text.lines().last().unwrap().contains("cells pass"));
    }

    #[test]
    fn failures_surface_as_reproduction_error() {
        let mut report = reproduce("table1").unwrap();
        report.cells[0].pass = false;
        report.cells[2].pass = false;
        match report.require_pass() {
            Err(Error::ReproductionFailed { target, failures, cells }) => {
                assert_eq!(target, "table1");
                assert_eq!(failures, 2);
                assert_eq!(cells, report.cells.len());
            }
            other => panic!("expected ReproductionFailed, got {other:?}"),
        }
        assert!(report.to_text().contains("FAIL"));
    }

    #[test]
    fn display_cells_are_not_graded() {
        // table8 has a display-only FLOPs entry for the largest variant.
        let report = reproduce("table8").unwrap();
        assert!(report.cells.iter().all(|c| !c.id.contains("tee-3/flops") || c.id.contains('<')));
    }
}
