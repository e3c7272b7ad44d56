//! The versioned reference-constants file.
//!
//! All published numbers the repo compares against live in one embedded TOML
//! file, one cell per quantity, each with a structural citation (table, row,
//! column) and its own tolerance. Nothing elsewhere in the codebase hardcodes
//! a published value, so auditing a tolerance means grepping one file.

use serde::Deserialize;

use crate::error::{Error, Result};

/// The embedded reference file, verbatim.
pub const REFERENCE_TOML: &str = include_str!("reference.toml");

/// One checkable (or display-only) cell.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceCell {
    /// Computed value must sit within `tolerance` (relative) of `reference`.
    Relative {
        table: String,
        quantity: String,
        reference: f64,
        tolerance: f64,
        citation: String,
    },
    /// Computed value must fall inside `[lo, hi]`.
    Band {
        table: String,
        quantity: String,
        lo: f64,
        hi: f64,
        citation: String,
    },
    /// `computed(smaller) * factor < computed(larger)`.
    Less {
        table: String,
        smaller: String,
        larger: String,
        #[serde(default = "default_factor")]
        factor: f64,
        citation: String,
    },
    /// Shown in rendered tables with its delta, never checked.
    Display {
        table: String,
        quantity: String,
        reference: f64,
        citation: String,
    },
}

fn default_factor() -> f64 {
    1.0
}

impl ReferenceCell {
    pub fn table(&self) -> &str {
        match self {
            ReferenceCell::Relative { table, .. }
            | ReferenceCell::Band { table, .. }
            | ReferenceCell::Less { table, .. }
            | ReferenceCell::Display { table, .. } => table,
        }
    }

    pub fn citation(&self) -> &str {
        match self {
            ReferenceCell::Relative { citation, .. }
            | ReferenceCell::Band { citation, .. }
            | ReferenceCell::Less { citation, .. }
            | ReferenceCell::Display { citation, .. } => citation,
        }
    }

    /// Short identifier for pass/fail lines.
    pub fn id(&self) -> String {
        match self {
            ReferenceCell::Relative { quantity, .. }
            | ReferenceCell::Band { quantity, .. }
            | ReferenceCell::Display { quantity, .. } => quantity.clone(),
            ReferenceCell::Less { smaller, larger, .. } => format!("{smaller} < {larger}"),
        }
    }

    /// Quantity ids this cell reads.
    pub fn quantities(&self) -> Vec<&str> {
        match self {
            ReferenceCell::Relative { quantity, .. }
            | ReferenceCell::Band { quantity, .. }
            | ReferenceCell::Display { quantity, .. } => vec![quantity],
            ReferenceCell::Less { smaller, larger, .. } => vec![smaller, larger],
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceFile {
    pub version: u32,
    pub cells: Vec<ReferenceCell>,
}

impl ReferenceFile {
    /// Parse and sanity-check the embedded file.
    pub fn load() -> Result<ReferenceFile> {
        let file: ReferenceFile = toml::from_str(REFERENCE_TOML)?;
        for cell in &file.cells {
            match cell {
                ReferenceCell::Relative { reference, tolerance, .. } => {
                    if !reference.is_finite() || *reference <= 0.0 {
                        return Err(bad_cell(cell, "reference must be positive"));
                    }
                    if !tolerance.is_finite() || *tolerance < 0.0 {
                        return Err(bad_cell(cell, "tolerance must be non-negative"));
                    }
                }
                ReferenceCell::Band { lo, hi, .. } => {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return Err(bad_cell(cell, "band needs lo < hi"));
                    }
                }
                ReferenceCell::Less { factor, .. } => {
                    if !(factor.is_finite() && *factor >= 1.0) {
                        return Err(bad_cell(cell, "factor must be >= 1"));
                    }
                }
                ReferenceCell::Display { reference, .. } => {
                    if !reference.is_finite() {
                        return Err(bad_cell(cell, "reference must be finite"));
                    }
                }
            }
            if cell.citation().is_empty() {
                return Err(bad_cell(cell, "citation missing"));
            }
        }
        Ok(file)
    }

    /// Cells belonging to one reproduction target.
    pub fn cells_for(&self, table: &str) -> Vec<&ReferenceCell> {
        self.cells.iter().filter(|c| c.table() == table).collect()
    }

    /// The reference value a rendered table should show beside a quantity,
    /// if the file carries one for that table.
    pub fn display_reference(&self, table: &str, quantity: &str) -> Option<f64> {
        self.cells.iter().find_map(|c| match c {
            ReferenceCell::Relative { table: t, quantity: q, reference, .. }
            | ReferenceCell::Display { table: t, quantity: q, reference, .. }
                if t == table && q == quantity =>
            {
                Some(*reference)
            }
            _ => None,
        })
    }
}

fn bad_cell(cell: &ReferenceCell, why: &str) -> Error {
    Error::InvalidConfig(format!("reference cell `{}`: {why}", cell.id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_file_parses_and_validates() {
        let file = ReferenceFile::load().unwrap();
        assert_eq!(file.version, 1);
        assert!(file.cells.len() > 40);
        for table in ["table1", "table2", "table3", "table4", "table8"] {
            assert!(!file.cells_for(table).is_empty(), "{table} has no cells");
        }
    }

    #[test]
    fn every_cell_has_a_structural_citation() {
        let file = ReferenceFile::load().unwrap();
        for cell in &file.cells {
            let c = cell.citation();
            assert!(
                c.starts_with("Table") || c.starts_with("Sec."),
                "citation `{c}` is not structural"
            );
        }
    }

    #[test]
    fn display_reference_lookup() {
        let file = ReferenceFile::load().unwrap();
        assert_eq!(file.display_reference("table1", "tee-0/params"), Some(7.5));
        assert_eq!(file.display_reference("table8", "tee-3/flops"), Some(23.3));
        assert_eq!(file.display_reference("table8", "nope/flops"), None);
    }

    #[test]
    fn no_accuracy_constants_are_stored() {
        // Accuracy numbers are out of scope at desk scale; the reference file
        // must only carry size/compute quantities and their ratios.
        let file = ReferenceFile::load().unwrap();
        for cell in &file.cells {
            for q in cell.quantities() {
                assert!(
                    q.ends_with("/params") || q.ends_with("/flops"),
                    "unexpected quantity kind: {q}"
                );
            }
        }
    }
}
