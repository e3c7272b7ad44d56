//! Computed counterparts of every published quantity, in published units
//! (params in millions, FLOPs in billions, ratios as fractions).
//!
//! The map's keys are the `quantity` ids used by the reference file; both
//! sides are kept deliberately dumb — strings in, floats out — so the
//! reproduction checks stay a pure table lookup.

use std::collections::BTreeMap;

use crate::config::ArchConfig;
use crate::cost::{count_arch_default, preset_report, CostReport};
use crate::error::{Error, Result};

const MILLION: f64 = 1e6;
const BILLION: f64 = 1e9;

fn insert_totals(map: &mut BTreeMap<String, f64>, report: &CostReport) {
    map.insert(format!("{}/params", report.name), report.params as f64 / MILLION);
    map.insert(format!("{}/flops", report.name), report.flops as f64 / BILLION);
}

/// Published tables fold the fused pyramid into the backbone column for the
/// compact extractor; the reconstructed baseline has no separate pyramid.
fn insert_components(map: &mut BTreeMap<String, f64>, report: &CostReport) {
    let backbone = if report.component("fpn").is_some() {
        report.component_sum(&["backbone", "fpn"])
    } else {
        report.component_sum(&["backbone"])
    };
    let rpn = report.component_sum(&["rpn"]);
    let box_head = report.component_sum(&["box_head"]);
    for (column, (params, flops)) in
        [("backbone", backbone), ("rpn", rpn), ("box-head", box_head)]
    {
        map.insert(format!("{}/{column}/params", report.name), params as f64 / MILLION);
        map.insert(format!("{}/{column}/flops", report.name), flops as f64 / BILLION);
    }
}

fn ratio(map: &BTreeMap<String, f64>, num: &str, den: &str) -> f64 {
    map[num] / map[den]
}

/// Every quantity the reference file can cite, computed fresh from the cost
/// model. Read-only with respect to weights and corpora.
pub fn computed_quantities() -> Result<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();

    for name in ArchConfig::transformer_preset_names() {
        let report = count_arch_default(&ArchConfig::preset(name)?)?;
        insert_totals(&mut map, &report);
    }
    for name in ArchConfig::detector_preset_names() {
        let report = count_arch_default(&ArchConfig::preset(name)?)?;
        insert_totals(&mut map, &report);
        if name == &"tee-0" {
            insert_components(&mut map, &report);
        }
    }
    for name in ["r101-f", "grid-r50", "grid-x101"] {
        let report = preset_report(name)?;
        insert_totals(&mut map, &report);
        if name == "r101-f" {
            insert_components(&mut map, &report);
        }
    }

    let ratios = [
        ("ratio/tee-0:r101-f/params", "tee-0/params", "r101-f/params"),
        ("ratio/tee-0:r101-f/flops", "tee-0/flops", "r101-f/flops"),
        ("ratio/minilm:bert-base/params", "minilm/params", "bert-base/params"),
        ("ratio/minilm:bert-base/flops", "minilm/flops", "bert-base/flops"),
        (
            "ratio/tee-0-backbone:box-head/params",
            "tee-0/backbone/params",
            "tee-0/box-head/params",
        ),
    ];
    for (id, num, den) in ratios {
        let value = ratio(&map, num, den);
        map.insert(id.to_string(), value);
    }
    Ok(map)
}

/// Lookup that names the missing id instead of panicking.
pub fn quantity(map: &BTreeMap<String, f64>, id: &str) -> Result<f64> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("unknown quantity id `{id}`")))
}
