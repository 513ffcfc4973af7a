//! Experiment grids along one configuration axis, sharing seed and data across cells.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::{BccMode, Components, ExperimentConfig, PseudoSelection};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, CSV_HEADER};
use crate::trainer::{run_experiment, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Minimum window overlap: `H/3`, `H/2`, `2H/3` (fractions of the crop) or pixels.
    Overlap,
    NPairs,
    Ratio,
    /// Named component rows: `SupOnly`, `I` .. `VII`, `Ours`.
    Components,
    /// `image` (reliable image selection), `ours`, or a pixel confidence threshold.
    Filter,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Overlap => "overlap",
            Axis::NPairs => "n_pairs",
            Axis::Ratio => "ratio",
            Axis::Components => "components",
            Axis::Filter => "filter",
        }
    }

    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            Axis::Overlap => &["H/3", "H/2", "2H/3"],
            Axis::NPairs => &["0", "1", "3", "6"],
            Axis::Ratio => &["0.2", "0.5", "0.8"],
            Axis::Components => &COMPONENT_ROWS,
            Axis::Filter => &["0.9", "image", "ours"],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overlap" => Ok(Axis::Overlap),
            "n_pairs" => Ok(Axis::NPairs),
            "ratio" => Ok(Axis::Ratio),
            "components" => Ok(Axis::Components),
            "filter" => Ok(Axis::Filter),
            other => Err(Error::UnknownAxis(other.to_string())),
        }
    }
}

pub const COMPONENT_ROWS: [&str; 9] = ["SupOnly", "I", "II", "III", "IV", "V", "VI", "VII", "Ours"];

/// Component toggles of one named row.
pub fn component_row(name: &str) -> Option<Components> {
    use BccMode::{Importance, Off, Plain};
    use PseudoSelection::{All, None as NoSel, Random, Reliable};
    let (bcc, selection, dynamic_bank) = match name {
        "SupOnly" => (Off, NoSel, false),
        "I" => (Plain, NoSel, false),
        "II" => (Importance, NoSel, false),
        "III" => (Importance, Random, false),
        "IV" => (Importance, Reliable, false),
        "V" => (Importance, All, false),
        "VI" => (Importance, Random, true),
        "VII" => (Off, Reliable, true),
        "Ours" => (Importance, Reliable, true),
        _ => return None,
    };
    Some(Components {
        bcc,
        selection,
        dynamic_bank,
        pixel_filter_threshold: None,
    })
}

fn bad_value(axis: Axis, value: &str, why: &str) -> Error {
    Error::config(format!("ablate.{axis}"), format!("`{value}`: {why}"))
}

fn parse_overlap(value: &str, crop: usize) -> Option<usize> {
    let v = value.trim();
    if let Ok(px) = v.parse() {
        return Some(px);
    }
    let (num, den) = v.split_once('/')?;
    let num = num.trim_end_matches(['H', 'W']);
    let num: usize = if num.is_empty() { 1 } else { num.parse().ok()? };
    let den: usize = den.parse().ok().filter(|&d| d > 0)?;
    Some(crop * num / den)
}

/// `base` with one axis set to `value`, validated.
pub fn apply_cell(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match axis {
        Axis::Overlap => {
            let px = parse_overlap(value, cfg.geometry.crop_size)
                .ok_or_else(|| bad_value(axis, value, "expected pixels or a fraction like 2H/3"))?;
            cfg.geometry.min_overlap = Some(px);
        }
        Axis::NPairs => {
            cfg.geometry.n_pairs = value.parse().map_err(|_| bad_value(axis, value, "expected an integer"))?;
        }
        Axis::Ratio => {
            cfg.selection.ratio = value.parse().map_err(|_| bad_value(axis, value, "expected a number"))?;
        }
        Axis::Components => {
            cfg.components = component_row(value)
                .ok_or_else(|| bad_value(axis, value, "expected one of SupOnly, I..VII, Ours"))?;
        }
        Axis::Filter => {
            cfg.components = match value {
                "image" => component_row("IV").expect("row exists"),
                "ours" => component_row("Ours").expect("row exists"),
                t => {
                    let t: f64 = t
                        .parse()
                        .map_err(|_| bad_value(axis, value, "expected image, ours, or a threshold"))?;
                    Components {
                        bcc: BccMode::Importance,
                        selection: PseudoSelection::All,
                        dynamic_bank: false,
                        pixel_filter_threshold: Some(t),
                    }
                }
            };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub config_hash: String,
    pub epochs: usize,
    pub test: EvalReport,
}

pub fn csv_header() -> String {
    format!("axis,value,config_hash,{CSV_HEADER}")
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.axis,
            self.value,
            self.config_hash,
            self.test.csv_row("test", self.epochs)
        )
    }
}

fn cell_dir_name(index: usize, value: &str) -> String {
    let safe: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    format!("{index:02}_{safe}")
}

/// Runs one experiment per value under `out/cells/`, then writes `out/ablation.csv`
/// with rows in value order. Every cell is validated before any training starts.
pub fn run_ablation(base: &ExperimentConfig, axis: Axis, values: &[String], out: &Path) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("no ablation values"));
    }
    let cells = values
        .iter()
        .map(|v| apply_cell(base, axis, v).map(|c| (v.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out.join("cells"))?;
    let run = |(i, (value, cfg)): (usize, &(String, ExperimentConfig))| -> Result<AblationRow> {
        let outcome = run_experiment(cfg, &out.join("cells").join(cell_dir_name(i, value)), &RunOptions::default())?;
        let report = outcome.report.expect("run without halt finishes");
        Ok(AblationRow {
            axis,
            value: value.clone(),
            config_hash: report.config_hash,
            epochs: report.epochs,
            test: report.test,
        })
    };
    let rows = if base.output.parallel_cells {
        cells.par_iter().enumerate().map(run).collect::<Result<Vec<_>>>()?
    } else {
        cells.iter().enumerate().map(run).collect::<Result<Vec<_>>>()?
    };
    let mut csv = csv_header() + "\n";
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    fs::write(out.join("ablation.csv"), csv)?;
    Ok(rows)
}
