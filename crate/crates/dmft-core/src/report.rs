//! Curve tables on a shared time axis and theory-versus-ensemble comparison.
//!
//! Column contract: the first column is the axis (`time` or `step`), then
//! observables with the prefixes [`THEORY_PREFIX`], [`ENSEMBLE_PREFIX`] and
//! [`STD_ERROR_PREFIX`]. Columns keep insertion order.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DmftError, Result};

pub const THEORY_PREFIX: &str = "theory_";
pub const ENSEMBLE_PREFIX: &str = "ens_";
pub const STD_ERROR_PREFIX: &str = "se_";

/// Relative tolerance for two axes to count as the same grid.
pub const AXIS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub axis: String,
    pub axis_values: Vec<f64>,
    columns: Vec<(String, Vec<f64>)>,
}

impl CurveTable {
    pub fn new(axis: &str, axis_values: Vec<f64>) -> Self {
        Self {
            axis: axis.to_string(),
            axis_values,
            columns: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.axis_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis_values.is_empty()
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(DmftError::Dimension(format!(
                "column {name} has {} rows, axis has {}",
                values.len(),
                self.len()
            )));
        }
        if name == self.axis || self.column(name).is_some() {
            return Err(DmftError::Schema(format!("duplicate column {name}")));
        }
        self.columns.push((name.to_string(), values));
        Ok(())
    }

    pub fn push_theory(&mut self, observable: &str, values: Vec<f64>) -> Result<()> {
        self.push(&format!("{THEORY_PREFIX}{observable}"), values)
    }

    pub fn push_ensemble(&mut self, observable: &str, mean: Vec<f64>, std_error: Vec<f64>) -> Result<()> {
        self.push(&format!("{ENSEMBLE_PREFIX}{observable}"), mean)?;
        self.push(&format!("{STD_ERROR_PREFIX}{observable}"), std_error)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    /// Observable names carrying `prefix`, in column order.
    pub fn observables(&self, prefix: &str) -> Vec<String> {
        self.column_names()
            .filter_map(|n| n.strip_prefix(prefix).map(str::to_string))
            .collect()
    }

    /// Values are written with the shortest round-trip formatting, so equal tables give equal bytes.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.axis.as_str()];
        header.extend(self.column_names());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.axis_values[i].to_string()];
            row.extend(self.columns.iter().map(|(_, v)| v[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let (axis, names) = header
            .split_first()
            .ok_or_else(|| DmftError::Schema("empty header".into()))?;
        let mut cols = vec![Vec::new(); header.len()];
        for (line, record) in r.records().enumerate() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    DmftError::Schema(format!("row {}, column {}: not a number: {field:?}", line + 1, header[j]))
                })?;
                cols[j].push(v);
            }
        }
        let mut cols = cols.into_iter();
        let mut table = Self::new(axis, cols.next().unwrap_or_default());
        for (name, values) in names.iter().zip(cols) {
            table.push(name, values)?;
        }
        Ok(table)
    }

    pub fn write_path(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }
}

/// Pass rule applied to every observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_max_z")]
    pub max_abs_z: f64,
    /// Share of points that must sit within `max_abs_z`.
    #[serde(default = "default_pass_fraction")]
    pub min_pass_fraction: f64,
    /// Only points with axis value in `[start, end]` are compared.
    #[serde(default)]
    pub window: Option<(f64, f64)>,
    /// Also require `max |theory - ens| / |theory|` at or below this.
    #[serde(default)]
    pub max_relative_deviation: Option<f64>,
    /// Observables that decide the verdict; empty means all. The rest are still reported.
    #[serde(default)]
    pub gate: Vec<String>,
}

fn default_max_z() -> f64 {
    3.0
}

fn default_pass_fraction() -> f64 {
    0.8
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            max_abs_z: default_max_z(),
            min_pass_fraction: default_pass_fraction(),
            window: None,
            max_relative_deviation: None,
            gate: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableComparison {
    pub name: String,
    pub points: usize,
    pub max_abs_z: f64,
    /// Axis value where `|z|` is largest.
    pub worst_at: f64,
    pub pass_fraction: f64,
    /// `max |theory - ens| / |theory|` over points with nonzero theory.
    pub max_relative_deviation: f64,
    /// `Σ ens / Σ theory`; about 4 when the ensemble variance is inflated fourfold.
    pub ensemble_to_theory: f64,
    pub theory_peak_at: f64,
    pub ensemble_peak_at: f64,
    pub pass: bool,
    /// Whether this observable counts towards the overall verdict.
    pub gated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub thresholds: Thresholds,
    pub observables: Vec<ObservableComparison>,
    pub pass: bool,
}

impl Comparison {
    pub fn get(&self, name: &str) -> Option<&ObservableComparison> {
        self.observables.iter().find(|o| o.name == name)
    }
}

/// `(theory - ens) / se`, zero when both agree exactly with zero error.
pub fn z_score(theory: f64, ensemble: f64, std_error: f64) -> f64 {
    let diff = theory - ensemble;
    if diff == 0.0 {
        0.0
    } else if std_error > 0.0 {
        diff / std_error
    } else {
        f64::INFINITY.copysign(diff)
    }
}

fn same_axis(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= AXIS_TOL * x.abs().max(y.abs()).max(1.0))
}

fn argmax(axis: &[f64], values: &[f64], idx: &[usize]) -> f64 {
    idx.iter()
        .copied()
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .map_or(f64::NAN, |i| axis[i])
}

/// Compares every `theory_x` column with `ens_x` and `se_x`.
pub fn compare(theory: &CurveTable, ensemble: &CurveTable, thresholds: &Thresholds) -> Result<Comparison> {
    if !same_axis(&theory.axis_values, &ensemble.axis_values) {
        return Err(DmftError::GridMismatch(format!(
            "theory has {} rows on `{}`, ensemble has {} rows on `{}` with different values",
            theory.len(),
            theory.axis,
            ensemble.len(),
            ensemble.axis
        )));
    }
    let names = theory.observables(THEORY_PREFIX);
    if names.is_empty() {
        return Err(DmftError::Schema(format!("theory table has no {THEORY_PREFIX} columns")));
    }
    let axis = &theory.axis_values;
    let idx: Vec<usize> = (0..axis.len())
        .filter(|&i| thresholds.window.map_or(true, |(a, b)| axis[i] >= a && axis[i] <= b))
        .collect();
    if idx.is_empty() {
        return Err(DmftError::Schema("comparison window holds no points".into()));
    }
    let mut observables = Vec::with_capacity(names.len());
    for name in names {
        let missing = |col: String| DmftError::Schema(format!("ensemble table lacks observable {name} (column {col})"));
        let th = theory.column(&format!("{THEORY_PREFIX}{name}")).unwrap_or_default();
        let ens_col = format!("{ENSEMBLE_PREFIX}{name}");
        let se_col = format!("{STD_ERROR_PREFIX}{name}");
        let ens = ensemble.column(&ens_col).ok_or_else(|| missing(ens_col.clone()))?;
        let se = ensemble.column(&se_col).ok_or_else(|| missing(se_col.clone()))?;
        let z: Vec<f64> = idx.iter().map(|&i| z_score(th[i], ens[i], se[i])).collect();
        let (worst, max_abs_z) = z
            .iter()
            .enumerate()
            .map(|(k, v)| (k, v.abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        let within = z.iter().filter(|v| v.abs() <= thresholds.max_abs_z).count();
        let pass_fraction = within as f64 / idx.len() as f64;
        let max_relative_deviation = idx
            .iter()
            .filter(|&&i| th[i] != 0.0)
            .map(|&i| ((th[i] - ens[i]) / th[i]).abs())
            .fold(0.0, f64::max);
        let sum_th: f64 = idx.iter().map(|&i| th[i]).sum();
        let sum_ens: f64 = idx.iter().map(|&i| ens[i]).sum();
        observables.push(ObservableComparison {
            points: idx.len(),
            max_abs_z,
            worst_at: axis[idx[worst]],
            pass_fraction,
            max_relative_deviation,
            ensemble_to_theory: sum_ens / sum_th,
            theory_peak_at: argmax(axis, th, &idx),
            ensemble_peak_at: argmax(axis, ens, &idx),
            pass: pass_fraction >= thresholds.min_pass_fraction
                && thresholds.max_relative_deviation.map_or(true, |m| max_relative_deviation <= m),
            gated: thresholds.gate.is_empty() || thresholds.gate.contains(&name),
            name,
        });
    }
    if let Some(name) = thresholds.gate.iter().find(|g| !observables.iter().any(|o| &o.name == *g)) {
        return Err(DmftError::Schema(format!("gated observable {name} is not in the theory table")));
    }
    let pass = observables.iter().filter(|o| o.gated).all(|o| o.pass);
    Ok(Comparison {
        thresholds: thresholds.clone(),
        observables,
        pass,
    })
}
