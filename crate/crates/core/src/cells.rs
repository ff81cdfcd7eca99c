//! Per-cell sufficient statistics and the measurement table.
//!
//! Unit-level rows `(cell, arm, y)` are folded into per-(cell, arm) counts,
//! means and sample variances (divisor `n - 1`). From those the measurement
//! table carries one noisy effect estimate per cell of the full cross grid,
//! together with its inverse variance `M_e(x)`; a weight of zero marks a cell
//! that cannot be used.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::CovariateSchema;

/// Streaming moments of one arm within one cell (Welford / Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ArmStats {
    n: u64,
    mean: f64,
    m2: f64,
    var_override: Option<f64>,
}

impl ArmStats {
    /// Stats given directly as count, mean and sample variance.
    pub fn from_summary(n: u64, mean: f64, variance: Option<f64>) -> Self {
        let m2 = match (n, variance) {
            (n, Some(v)) if n >= 2 => v * (n - 1) as f64,
            _ => 0.0,
        };
        ArmStats {
            n,
            mean: if n == 0 { 0.0 } else { mean },
            m2,
            var_override: None,
        }
    }

    pub fn push(&mut self, y: f64) {
        self.n += 1;
        let delta = y - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (y - self.mean);
    }

    /// Combine two partitions of the same arm.
    pub fn merge(&mut self, other: &ArmStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            let keep = self.var_override;
            *self = *other;
            self.var_override = keep.or(other.var_override);
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        self.mean += delta * nb / n as f64;
        self.m2 += other.m2 + delta * delta * na * nb / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> Option<f64> {
        (self.n >= 1).then_some(self.mean)
    }

    /// Sample variance; an injected override wins over the data.
    pub fn variance(&self) -> Option<f64> {
        if let Some(v) = self.var_override {
            return Some(v);
        }
        (self.n >= 2).then(|| (self.m2 / (self.n - 1) as f64).max(0.0))
    }

    pub fn set_variance_override(&mut self, v: Option<f64>) {
        self.var_override = v;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CellStats {
    pub control: ArmStats,
    pub treatment: ArmStats,
}

impl CellStats {
    pub fn arm(&self, treated: bool) -> &ArmStats {
        if treated {
            &self.treatment
        } else {
            &self.control
        }
    }

    fn arm_mut(&mut self, treated: bool) -> &mut ArmStats {
        if treated {
            &mut self.treatment
        } else {
            &mut self.control
        }
    }

    pub fn merge(&mut self, other: &CellStats) {
        self.control.merge(&other.control);
        self.treatment.merge(&other.treatment);
    }

    pub fn n0(&self) -> u64 {
        self.control.count()
    }

    pub fn n1(&self) -> u64 {
        self.treatment.count()
    }
}

/// Level indices of a cell, one per covariate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRow {
    pub cell: CellKey,
    pub treated: bool,
    pub y: f64,
}

impl UnitRow {
    pub fn new(levels: Vec<usize>, treated: bool, y: f64) -> Self {
        UnitRow {
            cell: CellKey(levels),
            treated,
            y,
        }
    }

    /// Same unit seen through a reduced schema.
    pub fn project(&self, keep: &[usize]) -> UnitRow {
        UnitRow::new(keep.iter().map(|&d| self.cell.0[d]).collect(), self.treated, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowRejection {
    /// 1-based data row (header excluded) or position in the input stream.
    pub row: usize,
    pub reason: String,
}

/// Sufficient statistics over the full cross grid of a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    schema: CovariateSchema,
    cells: Vec<CellStats>,
}

impl CellTable {
    pub fn empty(schema: CovariateSchema) -> Self {
        let n = schema.cell_count();
        CellTable {
            schema,
            cells: vec![CellStats::default(); n],
        }
    }

    pub fn schema(&self) -> &CovariateSchema {
        &self.schema
    }

    pub fn cells(&self) -> &[CellStats] {
        &self.cells
    }

    pub fn cell(&self, key: &CellKey) -> &CellStats {
        &self.cells[self.schema.cell_index(&key.0)]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut CellStats {
        &mut self.cells[index]
    }

    pub fn merge(&mut self, other: &CellTable) -> Result<()> {
        if self.schema != other.schema {
            return Err(Error::Input("cannot merge cell tables over different schemas".into()));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        Ok(())
    }

    pub fn arm_totals(&self) -> (u64, u64) {
        self.cells
            .iter()
            .fold((0, 0), |(a, b), c| (a + c.n0(), b + c.n1()))
    }

    /// Collapse onto a subset of covariates by merging the stats of every
    /// cell that shares the kept levels.
    pub fn marginalize(&self, keep: &[usize]) -> Result<CellTable> {
        let reduced = self.schema.project(keep)?;
        let mut out = CellTable::empty(reduced);
        for (i, stats) in self.cells.iter().enumerate() {
            let levels = self.schema.cell_levels(i);
            let sub: Vec<usize> = keep.iter().map(|&d| levels[d]).collect();
            let j = out.schema.cell_index(&sub);
            out.cells[j].merge(stats);
        }
        Ok(out)
    }

    pub fn apply_variance_overrides(&mut self, overrides: &[VarianceOverride]) {
        for o in overrides {
            let c = &mut self.cells[o.cell];
            c.control.set_variance_override(Some(o.var0));
            c.treatment.set_variance_override(Some(o.var1));
        }
    }
}

fn check_row(schema: &CovariateSchema, row: &UnitRow) -> std::result::Result<usize, String> {
    if row.cell.0.len() != schema.len() {
        return Err(format!(
            "expected {} covariate levels, got {}",
            schema.len(),
            row.cell.0.len()
        ));
    }
    for (d, (&l, c)) in row.cell.0.iter().zip(schema.covariates()).enumerate() {
        if l >= c.size() {
            return Err(format!("level index {} out of range for covariate {}", l, d));
        }
    }
    if !row.y.is_finite() {
        return Err(format!("non-finite outcome {}", row.y));
    }
    Ok(schema.cell_index(&row.cell.0))
}

/// Fold unit rows into per-cell statistics. Invalid rows are skipped and
/// reported, never silently absorbed.
pub fn aggregate_units<'a>(
    schema: &CovariateSchema,
    rows: impl IntoIterator<Item = &'a UnitRow>,
) -> (CellTable, Vec<RowRejection>) {
    let mut table = CellTable::empty(schema.clone());
    let mut rejected = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        match check_row(schema, row) {
            Ok(idx) => table.cells[idx].arm_mut(row.treated).push(row.y),
            Err(reason) => rejected.push(RowRejection { row: i + 1, reason }),
        }
    }
    (table, rejected)
}

/// Aggregate fixed-size partitions concurrently and merge them in partition
/// order, so the result depends only on the partition boundaries.
pub fn aggregate_units_partitioned(
    schema: &CovariateSchema,
    rows: &[UnitRow],
    chunk_size: usize,
) -> (CellTable, Vec<RowRejection>) {
    let chunk_size = chunk_size.max(1);
    let parts: Vec<(CellTable, Vec<RowRejection>)> = rows
        .par_chunks(chunk_size)
        .enumerate()
        .map(|(c, chunk)| {
            let (t, mut rej) = aggregate_units(schema, chunk);
            for r in &mut rej {
                r.row += c * chunk_size;
            }
            (t, rej)
        })
        .collect();
    let mut table = CellTable::empty(schema.clone());
    let mut rejected = Vec::new();
    for (t, rej) in parts {
        table.merge(&t).expect("same schema");
        rejected.extend(rej);
    }
    (table, rejected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasurementMode {
    /// Difference of arm means.
    Additive,
    /// Log ratio of arm means.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementOptions {
    /// Minimum units per arm for a cell to be usable.
    pub min_count: u64,
    /// Zero-variance cells get this multiple of the median positive weight.
    pub zero_variance_cap: f64,
}

impl Default for MeasurementOptions {
    fn default() -> Self {
        MeasurementOptions {
            min_count: 2,
            zero_variance_cap: 1e6,
        }
    }
}

/// One measurement and weight per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTable {
    pub mode: MeasurementMode,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub diagnostics: Vec<String>,
}

impl MeasurementTable {
    pub fn new(mode: MeasurementMode, values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Input("values and weights differ in length".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Input(format!("weights must be finite and >= 0, found {}", w)));
        }
        Ok(MeasurementTable {
            mode,
            values,
            weights,
            diagnostics: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of cells with positive weight.
    pub fn usable_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn weighted_mean(&self) -> f64 {
        let tw = self.total_weight();
        if tw <= 0.0 {
            return 0.0;
        }
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / tw
    }

    /// Same table with every weight multiplied by `s`.
    pub fn scaled(&self, s: f64) -> MeasurementTable {
        MeasurementTable {
            mode: self.mode,
            values: self.values.clone(),
            weights: self.weights.iter().map(|w| w * s).collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Effective sample size of a difference of two independent arm means.
pub fn effective_sample_size(n0: f64, var0: f64, n1: f64, var1: f64) -> f64 {
    n0 * n1 / (n0 * var1 + n1 * var0)
}

fn cap_degenerate(weights: &mut [f64], degenerate: &[usize], factor: f64) -> Result<Option<f64>> {
    if degenerate.is_empty() {
        return Ok(None);
    }
    let mut positive: Vec<f64> = weights.iter().copied().filter(|w| *w > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::NoUsableCells(
            "every usable cell has zero variance in both arms".into(),
        ));
    }
    positive.sort_by(f64::total_cmp);
    let mid = positive.len() / 2;
    let median = if positive.len() % 2 == 0 {
        0.5 * (positive[mid - 1] + positive[mid])
    } else {
        positive[mid]
    };
    let cap = factor * median;
    for &i in degenerate {
        weights[i] = cap;
    }
    Ok(Some(cap))
}

/// `tau_hat = mean1 - mean0` with weight `n0 n1 / (n0 var1 + n1 var0)`.
pub fn additive_measurements(stats: &[CellStats], opts: &MeasurementOptions) -> Result<MeasurementTable> {
    let mut values = vec![0.0; stats.len()];
    let mut weights = vec![0.0; stats.len()];
    let mut degenerate = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, c) in stats.iter().enumerate() {
        let (n0, n1) = (c.n0(), c.n1());
        if n0 < opts.min_count || n1 < opts.min_count {
            continue;
        }
        let (Some(v0), Some(v1)) = (c.control.variance(), c.treatment.variance()) else {
            diagnostics.push(format!("cell {}: variance unavailable, excluded", i));
            continue;
        };
        values[i] = c.treatment.mean - c.control.mean;
        let denom = n0 as f64 * v1 + n1 as f64 * v0;
        if denom > 0.0 {
            weights[i] = effective_sample_size(n0 as f64, v0, n1 as f64, v1);
        } else {
            degenerate.push(i);
        }
    }
    if let Some(cap) = cap_degenerate(&mut weights, &degenerate, opts.zero_variance_cap)? {
        diagnostics.push(format!(
            "{} zero-variance cells capped at weight {:.6e}",
            degenerate.len(),
            cap
        ));
    }
    let mut t = MeasurementTable::new(MeasurementMode::Additive, values, weights)?;
    t.diagnostics = diagnostics;
    Ok(t)
}

/// `log(mean1 / mean0)` with delta-method weight
/// `1 / (var0 / (n0 mean0^2) + var1 / (n1 mean1^2))`.
pub fn multiplicative_measurements(
    stats: &[CellStats],
    opts: &MeasurementOptions,
) -> Result<MeasurementTable> {
    let mut values = vec![0.0; stats.len()];
    let mut weights = vec![0.0; stats.len()];
    let mut degenerate = Vec::new();
    let mut diagnostics = Vec::new();
    let mut nonpositive = 0usize;
    for (i, c) in stats.iter().enumerate() {
        let (n0, n1) = (c.n0(), c.n1());
        if n0 < opts.min_count || n1 < opts.min_count {
            continue;
        }
        let (m0, m1) = (c.control.mean, c.treatment.mean);
        if m0 <= 0.0 || m1 <= 0.0 {
            nonpositive += 1;
            continue;
        }
        let (Some(v0), Some(v1)) = (c.control.variance(), c.treatment.variance()) else {
            diagnostics.push(format!("cell {}: variance unavailable, excluded", i));
            continue;
        };
        values[i] = (m1 / m0).ln();
        let var_log = v0 / (n0 as f64 * m0 * m0) + v1 / (n1 as f64 * m1 * m1);
        if var_log > 0.0 {
            weights[i] = 1.0 / var_log;
        } else {
            degenerate.push(i);
        }
    }
    if nonpositive > 0 {
        diagnostics.push(format!(
            "{} cells with a non-positive arm mean excluded from the log-ratio model",
            nonpositive
        ));
    }
    if weights.iter().all(|&w| w == 0.0) && degenerate.is_empty() {
        return Err(Error::NoUsableCells(
            "no cell has enough units with positive means in both arms".into(),
        ));
    }
    if let Some(cap) = cap_degenerate(&mut weights, &degenerate, opts.zero_variance_cap)? {
        diagnostics.push(format!(
            "{} zero-variance cells capped at weight {:.6e}",
            degenerate.len(),
            cap
        ));
    }
    let mut t = MeasurementTable::new(MeasurementMode::Multiplicative, values, weights)?;
    t.diagnostics = diagnostics;
    Ok(t)
}

pub fn measurements(
    stats: &[CellStats],
    mode: MeasurementMode,
    opts: &MeasurementOptions,
) -> Result<MeasurementTable> {
    match mode {
        MeasurementMode::Additive => additive_measurements(stats, opts),
        MeasurementMode::Multiplicative => multiplicative_measurements(stats, opts),
    }
}

// ---------------------------------------------------------------------------
// CSV formats

fn header_positions(
    schema: &CovariateSchema,
    headers: &csv::StringRecord,
    extra: &[&str],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Input(format!("missing column `{}`", name)))
    };
    let cov = schema
        .covariates()
        .iter()
        .map(|c| find(&c.name))
        .collect::<Result<Vec<_>>>()?;
    let ext = extra.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    Ok((cov, ext))
}

fn parse_levels(
    schema: &CovariateSchema,
    record: &csv::StringRecord,
    cols: &[usize],
) -> std::result::Result<Vec<usize>, String> {
    cols.iter()
        .zip(schema.covariates())
        .map(|(&col, c)| {
            let label = record.get(col).unwrap_or("").trim();
            c.level_index(label)
                .ok_or_else(|| format!("unknown level `{}` for covariate `{}`", label, c.name))
        })
        .collect()
}

/// Unit-level CSV: one column per covariate (level labels), `w` (0/1), `y`.
pub fn read_unit_csv<R: Read>(
    schema: &CovariateSchema,
    reader: R,
) -> Result<(Vec<UnitRow>, Vec<RowRejection>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (cov, ext) = header_positions(schema, &headers, &["w", "y"])?;
    let mut rows = Vec::new();
    let mut rejected = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed = parse_levels(schema, &rec, &cov).and_then(|levels| {
            let treated = match rec.get(ext[0]).unwrap_or("") {
                "0" => false,
                "1" => true,
                other => return Err(format!("treatment indicator must be 0 or 1, got `{}`", other)),
            };
            let y: f64 = rec
                .get(ext[1])
                .unwrap_or("")
                .parse()
                .map_err(|_| format!("unparseable outcome `{}`", rec.get(ext[1]).unwrap_or("")))?;
            if !y.is_finite() {
                return Err(format!("non-finite outcome {}", y));
            }
            Ok(UnitRow::new(levels, treated, y))
        });
        match parsed {
            Ok(r) => rows.push(r),
            Err(reason) => rejected.push(RowRejection { row: i + 1, reason }),
        }
    }
    Ok((rows, rejected))
}

pub fn write_unit_csv<W: Write>(schema: &CovariateSchema, rows: &[UnitRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.covariates().iter().map(|c| c.name.as_str()).collect();
    header.extend(["w", "y"]);
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r
            .cell
            .0
            .iter()
            .zip(schema.covariates())
            .map(|(&l, c)| c.levels[l].clone())
            .collect();
        rec.push(if r.treated { "1" } else { "0" }.into());
        rec.push(format!("{}", r.y));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

const CELL_COLUMNS: [&str; 6] = ["n0", "n1", "mean0", "mean1", "var0", "var1"];

/// Cell-level CSV: covariate columns plus `n0,n1,mean0,mean1,var0,var1`.
/// Empty mean/variance fields mean "not available".
pub fn read_cell_csv<R: Read>(schema: &CovariateSchema, reader: R) -> Result<CellTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (cov, ext) = header_positions(schema, &headers, &CELL_COLUMNS)?;
    let mut table = CellTable::empty(schema.clone());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let levels = parse_levels(schema, &rec, &cov)
            .map_err(|e| Error::Input(format!("cell row {}: {}", i + 1, e)))?;
        let field = |k: usize| rec.get(ext[k]).unwrap_or("").trim().to_string();
        let num = |k: usize| -> Result<Option<f64>> {
            let s = field(k);
            if s.is_empty() {
                return Ok(None);
            }
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Input(format!("cell row {}: bad number `{}`", i + 1, s)))?;
            if !v.is_finite() {
                return Err(Error::Input(format!("cell row {}: non-finite `{}`", i + 1, s)));
            }
            Ok(Some(v))
        };
        let count = |k: usize| -> Result<u64> {
            field(k)
                .parse()
                .map_err(|_| Error::Input(format!("cell row {}: bad count `{}`", i + 1, field(k))))
        };
        let (n0, n1) = (count(0)?, count(1)?);
        let stats = CellStats {
            control: ArmStats::from_summary(n0, num(2)?.unwrap_or(0.0), num(4)?),
            treatment: ArmStats::from_summary(n1, num(3)?.unwrap_or(0.0), num(5)?),
        };
        let idx = schema.cell_index(&levels);
        table.cells[idx].merge(&stats);
    }
    Ok(table)
}

pub fn write_cell_csv<W: Write>(table: &CellTable, writer: W) -> Result<()> {
    let schema = table.schema();
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = schema.covariates().iter().map(|c| c.name.as_str()).collect();
    header.extend(CELL_COLUMNS);
    wtr.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{}", x)).unwrap_or_default();
    for (i, c) in table.cells().iter().enumerate() {
        if c.n0() == 0 && c.n1() == 0 {
            continue;
        }
        let levels = schema.cell_levels(i);
        let mut rec: Vec<String> = levels
            .iter()
            .zip(schema.covariates())
            .map(|(&l, cv)| cv.levels[l].clone())
            .collect();
        rec.push(c.n0().to_string());
        rec.push(c.n1().to_string());
        rec.push(opt(c.control.mean()));
        rec.push(opt(c.treatment.mean()));
        rec.push(opt(c.control.variance()));
        rec.push(opt(c.treatment.variance()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceOverride {
    pub cell: usize,
    pub var0: f64,
    pub var1: f64,
}

/// Variance override CSV: covariate columns plus `var0,var1`.
pub fn read_variance_overrides<R: Read>(
    schema: &CovariateSchema,
    reader: R,
) -> Result<Vec<VarianceOverride>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let (cov, ext) = header_positions(schema, &headers, &["var0", "var1"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let levels = parse_levels(schema, &rec, &cov)
            .map_err(|e| Error::Input(format!("override row {}: {}", i + 1, e)))?;
        let num = |k: usize| -> Result<f64> {
            let s = rec.get(ext[k]).unwrap_or("");
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Input(format!("override row {}: bad variance `{}`", i + 1, s)))?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("override row {}: invalid variance {}", i + 1, v)));
            }
            Ok(v)
        };
        out.push(VarianceOverride {
            cell: schema.cell_index(&levels),
            var0: num(0)?,
            var1: num(1)?,
        });
    }
    Ok(out)
}
