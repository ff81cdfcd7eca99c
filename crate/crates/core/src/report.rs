//! The end-to-end pipeline, the report document and its output files.
//!
//! Heatmap layout: the axis is every level of every covariate in schema
//! order. Diagonal entries carry first-order effects, upper cross blocks
//! carry second-order effects and the whole strict lower triangle carries
//! the global effect.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::cells::{
    aggregate_units, measurements, read_cell_csv, read_unit_csv, read_variance_overrides, CellTable,
    MeasurementMode, MeasurementOptions, UnitRow, VarianceOverride,
};
use crate::error::{Error, Result};
use crate::operators::{build_design, build_penalty, reduce, write_triplets};
use crate::path::{importance_scores, lambda_grid, run_path, Criterion, PathConfig, PathSummaryRow, RefitModel};
use crate::reprocess::{reprocess, Provenance, ReprocessConfig};
use crate::schema::{enumerate_terms, CovariateSchema, TermSpec};
use crate::screening::{group_lasso_screen, group_lasso_screen_units, ScreenConfig, ScreenResult};
use crate::weights::{estimate_weights, lambda_max, WeightEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    #[default]
    Unit,
    Cell,
}

/// Every algorithmic setting of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub mode: MeasurementMode,
    pub alpha: f64,
    pub order: usize,
    pub grid_count: usize,
    pub grid_min_ratio: f64,
    pub criterion: Criterion,
    pub mc_samples: usize,
    pub seed: u64,
    /// `None` disables screening.
    pub screen: Option<ScreenConfig>,
    pub delta_fuse: Option<f64>,
    pub delta_zero: Option<f64>,
    pub reprocess: bool,
    pub measurement: MeasurementOptions,
    pub admm: AdmmConfig,
    pub elastic_net: ReprocessConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            mode: MeasurementMode::Additive,
            alpha: 0.5,
            order: 2,
            grid_count: 50,
            grid_min_ratio: 0.01,
            criterion: Criterion::Bic,
            mc_samples: 10_000,
            seed: 0,
            screen: None,
            delta_fuse: None,
            delta_zero: None,
            reprocess: true,
            measurement: MeasurementOptions::default(),
            admm: AdmmConfig::default(),
            elastic_net: ReprocessConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(1..=2).contains(&self.order) {
            return bad(format!("order must be 1 or 2, got {}", self.order));
        }
        if self.grid_count < 2 || !(self.grid_min_ratio > 0.0 && self.grid_min_ratio < 1.0) {
            return bad("grid needs grid_count >= 2 and 0 < grid_min_ratio < 1".into());
        }
        if self.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        for d in [self.delta_fuse, self.delta_zero].into_iter().flatten() {
            if !(d >= 0.0 && d.is_finite()) {
                return bad(format!("thresholds must be finite and nonnegative, got {}", d));
            }
        }
        if let Some(s) = &self.screen {
            if s.keep_max == 0 || s.grid_count < 2 || !(s.min_ratio > 0.0 && s.min_ratio < 1.0) {
                return bad("screening needs keep_max >= 1, grid_count >= 2 and 0 < min_ratio < 1".into());
            }
        }
        let en = &self.elastic_net;
        if !(en.l2_ratio >= 0.0) || en.grid_count < 2 || !(en.min_ratio > 0.0 && en.min_ratio < 1.0) {
            return bad("elastic_net needs l2_ratio >= 0, grid_count >= 2 and 0 < min_ratio < 1".into());
        }
        self.admm.validate()
    }
}

/// The JSON run document: file locations plus a flattened [`FitConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub schema: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub input_kind: InputKind,
    pub weights_file: Option<PathBuf>,
    pub variance_overrides: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub dump_operators: bool,
    #[serde(flatten)]
    pub fit: FitConfig,
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub enum FitInput {
    Units(Vec<UnitRow>),
    Cells(CellTable),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEffect {
    pub label: String,
    pub term: String,
    pub covariates: Vec<String>,
    /// One level set per covariate; empty when the block is not a rectangle.
    pub levels: Vec<Vec<String>>,
    /// Level tuples of a non-rectangular block.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<Vec<String>>,
    pub estimate: f64,
    pub stderr: Option<f64>,
    pub t: Option<f64>,
    pub p: Option<f64>,
    pub importance: Option<f64>,
    /// `exp(estimate) − 1` in multiplicative mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percent_change: Option<f64>,
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intercept {
    pub estimate: f64,
    pub stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub percent_change: Option<f64>,
}

/// One refit stage, a row of `effects.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageFit {
    pub stage: String,
    pub intercept: Intercept,
    pub effects: Vec<ReportEffect>,
    #[serde(rename = "BIC")]
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightsUsed {
    pub source: String,
    pub terms: Vec<String>,
    pub values: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReprocessSummary {
    pub features: Vec<String>,
    pub supports: Vec<SupportRow>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportRow {
    pub lambda1: f64,
    pub features: Vec<String>,
    #[serde(rename = "BIC")]
    pub bic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineProvenance {
    pub config: FitConfig,
    pub screening: Option<ScreenResult>,
    pub retained_covariates: Vec<String>,
    pub rejected_rows: usize,
    pub factor_ridge: f64,
    pub reprocess: Option<ReprocessSummary>,
    pub importance_method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Heatmap {
    pub axis: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub min: f64,
    pub max: f64,
    pub pgm_scale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub mode: MeasurementMode,
    pub covariates: Vec<String>,
    pub cells: usize,
    pub usable_cells: usize,
    pub units_control: u64,
    pub units_treatment: u64,
    pub lambda_max: f64,
    pub selected_lambda: f64,
    pub selected_index: usize,
    pub criterion: Criterion,
    pub intercept: Intercept,
    pub effects: Vec<ReportEffect>,
    pub stages: Vec<StageFit>,
    pub path: Vec<PathSummaryRow>,
    pub weights: WeightsUsed,
    pub provenance: PipelineProvenance,
    pub heatmap: Heatmap,
}

impl Report {
    /// Number of HTE effects in the final model.
    pub fn n_effects(&self) -> usize {
        self.effects.len()
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }
}

/// Intermediate results kept so that a failed run can still leave them on disk.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub keep_operators: bool,
    pub weights: Option<WeightEstimate>,
    pub path: Option<(Vec<PathSummaryRow>, usize)>,
    /// `(B, b, D)` when `keep_operators` is set.
    pub operators: Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn set_label(levels: &[String]) -> String {
    if levels.len() == 1 {
        levels[0].clone()
    } else {
        format!("({})", levels.join(","))
    }
}

struct Block {
    covariates: Vec<String>,
    levels: Vec<Vec<String>>,
    cells: Vec<Vec<String>>,
}

impl Block {
    fn of(schema: &CovariateSchema, term: &TermSpec, vertices: &[usize]) -> Block {
        let covs = term.covariates();
        let mut sets: Vec<Vec<usize>> = vec![Vec::new(); covs.len()];
        for &v in vertices {
            for (j, l) in term.vertex_levels(v).into_iter().enumerate() {
                sets[j].push(l);
            }
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        let rectangular = sets.iter().map(|s| s.len()).product::<usize>() == vertices.len();
        let name = |j: usize, l: usize| schema.covariate(covs[j]).levels[l].clone();
        Block {
            covariates: covs.iter().map(|&d| schema.covariate(d).name.clone()).collect(),
            levels: if rectangular {
                sets.iter()
                    .enumerate()
                    .map(|(j, s)| s.iter().map(|&l| name(j, l)).collect())
                    .collect()
            } else {
                Vec::new()
            },
            cells: if rectangular {
                Vec::new()
            } else {
                vertices
                    .iter()
                    .map(|&v| term.vertex_levels(v).into_iter().enumerate().map(|(j, l)| name(j, l)).collect())
                    .collect()
            },
        }
    }

    fn label(&self) -> String {
        if self.cells.is_empty() {
            self.covariates
                .iter()
                .zip(&self.levels)
                .map(|(c, l)| format!("{}:{}", c, set_label(l)))
                .collect::<Vec<_>>()
                .join("&")
        } else {
            let cells: Vec<String> = self.cells.iter().map(|c| format!("({})", c.join(","))).collect();
            format!("{}:{{{}}}", self.covariates.join("*"), cells.join(","))
        }
    }
}

fn stage_fit(
    stage: &str,
    provenance: &[String],
    blocks: &[Block],
    columns: &[Vec<f64>],
    model: &RefitModel,
    meas: &crate::cells::MeasurementTable,
    terms: &[String],
) -> Result<StageFit> {
    let mult = meas.mode == MeasurementMode::Multiplicative;
    let pct = |x: f64| if mult { Some(x.exp_m1()) } else { None };
    let kept: Vec<Vec<f64>> = model.coefficients.iter().map(|c| columns[c.column].clone()).collect();
    let importance = importance_scores(&kept, model, meas)?;
    let effects = model
        .coefficients
        .iter()
        .zip(&importance)
        .map(|(c, imp)| {
            let b = &blocks[c.column];
            ReportEffect {
                label: b.label(),
                term: terms[c.column].clone(),
                covariates: b.covariates.clone(),
                levels: b.levels.clone(),
                cells: b.cells.clone(),
                estimate: c.estimate,
                stderr: finite(c.stderr),
                t: finite(c.t),
                p: finite(c.p),
                importance: finite(*imp),
                percent_change: pct(c.estimate),
                provenance: provenance[c.column].clone(),
            }
        })
        .collect();
    Ok(StageFit {
        stage: stage.to_string(),
        intercept: Intercept {
            estimate: model.intercept,
            stderr: finite(model.intercept_stderr),
            percent_change: pct(model.intercept),
        },
        effects,
        bic: model.criteria().1,
    })
}

/// Axis labels `name:level` over all covariates in schema order.
pub fn heatmap_axis(schema: &CovariateSchema) -> Vec<String> {
    schema
        .covariates()
        .iter()
        .flat_map(|c| c.levels.iter().map(move |l| format!("{}:{}", c.name, l)))
        .collect()
}

/// Rebuild the heatmap matrix from an intercept and an effect list.
pub fn render_heatmap(schema: &CovariateSchema, intercept: f64, effects: &[ReportEffect]) -> Result<Vec<Vec<f64>>> {
    let mut offsets = vec![0usize];
    for c in schema.covariates() {
        offsets.push(offsets.last().unwrap() + c.size());
    }
    let t = *offsets.last().unwrap();
    let mut m = vec![vec![0.0; t]; t];
    for (i, row) in m.iter_mut().enumerate() {
        for v in row.iter_mut().take(i) {
            *v = intercept;
        }
    }
    for e in effects {
        let idx: Vec<usize> = e
            .covariates
            .iter()
            .map(|n| schema.index_of(n).ok_or_else(|| Error::Input(format!("unknown covariate `{}` in effect", n))))
            .collect::<Result<_>>()?;
        if idx.is_empty() || idx.len() > 2 || (idx.len() == 2 && idx[0] >= idx[1]) {
            return Err(Error::Input(format!("effect `{}` is not a first- or second-order term", e.label)));
        }
        let level = |j: usize, name: &str| -> Result<usize> {
            schema
                .covariate(idx[j])
                .level_index(name)
                .ok_or_else(|| Error::Input(format!("unknown level `{}` of `{}`", name, e.covariates[j])))
        };
        let mut tuples: Vec<Vec<usize>> = Vec::new();
        if e.cells.is_empty() {
            if e.levels.len() != idx.len() {
                return Err(Error::Input(format!("effect `{}` has malformed level sets", e.label)));
            }
            let a: Vec<usize> = e.levels[0].iter().map(|n| level(0, n)).collect::<Result<_>>()?;
            if idx.len() == 1 {
                tuples.extend(a.into_iter().map(|x| vec![x]));
            } else {
                let b: Vec<usize> = e.levels[1].iter().map(|n| level(1, n)).collect::<Result<_>>()?;
                for &x in &a {
                    for &y in &b {
                        tuples.push(vec![x, y]);
                    }
                }
            }
        } else {
            for c in &e.cells {
                if c.len() != idx.len() {
                    return Err(Error::Input(format!("effect `{}` has malformed cells", e.label)));
                }
                tuples.push(c.iter().enumerate().map(|(j, n)| level(j, n)).collect::<Result<_>>()?);
            }
        }
        for tup in tuples {
            let i = offsets[idx[0]] + tup[0];
            let j = if idx.len() == 1 { i } else { offsets[idx[1]] + tup[1] };
            m[i][j] += e.estimate;
        }
    }
    Ok(m)
}

fn heatmap(schema: &CovariateSchema, intercept: f64, effects: &[ReportEffect]) -> Result<Heatmap> {
    let values = render_heatmap(schema, intercept, effects)?;
    let flat = values.iter().flatten();
    let min = flat.clone().cloned().fold(f64::INFINITY, f64::min);
    let max = flat.cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Heatmap {
        axis: heatmap_axis(schema),
        values,
        min,
        max,
        pgm_scale: format!("gray = round(255 * (value - {}) / ({} - {}))", min, max, min),
    })
}

/// Run every stage on in-memory data.
pub fn fit(
    schema: &CovariateSchema,
    input: FitInput,
    overrides: &[VarianceOverride],
    weights_file: Option<&WeightEstimate>,
    cfg: &FitConfig,
    art: &mut Artifacts,
) -> Result<Report> {
    cfg.validate()?;
    let opts = &cfg.measurement;

    let screening = match &cfg.screen {
        Some(sc) => Some(
            match &input {
                FitInput::Units(rows) => group_lasso_screen_units(schema, rows, cfg.mode, opts, sc),
                FitInput::Cells(t) => group_lasso_screen(t, cfg.mode, opts, sc),
            }
            .map_err(|e| e.in_stage("screen"))?,
        ),
        None => None,
    };
    let keep: Vec<usize> = match &screening {
        Some(r) if !r.pass_through => r.retained.clone(),
        _ => (0..schema.len()).collect(),
    };
    let projected = keep.len() < schema.len();
    if projected && !overrides.is_empty() {
        return Err(Error::Config("variance overrides cannot be combined with covariate screening".into()));
    }
    let schema = if projected { schema.project(&keep)? } else { schema.clone() };

    let (mut table, rejected_rows) = match input {
        FitInput::Units(rows) => {
            let (t, rej) = if projected {
                let sub: Vec<UnitRow> = rows.iter().map(|r| r.project(&keep)).collect();
                aggregate_units(&schema, &sub)
            } else {
                aggregate_units(&schema, &rows)
            };
            for r in rej.iter().take(5) {
                log::warn!("row {} rejected: {}", r.row, r.reason);
            }
            (t, rej.len())
        }
        FitInput::Cells(t) => {
            let t = if projected { t.marginalize(&keep).map_err(|e| e.in_stage("aggregate"))? } else { t };
            (t, 0)
        }
    };
    table.apply_variance_overrides(overrides);
    let (n0, n1) = table.arm_totals();

    let meas = measurements(table.cells(), cfg.mode, opts).map_err(|e| e.in_stage("measure"))?;
    if meas.usable_count() == 0 {
        return Err(Error::NoUsableCells("every cell is below min_count or invalid".into()).in_stage("measure"));
    }

    let terms = enumerate_terms(&schema, cfg.order).map_err(|e| e.in_stage("terms"))?;
    let labels: Vec<String> = terms.iter().map(|t| t.label(&schema)).collect();
    let design = build_design(&schema, &terms).map_err(|e| e.in_stage("design"))?;
    let unweighted = build_penalty(&terms, cfg.alpha, &vec![1.0; terms.len()]).map_err(|e| e.in_stage("design"))?;

    let (w, used) = match weights_file {
        Some(f) => {
            if (f.alpha - cfg.alpha).abs() > 1e-12 {
                log::warn!("weights were tuned for alpha {} but the fit uses {}", f.alpha, cfg.alpha);
            }
            let w = f.weights_for(&labels).map_err(|e| e.in_stage("weights"))?;
            (w.clone(), WeightsUsed {
                source: "file".into(),
                terms: labels.clone(),
                values: w,
                samples: f.samples,
                seed: f.seed,
            })
        }
        None => {
            let est = estimate_weights(&design, &unweighted, &meas.weights, cfg.mc_samples, cfg.seed)
                .map_err(|e| e.in_stage("weights"))?
                .labelled(&schema, &terms);
            art.weights = Some(est.clone());
            (est.weights.clone(), WeightsUsed {
                source: "monte-carlo".into(),
                terms: labels.clone(),
                values: est.weights,
                samples: cfg.mc_samples,
                seed: cfg.seed,
            })
        }
    };
    let penalty = unweighted.with_weights(&w).map_err(|e| e.in_stage("weights"))?;

    let problem = reduce(&design, &meas).map_err(|e| e.in_stage("reduce"))?;
    if art.keep_operators {
        art.operators = Some((problem.big_b.clone(), problem.b.clone(), penalty.to_dense()));
    }

    let lmax = lambda_max(&problem, &penalty).map_err(|e| e.in_stage("path"))?;
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(Error::NoUsableCells("measurements carry no variation to fit".into()).in_stage("path"));
    }
    let grid = lambda_grid(lmax, cfg.grid_count, cfg.grid_min_ratio).map_err(|e| e.in_stage("path"))?;
    let pcfg = PathConfig {
        admm: cfg.admm,
        criterion: cfg.criterion,
        delta_fuse: cfg.delta_fuse,
        delta_zero: cfg.delta_zero,
    };
    let path = run_path(&problem, &penalty, &meas, &grid, &pcfg).map_err(|e| e.in_stage("path"))?;
    art.path = Some((path.summary(), path.selected));
    let sel = path.selected_entry();
    let factor_ridge = crate::admm::factorize(&problem, &penalty, &cfg.admm)
        .map(|f| f.ridge())
        .unwrap_or(f64::NAN);

    let tv_blocks: Vec<Block> = sel
        .clusters
        .clusters
        .iter()
        .map(|c| Block::of(&schema, &terms[c.term], &c.vertices))
        .collect();
    let tv_terms: Vec<String> = sel.clusters.clusters.iter().map(|c| labels[c.term].clone()).collect();
    let tv_prov = vec!["tv-cluster".to_string(); tv_blocks.len()];
    let mut stages = vec![stage_fit(
        "tv+ols",
        &tv_prov,
        &tv_blocks,
        &sel.clusters.columns(&design),
        &sel.refit,
        &meas,
        &tv_terms,
    )
    .map_err(|e| e.in_stage("refit"))?];

    let mut summary = None;
    if cfg.reprocess {
        let rp = reprocess(&sel.clusters, &design, &meas, &cfg.elastic_net).map_err(|e| e.in_stage("reprocess"))?;
        let blocks: Vec<Block> = rp
            .features
            .iter()
            .map(|f| Block::of(&schema, &terms[f.term], &f.vertices))
            .collect();
        let fterms: Vec<String> = rp.features.iter().map(|f| labels[f.term].clone()).collect();
        let prov: Vec<String> = rp
            .features
            .iter()
            .map(|f| {
                match f.provenance {
                    Provenance::Cluster => "cluster",
                    Provenance::Complement => "complement",
                    Provenance::ComplementPart => "complement-part",
                }
                .to_string()
            })
            .collect();
        let names: Vec<String> = blocks.iter().map(|b| b.label()).collect();
        stages.push(
            stage_fit("elastic-net+ols", &prov, &blocks, &rp.columns, &rp.model, &meas, &fterms)
                .map_err(|e| e.in_stage("reprocess"))?,
        );
        summary = Some(ReprocessSummary {
            supports: rp
                .path
                .iter()
                .map(|s| SupportRow {
                    lambda1: s.lambda1,
                    features: s.support.iter().map(|&i| names[i].clone()).collect(),
                    bic: s.bic,
                })
                .collect(),
            features: names,
            selected: rp.selected,
        });
    }

    let last = stages.last().expect("at least one stage").clone();
    let heat = heatmap(&schema, last.intercept.estimate, &last.effects).map_err(|e| e.in_stage("report"))?;
    Ok(Report {
        mode: cfg.mode,
        covariates: schema.covariates().iter().map(|c| c.name.clone()).collect(),
        cells: meas.len(),
        usable_cells: meas.usable_count(),
        units_control: n0,
        units_treatment: n1,
        lambda_max: lmax,
        selected_lambda: sel.lambda,
        selected_index: path.selected,
        criterion: cfg.criterion,
        intercept: last.intercept,
        effects: last.effects,
        stages,
        path: path.summary(),
        weights: used,
        provenance: PipelineProvenance {
            config: cfg.clone(),
            screening,
            retained_covariates: schema.covariates().iter().map(|c| c.name.clone()).collect(),
            rejected_rows,
            factor_ridge,
            reprocess: summary,
            importance_method: "AIC increase when the effect is deleted and the model refit (approximation of a risk-estimate comparison)".into(),
        },
        heatmap: heat,
    })
}

/// Everything read from disk for a run; loading fails before any output is written.
pub struct LoadedRun {
    pub schema: CovariateSchema,
    pub input: FitInput,
    pub overrides: Vec<VarianceOverride>,
    pub weights: Option<WeightEstimate>,
    pub output: PathBuf,
}

pub fn load_run(cfg: &RunConfig) -> Result<LoadedRun> {
    cfg.fit.validate()?;
    let need = |p: &Option<PathBuf>, what: &str| -> Result<PathBuf> {
        p.clone().ok_or_else(|| Error::Config(format!("missing {}", what)))
    };
    let schema_path = need(&cfg.schema, "schema path")?;
    let input_path = need(&cfg.input, "input path")?;
    let output = need(&cfg.output, "output directory")?;
    let schema = CovariateSchema::from_json_file(&schema_path)?;
    let open = |p: &Path| fs::File::open(p).map_err(|e| Error::Input(format!("cannot open {}: {}", p.display(), e)));
    let input = match cfg.input_kind {
        InputKind::Unit => {
            let (rows, rej) = read_unit_csv(&schema, open(&input_path)?)?;
            if rows.is_empty() {
                return Err(Error::Input(format!(
                    "no valid unit rows in {} ({} rejected)",
                    input_path.display(),
                    rej.len()
                )));
            }
            for r in rej.iter().take(5) {
                log::warn!("{} row {} rejected: {}", input_path.display(), r.row, r.reason);
            }
            FitInput::Units(rows)
        }
        InputKind::Cell => FitInput::Cells(read_cell_csv(&schema, open(&input_path)?)?),
    };
    let overrides = match &cfg.variance_overrides {
        Some(p) => read_variance_overrides(&schema, open(p)?)?,
        None => Vec::new(),
    };
    let weights = match &cfg.weights_file {
        Some(p) => Some(WeightEstimate::from_json_str(
            &fs::read_to_string(p).map_err(|e| Error::Input(format!("cannot read {}: {}", p.display(), e)))?,
        )?),
        None => None,
    };
    Ok(LoadedRun {
        schema,
        input,
        overrides,
        weights,
        output,
    })
}

/// Load, fit and write. Validation errors leave the output directory
/// untouched; a failing stage leaves its partial artifacts plus a `FAILED` marker.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Report> {
    let run = load_run(cfg)?;
    let mut art = Artifacts {
        keep_operators: cfg.dump_operators,
        ..Default::default()
    };
    let result = fit(&run.schema, run.input, &run.overrides, run.weights.as_ref(), &cfg.fit, &mut art);
    if cfg.dump_operators {
        if let Some(ops) = &art.operators {
            write_operators(&run.output, ops)?;
        }
    }
    match result {
        Ok(report) => {
            write_outputs(&report, &run.output)?;
            if let Some(w) = &art.weights {
                fs::write(run.output.join("weights.json"), w.to_json_string() + "\n")?;
            }
            Ok(report)
        }
        Err(e) => {
            write_failure(&run.output, &e, &art)?;
            Err(e)
        }
    }
}

fn write_operators(outdir: &Path, (b_mat, b_vec, d): &(DMatrix<f64>, DVector<f64>, DMatrix<f64>)) -> Result<()> {
    let dir = outdir.join("operators");
    fs::create_dir_all(&dir)?;
    write_triplets(b_mat, fs::File::create(dir.join("B.txt"))?)?;
    let bv = DMatrix::from_column_slice(b_vec.len(), 1, b_vec.as_slice());
    write_triplets(&bv, fs::File::create(dir.join("b.txt"))?)?;
    write_triplets(d, fs::File::create(dir.join("D.txt"))?)?;
    Ok(())
}

#[derive(Serialize)]
struct FailureMarker<'a> {
    stage: &'a str,
    error: String,
}

pub fn write_failure(outdir: &Path, err: &Error, art: &Artifacts) -> Result<()> {
    fs::create_dir_all(outdir)?;
    let stage = match err {
        Error::Stage { stage, .. } => stage,
        _ => "unknown",
    };
    let marker = FailureMarker {
        stage,
        error: err.to_string(),
    };
    fs::write(outdir.join("FAILED"), serde_json::to_string_pretty(&marker)? + "\n")?;
    if let Some(w) = &art.weights {
        fs::write(outdir.join("weights.json"), w.to_json_string() + "\n")?;
    }
    if let Some((rows, selected)) = &art.path {
        write_path_json(outdir, rows, *selected)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PathDoc<'a> {
    selected: usize,
    rows: &'a [PathSummaryRow],
}

fn write_path_json(outdir: &Path, rows: &[PathSummaryRow], selected: usize) -> Result<()> {
    let doc = PathDoc { selected, rows };
    fs::write(outdir.join("path.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

pub fn write_heatmap_csv<W: Write>(h: &Heatmap, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(h.axis.iter().cloned());
    wr.write_record(&header)?;
    for (label, row) in h.axis.iter().zip(&h.values) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Binary 8-bit graymap, linear over `[min, max]`; a flat matrix maps to 0.
pub fn heatmap_pgm(values: &[Vec<f64>]) -> Vec<u8> {
    let t = values.len();
    let min = values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", t, t).into_bytes();
    for row in values {
        for &v in row {
            let g = if max > min { (255.0 * (v - min) / (max - min)).round() } else { 0.0 };
            out.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// One row per fitting stage, one column per feature seen in any stage.
pub fn write_effects_csv<W: Write>(stages: &[StageFit], w: W) -> Result<()> {
    let mut cols: Vec<String> = Vec::new();
    for s in stages {
        for e in &s.effects {
            if !cols.contains(&e.label) {
                cols.push(e.label.clone());
            }
        }
    }
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["stage".to_string(), "global".to_string()];
    header.extend(cols.iter().cloned());
    wr.write_record(&header)?;
    for s in stages {
        let mut rec = vec![s.stage.clone(), s.intercept.estimate.to_string()];
        for c in &cols {
            rec.push(
                s.effects
                    .iter()
                    .find(|e| &e.label == c)
                    .map(|e| e.estimate.to_string())
                    .unwrap_or_default(),
            );
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_outputs(report: &Report, outdir: &Path) -> Result<()> {
    fs::create_dir_all(outdir)?;
    let marker = outdir.join("FAILED");
    if marker.exists() {
        fs::remove_file(marker)?;
    }
    fs::write(outdir.join("report.json"), report.to_json_string())?;
    write_path_json(outdir, &report.path, report.selected_index)?;
    write_heatmap_csv(&report.heatmap, fs::File::create(outdir.join("heatmap.csv"))?)?;
    fs::write(outdir.join("heatmap.pgm"), heatmap_pgm(&report.heatmap.values))?;
    write_effects_csv(&report.stages, fs::File::create(outdir.join("effects.csv"))?)?;
    Ok(())
}

/// Re-render the heatmap of a written `report.json` against its schema.
pub fn render_from_report(schema: &CovariateSchema, report_json: &str) -> Result<Vec<Vec<f64>>> {
    let v: serde_json::Value = serde_json::from_str(report_json)?;
    let intercept = v
        .pointer("/intercept/estimate")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| Error::Input("report has no intercept estimate".into()))?;
    let effects: Vec<ReportEffect> = serde_json::from_value(
        v.get("effects")
            .cloned()
            .ok_or_else(|| Error::Input("report has no effect list".into()))?,
    )?;
    render_heatmap(schema, intercept, &effects)
}

/// Heatmap of a ground-truth effect list, for comparing against fits.
pub fn truth_heatmap(schema: &CovariateSchema, truth: &crate::simulate::GroundTruth) -> Result<Vec<Vec<f64>>> {
    let effects: Vec<ReportEffect> = truth
        .effects
        .iter()
        .map(|t| ReportEffect {
            label: String::new(),
            term: String::new(),
            covariates: t.covariates.iter().map(|&d| schema.covariate(d).name.clone()).collect(),
            levels: t
                .covariates
                .iter()
                .zip(&t.level_sets)
                .map(|(&d, s)| s.iter().map(|&l| schema.covariate(d).levels[l].clone()).collect())
                .collect(),
            cells: Vec::new(),
            estimate: t.value,
            stderr: None,
            t: None,
            p: None,
            importance: None,
            percent_change: None,
            provenance: "truth".into(),
        })
        .collect();
    render_heatmap(schema, truth.global, &effects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{example1_schema, example1_truth};

    #[test]
    fn intercept_only_heatmap() {
        let s = example1_schema();
        let m = render_heatmap(&s, 0.7, &[]).unwrap();
        assert_eq!(m.len(), 22);
        for i in 0..22 {
            for j in 0..22 {
                assert_eq!(m[i][j], if i > j { 0.7 } else { 0.0 });
            }
        }
    }

    #[test]
    fn ground_truth_heatmap() {
        let s = example1_schema();
        let m = truth_heatmap(&s, &example1_truth(1.0)).unwrap();
        let mut diag = 0;
        let mut upper = 0;
        for i in 0..22 {
            for j in 0..22 {
                if i > j {
                    assert!((m[i][j] - 0.03).abs() < 1e-15);
                } else if i == j && m[i][j] != 0.0 {
                    assert!((m[i][j] + 0.1).abs() < 1e-15);
                    diag += 1;
                } else if m[i][j] != 0.0 {
                    assert!((m[i][j] - 0.1).abs() < 1e-15);
                    upper += 1;
                }
            }
        }
        assert_eq!((diag, upper), (1, 8));
        // X2 level 2 sits at axis position 10 + 1
        assert!((m[11][11] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn pgm_layout() {
        let p = heatmap_pgm(&[vec![0.0, 1.0], vec![0.5, 0.0]]);
        assert!(p.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&p[p.len() - 4..], &[0, 255, 128, 0]);
    }

    #[test]
    fn config_round_trip() {
        let mut c = RunConfig::default();
        c.fit.alpha = 0.3;
        c.fit.screen = Some(ScreenConfig::default());
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json_str(&s).unwrap(), c);
        let partial = RunConfig::from_json_str(r#"{"alpha": 1.0, "admm": {"rho": 5.0}}"#).unwrap();
        assert_eq!(partial.fit.alpha, 1.0);
        assert_eq!(partial.fit.admm.rho, 5.0);
        assert_eq!(partial.fit.admm.max_iter, 5000);
        assert!(FitConfig { order: 3, ..Default::default() }.validate().is_err());
    }
}
