//! Warm-started λ path, fused-cluster extraction, debiased refits and
//! information-criterion model selection.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::admm::{factorize, solve, AdmmConfig, AdmmSolution};
use crate::cells::MeasurementTable;
use crate::error::{Error, Result};
use crate::operators::{DesignOperator, PenaltyOperator, ReducedProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Bic,
    Aic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(Criterion::Bic),
            "aic" => Ok(Criterion::Aic),
            other => Err(Error::Config(format!("unknown criterion `{}` (expected bic or aic)", other))),
        }
    }
}

/// Geometric grid from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, count: usize, min_ratio: f64) -> Result<Vec<f64>> {
    if count < 2 || !(min_ratio > 0.0 && min_ratio < 1.0) || !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::Config(format!(
            "grid needs count >= 2, 0 < min_ratio < 1 and lambda_max > 0 (got {}, {}, {})",
            count, min_ratio, lambda_max
        )));
    }
    let step = min_ratio.ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|i| {
            if i == count - 1 {
                lambda_max * min_ratio
            } else {
                lambda_max * (step * i as f64).exp()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    pub term: usize,
    /// Sorted term-vertex indices.
    pub vertices: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct ClusterSet {
    pub clusters: Vec<Cluster>,
    pub delta_fuse: f64,
    pub delta_zero: f64,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cell indicator columns, one per cluster.
    pub fn columns(&self, design: &DesignOperator) -> Vec<Vec<f64>> {
        self.clusters
            .iter()
            .map(|c| design.indicator(c.term, &c.vertices))
            .collect()
    }
}

/// `max(1e-8, 1e-3 · max_k ‖u_k‖_∞)`
pub fn default_threshold(u: &[f64]) -> f64 {
    let m = u.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    (1e-3 * m).max(1e-8)
}

/// Connected components of each term graph under edges with
/// `|u_i − u_j| ≤ δ_fuse`; a component's value is the mean of its members
/// weighted by the cell weight each vertex carries. Components with
/// `|value| ≤ δ_zero` are dropped.
pub fn extract_clusters(
    u: &[f64],
    penalty: &PenaltyOperator,
    vertex_weight: &[f64],
    delta_fuse: f64,
    delta_zero: f64,
) -> ClusterSet {
    let mut clusters = Vec::new();
    for k in 0..penalty.n_terms() {
        let range = penalty.col_range(k);
        let uk = &u[range.clone()];
        let wk = &vertex_weight[range];
        let n = uk.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j) in penalty.graphs()[k].edges() {
            if (uk[i] - uk[j]).abs() <= delta_fuse {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for v in 0..n {
            let r = find(&mut parent, v);
            members[r].push(v);
        }
        for verts in members.into_iter().filter(|m| !m.is_empty()) {
            let w: f64 = verts.iter().map(|&v| wk[v]).sum();
            let value = if w > 0.0 {
                verts.iter().map(|&v| wk[v] * uk[v]).sum::<f64>() / w
            } else {
                verts.iter().map(|&v| uk[v]).sum::<f64>() / verts.len() as f64
            };
            if value.abs() > delta_zero {
                clusters.push(Cluster {
                    term: k,
                    vertices: verts,
                    value,
                });
            }
        }
    }
    ClusterSet {
        clusters,
        delta_fuse,
        delta_zero,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    /// Index into the candidate columns handed to the refit.
    pub column: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub t: f64,
    pub p: f64,
}

/// Weighted least squares with known measurement variances `1/M_e`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefitModel {
    pub intercept: f64,
    pub intercept_stderr: f64,
    pub coefficients: Vec<Coefficient>,
    /// Candidate columns dropped as collinear with earlier ones.
    pub pruned: Vec<usize>,
    /// Covariance of `(intercept, coefficients...)`.
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    /// Weighted half residual sum of squares.
    pub res: f64,
    pub dof: usize,
    pub n_t: usize,
}

impl RefitModel {
    pub fn n_effects(&self) -> usize {
        self.coefficients.len()
    }

    pub fn fitted(&self, columns: &[Vec<f64>], n_cells: usize) -> Vec<f64> {
        let mut f = vec![self.intercept; n_cells];
        for c in &self.coefficients {
            for (fi, x) in f.iter_mut().zip(&columns[c.column]) {
                *fi += c.estimate * x;
            }
        }
        f
    }

    pub fn criteria(&self) -> (f64, f64) {
        information_criteria(self.res, self.dof, self.n_t)
    }
}

/// `(AIC, BIC) = (2·Res + 2·Dof, 2·Res + Dof·log N_t)`
pub fn information_criteria(res: f64, dof: usize, n_t: usize) -> (f64, f64) {
    let d = dof as f64;
    (2.0 * res + 2.0 * d, 2.0 * res + d * (n_t.max(1) as f64).ln())
}

/// Intercept plus the given indicator (or any real) columns, fitted on
/// cells with positive weight. Columns that are numerically in the span of
/// the intercept and earlier kept columns are pruned.
pub fn weighted_ols(columns: &[Vec<f64>], meas: &MeasurementTable) -> Result<RefitModel> {
    let usable: Vec<usize> = (0..meas.len()).filter(|&i| meas.weights[i] > 0.0).collect();
    let n_t = usable.len();
    if n_t == 0 {
        return Err(Error::NoUsableCells("refit needs cells with positive weight".into()));
    }
    let w: Vec<f64> = usable.iter().map(|&i| meas.weights[i]).collect();
    let y: Vec<f64> = usable.iter().map(|&i| meas.values[i]).collect();

    // weighted Gram–Schmidt to decide which columns to keep
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let mut basis: Vec<Vec<f64>> = vec![];
    let one_norm = w.iter().sum::<f64>().sqrt();
    basis.push(sw.iter().map(|s| s / one_norm).collect());
    let mut kept = Vec::new();
    let mut pruned = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        let mut v: Vec<f64> = usable.iter().zip(&sw).map(|(&i, s)| col[i] * s).collect();
        let n0: f64 = v.iter().map(|x| x * x).sum::<f64>();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
            }
        }
        let n1: f64 = v.iter().map(|x| x * x).sum::<f64>();
        if n0 == 0.0 || n1 <= 1e-10 * n0 {
            pruned.push(j);
            continue;
        }
        let nn = n1.sqrt();
        basis.push(v.iter().map(|x| x / nn).collect());
        kept.push(j);
    }

    let p = kept.len() + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for (r, &i) in usable.iter().enumerate() {
        row[0] = 1.0;
        for (c, &j) in kept.iter().enumerate() {
            row[c + 1] = columns[j][i];
        }
        for a in 0..p {
            if row[a] == 0.0 {
                continue;
            }
            xty[a] += w[r] * row[a] * y[r];
            for b in 0..p {
                xtx[(a, b)] += w[r] * row[a] * row[b];
            }
        }
    }
    let chol = Cholesky::new(xtx).ok_or_else(|| Error::Factorization("refit normal matrix is singular".into()))?;
    let beta = chol.solve(&xty);
    let cov = chol.inverse();
    let mut res = 0.0;
    for (r, &i) in usable.iter().enumerate() {
        let mut fit = beta[0];
        for (c, &j) in kept.iter().enumerate() {
            fit += beta[c + 1] * columns[j][i];
        }
        let e = y[r] - fit;
        res += 0.5 * w[r] * e * e;
    }
    let dof = p;
    let df = (n_t as f64 - dof as f64).max(1.0);
    let tdist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(format!("t distribution: {}", e)))?;
    let coefficients = kept
        .iter()
        .enumerate()
        .map(|(c, &j)| {
            let se = cov[(c + 1, c + 1)].max(0.0).sqrt();
            let est = beta[c + 1];
            let t = if se > 0.0 { est / se } else { f64::INFINITY };
            let pval = (2.0 * (1.0 - tdist.cdf(t.abs()))).clamp(0.0, 1.0);
            Coefficient {
                column: j,
                estimate: est,
                stderr: se,
                t,
                p: pval,
            }
        })
        .collect();
    Ok(RefitModel {
        intercept: beta[0],
        intercept_stderr: cov[(0, 0)].max(0.0).sqrt(),
        coefficients,
        pruned,
        covariance: cov,
        res,
        dof,
        n_t,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathConfig {
    pub admm: AdmmConfig,
    pub criterion: Criterion,
    /// `None` selects the signal-relative default.
    pub delta_fuse: Option<f64>,
    pub delta_zero: Option<f64>,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            admm: AdmmConfig::default(),
            criterion: Criterion::Bic,
            delta_fuse: None,
            delta_zero: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathEntry {
    pub lambda: f64,
    pub solution: AdmmSolution,
    pub clusters: ClusterSet,
    pub refit: RefitModel,
    pub res: f64,
    pub dof: usize,
    pub aic: f64,
    pub bic: f64,
    pub n_effects: usize,
    pub converged: bool,
}

impl PathEntry {
    pub fn score(&self, c: Criterion) -> f64 {
        match c {
            Criterion::Bic => self.bic,
            Criterion::Aic => self.aic,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    pub entries: Vec<PathEntry>,
    pub selected: usize,
    pub criterion: Criterion,
}

impl PathResult {
    pub fn selected_entry(&self) -> &PathEntry {
        &self.entries[self.selected]
    }
}

/// Rows of the path summary document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummaryRow {
    pub lambda: f64,
    pub n_effects: usize,
    #[serde(rename = "Res")]
    pub res: f64,
    #[serde(rename = "Dof")]
    pub dof: usize,
    #[serde(rename = "AIC")]
    pub aic: f64,
    #[serde(rename = "BIC")]
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PathResult {
    pub fn summary(&self) -> Vec<PathSummaryRow> {
        self.entries
            .iter()
            .map(|e| PathSummaryRow {
                lambda: e.lambda,
                n_effects: e.n_effects,
                res: e.res,
                dof: e.dof,
                aic: e.aic,
                bic: e.bic,
                converged: e.converged,
                iterations: e.solution.iterations,
            })
            .collect()
    }
}

/// Index minimizing the criterion among converged entries (all entries if
/// none converged); ties go to the earlier, larger λ.
pub fn select(entries: &[PathEntry], criterion: Criterion) -> usize {
    let any_converged = entries.iter().any(|e| e.converged);
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in entries.iter().enumerate() {
        if any_converged && !e.converged {
            continue;
        }
        let s = e.score(criterion);
        if best.map_or(true, |(_, b)| s < b) {
            best = Some((i, s));
        }
    }
    best.map(|b| b.0).unwrap_or(0)
}

pub fn evaluate_solution(
    problem: &ReducedProblem,
    penalty: &PenaltyOperator,
    meas: &MeasurementTable,
    solution: AdmmSolution,
    config: &PathConfig,
) -> Result<PathEntry> {
    let thr = default_threshold(&solution.u);
    let clusters = extract_clusters(
        &solution.u,
        penalty,
        &problem.vertex_weight,
        config.delta_fuse.unwrap_or(thr),
        config.delta_zero.unwrap_or(thr),
    );
    let refit = weighted_ols(&clusters.columns(&problem.design), meas)?;
    let (aic, bic) = refit.criteria();
    Ok(PathEntry {
        lambda: solution.lambda,
        converged: solution.converged,
        res: refit.res,
        dof: refit.dof,
        n_effects: refit.n_effects(),
        aic,
        bic,
        clusters,
        refit,
        solution,
    })
}

/// Solve along a descending grid, each solve warm-started from the last.
pub fn run_path(
    problem: &ReducedProblem,
    penalty: &PenaltyOperator,
    meas: &MeasurementTable,
    grid: &[f64],
    config: &PathConfig,
) -> Result<PathResult> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("lambda grid must be strictly decreasing".into()));
    }
    let factor = factorize(problem, penalty, &config.admm)?;
    let mut entries = Vec::with_capacity(grid.len());
    let mut warm: Option<AdmmSolution> = None;
    for &lambda in grid {
        let sol = solve(problem, penalty, &factor, lambda, &config.admm, warm.as_ref())?;
        if !sol.converged {
            log::warn!("ADMM hit max_iter at lambda {:.4e}", lambda);
        }
        warm = Some(sol.clone());
        entries.push(evaluate_solution(problem, penalty, meas, sol, config)?);
    }
    let selected = select(&entries, config.criterion);
    Ok(PathResult {
        entries,
        selected,
        criterion: config.criterion,
    })
}

/// AIC increase from deleting each cluster of a model and refitting.
pub fn importance_scores(columns: &[Vec<f64>], full: &RefitModel, meas: &MeasurementTable) -> Result<Vec<f64>> {
    let (aic_full, _) = full.criteria();
    (0..columns.len())
        .map(|c| {
            let rest: Vec<Vec<f64>> = columns
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != c)
                .map(|(_, col)| col.clone())
                .collect();
            let m = weighted_ols(&rest, meas)?;
            Ok(m.criteria().0 - aic_full)
        })
        .collect()
}
