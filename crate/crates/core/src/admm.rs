//! ADMM for `min ½(uᵀBu − 2bᵀu + c) + λ‖Du‖₁` with the splitting `z = Du`.
//!
//! The u-update solves `(B + ρDᵀD) u = b − Dᵀy + ρDᵀz` with a Cholesky
//! factor computed once per `(problem, penalty, ρ)` and reused along a path.
//! Internally `B`, `b` and `λ` are divided by `trace(B)/dim` so that the
//! fixed `ρ` sees a unit-scale quadratic whatever the sample sizes are.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{PenaltyOperator, ReducedProblem, RowKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    pub rho: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Extra diagonal on the quadratic, in the units of `B`.
    pub ridge: f64,
    /// Re-solve exactly on the support and fusion pattern found by ADMM.
    pub polish: bool,
    /// Record one trace row per iteration.
    pub trace: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 10.0,
            eps_abs: 1e-6,
            eps_rel: 1e-4,
            max_iter: 5000,
            ridge: 0.0,
            polish: true,
            trace: false,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.eps_abs > 0.0
            && self.eps_rel > 0.0
            && self.max_iter > 0
            && self.ridge >= 0.0
            && self.rho.is_finite()
            && self.ridge.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid ADMM settings: {:?}", self)))
        }
    }
}

pub fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

pub fn soft_threshold_vec(x: &mut [f64], t: f64) {
    x.iter_mut().for_each(|v| *v = soft_threshold(*v, t));
}

/// Cholesky factor of `B/s + ρDᵀD + ridge·I` where `s` is the internal scale.
#[derive(Debug, Clone)]
pub struct CachedFactor {
    chol: Cholesky<f64, Dyn>,
    rho: f64,
    /// Ridge in normalized units, applied as a proximal term.
    ridge: f64,
    scale: f64,
    retried: bool,
}

impl CachedFactor {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Ridge actually used, in the units of `B`.
    pub fn ridge(&self) -> f64 {
        self.ridge * self.scale
    }

    pub fn retried(&self) -> bool {
        self.retried
    }

    /// Lower-triangular `L` with `LLᵀ = F` (`R = Lᵀ`).
    pub fn l_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_column_slice(rhs);
        self.chol.solve_mut(&mut x);
        x.as_slice().to_vec()
    }
}

fn problem_scale(problem: &ReducedProblem) -> f64 {
    let n = problem.dim().max(1) as f64;
    let s = problem.big_b.trace() / n;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

pub fn factorize(problem: &ReducedProblem, penalty: &PenaltyOperator, config: &AdmmConfig) -> Result<CachedFactor> {
    config.validate()?;
    if penalty.n_cols() != problem.dim() {
        return Err(Error::Config(format!(
            "penalty has {} columns, problem has {} parameters",
            penalty.n_cols(),
            problem.dim()
        )));
    }
    let scale = problem_scale(problem);
    let n = problem.dim();
    let mut f = &problem.big_b / scale + penalty.gram() * config.rho;
    let tr = f.trace() / n.max(1) as f64;
    let mut ridge = config.ridge / scale;
    if penalty.alpha() == 0.0 {
        ridge = ridge.max(1e-8 * tr);
    }
    for i in 0..n {
        f[(i, i)] += ridge;
    }
    if let Some(chol) = Cholesky::new(f.clone()) {
        return Ok(CachedFactor {
            chol,
            rho: config.rho,
            ridge,
            scale,
            retried: false,
        });
    }
    let extra = 1e-10 * tr;
    log::warn!("Cholesky failed, retrying with ridge {:.3e}", extra);
    for i in 0..n {
        f[(i, i)] += extra;
    }
    match Cholesky::new(f) {
        Some(chol) => Ok(CachedFactor {
            chol,
            rho: config.rho,
            ridge: ridge + extra,
            scale,
            retried: true,
        }),
        None => Err(Error::Factorization(
            "B + rho DᵀD is not positive definite even after ridge regularization".into(),
        )),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmSolution {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    /// Dual variable in the units of the original objective.
    pub y: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub polished: bool,
    pub trace: Vec<TraceRow>,
}

impl AdmmSolution {
    pub fn max_abs(&self) -> f64 {
        self.u.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn objective(problem: &ReducedProblem, penalty: &PenaltyOperator, lambda: f64, u: &[f64]) -> f64 {
    problem.objective(penalty, lambda, u)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn solve(
    problem: &ReducedProblem,
    penalty: &PenaltyOperator,
    factor: &CachedFactor,
    lambda: f64,
    config: &AdmmConfig,
    warm_start: Option<&AdmmSolution>,
) -> Result<AdmmSolution> {
    config.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", lambda)));
    }
    if (factor.rho - config.rho).abs() > 0.0 {
        return Err(Error::Config("factor was built for a different rho".into()));
    }
    let n = problem.dim();
    let m = penalty.n_rows();
    let scale = factor.scale;
    let rho = factor.rho;
    let lam = lambda / scale;
    let thr = lam / rho;
    let bn: Vec<f64> = problem.b.iter().map(|x| x / scale).collect();

    let (mut u, mut z, mut y) = match warm_start {
        Some(w) if w.u.len() == n && w.z.len() == m && w.y.len() == m => {
            (w.u.clone(), w.z.clone(), w.y.iter().map(|v| v / scale).collect::<Vec<_>>())
        }
        _ => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
    };

    let mut du = vec![0.0; m];
    let mut dtv = vec![0.0; n];
    let mut zdiff = vec![0.0; m];
    let mut rhs = DVector::<f64>::zeros(n);
    let mut trace = Vec::new();
    let (mut r_norm, mut s_norm, mut eps_pri, mut eps_dual) = (f64::INFINITY, f64::INFINITY, 0.0, 0.0);
    let mut converged = false;
    let mut iterations = 0;
    let sqrt_m = (m as f64).sqrt();
    let sqrt_n = (n as f64).sqrt();

    for it in 1..=config.max_iter {
        iterations = it;
        // rhs = b − Dᵀ(y − ρz) + ridge·u
        for i in 0..m {
            zdiff[i] = rho * z[i] - y[i];
        }
        penalty.apply_transpose_into(&zdiff, &mut dtv);
        for i in 0..n {
            rhs[i] = bn[i] + dtv[i] + factor.ridge * u[i];
        }
        factor.chol.solve_mut(&mut rhs);
        u.copy_from_slice(rhs.as_slice());

        penalty.apply_into(&u, &mut du);
        let mut r2 = 0.0;
        for i in 0..m {
            let v = du[i] + y[i] / rho;
            let znew = soft_threshold(v, thr);
            zdiff[i] = znew - z[i];
            z[i] = znew;
            let r = du[i] - znew;
            y[i] += rho * r;
            r2 += r * r;
        }
        if !u.iter().all(|x| x.is_finite()) || !y.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { iteration: it });
        }
        r_norm = r2.sqrt();
        penalty.apply_transpose_into(&zdiff, &mut dtv);
        s_norm = rho * norm(&dtv);
        penalty.apply_transpose_into(&y, &mut dtv);
        eps_pri = sqrt_m * config.eps_abs + config.eps_rel * norm(&du).max(norm(&z));
        eps_dual = sqrt_n * config.eps_abs + config.eps_rel * norm(&dtv);
        if config.trace {
            trace.push(TraceRow {
                iteration: it,
                primal_residual: r_norm,
                dual_residual: s_norm,
                objective: problem.objective(penalty, lambda, &u),
            });
        }
        if r_norm <= eps_pri && s_norm <= eps_dual {
            converged = true;
            break;
        }
    }

    let mut obj = problem.objective(penalty, lambda, &u);
    let mut polished = false;
    if config.polish {
        if let Some(up) = polish(problem, penalty, lambda, &z, &u) {
            let po = problem.objective(penalty, lambda, &up);
            if po <= obj + 1e-12 * obj.abs().max(1e-300) {
                u = up;
                obj = po;
                polished = true;
                penalty.apply_into(&u, &mut z);
            }
        }
    }

    Ok(AdmmSolution {
        u,
        z,
        y: y.iter().map(|v| v * scale).collect(),
        lambda,
        iterations,
        converged,
        objective: obj,
        primal_residual: r_norm,
        dual_residual: s_norm,
        eps_pri,
        eps_dual,
        polished,
        trace,
    })
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Exact minimizer over the face selected by the slack `z`: rows with
/// `z = 0` are enforced as equalities (fused edges, zeroed vertices) and
/// the remaining rows keep the sign of `z`, which makes the penalty linear.
fn polish(
    problem: &ReducedProblem,
    penalty: &PenaltyOperator,
    lambda: f64,
    z: &[f64],
    u: &[f64],
) -> Option<Vec<f64>> {
    let n = problem.dim();
    let alpha = penalty.alpha();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut zeroed = vec![false; n];
    for (row, &zr) in z.iter().enumerate() {
        if zr != 0.0 {
            continue;
        }
        let (k, kind) = penalty.locate_row(row);
        let off = penalty.col_range(k).start;
        match kind {
            RowKind::Edge(i, j) if alpha < 1.0 => {
                let (a, b) = (find(&mut parent, off + i), find(&mut parent, off + j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
            RowKind::Vertex(v) if alpha > 0.0 => zeroed[off + v] = true,
            _ => {}
        }
    }
    let mut root_zero = vec![false; n];
    for i in 0..n {
        if zeroed[i] {
            let r = find(&mut parent, i);
            root_zero[r] = true;
        }
    }
    let mut col_of_root = vec![usize::MAX; n];
    let mut assign = vec![usize::MAX; n];
    let mut r = 0;
    for i in 0..n {
        let root = find(&mut parent, i);
        if root_zero[root] {
            continue;
        }
        if col_of_root[root] == usize::MAX {
            col_of_root[root] = r;
            r += 1;
        }
        assign[i] = col_of_root[root];
    }
    if r == 0 {
        return Some(vec![0.0; n]);
    }
    let signs: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect();
    let dts = penalty.apply_transpose(&signs);
    let mut g = DVector::<f64>::zeros(r);
    for i in 0..n {
        if assign[i] != usize::MAX {
            g[assign[i]] += problem.b[i] - lambda * dts[i];
        }
    }
    let mut h = DMatrix::<f64>::zeros(r, r);
    for i in 0..n {
        let ci = assign[i];
        if ci == usize::MAX {
            continue;
        }
        for j in 0..n {
            let cj = assign[j];
            if cj != usize::MAX {
                h[(ci, cj)] += problem.big_b[(i, j)];
            }
        }
    }
    let theta = pseudo_solve(h, &g)?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        if assign[i] != usize::MAX {
            out[i] = theta[assign[i]];
        }
    }
    if out.iter().all(|x| x.is_finite()) && out.len() == u.len() {
        Some(out)
    } else {
        None
    }
}

/// Minimum-norm solution of a symmetric PSD system.
pub(crate) fn pseudo_solve(h: DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let eig = SymmetricEigen::try_new(h, 1e-14, 0)?;
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = top * 1e-12 * eig.eigenvalues.len() as f64;
    let proj = eig.eigenvectors.transpose() * g;
    let mut coef = DVector::zeros(proj.len());
    for i in 0..proj.len() {
        let l = eig.eigenvalues[i];
        if l > tol {
            coef[i] = proj[i] / l;
        }
    }
    Some(&eig.eigenvectors * coef)
}
