//! Post-selection reprocess: discovered clusters and their complements
//! become block features, an elastic-net path over them proposes supports,
//! BIC picks one and an unpenalized weighted fit reports the estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cells::MeasurementTable;
use crate::error::{Error, Result};
use crate::operators::DesignOperator;
use crate::path::{information_criteria, weighted_ols, ClusterSet, RefitModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Cluster,
    Complement,
    ComplementPart,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockFeature {
    pub term: usize,
    pub covariates: Vec<usize>,
    /// Level set per member covariate; empty for irregular shapes.
    pub level_sets: Vec<Vec<usize>>,
    /// Sorted term vertices covered by the feature.
    pub vertices: Vec<usize>,
    pub rectangular: bool,
    pub provenance: Provenance,
}

fn complement(set: &[usize], n: usize) -> Vec<usize> {
    (0..n).filter(|l| !set.contains(l)).collect()
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Cluster and complement features. A second-order rectangle `A×B`
/// contributes `A×B`, `Aᶜ×B`, `A×Bᶜ`, `Aᶜ×Bᶜ` (nonempty ones);
/// non-rectangular clusters are kept as they are.
pub fn build_block_features(clusters: &ClusterSet, design: &DesignOperator) -> Vec<BlockFeature> {
    let mut out: Vec<BlockFeature> = Vec::new();
    let push = |f: BlockFeature, out: &mut Vec<BlockFeature>| {
        if !f.vertices.is_empty() && !out.iter().any(|g| g.term == f.term && g.vertices == f.vertices) {
            out.push(f);
        }
    };
    for c in &clusters.clusters {
        let term = &design.terms()[c.term];
        let sizes = term.sizes();
        let covs = term.covariates().to_vec();
        let vertices = sorted_unique(c.vertices.clone());
        if term.order() == 1 {
            let n = sizes[0];
            let comp = complement(&vertices, n);
            push(
                BlockFeature {
                    term: c.term,
                    covariates: covs.clone(),
                    level_sets: vec![vertices.clone()],
                    vertices: vertices.clone(),
                    rectangular: true,
                    provenance: Provenance::Cluster,
                },
                &mut out,
            );
            push(
                BlockFeature {
                    term: c.term,
                    covariates: covs,
                    level_sets: vec![comp.clone()],
                    vertices: comp,
                    rectangular: true,
                    provenance: Provenance::Complement,
                },
                &mut out,
            );
            continue;
        }
        let levels: Vec<Vec<usize>> = vertices.iter().map(|&v| term.vertex_levels(v)).collect();
        let a = sorted_unique(levels.iter().map(|l| l[0]).collect());
        let b = sorted_unique(levels.iter().map(|l| l[1]).collect());
        if a.len() * b.len() != vertices.len() {
            log::warn!(
                "second-order cluster on term {} is not a rectangle; no complement features",
                c.term
            );
            push(
                BlockFeature {
                    term: c.term,
                    covariates: covs,
                    level_sets: vec![],
                    vertices,
                    rectangular: false,
                    provenance: Provenance::Cluster,
                },
                &mut out,
            );
            continue;
        }
        let (ac, bc) = (complement(&a, sizes[0]), complement(&b, sizes[1]));
        let rect = |x: &[usize], y: &[usize]| -> Vec<usize> {
            let mut v: Vec<usize> = x
                .iter()
                .flat_map(|&i| y.iter().map(move |&j| term.flat_index(&[i, j])))
                .collect();
            v.sort_unstable();
            v
        };
        let parts = [
            (&a, &b, Provenance::Cluster),
            (&ac, &b, Provenance::ComplementPart),
            (&a, &bc, Provenance::ComplementPart),
            (&ac, &bc, Provenance::ComplementPart),
        ];
        for (x, y, prov) in parts {
            if x.is_empty() || y.is_empty() {
                continue;
            }
            push(
                BlockFeature {
                    term: c.term,
                    covariates: covs.clone(),
                    level_sets: vec![x.clone(), y.clone()],
                    vertices: rect(x, y),
                    rectangular: true,
                    provenance: prov,
                },
                &mut out,
            );
        }
    }
    out
}

pub fn feature_columns(features: &[BlockFeature], design: &DesignOperator) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| design.indicator(f.term, &f.vertices))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnetStep {
    pub lambda1: f64,
    pub intercept: f64,
    pub coefs: Vec<f64>,
    pub support: Vec<usize>,
}

struct Centered {
    w: Vec<f64>,
    y: Vec<f64>,
    y_mean: f64,
    x: Vec<Vec<f64>>,
    x_mean: Vec<f64>,
}

fn center(columns: &[Vec<f64>], meas: &MeasurementTable) -> Result<Centered> {
    let usable: Vec<usize> = (0..meas.len()).filter(|&i| meas.weights[i] > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::NoUsableCells("elastic net needs positive weights".into()));
    }
    let w: Vec<f64> = usable.iter().map(|&i| meas.weights[i]).collect();
    let sw: f64 = w.iter().sum();
    let wmean = |v: &dyn Fn(usize) -> f64| usable.iter().enumerate().map(|(r, &i)| w[r] * v(i)).sum::<f64>() / sw;
    let y_mean = wmean(&|i| meas.values[i]);
    let y: Vec<f64> = usable.iter().map(|&i| meas.values[i] - y_mean).collect();
    let mut x = Vec::with_capacity(columns.len());
    let mut x_mean = Vec::with_capacity(columns.len());
    for col in columns {
        let m = wmean(&|i| col[i]);
        let xc: Vec<f64> = usable.iter().map(|&i| col[i] - m).collect();
        x.push(xc);
        x_mean.push(m);
    }
    Ok(Centered {
        w,
        y,
        y_mean,
        x,
        x_mean,
    })
}

/// `max_j |x_jᵀ M (τ̂ − τ̄)|`: the smallest `λ₁` with an empty support.
pub fn l1_entry_threshold(columns: &[Vec<f64>], meas: &MeasurementTable) -> Result<f64> {
    let c = center(columns, meas)?;
    Ok(c.x
        .iter()
        .map(|xj| xj.iter().zip(&c.y).zip(&c.w).map(|((a, b), w)| a * b * w).sum::<f64>().abs())
        .fold(0.0, f64::max))
}

/// Exact minimizer of `½βᵀHβ − gᵀβ + λ‖β‖₁` for positive semidefinite `H`
/// by feature-sign search, warm-started from `beta`.
fn feature_sign(h: &DMatrix<f64>, g: &DVector<f64>, lam: f64, beta: &mut DVector<f64>) {
    let p = g.len();
    let obj = |b: &DVector<f64>| 0.5 * b.dot(&(h * b)) - g.dot(b) + lam * b.iter().map(|x| x.abs()).sum::<f64>();
    let tol = 1e-11 * (g.amax() + lam).max(1e-300);
    for _ in 0..50 * (p + 2) {
        let grad = h * &*beta - g;
        let active_ok = (0..p).all(|j| beta[j] == 0.0 || (grad[j] + lam * beta[j].signum()).abs() <= tol);
        let entering = (0..p)
            .filter(|&j| beta[j] == 0.0 && grad[j].abs() > lam + tol)
            .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()));
        let mut theta: Vec<f64> = beta.iter().map(|&x| if x == 0.0 { 0.0 } else { x.signum() }).collect();
        match (active_ok, entering) {
            (true, None) => return,
            (true, Some(j)) => theta[j] = -grad[j].signum(),
            _ => {}
        }
        let act: Vec<usize> = (0..p).filter(|&j| theta[j] != 0.0).collect();
        let haa = DMatrix::from_fn(act.len(), act.len(), |r, c| h[(act[r], act[c])]);
        let rhs = DVector::from_iterator(act.len(), act.iter().map(|&j| g[j] - lam * theta[j]));
        let target = match haa.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match crate::admm::pseudo_solve(haa, &rhs) {
                Some(t) => t,
                None => return,
            },
        };
        // line search over the segment, including every sign change
        let cur: Vec<f64> = act.iter().map(|&j| beta[j]).collect();
        let mut ts = vec![1.0];
        for (i, &c) in cur.iter().enumerate() {
            let d = target[i] - c;
            if c != 0.0 && d != 0.0 && c.signum() != target[i].signum() {
                ts.push(-c / d);
            }
        }
        let point = |t: f64| {
            let mut b = beta.clone();
            for (i, &j) in act.iter().enumerate() {
                b[j] = cur[i] + t * (target[i] - cur[i]);
            }
            b
        };
        let mut best = point(ts[0]);
        let mut best_f = obj(&best);
        let mut best_t = ts[0];
        for &t in &ts[1..] {
            let b = point(t);
            let f = obj(&b);
            if f < best_f {
                best = b;
                best_f = f;
                best_t = t;
            }
        }
        for (i, &j) in act.iter().enumerate() {
            let d = target[i] - cur[i];
            if best_t < 1.0 && cur[i] != 0.0 && d != 0.0 && (-cur[i] / d - best_t).abs() <= 1e-15 {
                best[j] = 0.0;
            }
        }
        let f_old = obj(beta);
        if best_f > f_old + 1e-15 * f_old.abs() {
            return;
        }
        *beta = best;
    }
    log::warn!("feature-sign search stopped at its iteration cap (lambda1 {:.3e})", lam);
}

/// Minimize `½Σ M_e(τ̂ − β₀ − Σβ_j f_j)² + λ₁‖β‖₁ + (λ₂/2)‖β‖²`, `λ₂ = l2_ratio·λ₁`,
/// along `l1_grid` (in the given order) with warm starts. Each point is
/// solved exactly on the centered Gram matrix.
pub fn elastic_net_path(
    columns: &[Vec<f64>],
    meas: &MeasurementTable,
    l1_grid: &[f64],
    l2_ratio: f64,
) -> Result<Vec<EnetStep>> {
    if !(l2_ratio >= 0.0) {
        return Err(Error::Config("l2_ratio must be >= 0".into()));
    }
    let c = center(columns, meas)?;
    let p = columns.len();
    let gram = DMatrix::from_fn(p, p, |a, b| {
        c.x[a].iter().zip(&c.x[b]).zip(&c.w).map(|((x, y), w)| x * y * w).sum::<f64>()
    });
    let g = DVector::from_iterator(
        p,
        c.x.iter().map(|xj| xj.iter().zip(&c.y).zip(&c.w).map(|((x, y), w)| x * y * w).sum::<f64>()),
    );
    let mut beta = DVector::zeros(p);
    let mut steps = Vec::with_capacity(l1_grid.len());
    for &l1 in l1_grid {
        if !(l1 >= 0.0) {
            return Err(Error::Config("l1 penalties must be >= 0".into()));
        }
        let mut h = gram.clone();
        for j in 0..p {
            h[(j, j)] += l2_ratio * l1;
        }
        feature_sign(&h, &g, l1, &mut beta);
        let intercept = c.y_mean - beta.iter().zip(&c.x_mean).map(|(b, m)| b * m).sum::<f64>();
        steps.push(EnetStep {
            lambda1: l1,
            intercept,
            coefs: beta.iter().cloned().collect(),
            support: (0..p).filter(|&j| beta[j] != 0.0).collect(),
        });
    }
    Ok(steps)
}

/// Unpenalized weighted fit on a support; coefficient `column`s refer to
/// positions in `columns`.
pub fn finalize(support: &[usize], columns: &[Vec<f64>], meas: &MeasurementTable) -> Result<RefitModel> {
    let sub: Vec<Vec<f64>> = support.iter().map(|&j| columns[j].clone()).collect();
    let mut m = weighted_ols(&sub, meas)?;
    for c in &mut m.coefficients {
        c.column = support[c.column];
    }
    for p in &mut m.pruned {
        *p = support[*p];
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprocessConfig {
    pub l2_ratio: f64,
    pub grid_count: usize,
    pub min_ratio: f64,
}

impl Default for ReprocessConfig {
    fn default() -> Self {
        ReprocessConfig {
            l2_ratio: 0.01,
            grid_count: 50,
            min_ratio: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportScore {
    pub lambda1: f64,
    pub support: Vec<usize>,
    #[serde(rename = "BIC")]
    pub bic: f64,
}

#[derive(Debug, Clone)]
pub struct ReprocessResult {
    pub features: Vec<BlockFeature>,
    pub columns: Vec<Vec<f64>>,
    pub path: Vec<SupportScore>,
    pub selected: usize,
    pub model: RefitModel,
}

pub fn reprocess(
    clusters: &ClusterSet,
    design: &DesignOperator,
    meas: &MeasurementTable,
    config: &ReprocessConfig,
) -> Result<ReprocessResult> {
    let features = build_block_features(clusters, design);
    let columns = feature_columns(&features, design);
    if features.is_empty() {
        let model = finalize(&[], &columns, meas)?;
        let (_, bic) = information_criteria(model.res, model.dof, model.n_t);
        return Ok(ReprocessResult {
            features,
            columns,
            path: vec![SupportScore {
                lambda1: 0.0,
                support: vec![],
                bic,
            }],
            selected: 0,
            model,
        });
    }
    let lmax = l1_entry_threshold(&columns, meas)?;
    let mut grid = vec![lmax * 1.0001];
    if lmax > 0.0 {
        let step = config.min_ratio.ln() / (config.grid_count.max(2) - 1) as f64;
        grid.extend((0..config.grid_count).map(|i| lmax * (step * i as f64).exp()));
    }
    let steps = elastic_net_path(&columns, meas, &grid, config.l2_ratio)?;
    let mut path: Vec<SupportScore> = Vec::new();
    let mut best: Option<(usize, f64, RefitModel)> = None;
    for s in &steps {
        if path.iter().any(|p| p.support == s.support) {
            continue;
        }
        let model = finalize(&s.support, &columns, meas)?;
        let (_, bic) = model.criteria();
        if best.as_ref().map_or(true, |b| bic < b.1) {
            best = Some((path.len(), bic, model));
        }
        path.push(SupportScore {
            lambda1: s.lambda1,
            support: s.support.clone(),
            bic,
        });
    }
    let (selected, _, model) = best.expect("at least one support");
    Ok(ReprocessResult {
        features,
        columns,
        path,
        selected,
        model,
    })
}
