//! Covariate pre-screening with a group lasso on first-order marginal
//! tables, so that the full cross grid of many covariates is never formed.
//!
//! Objective over marginal cells `(d, l)`:
//! `½ Σ_d Σ_l M_dl (τ̂_dl − u₀ − u_d(l))² + λ Σ_d √|V_d| ‖u_d‖₂`.

use serde::{Deserialize, Serialize};

use crate::cells::{aggregate_units, measurements, CellTable, MeasurementMode, MeasurementOptions, UnitRow};
use crate::error::{Error, Result};
use crate::path::information_criteria;
use crate::schema::CovariateSchema;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScreenConfig {
    pub keep_max: usize,
    pub grid_count: usize,
    pub min_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ScreenConfig {
    fn default() -> Self {
        ScreenConfig {
            keep_max: 8,
            grid_count: 30,
            min_ratio: 0.01,
            max_iter: 20_000,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScreenResult {
    /// Retained covariate indices, ascending.
    pub retained: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// `group_norms[i][d]` is `‖u_d‖₂` at `lambdas[i]`.
    pub group_norms: Vec<Vec<f64>>,
    pub bic: Vec<f64>,
    pub chosen: Option<usize>,
    pub chosen_lambda: Option<f64>,
    pub pass_through: bool,
    pub warning: Option<String>,
}

/// `max(0, 1 − t/‖g‖₂) · g`: the prox of `t‖·‖₂`.
pub fn group_soft_threshold(g: &[f64], t: f64) -> Vec<f64> {
    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= t {
        return vec![0.0; g.len()];
    }
    let s = 1.0 - t / n;
    g.iter().map(|x| x * s).collect()
}

struct Marginals {
    values: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
}

impl Marginals {
    fn total_weight(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }

    fn objective(&self, u0: f64, u: &[Vec<f64>]) -> f64 {
        let mut f = 0.0;
        for d in 0..self.values.len() {
            for l in 0..self.values[d].len() {
                let r = self.values[d][l] - u0 - u[d][l];
                f += 0.5 * self.weights[d][l] * r * r;
            }
        }
        f
    }
}

fn penalty(u: &[Vec<f64>], gw: &[f64]) -> f64 {
    u.iter()
        .zip(gw)
        .map(|(ud, w)| w * ud.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

/// Accelerated proximal gradient with backtracking, warm-started.
fn solve_group_lasso(
    m: &Marginals,
    gw: &[f64],
    lambda: f64,
    u0: &mut f64,
    u: &mut [Vec<f64>],
    cfg: &ScreenConfig,
) {
    let dn = m.values.len();
    let mut step = 1.0 / m.weights.iter().flatten().fold(m.total_weight(), |a: f64, b| a.max(*b));
    let (mut y0, mut y) = (*u0, u.to_vec());
    let mut t_acc: f64 = 1.0;
    let mut f_prev = m.objective(*u0, u) + lambda * penalty(u, gw);
    for _ in 0..cfg.max_iter {
        // gradient at the extrapolated point
        let mut g0 = 0.0;
        let mut g: Vec<Vec<f64>> = Vec::with_capacity(dn);
        for d in 0..dn {
            let gd: Vec<f64> = (0..m.values[d].len())
                .map(|l| -m.weights[d][l] * (m.values[d][l] - y0 - y[d][l]))
                .collect();
            g0 += gd.iter().sum::<f64>();
            g.push(gd);
        }
        let fy = m.objective(y0, &y);
        let (n0, nu) = loop {
            let c0 = y0 - step * g0;
            let cu: Vec<Vec<f64>> = (0..dn)
                .map(|d| {
                    let v: Vec<f64> = y[d].iter().zip(&g[d]).map(|(a, b)| a - step * b).collect();
                    group_soft_threshold(&v, step * lambda * gw[d])
                })
                .collect();
            let mut lin = (c0 - y0) * g0;
            let mut quad = (c0 - y0).powi(2);
            for d in 0..dn {
                for l in 0..cu[d].len() {
                    let diff = cu[d][l] - y[d][l];
                    lin += diff * g[d][l];
                    quad += diff * diff;
                }
            }
            if m.objective(c0, &cu) <= fy + lin + quad / (2.0 * step) + 1e-12 * fy.abs() || step < 1e-300 {
                break (c0, cu);
            }
            step *= 0.5;
        };
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        let mom = (t_acc - 1.0) / t_next;
        y0 = n0 + mom * (n0 - *u0);
        for d in 0..dn {
            y[d] = nu[d].iter().zip(&u[d]).map(|(a, b)| a + mom * (a - b)).collect();
        }
        *u0 = n0;
        u.clone_from_slice(&nu);
        t_acc = t_next;
        let f = m.objective(*u0, u) + lambda * penalty(u, gw);
        if f > f_prev {
            // restart momentum
            y0 = *u0;
            y = u.to_vec();
            t_acc = 1.0;
        }
        if (f_prev - f).abs() <= cfg.tol * f.abs().max(1e-300) {
            break;
        }
        f_prev = f;
    }
}

/// Group-lasso screening from a cell table over the full schema; each
/// covariate's marginal table is obtained by merging the cell statistics.
pub fn group_lasso_screen(
    table: &CellTable,
    mode: MeasurementMode,
    opts: &MeasurementOptions,
    cfg: &ScreenConfig,
) -> Result<ScreenResult> {
    screen_with(table.schema().len(), |d| table.marginalize(&[d]), mode, opts, cfg)
}

/// Same as [`group_lasso_screen`] but aggregates each marginal table
/// directly from unit rows, never forming the full cross grid.
pub fn group_lasso_screen_units(
    schema: &CovariateSchema,
    rows: &[UnitRow],
    mode: MeasurementMode,
    opts: &MeasurementOptions,
    cfg: &ScreenConfig,
) -> Result<ScreenResult> {
    let marginal = |d: usize| -> Result<CellTable> {
        let sub = schema.project(&[d])?;
        let projected: Vec<UnitRow> = rows.iter().map(|r| r.project(&[d])).collect();
        Ok(aggregate_units(&sub, &projected).0)
    };
    screen_with(schema.len(), marginal, mode, opts, cfg)
}

fn screen_with(
    dn: usize,
    marginal: impl Fn(usize) -> Result<CellTable>,
    mode: MeasurementMode,
    opts: &MeasurementOptions,
    cfg: &ScreenConfig,
) -> Result<ScreenResult> {
    if cfg.keep_max == 0 {
        return Err(Error::Config("keep_max must be at least 1".into()));
    }
    let pass = |warning: Option<String>| ScreenResult {
        retained: (0..dn).collect(),
        lambdas: vec![],
        group_norms: vec![],
        bic: vec![],
        chosen: None,
        chosen_lambda: None,
        pass_through: true,
        warning,
    };
    if dn <= cfg.keep_max {
        return Ok(pass(None));
    }
    let mut values = Vec::with_capacity(dn);
    let mut weights = Vec::with_capacity(dn);
    for d in 0..dn {
        let marg = marginal(d)?;
        let t = measurements(marg.cells(), mode, opts)?;
        values.push(t.values);
        weights.push(t.weights);
    }
    let m = Marginals { values, weights };
    let sizes: Vec<usize> = m.values.iter().map(|v| v.len()).collect();
    let gw: Vec<f64> = sizes.iter().map(|&s| (s as f64).sqrt()).collect();
    let n_t: usize = m.weights.iter().flatten().filter(|w| **w > 0.0).count();
    let sw = m.total_weight();
    let mean = m
        .values
        .iter()
        .flatten()
        .zip(m.weights.iter().flatten())
        .map(|(v, w)| v * w)
        .sum::<f64>()
        / sw;
    let lmax = (0..dn)
        .map(|d| {
            let g: f64 = (0..sizes[d])
                .map(|l| (m.weights[d][l] * (m.values[d][l] - mean)).powi(2))
                .sum::<f64>()
                .sqrt();
            g / gw[d]
        })
        .fold(0.0, f64::max);
    if !(lmax > 0.0) {
        return Ok(pass(Some("no marginal signal; screening passes every covariate through".into())));
    }
    let step = cfg.min_ratio.ln() / (cfg.grid_count.max(2) - 1) as f64;
    let lambdas: Vec<f64> = (0..cfg.grid_count.max(2)).map(|i| lmax * (step * i as f64).exp()).collect();

    let mut u0 = mean;
    let mut u: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
    let mut group_norms = Vec::with_capacity(lambdas.len());
    let mut bic = Vec::with_capacity(lambdas.len());
    for &lam in &lambdas {
        solve_group_lasso(&m, &gw, lam, &mut u0, &mut u, cfg);
        let norms: Vec<f64> = u.iter().map(|ud| ud.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        // unpenalized refit: active tables are fitted exactly, the rest share u0
        let active: Vec<bool> = norms.iter().map(|n| *n > 0.0).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for d in (0..dn).filter(|&d| !active[d]) {
            for l in 0..sizes[d] {
                num += m.weights[d][l] * m.values[d][l];
                den += m.weights[d][l];
            }
        }
        let c = if den > 0.0 { num / den } else { 0.0 };
        let mut res = 0.0;
        for d in (0..dn).filter(|&d| !active[d]) {
            for l in 0..sizes[d] {
                res += 0.5 * m.weights[d][l] * (m.values[d][l] - c).powi(2);
            }
        }
        let dof = 1 + (0..dn).filter(|&d| active[d]).map(|d| sizes[d] - 1).sum::<usize>();
        bic.push(information_criteria(res, dof, n_t).1);
        group_norms.push(norms);
    }
    let chosen = (0..bic.len()).fold(0, |b, i| if bic[i] < bic[b] { i } else { b });
    let norms = &group_norms[chosen];
    let mut order: Vec<usize> = (0..dn).filter(|&d| norms[d] > 0.0).collect();
    if order.is_empty() {
        let mut r = pass(Some("screening selected no covariate; passing every covariate through".into()));
        r.lambdas = lambdas.clone();
        r.group_norms = group_norms;
        r.bic = bic;
        r.chosen = Some(chosen);
        r.chosen_lambda = Some(lambdas[chosen]);
        log::warn!("{}", r.warning.as_deref().unwrap_or(""));
        return Ok(r);
    }
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(cfg.keep_max);
    order.sort_unstable();
    Ok(ScreenResult {
        retained: order,
        chosen_lambda: Some(lambdas[chosen]),
        lambdas,
        group_norms,
        bic,
        chosen: Some(chosen),
        pass_through: false,
        warning: None,
    })
}
