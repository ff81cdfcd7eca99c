//! Design operator `A`, penalty operator `D` and the reduced quadratic
//! `(B, b, c)` obtained after profiling out the intercept.
//!
//! `A` is never stored as a matrix: every cell hits exactly one vertex per
//! term, so a row is a list of `K` column indices. `D` is block diagonal
//! with one block per term and is applied block by block.

use nalgebra::{DMatrix, DVector};

use crate::cells::MeasurementTable;
use crate::error::{Error, Result};
use crate::schema::{CovariateSchema, LevelGraph, TermSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignOperator {
    terms: Vec<TermSpec>,
    offsets: Vec<usize>,
    n_params: usize,
    n_cells: usize,
    /// `cols[cell * K + k]` is the parameter index term `k` assigns to `cell`.
    cols: Vec<usize>,
}

pub fn build_design(schema: &CovariateSchema, terms: &[TermSpec]) -> Result<DesignOperator> {
    if terms.is_empty() {
        return Err(Error::Config("the additive model needs at least one term".into()));
    }
    let mut offsets = Vec::with_capacity(terms.len() + 1);
    let mut acc = 0;
    for t in terms {
        offsets.push(acc);
        acc += t.vertex_count();
    }
    offsets.push(acc);
    let n_cells = schema.cell_count();
    let k = terms.len();
    let mut cols = Vec::with_capacity(n_cells * k);
    for cell in 0..n_cells {
        let levels = schema.cell_levels(cell);
        for (t, term) in terms.iter().enumerate() {
            cols.push(offsets[t] + term.vertex_of_cell(&levels));
        }
    }
    Ok(DesignOperator {
        terms: terms.to_vec(),
        offsets,
        n_params: acc,
        n_cells,
        cols,
    })
}

impl DesignOperator {
    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_cells
    }

    pub fn n_cols(&self) -> usize {
        self.n_params
    }

    /// Column offsets of each term block, with a trailing total.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn term_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn row(&self, cell: usize) -> &[usize] {
        let k = self.terms.len();
        &self.cols[cell * k..(cell + 1) * k]
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n_cells)
            .map(|c| self.row(c).iter().map(|&j| u[j]).sum())
            .collect()
    }

    pub fn apply_transpose(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_params];
        for (c, &rc) in r.iter().enumerate() {
            if rc != 0.0 {
                for &j in self.row(c) {
                    out[j] += rc;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_cells, self.n_params);
        for c in 0..self.n_cells {
            for &j in self.row(c) {
                a[(c, j)] = 1.0;
            }
        }
        a
    }

    /// Cell indicator of a vertex subset of term `k`.
    pub fn indicator(&self, k: usize, vertices: &[usize]) -> Vec<f64> {
        let mut member = vec![false; self.terms[k].vertex_count()];
        for &v in vertices {
            member[v] = true;
        }
        let off = self.offsets[k];
        (0..self.n_cells)
            .map(|c| if member[self.row(c)[k] - off] { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Weighted TV-plus-ℓ1 operator: per term, edge rows `(1-α)(u_j - u_i)`
/// followed by vertex rows `α u_v`, all scaled by `w_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOperator {
    graphs: Vec<LevelGraph>,
    col_offsets: Vec<usize>,
    row_offsets: Vec<usize>,
    alpha: f64,
    weights: Vec<f64>,
}

pub fn build_penalty(terms: &[TermSpec], alpha: f64, weights: &[f64]) -> Result<PenaltyOperator> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", alpha)));
    }
    if weights.len() != terms.len() {
        return Err(Error::Config(format!(
            "{} term weights given for {} terms",
            weights.len(),
            terms.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::Config(format!("term weights must be positive and finite, got {}", w)));
    }
    let graphs: Vec<LevelGraph> = terms.iter().map(|t| t.graph().clone()).collect();
    let mut col_offsets = vec![0];
    let mut row_offsets = vec![0];
    for g in &graphs {
        col_offsets.push(col_offsets.last().unwrap() + g.vertex_count());
        row_offsets.push(row_offsets.last().unwrap() + g.edge_count() + g.vertex_count());
    }
    Ok(PenaltyOperator {
        graphs,
        col_offsets,
        row_offsets,
        alpha,
        weights: weights.to_vec(),
    })
}

impl PenaltyOperator {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn graphs(&self) -> &[LevelGraph] {
        &self.graphs
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<PenaltyOperator> {
        let mut p = self.clone();
        if weights.len() != p.weights.len() {
            return Err(Error::Config("weight count does not match term count".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::Config(format!("term weights must be positive and finite, got {}", w)));
        }
        p.weights = weights.to_vec();
        Ok(p)
    }

    pub fn n_terms(&self) -> usize {
        self.graphs.len()
    }

    pub fn n_rows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    pub fn n_cols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    pub fn col_range(&self, k: usize) -> std::ops::Range<usize> {
        self.col_offsets[k]..self.col_offsets[k + 1]
    }

    pub fn row_range(&self, k: usize) -> std::ops::Range<usize> {
        self.row_offsets[k]..self.row_offsets[k + 1]
    }

    /// `w D_k u_k` written into `out` (length `|E_k| + |V_k|`).
    pub fn apply_block(&self, k: usize, w: f64, uk: &[f64], out: &mut [f64]) {
        let g = &self.graphs[k];
        let e = (1.0 - self.alpha) * w;
        let a = self.alpha * w;
        let ne = g.edge_count();
        for (r, &(i, j)) in g.edges().iter().enumerate() {
            out[r] = e * (uk[j] - uk[i]);
        }
        for (v, &x) in uk.iter().enumerate() {
            out[ne + v] = a * x;
        }
    }

    /// `w D_kᵀ y_k` accumulated into `out` (length `|V_k|`).
    pub fn apply_block_transpose(&self, k: usize, w: f64, yk: &[f64], out: &mut [f64]) {
        let g = &self.graphs[k];
        let e = (1.0 - self.alpha) * w;
        let a = self.alpha * w;
        let ne = g.edge_count();
        for (r, &(i, j)) in g.edges().iter().enumerate() {
            out[j] += e * yk[r];
            out[i] -= e * yk[r];
        }
        for (v, o) in out.iter_mut().enumerate() {
            *o += a * yk[ne + v];
        }
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows()];
        self.apply_into(u, &mut out);
        out
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        for k in 0..self.n_terms() {
            let (cr, rr) = (self.col_range(k), self.row_range(k));
            self.apply_block(k, self.weights[k], &u[cr], &mut out[rr]);
        }
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols()];
        self.apply_transpose_into(y, &mut out);
        out
    }

    pub fn apply_transpose_into(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for k in 0..self.n_terms() {
            let (cr, rr) = (self.col_range(k), self.row_range(k));
            self.apply_block_transpose(k, self.weights[k], &y[rr], &mut out[cr]);
        }
    }

    /// `‖Du‖₁` evaluated block by block without forming `Du`.
    pub fn l1_norm(&self, u: &[f64]) -> f64 {
        (0..self.n_terms())
            .map(|k| self.weights[k] * self.block_l1(k, &u[self.col_range(k)]))
            .sum()
    }

    /// Unweighted `‖D_k u_k‖₁`.
    pub fn block_l1(&self, k: usize, uk: &[f64]) -> f64 {
        let g = &self.graphs[k];
        let tv: f64 = g.edges().iter().map(|&(i, j)| (uk[j] - uk[i]).abs()).sum();
        let l1: f64 = uk.iter().map(|x| x.abs()).sum();
        (1.0 - self.alpha) * tv + self.alpha * l1
    }

    /// `DᵀD`, block diagonal: `w_k² ((1-α)² L_k + α² I)`.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.n_cols();
        let mut g = DMatrix::zeros(n, n);
        for k in 0..self.n_terms() {
            let off = self.col_offsets[k];
            let w2 = self.weights[k] * self.weights[k];
            let e2 = (1.0 - self.alpha).powi(2) * w2;
            for &(i, j) in self.graphs[k].edges() {
                let (i, j) = (off + i, off + j);
                g[(i, i)] += e2;
                g[(j, j)] += e2;
                g[(i, j)] -= e2;
                g[(j, i)] -= e2;
            }
            for v in self.col_range(k) {
                g[(v, v)] += self.alpha * self.alpha * w2;
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_rows(), self.n_cols());
        let mut e = vec![0.0; self.n_cols()];
        let mut col = vec![0.0; self.n_rows()];
        for j in 0..self.n_cols() {
            e[j] = 1.0;
            self.apply_into(&e, &mut col);
            d.set_column(j, &DVector::from_column_slice(&col));
            e[j] = 0.0;
        }
        d
    }

    /// Term and local position of a global row.
    pub fn locate_row(&self, row: usize) -> (usize, RowKind) {
        let k = self.row_offsets.partition_point(|&o| o <= row) - 1;
        let local = row - self.row_offsets[k];
        let ne = self.graphs[k].edge_count();
        if local < ne {
            let (i, j) = self.graphs[k].edges()[local];
            (k, RowKind::Edge(i, j))
        } else {
            (k, RowKind::Vertex(local - ne))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Edge(usize, usize),
    Vertex(usize),
}

/// The quadratic left after minimizing over the intercept:
/// `½(uᵀBu − 2bᵀu + c)`.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    pub design: DesignOperator,
    pub big_b: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
    pub weights: Vec<f64>,
    pub tau_hat: Vec<f64>,
    /// `1ᵀM1`
    pub total_weight: f64,
    /// Weighted mean of `tau_hat`.
    pub tau_bar: f64,
    /// `AᵀM1`, the total cell weight landing on each parameter.
    pub vertex_weight: Vec<f64>,
}

pub fn reduce(design: &DesignOperator, measurements: &MeasurementTable) -> Result<ReducedProblem> {
    if measurements.len() != design.n_rows() {
        return Err(Error::Input(format!(
            "measurement table has {} cells, design expects {}",
            measurements.len(),
            design.n_rows()
        )));
    }
    let m = &measurements.weights;
    let s: f64 = m.iter().sum();
    if !(s > 0.0) {
        return Err(Error::NoUsableCells("all measurement weights are zero".into()));
    }
    let tau = &measurements.values;
    let tau_bar = tau.iter().zip(m).map(|(t, w)| t * w).sum::<f64>() / s;
    let n = design.n_cols();
    let mut big_b = DMatrix::<f64>::zeros(n, n);
    let mut v = vec![0.0; n];
    let mut b = DVector::<f64>::zeros(n);
    let mut c = 0.0;
    for cell in 0..design.n_rows() {
        let w = m[cell];
        if w == 0.0 {
            continue;
        }
        let r = tau[cell] - tau_bar;
        c += w * r * r;
        let row = design.row(cell);
        for &i in row {
            v[i] += w;
            b[i] += w * r;
            for &j in row {
                big_b[(i, j)] += w;
            }
        }
    }
    for i in 0..n {
        if v[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            big_b[(i, j)] -= v[i] * v[j] / s;
        }
    }
    // exact symmetry regardless of summation order
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (big_b[(i, j)] + big_b[(j, i)]);
            big_b[(i, j)] = avg;
            big_b[(j, i)] = avg;
        }
    }
    Ok(ReducedProblem {
        design: design.clone(),
        big_b,
        b,
        c,
        weights: m.clone(),
        tau_hat: tau.clone(),
        total_weight: s,
        tau_bar,
        vertex_weight: v,
    })
}

impl ReducedProblem {
    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// `u₀ = 1ᵀM(τ̂ − Au) / 1ᵀM1`
    pub fn recover_intercept(&self, u: &[f64]) -> f64 {
        let au = self.design.apply(u);
        self.tau_hat
            .iter()
            .zip(&au)
            .zip(&self.weights)
            .map(|((t, a), w)| w * (t - a))
            .sum::<f64>()
            / self.total_weight
    }

    /// `½(uᵀBu − 2bᵀu + c)`
    pub fn quadratic(&self, u: &[f64]) -> f64 {
        let u = DVector::from_column_slice(u);
        let bu = &self.big_b * &u;
        0.5 * (u.dot(&bu) - 2.0 * self.b.dot(&u) + self.c)
    }

    /// `½(uᵀBu − 2bᵀu + c) + λ‖Du‖₁`
    pub fn objective(&self, penalty: &PenaltyOperator, lambda: f64, u: &[f64]) -> f64 {
        self.quadratic(u) + lambda * penalty.l1_norm(u)
    }

    /// Reduced gradient of `B` restricted to term `k`.
    pub fn b_block(&self, k: usize) -> &[f64] {
        &self.b.as_slice()[self.design.term_range(k)]
    }
}

/// Sparse triplet dump (`row col value` per line, 0-based).
pub fn write_triplets<W: std::io::Write>(m: &DMatrix<f64>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{} {}", m.nrows(), m.ncols())?;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            let x = m[(i, j)];
            if x != 0.0 {
                writeln!(w, "{} {} {:e}", i, j, x)?;
            }
        }
    }
    Ok(())
}
