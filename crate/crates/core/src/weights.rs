//! Between-graph weights and the entry threshold `λ_max`.
//!
//! For one term block the dual norm
//! `γ(b) = sup_u bᵀu / ‖D u‖₁ = min{‖v‖_∞ : Dᵀv = b}`
//! is attained at an indicator vector of a vertex set `S`, giving
//! `γ = max_S |b(S)| / ((1-α)·cut(S) + α·|S|)`.
//! The default method finds that maximum exactly with a parametric max-flow
//! (Dinkelbach iterations); an operator-splitting solver of the min-‖v‖_∞
//! form is kept alongside as an independent method.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{DesignOperator, PenaltyOperator, ReducedProblem};
use crate::schema::{CovariateSchema, LevelGraph, TermSpec};

/// Dinic max-flow on a fixed arc structure whose capacities are reset per call.
#[derive(Debug, Clone)]
struct FlowNet {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl FlowNet {
    fn new(n: usize) -> Self {
        FlowNet {
            adj: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
            level: vec![0; n],
            iter: vec![0; n],
        }
    }

    /// Arc pair `a -> b` (forward cap `c_ab`) and `b -> a` (cap `c_ba`).
    fn add(&mut self, a: usize, b: usize) -> usize {
        let e = self.to.len();
        self.to.push(b);
        self.cap.push(0.0);
        self.adj[a].push(e);
        self.to.push(a);
        self.cap.push(0.0);
        self.adj[b].push(e + 1);
        e
    }

    fn bfs(&mut self, s: usize, t: usize, eps: f64) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        let mut queue = std::collections::VecDeque::new();
        self.level[s] = 0;
        queue.push_back(s);
        while let Some(x) = queue.pop_front() {
            for &e in &self.adj[x] {
                let y = self.to[e];
                if self.cap[e] > eps && self.level[y] < 0 {
                    self.level[y] = self.level[x] + 1;
                    queue.push_back(y);
                }
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, x: usize, t: usize, f: f64, eps: f64) -> f64 {
        if x == t {
            return f;
        }
        while self.iter[x] < self.adj[x].len() {
            let e = self.adj[x][self.iter[x]];
            let y = self.to[e];
            if self.cap[e] > eps && self.level[y] == self.level[x] + 1 {
                let d = self.dfs(y, t, f.min(self.cap[e]), eps);
                if d > 0.0 {
                    self.cap[e] -= d;
                    self.cap[e ^ 1] += d;
                    return d;
                }
            }
            self.iter[x] += 1;
        }
        0.0
    }

    fn max_flow(&mut self, s: usize, t: usize, eps: f64) -> f64 {
        let mut total = 0.0;
        while self.bfs(s, t, eps) {
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(s, t, f64::INFINITY, eps);
                if f <= 0.0 {
                    break;
                }
                total += f;
            }
        }
        total
    }

    /// Nodes reachable from `s` in the residual network.
    fn source_side(&self, s: usize, eps: f64) -> Vec<bool> {
        let mut seen = vec![false; self.adj.len()];
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(x) = stack.pop() {
            for &e in &self.adj[x] {
                let y = self.to[e];
                if self.cap[e] > eps && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen
    }
}

/// Reusable max-flow workspace for one term graph.
///
/// Nodes: graph vertices `0..n`, hub `n`, source `n+1`, sink `n+2`.
#[derive(Debug, Clone)]
pub struct DualNormSolver {
    graph: LevelGraph,
    alpha: f64,
    net: FlowNet,
    edge_arcs: Vec<usize>,
    hub_arcs: Vec<usize>,
    src_arcs: Vec<usize>,
    sink_arcs: Vec<usize>,
    complete: bool,
}

/// Dual norm together with a feasible `v = (p, q)`: `p` on edge rows,
/// `q` on vertex rows, `D_kᵀ v = b`, `‖v‖_∞ = γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCertificate {
    pub gamma: f64,
    pub v: Vec<f64>,
}

impl DualNormSolver {
    pub fn new(graph: &LevelGraph, alpha: f64) -> Self {
        let n = graph.vertex_count();
        let mut net = FlowNet::new(n + 3);
        let edge_arcs = graph.edges().iter().map(|&(i, j)| net.add(i, j)).collect();
        let hub_arcs = (0..n).map(|v| net.add(n, v)).collect();
        let src_arcs = (0..=n).map(|v| net.add(n + 1, v)).collect();
        let sink_arcs = (0..=n).map(|v| net.add(v, n + 2)).collect();
        let complete = n >= 2 && graph.edge_count() == n * (n - 1) / 2;
        DualNormSolver {
            graph: graph.clone(),
            alpha,
            net,
            edge_arcs,
            hub_arcs,
            src_arcs,
            sink_arcs,
            complete,
        }
    }

    /// `γ(b)` for the unweighted block. Uses a closed form on complete
    /// graphs, where every vertex set of size `k` has the same cut.
    pub fn gamma(&mut self, b: &[f64]) -> Result<f64> {
        if self.complete && self.alpha > 0.0 {
            return Ok(complete_graph_gamma(b, self.alpha));
        }
        self.certificate(b).map(|c| c.gamma)
    }

    pub fn certificate(&mut self, b: &[f64]) -> Result<DualCertificate> {
        let n = self.graph.vertex_count();
        let alpha = self.alpha;
        let ne = self.graph.edge_count();
        if b.len() != n {
            return Err(Error::Input(format!("block gradient has length {}, graph has {} vertices", b.len(), n)));
        }
        let scale: f64 = b.iter().map(|x| x.abs()).sum();
        if scale == 0.0 {
            return Ok(DualCertificate {
                gamma: 0.0,
                v: vec![0.0; ne + n],
            });
        }
        let mut demand: Vec<f64> = b.to_vec();
        if alpha == 0.0 {
            balance_components(&self.graph, &mut demand, scale)?;
            demand.push(0.0);
        } else {
            demand.push(-b.iter().sum::<f64>());
        }
        let deg = self.graph.degrees();
        let mut gamma = (0..n)
            .filter_map(|v| {
                let c = (1.0 - alpha) * deg[v] as f64 + alpha;
                (c > 0.0).then(|| demand[v].abs() / c)
            })
            .fold(0.0, f64::max);
        let need: f64 = demand.iter().filter(|d| **d > 0.0).sum();
        let eps = 1e-15 * scale;
        for _ in 0..200 {
            self.set_capacities(&demand, gamma);
            let flow = self.net.max_flow(n + 1, n + 2, eps);
            if flow >= need * (1.0 - 1e-12) {
                break;
            }
            let side = self.net.source_side(n + 1, eps);
            let mut d_t = 0.0;
            for x in 0..=n {
                if !side[x] {
                    d_t += demand[x];
                }
            }
            let mut kappa = 0.0;
            for &(i, j) in self.graph.edges() {
                if side[i] != side[j] {
                    kappa += 1.0 - alpha;
                }
            }
            for v in 0..n {
                if side[v] != side[n] {
                    kappa += alpha;
                }
            }
            if kappa <= 0.0 {
                return Err(Error::DualUnbounded(
                    "a vertex set with nonzero gradient has no penalty; use alpha > 0 for weight tuning".into(),
                ));
            }
            let next = d_t / kappa;
            if !(next > gamma * (1.0 + 1e-13)) {
                break;
            }
            gamma = next;
        }
        let mut v = vec![0.0; ne + n];
        if alpha < 1.0 {
            for (r, &e) in self.edge_arcs.iter().enumerate() {
                let c0 = gamma * (1.0 - alpha);
                v[r] = (c0 - self.net.cap[e]) / (1.0 - alpha);
            }
        }
        if alpha > 0.0 {
            for (vx, &e) in self.hub_arcs.iter().enumerate() {
                let c0 = gamma * alpha;
                v[ne + vx] = (c0 - self.net.cap[e]) / alpha;
            }
        }
        Ok(DualCertificate { gamma, v })
    }

    fn set_capacities(&mut self, demand: &[f64], gamma: f64) {
        let n = self.graph.vertex_count();
        let alpha = self.alpha;
        for &e in &self.edge_arcs {
            let c = gamma * (1.0 - alpha);
            self.net.cap[e] = c;
            self.net.cap[e ^ 1] = c;
        }
        for &e in &self.hub_arcs {
            let c = gamma * alpha;
            self.net.cap[e] = c;
            self.net.cap[e ^ 1] = c;
        }
        for x in 0..=n {
            let d = demand[x];
            let (s, t) = (self.src_arcs[x], self.sink_arcs[x]);
            self.net.cap[s] = (-d).max(0.0);
            self.net.cap[s ^ 1] = 0.0;
            self.net.cap[t] = d.max(0.0);
            self.net.cap[t ^ 1] = 0.0;
        }
    }
}

fn balance_components(graph: &LevelGraph, b: &mut [f64], scale: f64) -> Result<()> {
    let n = graph.vertex_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in graph.edges() {
        let (a, c) = (find(&mut parent, i), find(&mut parent, j));
        if a != c {
            parent[a] = c;
        }
    }
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        sum[r] += b[v];
        count[r] += 1;
    }
    for v in 0..n {
        let r = find(&mut parent, v);
        if sum[r].abs() > 1e-9 * scale {
            return Err(Error::DualUnbounded(
                "with alpha = 0 the gradient must sum to zero on every connected component; use alpha > 0".into(),
            ));
        }
        b[v] -= sum[r] / count[r] as f64;
    }
    Ok(())
}

/// Closed form on `K_n`: `max_k max(top_k(b), top_k(−b)) / ((1-α)k(n−k) + αk)`.
pub fn complete_graph_gamma(b: &[f64], alpha: f64) -> f64 {
    let n = b.len();
    let mut s = b.to_vec();
    s.sort_by(|x, y| y.total_cmp(x));
    let (mut hi, mut lo) = (0.0, 0.0);
    let mut best: f64 = 0.0;
    for k in 1..=n {
        hi += s[k - 1];
        lo -= s[n - k];
        let c = (1.0 - alpha) * (k * (n - k)) as f64 + alpha * k as f64;
        if c > 0.0 {
            best = best.max(hi.max(lo) / c);
        }
    }
    best
}

/// Exact `γ` for the unweighted block of `graph`.
pub fn dual_norm(b: &[f64], graph: &LevelGraph, alpha: f64) -> Result<f64> {
    DualNormSolver::new(graph, alpha).gamma(b)
}

/// Settings for [`dual_norm_splitting`].
#[derive(Debug, Clone, Copy)]
pub struct SplittingConfig {
    pub step: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SplittingConfig {
    fn default() -> Self {
        SplittingConfig {
            step: 1.0,
            max_iter: 200_000,
            tol: 1e-11,
        }
    }
}

/// Euclidean projection onto `{x : ‖x‖₁ ≤ r}`.
pub fn project_l1_ball(x: &[f64], r: f64) -> Vec<f64> {
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    if l1 <= r {
        return x.to_vec();
    }
    if r <= 0.0 {
        return vec![0.0; x.len()];
    }
    let mut a: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    a.sort_by(|p, q| q.total_cmp(p));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ai) in a.iter().enumerate() {
        cum += ai;
        let t = (cum - r) / (i + 1) as f64;
        if ai > t {
            theta = t;
        } else {
            break;
        }
    }
    x.iter().map(|&v| v.signum() * (v.abs() - theta).max(0.0)).collect()
}

/// `prox_{t‖·‖_∞}(x) = x − P_{‖·‖₁ ≤ t}(x)`.
pub fn prox_max_norm(x: &[f64], t: f64) -> Vec<f64> {
    let p = project_l1_ball(x, t);
    x.iter().zip(&p).map(|(a, b)| a - b).collect()
}

/// `min ‖v‖_∞ s.t. D_kᵀ v = b` by Douglas–Rachford splitting between the
/// max-norm prox and the affine projection (Gram system `D_kᵀD_k`
/// factorized once). Requires `α > 0`.
pub fn dual_norm_splitting(b: &[f64], graph: &LevelGraph, alpha: f64, cfg: &SplittingConfig) -> Result<DualCertificate> {
    if alpha <= 0.0 {
        return Err(Error::DualUnbounded("the splitting method needs alpha > 0".into()));
    }
    let n = graph.vertex_count();
    let ne = graph.edge_count();
    let m = ne + n;
    let mut d = DMatrix::<f64>::zeros(m, n);
    for (r, &(i, j)) in graph.edges().iter().enumerate() {
        d[(r, i)] = -(1.0 - alpha);
        d[(r, j)] = 1.0 - alpha;
    }
    for v in 0..n {
        d[(ne + v, v)] = alpha;
    }
    let gram = d.transpose() * &d;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::Factorization("DᵀD is singular".into()))?;
    let bv = DVector::from_column_slice(b);
    let project = |x: &DVector<f64>| -> DVector<f64> {
        let resid = d.transpose() * x - &bv;
        x - &d * chol.solve(&resid)
    };
    let mut x = DVector::<f64>::zeros(m);
    let mut v = project(&x);
    for _ in 0..cfg.max_iter {
        v = project(&x);
        let refl: Vec<f64> = (2.0 * &v - &x).iter().copied().collect();
        let w = DVector::from_vec(prox_max_norm(&refl, cfg.step));
        let delta = &w - &v;
        x += &delta;
        if delta.norm() <= cfg.tol * (1.0 + v.norm()) {
            v = project(&x);
            break;
        }
    }
    let gamma = v.amax();
    Ok(DualCertificate {
        gamma,
        v: v.as_slice().to_vec(),
    })
}

/// Monte Carlo estimate of the between-graph weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightEstimate {
    pub terms: Vec<String>,
    /// Normalized to geometric mean 1.
    pub weights: Vec<f64>,
    pub mean_gamma: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TermWeight {
    weight: f64,
    #[serde(default)]
    stderr: f64,
    #[serde(default)]
    mean_gamma: f64,
}

/// On-disk layout: `{"weights": {term: {weight, stderr, mean_gamma}}, samples, seed, alpha}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsFile {
    weights: BTreeMap<String, TermWeight>,
    #[serde(default)]
    samples: usize,
    #[serde(default)]
    seed: u64,
    alpha: f64,
}

impl WeightEstimate {
    /// Replace the index-based term names with schema labels.
    pub fn labelled(mut self, schema: &CovariateSchema, terms: &[TermSpec]) -> Self {
        self.terms = terms.iter().map(|t| t.label(schema)).collect();
        self
    }

    /// Weights in the order of `labels`; every label must be present.
    pub fn weights_for(&self, labels: &[String]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|l| {
                self.terms
                    .iter()
                    .position(|t| t == l)
                    .map(|i| self.weights[i])
                    .ok_or_else(|| Error::Input(format!("weights file has no entry for term `{}`", l)))
            })
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        let file = WeightsFile {
            weights: (0..self.terms.len())
                .map(|i| {
                    (
                        self.terms[i].clone(),
                        TermWeight {
                            weight: self.weights[i],
                            stderr: self.stderr[i],
                            mean_gamma: self.mean_gamma[i],
                        },
                    )
                })
                .collect(),
            samples: self.samples,
            seed: self.seed,
            alpha: self.alpha,
        };
        serde_json::to_string_pretty(&file).expect("serializable")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: WeightsFile = serde_json::from_str(s)?;
        if f.weights.is_empty() || f.weights.values().any(|x| !(x.weight.is_finite() && x.weight > 0.0)) {
            return Err(Error::Input("weights file must contain positive finite weights".into()));
        }
        Ok(WeightEstimate {
            terms: f.weights.keys().cloned().collect(),
            weights: f.weights.values().map(|t| t.weight).collect(),
            mean_gamma: f.weights.values().map(|t| t.mean_gamma).collect(),
            stderr: f.weights.values().map(|t| t.stderr).collect(),
            samples: f.samples,
            seed: f.seed,
            alpha: f.alpha,
        })
    }
}

/// `b = AᵀM(I − P₁) r` for a cell vector `r`.
pub fn reduced_gradient(design: &DesignOperator, m: &[f64], r: &[f64]) -> Vec<f64> {
    let s: f64 = m.iter().sum();
    let mean = r.iter().zip(m).map(|(x, w)| x * w).sum::<f64>() / s;
    let centered: Vec<f64> = r.iter().zip(m).map(|(x, w)| w * (x - mean)).collect();
    design.apply_transpose(&centered)
}

/// `w_k ∝ E[γ_k(b_k)]` with `b` built from noise `n ~ N(0, M⁻¹)` on usable
/// cells. Sample `i` draws from ChaCha stream `i` of `seed`, so the result
/// does not depend on thread scheduling.
pub fn estimate_weights(
    design: &DesignOperator,
    penalty: &PenaltyOperator,
    m: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<WeightEstimate> {
    if mc_samples < 2 {
        return Err(Error::Config("at least 2 Monte Carlo samples are needed".into()));
    }
    if m.len() != design.n_rows() {
        return Err(Error::Input("weight vector does not match the design".into()));
    }
    if !m.iter().any(|&w| w > 0.0) {
        return Err(Error::NoUsableCells("weight tuning needs positive-weight cells".into()));
    }
    let k = design.n_terms();
    let sd: Vec<f64> = m.iter().map(|&w| if w > 0.0 { 1.0 / w.sqrt() } else { 0.0 }).collect();
    let solvers: Vec<DualNormSolver> = penalty
        .graphs()
        .iter()
        .map(|g| DualNormSolver::new(g, penalty.alpha()))
        .collect();
    let gammas: Vec<Result<Vec<f64>>> = (0..mc_samples)
        .into_par_iter()
        .map_init(
            || solvers.clone(),
            |solvers, i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let noise: Vec<f64> = sd
                    .iter()
                    .map(|&s| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * s
                    })
                    .collect();
                let b = reduced_gradient(design, m, &noise);
                (0..k)
                    .map(|t| solvers[t].gamma(&b[design.term_range(t)]))
                    .collect()
            },
        )
        .collect();
    let mut sum = vec![0.0; k];
    let mut sum2 = vec![0.0; k];
    for g in gammas {
        let g = g?;
        for t in 0..k {
            sum[t] += g[t];
            sum2[t] += g[t] * g[t];
        }
    }
    let ns = mc_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / ns).collect();
    let stderr: Vec<f64> = (0..k)
        .map(|t| {
            let var = (sum2[t] - ns * mean[t] * mean[t]).max(0.0) / (ns - 1.0);
            (var / ns).sqrt()
        })
        .collect();
    if mean.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(Error::NoUsableCells(
            "a term receives no noise; every term needs usable cells".into(),
        ));
    }
    let log_gm = mean.iter().map(|g| g.ln()).sum::<f64>() / k as f64;
    let gm = log_gm.exp();
    Ok(WeightEstimate {
        terms: design.terms().iter().map(|t| t.covariates().iter().map(|c| c.to_string()).collect::<Vec<_>>().join("*")).collect(),
        weights: mean.iter().map(|g| g / gm).collect(),
        mean_gamma: mean,
        stderr,
        samples: mc_samples,
        seed,
        alpha: penalty.alpha(),
    })
}

/// Smallest `λ` at which `u = 0` solves the penalized problem.
pub fn lambda_max(problem: &ReducedProblem, penalty: &PenaltyOperator) -> Result<f64> {
    let mut best: f64 = 0.0;
    for k in 0..penalty.n_terms() {
        let g = dual_norm(problem.b_block(k), &penalty.graphs()[k], penalty.alpha())?;
        best = best.max(g / penalty.weights()[k]);
    }
    Ok(best)
}
