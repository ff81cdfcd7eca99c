//! Covariates, their level graphs and the additive-model terms built on them.
//!
//! Every covariate is discrete. Its levels are the vertices of a small graph
//! whose edges say which levels may be fused together by the total-variation
//! penalty: a complete graph for unordered categories, a path for ordered
//! levels, a loop for cyclic levels (weekdays, months) or an explicit edge
//! list. A second-order term lives on the tensor product of two such graphs.
//!
//! Product vertex sets are flattened row-major in the order of the term's
//! covariates: for a term over covariates `(d, f)` the level pair `(a, b)` has
//! flat index `a * |V_f| + b`. Whole cells of the cross grid use the same rule
//! over all covariates of the schema.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Topology {
    Complete,
    Path,
    Loop,
    Custom(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub levels: Vec<String>,
    pub topology: Topology,
}

impl Covariate {
    pub fn new(name: impl Into<String>, levels: Vec<String>, topology: Topology) -> Self {
        Covariate {
            name: name.into(),
            levels,
            topology,
        }
    }

    /// Covariate with levels labelled `"1"..="n"`.
    pub fn numbered(name: impl Into<String>, n: usize, topology: Topology) -> Self {
        Covariate::new(name, (1..=n).map(|i| i.to_string()).collect(), topology)
    }

    pub fn size(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("covariate with empty name".into()));
        }
        if self.levels.len() < 2 {
            return Err(Error::Schema(format!(
                "covariate `{}` needs at least 2 levels, has {}",
                self.name,
                self.levels.len()
            )));
        }
        let mut seen = HashSet::new();
        for l in &self.levels {
            if !seen.insert(l.as_str()) {
                return Err(Error::Schema(format!(
                    "covariate `{}` has duplicate level `{}`",
                    self.name, l
                )));
            }
        }
        if let Topology::Custom(edges) = &self.topology {
            let n = self.levels.len();
            let mut pairs = HashSet::new();
            for &(i, j) in edges {
                if i >= n || j >= n {
                    return Err(Error::Schema(format!(
                        "covariate `{}`: edge ({}, {}) references a level outside 0..{}",
                        self.name, i, j, n
                    )));
                }
                if i == j {
                    return Err(Error::Schema(format!(
                        "covariate `{}`: self-loop on level {}",
                        self.name, i
                    )));
                }
                if !pairs.insert((i.min(j), i.max(j))) {
                    return Err(Error::Schema(format!(
                        "covariate `{}`: duplicate edge ({}, {})",
                        self.name, i, j
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered, validated list of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDoc", into = "SchemaDoc")]
pub struct CovariateSchema {
    covariates: Vec<Covariate>,
}

impl CovariateSchema {
    pub fn new(covariates: Vec<Covariate>) -> Result<Self> {
        if covariates.is_empty() {
            return Err(Error::Schema("schema has no covariates".into()));
        }
        let mut names = HashSet::new();
        for c in &covariates {
            c.validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate covariate name `{}`", c.name)));
            }
        }
        Ok(CovariateSchema { covariates })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Schema(format!("{}: {}", path.display(), e)))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn covariate(&self, d: usize) -> &Covariate {
        &self.covariates[d]
    }

    pub fn len(&self) -> usize {
        self.covariates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.covariates.iter().map(Covariate::size).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c.name == name)
    }

    /// Number of cells in the full cross grid.
    pub fn cell_count(&self) -> usize {
        self.covariates.iter().map(Covariate::size).product()
    }

    /// Row-major flat index of a cell.
    pub fn cell_index(&self, levels: &[usize]) -> usize {
        debug_assert_eq!(levels.len(), self.covariates.len());
        levels
            .iter()
            .zip(&self.covariates)
            .fold(0, |acc, (&l, c)| acc * c.size() + l)
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_levels(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.covariates.len()];
        for (d, c) in self.covariates.iter().enumerate().rev() {
            out[d] = index % c.size();
            index /= c.size();
        }
        out
    }

    /// Schema restricted to the given covariates (strictly increasing indices).
    pub fn project(&self, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("projection indices must be non-empty and increasing".into()));
        }
        if let Some(&bad) = keep.iter().find(|&&d| d >= self.len()) {
            return Err(Error::Schema(format!("projection index {} out of range", bad)));
        }
        CovariateSchema::new(keep.iter().map(|&d| self.covariates[d].clone()).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    covariates: Vec<CovariateDoc>,
}

#[derive(Serialize, Deserialize)]
struct CovariateDoc {
    name: String,
    levels: Vec<String>,
    topology: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edges: Option<Vec<[usize; 2]>>,
}

impl TryFrom<SchemaDoc> for CovariateSchema {
    type Error = Error;

    fn try_from(doc: SchemaDoc) -> Result<Self> {
        let mut covariates = Vec::with_capacity(doc.covariates.len());
        for c in doc.covariates {
            let topology = match c.topology.to_ascii_lowercase().as_str() {
                "complete" => Topology::Complete,
                "path" => Topology::Path,
                "loop" => Topology::Loop,
                "custom" => {
                    let edges = c.edges.ok_or_else(|| {
                        Error::Schema(format!("covariate `{}`: custom topology needs `edges`", c.name))
                    })?;
                    Topology::Custom(edges.into_iter().map(|[a, b]| (a, b)).collect())
                }
                other => {
                    return Err(Error::Schema(format!(
                        "covariate `{}`: unknown topology `{}`",
                        c.name, other
                    )))
                }
            };
            covariates.push(Covariate::new(c.name, c.levels, topology));
        }
        CovariateSchema::new(covariates)
    }
}

impl From<CovariateSchema> for SchemaDoc {
    fn from(s: CovariateSchema) -> Self {
        SchemaDoc {
            covariates: s
                .covariates
                .into_iter()
                .map(|c| {
                    let (topology, edges) = match c.topology {
                        Topology::Complete => ("complete", None),
                        Topology::Path => ("path", None),
                        Topology::Loop => ("loop", None),
                        Topology::Custom(e) => ("custom", Some(e.into_iter().map(|(a, b)| [a, b]).collect())),
                    };
                    CovariateDoc {
                        name: c.name,
                        levels: c.levels,
                        topology: topology.to_string(),
                        edges,
                    }
                })
                .collect(),
        }
    }
}

/// Undirected simple graph with canonical edges `(i, j)`, `i < j`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelGraph {
    vertex_count: usize,
    edges: Vec<(usize, usize)>,
}

impl LevelGraph {
    pub fn new(vertex_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if vertex_count == 0 {
            return Err(Error::Schema("graph needs at least one vertex".into()));
        }
        let mut canon: Vec<(usize, usize)> = Vec::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::Schema(format!("self-loop on vertex {}", i)));
            }
            if i >= vertex_count || j >= vertex_count {
                return Err(Error::Schema(format!("edge ({}, {}) out of range", i, j)));
            }
            canon.push((i.min(j), i.max(j)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        if canon.len() != before {
            return Err(Error::Schema("duplicate edge".into()));
        }
        Ok(LevelGraph {
            vertex_count,
            edges: canon,
        })
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        LevelGraph::new(n, edges).expect("complete graph is valid")
    }

    pub fn path(n: usize) -> Self {
        LevelGraph::new(n, (1..n).map(|i| (i - 1, i))).expect("path graph is valid")
    }

    /// Cycle on `n >= 3` vertices.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::Schema(format!("a loop needs at least 3 levels, got {}", n)));
        }
        LevelGraph::new(n, (1..n).map(|i| (i - 1, i)).chain(std::iter::once((0, n - 1))))
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertex_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }
}

/// Level graph of a covariate. A loop over two levels degenerates to the
/// single path edge.
pub fn build_level_graph(covariate: &Covariate) -> Result<LevelGraph> {
    covariate.validate()?;
    let n = covariate.size();
    match &covariate.topology {
        Topology::Complete => Ok(LevelGraph::complete(n)),
        Topology::Path => Ok(LevelGraph::path(n)),
        Topology::Loop if n < 3 => Ok(LevelGraph::path(n)),
        Topology::Loop => LevelGraph::cycle(n),
        Topology::Custom(edges) => LevelGraph::new(n, edges.iter().copied()),
    }
}

/// Tensor (Cartesian) product: `(a, b) ~ (a', b')` iff `a ~ a'` and `b = b'`,
/// or `a = a'` and `b ~ b'`. Vertex `(a, b)` is numbered `a * |V2| + b`.
pub fn tensor_product(g1: &LevelGraph, g2: &LevelGraph) -> LevelGraph {
    let n2 = g2.vertex_count;
    let mut edges = Vec::with_capacity(g1.edge_count() * n2 + g1.vertex_count * g2.edge_count());
    for &(a, a2) in &g1.edges {
        for b in 0..n2 {
            edges.push((a * n2 + b, a2 * n2 + b));
        }
    }
    for a in 0..g1.vertex_count {
        for &(b, b2) in &g2.edges {
            edges.push((a * n2 + b, a * n2 + b2));
        }
    }
    LevelGraph::new(g1.vertex_count * n2, edges).expect("product of valid graphs is valid")
}

/// One additive component `u_k`: a first-order term over a single covariate
/// or a second-order term over a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TermSpec {
    covariates: Vec<usize>,
    sizes: Vec<usize>,
    graph: LevelGraph,
}

impl TermSpec {
    pub fn new(schema: &CovariateSchema, covariates: Vec<usize>) -> Result<Self> {
        match covariates.len() {
            1 | 2 => {}
            n => {
                return Err(Error::Schema(format!(
                    "terms must have order 1 or 2, got order {}",
                    n
                )))
            }
        }
        if covariates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema("term covariate indices must be strictly increasing".into()));
        }
        if let Some(&d) = covariates.iter().find(|&&d| d >= schema.len()) {
            return Err(Error::Schema(format!("term references covariate {} outside schema", d)));
        }
        let graphs = covariates
            .iter()
            .map(|&d| build_level_graph(schema.covariate(d)))
            .collect::<Result<Vec<_>>>()?;
        let graph = match graphs.as_slice() {
            [g] => g.clone(),
            [g1, g2] => tensor_product(g1, g2),
            _ => unreachable!(),
        };
        let sizes = covariates.iter().map(|&d| schema.covariate(d).size()).collect();
        Ok(TermSpec {
            covariates,
            sizes,
            graph,
        })
    }

    pub fn covariates(&self) -> &[usize] {
        &self.covariates
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn order(&self) -> usize {
        self.covariates.len()
    }

    pub fn graph(&self) -> &LevelGraph {
        &self.graph
    }

    pub fn vertex_count(&self) -> usize {
        self.graph.vertex_count()
    }

    /// Flat vertex index of a combination of member levels (row-major).
    pub fn flat_index(&self, member_levels: &[usize]) -> usize {
        member_levels
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&l, &s)| acc * s + l)
    }

    /// Term vertex hit by a full cell (levels of every covariate).
    pub fn vertex_of_cell(&self, cell_levels: &[usize]) -> usize {
        self.covariates
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&d, &s)| acc * s + cell_levels[d])
    }

    /// Member levels of a flat vertex index.
    pub fn vertex_levels(&self, mut v: usize) -> Vec<usize> {
        let mut out = vec![0; self.sizes.len()];
        for (i, &s) in self.sizes.iter().enumerate().rev() {
            out[i] = v % s;
            v /= s;
        }
        out
    }

    /// Human-readable name, e.g. `X1` or `X1*X3`.
    pub fn label(&self, schema: &CovariateSchema) -> String {
        self.covariates
            .iter()
            .map(|&d| schema.covariate(d).name.as_str())
            .collect::<Vec<_>>()
            .join("*")
    }
}

/// All first-order terms, then (for `max_order == 2`) all pairs in
/// lexicographic order.
pub fn enumerate_terms(schema: &CovariateSchema, max_order: usize) -> Result<Vec<TermSpec>> {
    if !(1..=2).contains(&max_order) {
        return Err(Error::Config(format!("max_order must be 1 or 2, got {}", max_order)));
    }
    let d = schema.len();
    let mut terms = Vec::new();
    for i in 0..d {
        terms.push(TermSpec::new(schema, vec![i])?);
    }
    if max_order == 2 {
        for i in 0..d {
            for j in i + 1..d {
                terms.push(TermSpec::new(schema, vec![i, j])?);
            }
        }
    }
    Ok(terms)
}
