//! Seeded synthetic data: the two-arm designs used for recovery and weight
//! tuning studies, null designs, and a pre/post metric-diagnosis design.
//!
//! Control units come from ChaCha stream 0 and treatment units from stream 1
//! of the seed, so each arm has exactly the requested size and changing one
//! arm's size leaves the other arm's draws untouched.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::cells::UnitRow;
use crate::error::{Error, Result};
use crate::schema::{Covariate, CovariateSchema, Topology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    /// Schema indices of the covariates involved (one or two).
    pub covariates: Vec<usize>,
    /// Level indices per covariate; the effect applies on their product.
    pub level_sets: Vec<Vec<usize>>,
    pub value: f64,
}

impl TrueEffect {
    pub fn applies(&self, levels: &[usize]) -> bool {
        self.covariates
            .iter()
            .zip(&self.level_sets)
            .all(|(&d, set)| set.contains(&levels[d]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub global: f64,
    pub effects: Vec<TrueEffect>,
}

impl GroundTruth {
    pub fn tau(&self, levels: &[usize]) -> f64 {
        self.global
            + self
                .effects
                .iter()
                .filter(|e| e.applies(levels))
                .map(|e| e.value)
                .sum::<f64>()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Debug, Clone)]
pub struct SimData {
    pub schema: CovariateSchema,
    pub rows: Vec<UnitRow>,
    pub truth: GroundTruth,
}

/// Units for both arms with independently drawn covariates and Gaussian
/// noise; treated outcomes are shifted by `truth.tau(x)`.
pub fn simulate_units(
    schema: &CovariateSchema,
    proportions: &[Vec<f64>],
    truth: &GroundTruth,
    n_per_arm: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<UnitRow>> {
    if proportions.len() != schema.len() {
        return Err(Error::Config("one proportion vector per covariate is required".into()));
    }
    let samplers = proportions
        .iter()
        .zip(schema.covariates())
        .map(|(p, c)| {
            if p.len() != c.size() {
                return Err(Error::Config(format!("covariate {} needs {} proportions", c.name, c.size())));
            }
            WeightedIndex::new(p).map_err(|e| Error::Config(format!("bad proportions for {}: {}", c.name, e)))
        })
        .collect::<Result<Vec<_>>>()?;
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(format!("noise sd: {}", e)))?;
    let mut rows = Vec::with_capacity(2 * n_per_arm);
    for arm in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(arm);
        for _ in 0..n_per_arm {
            let levels: Vec<usize> = samplers.iter().map(|s| s.sample(&mut rng)).collect();
            let mut y = noise.sample(&mut rng);
            if arm == 1 {
                y += truth.tau(&levels);
            }
            rows.push(UnitRow::new(levels, arm == 1, y));
        }
    }
    Ok(rows)
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn example1_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        Covariate::numbered("X1", 10, Topology::Complete),
        Covariate::numbered("X2", 3, Topology::Complete),
        Covariate::numbered("X3", 5, Topology::Complete),
        Covariate::numbered("X4", 4, Topology::Complete),
    ])
    .expect("valid schema")
}

pub fn example1_proportions() -> Vec<Vec<f64>> {
    vec![uniform(10), vec![0.2, 0.5, 0.3], uniform(5), vec![0.1, 0.4, 0.3, 0.2]]
}

pub fn example1_truth(effect_scale: f64) -> GroundTruth {
    GroundTruth {
        global: 0.03,
        effects: vec![
            TrueEffect {
                covariates: vec![1],
                level_sets: vec![vec![1]],
                value: -0.1 * effect_scale,
            },
            TrueEffect {
                covariates: vec![0, 2],
                level_sets: vec![vec![3, 4, 5, 6], vec![2, 3]],
                value: 0.1 * effect_scale,
            },
        ],
    }
}

/// Four complete-graph covariates of sizes 10, 3, 5, 4; global effect 0.03,
/// `−0.1·s` on X2 level 2 and `+0.1·s` on X1 levels 4–7 × X3 levels 3–4.
pub fn gen_example1(seed: u64, effect_scale: f64) -> SimData {
    let schema = example1_schema();
    let truth = example1_truth(effect_scale);
    let rows = simulate_units(&schema, &example1_proportions(), &truth, 10_000, 0.1, seed).expect("fixed design");
    SimData { schema, rows, truth }
}

pub fn example4_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        Covariate::numbered("X1", 20, Topology::Path),
        Covariate::numbered("X2", 10, Topology::Complete),
        Covariate::numbered("X3", 5, Topology::Complete),
    ])
    .expect("valid schema")
}

pub fn example4_proportions() -> Vec<Vec<f64>> {
    vec![uniform(20), uniform(10), vec![0.1, 0.3, 0.3, 0.2, 0.1]]
}

/// Ordered 20-level X1, complete X2 (10) and X3 (5); global −0.01 and
/// `+0.015` on X2 level 1.
pub fn gen_example4(seed: u64) -> SimData {
    let schema = example4_schema();
    let truth = GroundTruth {
        global: -0.01,
        effects: vec![TrueEffect {
            covariates: vec![1],
            level_sets: vec![vec![0]],
            value: 0.015,
        }],
    };
    let rows = simulate_units(&schema, &example4_proportions(), &truth, 10_000, 0.1, seed).expect("fixed design");
    SimData { schema, rows, truth }
}

/// Zero treatment effect, uniform level proportions.
pub fn gen_null(schema: &CovariateSchema, n_per_arm: usize, noise_sd: f64, seed: u64) -> Result<Vec<UnitRow>> {
    let props: Vec<Vec<f64>> = schema.sizes().into_iter().map(uniform).collect();
    let truth = GroundTruth {
        global: 0.0,
        effects: vec![],
    };
    simulate_units(schema, &props, &truth, n_per_arm, noise_sd, seed)
}

/// Pre/post monitoring data for one product: per cell and time slot, a
/// traffic share and a revenue-per-volume observation. Arm 0 is the
/// pre-period, arm 1 the post-period.
#[derive(Debug, Clone)]
pub struct DiagnosisData {
    pub schema: CovariateSchema,
    pub share_rows: Vec<UnitRow>,
    pub rpv_rows: Vec<UnitRow>,
    /// Multiplicative shift applied to the share of the first OS level.
    pub share_shift: f64,
}

pub fn example3_schema() -> CovariateSchema {
    let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    CovariateSchema::new(vec![
        Covariate::new(
            "DeviceOSName",
            names(&["Android", "iOS", "Windows", "MacOS", "Other"]),
            Topology::Complete,
        ),
        Covariate::new("DeviceType", names(&["Mobile", "Desktop"]), Topology::Complete),
        Covariate::new(
            "ProductType",
            (1..=13).map(|i| format!("P{}", i)).collect(),
            Topology::Complete,
        ),
        Covariate::new(
            "WeekDays",
            names(&["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]),
            Topology::Loop,
        ),
    ])
    .expect("valid schema")
}

/// Share and rpv observations with log-normal slot noise (σ = 0.2). In the
/// post-period the first OS level's volume is multiplied by `share_shift`
/// before shares are renormalized; rpv does not change.
pub fn gen_example3(seed: u64, slots_per_period: usize, share_shift: f64) -> DiagnosisData {
    let schema = example3_schema();
    let os = [0.35, 0.3, 0.2, 0.1, 0.05];
    let dev = [0.6, 0.4];
    let prod: Vec<f64> = (1..=13).map(|i| 1.0 / i as f64).collect();
    let day = [1.0, 1.0, 1.0, 1.0, 1.1, 1.3, 1.3];
    let os_rpv = [0.6, 1.2, 1.0, 1.3, 0.9];
    let n_cells = schema.cell_count();
    let base: Vec<(Vec<usize>, f64, f64)> = (0..n_cells)
        .map(|c| {
            let l = schema.cell_levels(c);
            let share = os[l[0]] * dev[l[1]] * prod[l[2]] * day[l[3]];
            let rpv = os_rpv[l[0]] * (1.0 + 0.1 * l[1] as f64) * (1.0 + 0.02 * l[2] as f64);
            (l, share, rpv)
        })
        .collect();
    let noise = LogNormal::new(0.0, 0.2).expect("valid");
    let mut share_rows = Vec::with_capacity(2 * slots_per_period * n_cells);
    let mut rpv_rows = Vec::with_capacity(2 * slots_per_period * n_cells);
    for arm in 0..2u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(arm);
        for _ in 0..slots_per_period {
            let vols: Vec<f64> = base
                .iter()
                .map(|(l, s, _)| {
                    let shift = if arm == 1 && l[0] == 0 { share_shift } else { 1.0 };
                    s * shift * noise.sample(&mut rng)
                })
                .collect();
            let total: f64 = vols.iter().sum();
            for ((l, _, r), v) in base.iter().zip(&vols) {
                share_rows.push(UnitRow::new(l.clone(), arm == 1, v / total));
                rpv_rows.push(UnitRow::new(l.clone(), arm == 1, r * noise.sample(&mut rng)));
            }
        }
    }
    DiagnosisData {
        schema,
        share_rows,
        rpv_rows,
        share_shift,
    }
}
