use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use tv_hte::admm::{factorize, solve, AdmmConfig};
use tv_hte::cells::{
    additive_measurements, aggregate_units, effective_sample_size, ArmStats, MeasurementMode, MeasurementOptions,
    MeasurementTable, UnitRow,
};
use tv_hte::operators::{build_design, build_penalty, reduce, PenaltyOperator, ReducedProblem};
use tv_hte::path::{extract_clusters, lambda_grid, run_path, weighted_ols, PathConfig};
use tv_hte::report::{fit, render_from_report, render_heatmap, Artifacts, FitConfig, FitInput};
use tv_hte::reprocess::{build_block_features, feature_columns, finalize};
use tv_hte::schema::{enumerate_terms, tensor_product, Covariate, CovariateSchema, LevelGraph, Topology};
use tv_hte::screening::group_soft_threshold;
use tv_hte::simulate::gen_example1;
use tv_hte::weights::{dual_norm, estimate_weights, lambda_max};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(20240601),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn topology() -> impl Strategy<Value = Topology> {
    prop_oneof![Just(Topology::Complete), Just(Topology::Path), Just(Topology::Loop)]
}

fn schema_strategy(max_cov: usize, max_levels: usize) -> impl Strategy<Value = CovariateSchema> {
    prop::collection::vec((2..=max_levels, topology()), 1..=max_cov).prop_map(|spec| {
        let covs = spec
            .into_iter()
            .enumerate()
            .map(|(d, (n, t))| Covariate::numbered(format!("C{}", d), n, t))
            .collect();
        CovariateSchema::new(covs).unwrap()
    })
}

fn graph_strategy() -> impl Strategy<Value = LevelGraph> {
    (2usize..6, 0..3).prop_map(|(n, k)| match k {
        0 => LevelGraph::complete(n),
        1 => LevelGraph::path(n),
        _ => LevelGraph::cycle(n.max(3)).unwrap(),
    })
}

/// Schema plus per-cell measurement values and weights.
#[derive(Debug, Clone)]
struct Problem {
    schema: CovariateSchema,
    order: usize,
    alpha: f64,
    values: Vec<f64>,
    weights: Vec<f64>,
}

fn problem_strategy() -> impl Strategy<Value = Problem> {
    (schema_strategy(3, 4), prop_oneof![Just(0.3), Just(0.5), Just(1.0)], any::<bool>()).prop_flat_map(
        |(schema, alpha, second)| {
            let n = schema.cell_count();
            let order = if second && schema.len() > 1 { 2 } else { 1 };
            (
                Just(schema),
                Just(order),
                Just(alpha),
                prop::collection::vec(-1.0f64..1.0, n),
                prop::collection::vec(0.5f64..5.0, n),
            )
                .prop_map(|(schema, order, alpha, values, weights)| Problem {
                    schema,
                    order,
                    alpha,
                    values,
                    weights,
                })
        },
    )
}

fn build(p: &Problem) -> (ReducedProblem, PenaltyOperator, MeasurementTable) {
    let terms = enumerate_terms(&p.schema, p.order).unwrap();
    let design = build_design(&p.schema, &terms).unwrap();
    let penalty = build_penalty(&terms, p.alpha, &vec![1.0; terms.len()]).unwrap();
    let meas = MeasurementTable::new(MeasurementMode::Additive, p.values.clone(), p.weights.clone()).unwrap();
    (reduce(&design, &meas).unwrap(), penalty, meas)
}

fn rows_strategy() -> impl Strategy<Value = (CovariateSchema, Vec<UnitRow>)> {
    schema_strategy(3, 3).prop_flat_map(|schema| {
        let sizes = schema.sizes();
        let row = (sizes.iter().map(|&n| 0..n).collect::<Vec<_>>(), any::<bool>(), -5.0f64..5.0)
            .prop_map(|(levels, t, y)| UnitRow::new(levels, t, y));
        (Just(schema), prop::collection::vec(row, 1..300))
    })
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn arm_close(a: &ArmStats, b: &ArmStats) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0),
        (None, None) => true,
        _ => false,
    };
    a.count() == b.count() && opt(a.mean(), b.mean()) && opt(a.variance(), b.variance())
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(config(256))]

    #[test]
    fn tensor_product_edge_count_is_symmetric(g1 in graph_strategy(), g2 in graph_strategy()) {
        let a = tensor_product(&g1, &g2);
        let b = tensor_product(&g2, &g1);
        prop_assert_eq!(a.edge_count(), b.edge_count());
        prop_assert_eq!(a.vertex_count(), g1.vertex_count() * g2.vertex_count());
    }

    #[test]
    fn complete_and_loop_degrees(n in 3usize..12) {
        prop_assert!(LevelGraph::complete(n).degrees().iter().all(|&d| d == n - 1));
        prop_assert!(LevelGraph::cycle(n).unwrap().degrees().iter().all(|&d| d == 2));
    }

    #[test]
    fn term_enumeration_is_deterministic_and_unique(schema in schema_strategy(5, 4), order in 1usize..3) {
        let a: Vec<Vec<usize>> = enumerate_terms(&schema, order).unwrap().iter().map(|t| t.covariates().to_vec()).collect();
        let b: Vec<Vec<usize>> = enumerate_terms(&schema, order).unwrap().iter().map(|t| t.covariates().to_vec()).collect();
        prop_assert_eq!(&a, &b);
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), a.len());
    }

    #[test]
    fn aggregation_ignores_row_order((schema, rows) in rows_strategy(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let (a, _) = aggregate_units(&schema, &rows);
        let (b, _) = aggregate_units(&schema, &shuffled);
        for (x, y) in a.cells().iter().zip(b.cells()) {
            prop_assert!(arm_close(&x.control, &y.control) && arm_close(&x.treatment, &y.treatment));
        }
    }

    #[test]
    fn effective_sample_size_is_arm_symmetric(n0 in 2.0f64..1e5, v0 in 1e-3f64..10.0, n1 in 2.0f64..1e5, v1 in 1e-3f64..10.0) {
        prop_assert!(close(effective_sample_size(n0, v0, n1, v1), effective_sample_size(n1, v1, n0, v0), 1e-14));
    }

    #[test]
    fn constant_measurements_give_zero_gradient(mut p in problem_strategy(), c in -3.0f64..3.0) {
        p.values.iter_mut().for_each(|v| *v = c);
        let (problem, _, _) = build(&p);
        let scale: f64 = p.weights.iter().sum::<f64>() * c.abs().max(1.0);
        prop_assert!(problem.b.amax() <= 1e-12 * scale);
    }

    #[test]
    fn centering_is_idempotent(p in problem_strategy()) {
        // b is built from P₁τ̂; feeding P₁τ̂ back in must give the same b
        let (problem, _, _) = build(&p);
        let mean = problem.tau_bar;
        let mut centered = p.clone();
        centered.values.iter_mut().for_each(|v| *v -= mean);
        let (again, _, _) = build(&centered);
        prop_assert!(again.tau_bar.abs() <= 1e-10 * max_abs(&p.values).max(1.0));
        let diff = (&problem.b - &again.b).amax();
        prop_assert!(diff <= 1e-10 * problem.b.amax().max(1e-12));
    }

    #[test]
    fn constant_term_directions_are_in_the_null_space(p in problem_strategy()) {
        let (problem, penalty, _) = build(&p);
        let bnorm = problem.big_b.norm();
        for k in 0..penalty.n_terms() {
            let range = penalty.col_range(k);
            let mut e = nalgebra::DVector::zeros(problem.dim());
            let s = 1.0 / (range.len() as f64).sqrt();
            for j in range {
                e[j] = s;
            }
            prop_assert!((&problem.big_b * e).norm() <= 1e-8 * bnorm);
        }
    }

    #[test]
    fn blockwise_penalty_matches_monolithic(p in problem_strategy(), u in prop::collection::vec(-1.0f64..1.0, 200)) {
        let (problem, penalty, _) = build(&p);
        let u = &u[..problem.dim().min(u.len())];
        prop_assume!(u.len() == problem.dim());
        let blockwise: f64 = (0..penalty.n_terms()).map(|k| penalty.block_l1(k, &u[penalty.col_range(k)])).sum();
        let dense = &penalty.to_dense() * nalgebra::DVector::from_column_slice(u);
        let mono: f64 = dense.iter().map(|x| x.abs()).sum();
        prop_assert!(close(blockwise, mono, 1e-12));
        prop_assert!(close(penalty.l1_norm(u), mono, 1e-12));
    }

    #[test]
    fn dual_norm_is_homogeneous(g in graph_strategy(), alpha in prop_oneof![Just(0.3), Just(0.5), Just(1.0)], b in prop::collection::vec(-1.0f64..1.0, 36), s in 0.1f64..10.0) {
        let b: Vec<f64> = b[..g.vertex_count()].to_vec();
        let g0 = dual_norm(&b, &g, alpha).unwrap();
        let scaled: Vec<f64> = b.iter().map(|x| s * x).collect();
        prop_assert!(close(dual_norm(&scaled, &g, alpha).unwrap(), s * g0, 1e-8));
    }

    #[test]
    fn group_threshold_zeroes_exactly_small_groups(g in prop::collection::vec(-3.0f64..3.0, 1..8), t in 0.0f64..5.0) {
        let out = group_soft_threshold(&g, t);
        let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert_eq!(out.iter().all(|x| *x == 0.0), n <= t);
    }

    #[test]
    fn nested_refit_residual_does_not_increase(p in problem_strategy(), a in prop::collection::vec(any::<bool>(), 64), b in prop::collection::vec(any::<bool>(), 64)) {
        let meas = MeasurementTable::new(MeasurementMode::Additive, p.values.clone(), p.weights.clone()).unwrap();
        let n = meas.len();
        let col = |bits: &[bool]| (0..n).map(|i| if bits[i % bits.len()] { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let small = weighted_ols(&[col(&a)], &meas).unwrap();
        let big = weighted_ols(&[col(&a), col(&b)], &meas).unwrap();
        prop_assert!(big.res <= small.res + 1e-10 * small.res.max(1.0));
    }

    #[test]
    fn complement_representation_has_equal_residual(p in problem_strategy(), bits in prop::collection::vec(any::<bool>(), 64)) {
        let meas = MeasurementTable::new(MeasurementMode::Additive, p.values.clone(), p.weights.clone()).unwrap();
        let n = meas.len();
        let s: Vec<f64> = (0..n).map(|i| if bits[i % bits.len()] { 1.0 } else { 0.0 }).collect();
        let sc: Vec<f64> = s.iter().map(|x| 1.0 - x).collect();
        let cols = vec![s, sc];
        let a = finalize(&[0], &cols, &meas).unwrap();
        let b = finalize(&[1], &cols, &meas).unwrap();
        prop_assert!((a.res - b.res).abs() <= 1e-10 * a.res.max(1.0));
    }
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn weight_scaling_rescales_the_reduced_problem(p in problem_strategy(), s in 0.1f64..10.0) {
        let (base, penalty, meas) = build(&p);
        let scaled_meas = meas.scaled(s);
        let terms = enumerate_terms(&p.schema, p.order).unwrap();
        let design = build_design(&p.schema, &terms).unwrap();
        let scaled = reduce(&design, &scaled_meas).unwrap();
        prop_assert!((&scaled.big_b - &base.big_b * s).amax() <= 1e-10 * s * base.big_b.amax().max(1e-12));
        prop_assert!((&scaled.b - &base.b * s).amax() <= 1e-10 * s * base.b.amax().max(1e-12));
        prop_assert!((scaled.c - s * base.c).abs() <= 1e-10 * s * base.c.abs().max(1e-12));

        let lmax = lambda_max(&base, &penalty).unwrap();
        prop_assume!(lmax > 0.0);
        let cfg = AdmmConfig::default();
        let lam = 0.3 * lmax;
        let u1 = solve(&base, &penalty, &factorize(&base, &penalty, &cfg).unwrap(), lam, &cfg, None).unwrap();
        let u2 = solve(&scaled, &penalty, &factorize(&scaled, &penalty, &cfg).unwrap(), lam * s, &cfg, None).unwrap();
        let tol = 1e-5 * u1.max_abs().max(1e-3);
        prop_assert!(u1.u.iter().zip(&u2.u).all(|(a, b)| (a - b).abs() <= tol));
    }

    #[test]
    fn warm_start_does_not_worsen_objective(p in problem_strategy()) {
        let (problem, penalty, _) = build(&p);
        let lmax = lambda_max(&problem, &penalty).unwrap();
        prop_assume!(lmax > 0.0);
        let cfg = AdmmConfig::default();
        let factor = factorize(&problem, &penalty, &cfg).unwrap();
        let prev = solve(&problem, &penalty, &factor, 0.5 * lmax, &cfg, None).unwrap();
        let lam = 0.4 * lmax;
        let next = solve(&problem, &penalty, &factor, lam, &cfg, Some(&prev)).unwrap();
        prop_assert!(next.converged);
        let f_warm = problem.objective(&penalty, lam, &prev.u);
        let f_next = problem.objective(&penalty, lam, &next.u);
        prop_assert!(f_next <= f_warm + 1e-8 * f_warm.abs().max(1.0));
    }

    #[test]
    fn converged_solutions_carry_an_optimality_certificate(p in problem_strategy()) {
        let (problem, penalty, _) = build(&p);
        prop_assume!(penalty.n_rows() <= 30);
        let lmax = lambda_max(&problem, &penalty).unwrap();
        prop_assume!(lmax > 0.0);
        let cfg = AdmmConfig::default();
        let factor = factorize(&problem, &penalty, &cfg).unwrap();
        let lam = 0.4 * lmax;
        let sol = solve(&problem, &penalty, &factor, lam, &cfg, None).unwrap();
        prop_assume!(sol.converged);
        let u = nalgebra::DVector::from_column_slice(&sol.u);
        let d = penalty.to_dense();
        let du = &d * &u;
        let r = &problem.big_b * &u - &problem.b;
        // v_i fixed to sign(Du_i) on active rows; the rest found by projected
        // gradient on ½‖r + λDᵀv‖² over the box [−1, 1]
        let active: Vec<bool> = du.iter().map(|x| x.abs() > 1e-6).collect();
        let mut v = nalgebra::DVector::from_iterator(du.len(), du.iter().map(|x| if x.abs() > 1e-6 { x.signum() } else { 0.0 }));
        let dt = d.transpose() * lam;
        let lip = (&dt.transpose() * &dt).symmetric_eigenvalues().amax().max(1e-300);
        for _ in 0..20_000 {
            let g = dt.transpose() * (&r + &dt * &v);
            for i in 0..v.len() {
                if !active[i] {
                    v[i] = (v[i] - g[i] / lip).clamp(-1.0, 1.0);
                }
            }
        }
        let resid = (&r + &dt * &v).norm();
        prop_assert!(resid <= 1e-4 * (problem.b.norm() + 1.0), "residual {}", resid);
    }

    #[test]
    fn doubling_penalty_weights_halves_lambda_max(p in problem_strategy()) {
        let (problem, penalty, _) = build(&p);
        let l1 = lambda_max(&problem, &penalty).unwrap();
        let doubled = penalty.with_weights(&vec![2.0; penalty.n_terms()]).unwrap();
        let l2 = lambda_max(&problem, &doubled).unwrap();
        prop_assert!(close(l2, 0.5 * l1, 1e-8) || l1 == 0.0);
    }

    #[test]
    fn weight_estimates_are_deterministic_and_order_free(p in problem_strategy(), seed in any::<u64>()) {
        let terms = enumerate_terms(&p.schema, p.order).unwrap();
        let design = build_design(&p.schema, &terms).unwrap();
        let penalty = build_penalty(&terms, p.alpha, &vec![1.0; terms.len()]).unwrap();
        let a = estimate_weights(&design, &penalty, &p.weights, 200, seed).unwrap();
        let b = estimate_weights(&design, &penalty, &p.weights, 200, seed).unwrap();
        prop_assert_eq!(&a.weights, &b.weights);
        let rev: Vec<_> = terms.iter().rev().cloned().collect();
        let rdesign = build_design(&p.schema, &rev).unwrap();
        let rpenalty = build_penalty(&rev, p.alpha, &vec![1.0; rev.len()]).unwrap();
        let c = estimate_weights(&rdesign, &rpenalty, &p.weights, 200, seed).unwrap();
        let k = terms.len();
        for i in 0..k {
            prop_assert!(close(a.weights[i], c.weights[k - 1 - i], 1e-12));
        }
    }

    #[test]
    fn path_clusters_are_invariant_to_weight_scaling(p in problem_strategy(), s in 0.1f64..10.0) {
        let (problem, penalty, meas) = build(&p);
        let lmax = lambda_max(&problem, &penalty).unwrap();
        prop_assume!(lmax > 0.0);
        let grid = lambda_grid(lmax, 6, 0.05).unwrap();
        let a = run_path(&problem, &penalty, &meas, &grid, &PathConfig::default()).unwrap();
        prop_assert_eq!(a.entries[0].n_effects, 0);
        let terms = enumerate_terms(&p.schema, p.order).unwrap();
        let design = build_design(&p.schema, &terms).unwrap();
        let smeas = meas.scaled(s);
        let sproblem = reduce(&design, &smeas).unwrap();
        let sgrid: Vec<f64> = grid.iter().map(|l| l * s).collect();
        let b = run_path(&sproblem, &penalty, &smeas, &sgrid, &PathConfig::default()).unwrap();
        for (x, y) in a.entries.iter().zip(&b.entries) {
            let vx: Vec<_> = x.clusters.clusters.iter().map(|c| (c.term, c.vertices.clone())).collect();
            let vy: Vec<_> = y.clusters.clusters.iter().map(|c| (c.term, c.vertices.clone())).collect();
            prop_assert_eq!(vx, vy);
        }
    }

    #[test]
    fn block_features_are_indicators(p in problem_strategy()) {
        let (problem, penalty, _) = build(&p);
        let lmax = lambda_max(&problem, &penalty).unwrap();
        prop_assume!(lmax > 0.0);
        let cfg = AdmmConfig::default();
        let sol = solve(&problem, &penalty, &factorize(&problem, &penalty, &cfg).unwrap(), 0.2 * lmax, &cfg, None).unwrap();
        let clusters = extract_clusters(&sol.u, &penalty, &problem.vertex_weight, 1e-6, 1e-6);
        let features = build_block_features(&clusters, &problem.design);
        let cols = feature_columns(&features, &problem.design);
        for c in &cols {
            prop_assert!(c.iter().all(|x| *x == 0.0 || *x == 1.0));
        }
        for t in 0..problem.design.n_terms() {
            let per_term = features.iter().filter(|f| f.term == t).count();
            for cell in 0..problem.design.n_rows() {
                let covering = features.iter().zip(&cols).filter(|(f, c)| f.term == t && c[cell] == 1.0).count();
                prop_assert!(covering <= per_term);
            }
        }
    }

    #[test]
    fn marginal_tables_match_direct_aggregation((schema, rows) in rows_strategy()) {
        let (full, _) = aggregate_units(&schema, &rows);
        for d in 0..schema.len() {
            let sub = schema.project(&[d]).unwrap();
            let projected: Vec<UnitRow> = rows.iter().map(|r| r.project(&[d])).collect();
            let (direct, _) = aggregate_units(&sub, &projected);
            let merged = full.marginalize(&[d]).unwrap();
            for (x, y) in direct.cells().iter().zip(merged.cells()) {
                prop_assert!(arm_close(&x.control, &y.control) && arm_close(&x.treatment, &y.treatment));
            }
            let opts = MeasurementOptions::default();
            let a = additive_measurements(direct.cells(), &opts).unwrap();
            let b = additive_measurements(merged.cells(), &opts).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }
}

proptest! {
    #![proptest_config(config(6))]

    #[test]
    fn generator_region_estimates_match_design(seed in 0u64..1000) {
        let d = gen_example1(seed, 1.0);
        let (table, _) = aggregate_units(&d.schema, &d.rows);
        let meas = additive_measurements(table.cells(), &MeasurementOptions::default()).unwrap();
        for effect in &d.truth.effects {
            let (mut sw, mut est, mut designed) = (0.0, 0.0, 0.0);
            for c in 0..meas.len() {
                let levels = d.schema.cell_levels(c);
                if meas.weights[c] > 0.0 && effect.applies(&levels) {
                    sw += meas.weights[c];
                    est += meas.weights[c] * meas.values[c];
                    designed += meas.weights[c] * d.truth.tau(&levels);
                }
            }
            let se = 1.0 / sw.sqrt();
            prop_assert!((est / sw - designed / sw).abs() <= 3.0 * se);
        }
    }

    #[test]
    fn reports_are_deterministic_across_thread_counts(seed in 0u64..1000) {
        let schema = CovariateSchema::new(vec![
            Covariate::numbered("A", 3, Topology::Complete),
            Covariate::numbered("B", 4, Topology::Path),
        ]).unwrap();
        let rows = tv_hte::simulate::gen_null(&schema, 400, 0.1, seed).unwrap();
        let cfg = FitConfig { mc_samples: 300, seed, ..Default::default() };
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| fit(&schema, FitInput::Units(rows.clone()), &[], None, &cfg, &mut Artifacts::default()).unwrap().to_json_string())
        };
        let one = run(1);
        prop_assert_eq!(&one, &run(1));
        prop_assert_eq!(&one, &run(4));
    }

    #[test]
    fn heatmap_is_rebuilt_from_the_effect_list(seed in 0u64..1000, bump in 0usize..8) {
        let schema = CovariateSchema::new(vec![
            Covariate::numbered("A", 3, Topology::Complete),
            Covariate::numbered("B", 4, Topology::Path),
        ]).unwrap();
        let truth_shift = |levels: &[usize]| if levels[0] == 1 { 0.2 } else { 0.0 };
        let mut rows = tv_hte::simulate::gen_null(&schema, 600, 0.1, seed).unwrap();
        for r in rows.iter_mut().filter(|r| r.treated) {
            r.y += truth_shift(&r.cell.0);
        }
        let cfg = FitConfig { mc_samples: 300, seed, ..Default::default() };
        let report = fit(&schema, FitInput::Units(rows), &[], None, &cfg, &mut Artifacts::default()).unwrap();
        let direct = render_heatmap(&schema, report.intercept.estimate, &report.effects).unwrap();
        prop_assert_eq!(&direct, &report.heatmap.values);
        prop_assert_eq!(&direct, &render_from_report(&schema, &report.to_json_string()).unwrap());
        prop_assume!(!report.effects.is_empty());
        let mut changed = report.effects.clone();
        let i = bump % changed.len();
        changed[i].estimate += 0.5;
        prop_assert_ne!(direct, render_heatmap(&schema, report.intercept.estimate, &changed).unwrap());
    }
}
