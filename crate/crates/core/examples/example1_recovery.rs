//! The whole pipeline on the synthetic two-effect design, one stage at a
//! time: cell aggregation, weight tuning, the λ path with its BIC column,
//! and the elastic-net reprocess of the selected clusters.
//!
//! `cargo run --release --example example1_recovery -- [seed]`

use std::time::Instant;

use tv_hte::cells::{additive_measurements, aggregate_units, MeasurementOptions};
use tv_hte::operators::{build_design, build_penalty, reduce};
use tv_hte::path::{lambda_grid, run_path, PathConfig};
use tv_hte::reprocess::{reprocess, ReprocessConfig};
use tv_hte::schema::enumerate_terms;
use tv_hte::simulate::gen_example1;
use tv_hte::weights::{estimate_weights, lambda_max};

fn main() -> tv_hte::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = gen_example1(seed, 1.0);
    let schema = &data.schema;

    let (table, _) = aggregate_units(schema, &data.rows);
    let meas = additive_measurements(table.cells(), &MeasurementOptions::default())?;
    println!("{} of {} cells usable", meas.usable_count(), meas.len());

    let terms = enumerate_terms(schema, 2)?;
    let design = build_design(schema, &terms)?;
    let unweighted = build_penalty(&terms, 0.5, &vec![1.0; terms.len()])?;
    let t = Instant::now();
    let est = estimate_weights(&design, &unweighted, &meas.weights, 10_000, seed)?;
    println!("term weights from 10000 noise draws ({:.2?}):", t.elapsed());
    for (k, term) in terms.iter().enumerate() {
        print!(" {}={:.2}", term.label(schema), est.weights[k]);
    }
    println!();

    let penalty = unweighted.with_weights(&est.weights)?;
    let problem = reduce(&design, &meas)?;
    let grid = lambda_grid(lambda_max(&problem, &penalty)?, 50, 0.01)?;
    let t = Instant::now();
    let path = run_path(&problem, &penalty, &meas, &grid, &PathConfig::default())?;
    println!("\npath of {} solves in {:.2?}", grid.len(), t.elapsed());
    println!("{:>10} {:>8} {:>10} {:>10}", "1/lambda", "effects", "Res", "BIC");
    let mut last = usize::MAX;
    for (i, e) in path.entries.iter().enumerate() {
        if e.n_effects != last || i == path.selected {
            let mark = if i == path.selected { "  <- selected" } else { "" };
            println!("{:10.5} {:8} {:10.2} {:10.2}{}", 1.0 / e.lambda, e.n_effects, e.res, e.bic, mark);
            last = e.n_effects;
        }
    }

    let sel = path.selected_entry();
    println!("\nTV + OLS, global {:+.4}", sel.refit.intercept);
    for c in &sel.refit.coefficients {
        let cl = &sel.clusters.clusters[c.column];
        let levels: Vec<_> = cl.vertices.iter().map(|&v| terms[cl.term].vertex_levels(v)).collect();
        println!(
            "  {:8} {:?}  {:+.4}  p = {:.3}",
            terms[cl.term].label(schema),
            levels,
            c.estimate,
            c.p
        );
    }

    let rp = reprocess(&sel.clusters, &design, &meas, &ReprocessConfig::default())?;
    println!("\nelastic net + OLS, global {:+.4}", rp.model.intercept);
    for c in &rp.model.coefficients {
        let f = &rp.features[c.column];
        println!("  {:8} {:?}  {:+.4}  p = {:.2e}", terms[f.term].label(schema), f.level_sets, c.estimate, c.p);
    }
    Ok(())
}
