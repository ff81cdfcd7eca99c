//! Group-lasso pre-screening when there are more covariates than the
//! cross grid can hold. Six pure-noise covariates are added to the
//! two-effect design and screening keeps four.

use tv_hte::cells::{MeasurementMode, MeasurementOptions};
use tv_hte::report::{fit, Artifacts, FitConfig, FitInput};
use tv_hte::schema::{Covariate, CovariateSchema, Topology};
use tv_hte::screening::{group_lasso_screen_units, ScreenConfig};
use tv_hte::simulate::{example1_proportions, example1_schema, example1_truth, simulate_units};

fn main() -> tv_hte::Result<()> {
    let mut covs = example1_schema().covariates().to_vec();
    let mut props = example1_proportions();
    for i in 0..6 {
        covs.push(Covariate::numbered(format!("N{}", i + 1), 4, Topology::Complete));
        props.push(vec![0.25; 4]);
    }
    let schema = CovariateSchema::new(covs)?;
    println!("{} covariates, {} cells in the full grid", schema.len(), schema.cell_count());
    let rows = simulate_units(&schema, &props, &example1_truth(1.0), 10_000, 0.1, 3)?;

    let screen = ScreenConfig {
        keep_max: 4,
        ..Default::default()
    };
    let res = group_lasso_screen_units(&schema, &rows, MeasurementMode::Additive, &MeasurementOptions::default(), &screen)?;
    let chosen = res.chosen.unwrap_or(0);
    println!("group norms at the BIC choice (lambda {:.3e}):", res.chosen_lambda.unwrap_or(0.0));
    for (d, n) in res.group_norms[chosen].iter().enumerate() {
        println!("  {:3} {:.5}", schema.covariate(d).name, n);
    }
    let names: Vec<&str> = res.retained.iter().map(|&d| schema.covariate(d).name.as_str()).collect();
    println!("retained: {:?}", names);

    // the same screening runs inside fit when `screen` is set
    let cfg = FitConfig {
        screen: Some(screen),
        seed: 3,
        ..Default::default()
    };
    let r = fit(&schema, FitInput::Units(rows), &[], None, &cfg, &mut Artifacts::default())?;
    println!("\nfit on retained covariates: {} effects", r.n_effects());
    for e in &r.effects {
        println!("  {:28} {:+.4}", e.label, e.estimate);
    }
    Ok(())
}
