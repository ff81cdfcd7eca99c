//! Fused (α = 0.5) versus pure lasso (α = 1) penalties on the two-effect
//! design, at full and half signal strength. Prints the second-order
//! values inside the planted X1×X3 block.

use tv_hte::report::{fit, render_heatmap, Artifacts, FitConfig, FitInput, Report};
use tv_hte::simulate::gen_example1;

fn block(report: &Report) -> tv_hte::Result<Vec<f64>> {
    let schema = tv_hte::simulate::example1_schema();
    let tv = &report.stages[0];
    let m = render_heatmap(&schema, tv.intercept.estimate, &tv.effects)?;
    // X1 rows 3..7, X3 columns start after X1 (10) and X2 (3)
    Ok((3..7).flat_map(|a| (2..4).map(move |b| (a, b))).map(|(a, b)| m[a][13 + b]).collect())
}

fn main() -> tv_hte::Result<()> {
    let seed = 11;
    for scale in [1.0, 0.5] {
        let data = gen_example1(seed, scale);
        println!("effect scale {}", scale);
        for alpha in [0.5, 1.0] {
            let cfg = FitConfig {
                alpha,
                seed,
                reprocess: false,
                ..Default::default()
            };
            let r = fit(&data.schema, FitInput::Units(data.rows.clone()), &[], None, &cfg, &mut Artifacts::default())?;
            let vals: Vec<String> = block(&r)?.iter().map(|v| format!("{:+.3}", v)).collect();
            println!("  alpha {:.1}: {:2} effects, block cells [{}]", alpha, r.stages[0].effects.len(), vals.join(" "));
        }
    }
    Ok(())
}
