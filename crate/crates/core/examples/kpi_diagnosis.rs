//! Pre/post monitoring diagnosis in multiplicative mode: a KPI that is
//! a product of a traffic share and revenue per volume, where only the
//! Android share moved. Each factor is fitted separately on the log scale.

use tv_hte::cells::MeasurementMode;
use tv_hte::report::{fit, Artifacts, FitConfig, FitInput};
use tv_hte::simulate::gen_example3;

fn main() -> tv_hte::Result<()> {
    let data = gen_example3(5, 28, 1.4);
    println!("planted share shift: x{:.2}", data.share_shift);
    let cfg = FitConfig {
        mode: MeasurementMode::Multiplicative,
        seed: 5,
        ..Default::default()
    };
    for (name, rows) in [("share", &data.share_rows), ("rpv", &data.rpv_rows)] {
        let r = fit(&data.schema, FitInput::Units(rows.clone()), &[], None, &cfg, &mut Artifacts::default())?;
        println!(
            "\n{}: global {:+.2}%, {} effects",
            name,
            100.0 * r.intercept.percent_change.unwrap_or(0.0),
            r.n_effects()
        );
        for e in &r.effects {
            println!(
                "  {:36} {:+7.2}%  importance {:.1}",
                e.label,
                100.0 * e.percent_change.unwrap_or(0.0),
                e.importance.unwrap_or(0.0)
            );
        }
    }
    Ok(())
}
