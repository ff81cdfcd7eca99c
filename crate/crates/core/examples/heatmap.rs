//! Writes ground-truth and fitted heatmaps for the two-effect design as
//! CSV and PGM. Lower triangle: global effect; diagonal: first-order
//! effects; upper triangle: second-order effects.
//!
//! `cargo run --release --example heatmap -- [out_dir]`

use std::fs;
use std::path::PathBuf;

use tv_hte::report::{fit, heatmap_axis, heatmap_pgm, truth_heatmap, Artifacts, FitConfig, FitInput};
use tv_hte::simulate::gen_example1;

fn write_csv(path: &PathBuf, axis: &[String], m: &[Vec<f64>]) -> std::io::Result<()> {
    let mut s = String::from("row");
    for a in axis {
        s += &format!(",{}", a);
    }
    s.push('\n');
    for (a, row) in axis.iter().zip(m) {
        s += a;
        for v in row {
            s += &format!(",{:.5}", v);
        }
        s.push('\n');
    }
    fs::write(path, s)
}

fn main() -> tv_hte::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmaps".into()));
    fs::create_dir_all(&out)?;
    let data = gen_example1(1, 1.0);
    let axis = heatmap_axis(&data.schema);

    let truth = truth_heatmap(&data.schema, &data.truth)?;
    let report = fit(
        &data.schema,
        FitInput::Units(data.rows),
        &[],
        None,
        &FitConfig {
            seed: 1,
            ..Default::default()
        },
        &mut Artifacts::default(),
    )?;

    write_csv(&out.join("truth.csv"), &axis, &truth)?;
    fs::write(out.join("truth.pgm"), heatmap_pgm(&truth))?;
    write_csv(&out.join("fitted.csv"), &axis, &report.heatmap.values)?;
    fs::write(out.join("fitted.pgm"), heatmap_pgm(&report.heatmap.values))?;

    let diff = truth
        .iter()
        .flatten()
        .zip(report.heatmap.values.iter().flatten())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("{}x{} heatmaps written to {}", axis.len(), axis.len(), out.display());
    println!("largest |truth - fitted| entry: {:.4}", diff);
    Ok(())
}
