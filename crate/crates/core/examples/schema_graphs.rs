//! Level graphs, their tensor products, and the additive terms of a schema.

use tv_hte::operators::{build_design, build_penalty};
use tv_hte::schema::{build_level_graph, enumerate_terms, tensor_product, Covariate, CovariateSchema, Topology};

fn main() -> tv_hte::Result<()> {
    let schema = CovariateSchema::new(vec![
        Covariate::new(
            "Weekday",
            ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"].map(String::from).to_vec(),
            Topology::Loop,
        ),
        Covariate::numbered("AgeBand", 5, Topology::Path),
        Covariate::new("Device", ["phone", "tablet", "desktop"].map(String::from).to_vec(), Topology::Complete),
    ])?;

    for c in schema.covariates() {
        let g = build_level_graph(c)?;
        println!("{:8} {:?}: {} levels, {} edges, degrees {:?}", c.name, c.topology, c.size(), g.edge_count(), g.degrees());
    }

    let wd = build_level_graph(schema.covariate(0))?;
    let dev = build_level_graph(schema.covariate(2))?;
    let prod = tensor_product(&wd, &dev);
    println!("Weekday x Device: {} vertices, {} edges", prod.vertex_count(), prod.edge_count());

    let terms = enumerate_terms(&schema, 2)?;
    let design = build_design(&schema, &terms)?;
    let penalty = build_penalty(&terms, 0.5, &vec![1.0; terms.len()])?;
    println!("\n{} cells, {} parameters, {} penalty rows", design.n_rows(), design.n_cols(), penalty.n_rows());
    for (k, t) in terms.iter().enumerate() {
        println!(
            "  term {:<16} vertices {:3}  columns {:?}",
            t.label(&schema),
            t.vertex_count(),
            design.term_range(k)
        );
    }
    Ok(())
}
