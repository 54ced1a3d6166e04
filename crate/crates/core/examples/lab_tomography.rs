//! Simulated tomography of a scenario file, reconstructed three ways.
//!
//! `cargo run --release --example lab_tomography -- scenarios/paper_lab.json`

use std::path::PathBuf;

use ionlink::scenario::Scenario;
use ionlink::tomography::{analyze, simulate_dataset, LinkModel};

fn main() -> ionlink::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/paper_lab.json")));
    let s = Scenario::load(&path)?;
    s.validate(true)?;
    let data = simulate_dataset(&LinkModel::from_scenario(&s)?, s.shots, s.seed)?;
    let r = analyze(&data, s.analysis.correction, s.analysis.bootstrap_resamples, s.seed)?;
    let se = r.stderr.expect("scenario requests a bootstrap");
    println!("{}: fidelity {:.4}({:.0}), purity {:.4}({:.0}), bound {:.4}", s.name, r.fidelity, se.fidelity * 1e4, r.purity, se.purity * 1e4, r.f_max);
    for c in &r.by_correction {
        println!("  {:?}: fidelity {:.4}, purity {:.4}", c.correction, c.fidelity, c.purity);
    }
    Ok(())
}
