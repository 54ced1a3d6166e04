//! Per-mechanism fidelity budget of the shipped scenarios.

use ionlink::scenario::Scenario;
use ionlink::tomography::error_budget_report;

fn main() -> ionlink::Result<()> {
    for name in ["paper_lab", "paper_deployed"] {
        let path = format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
        let s = Scenario::load(path.as_ref())?;
        let b = error_budget_report(&s)?;
        println!("{name}: fidelity {:.4}, infidelity {:.4}", b.fidelity, b.infidelity);
        for r in b.rows.iter().filter(|r| r.isolated > 0.0) {
            println!("  {:<26} {:.2e}  (leave-one-out {:.2e})", r.mechanism.label(), r.isolated, r.leave_one_out);
        }
        println!("  {:<26} {:.2e}", "sum", b.sum_isolated);
    }
    Ok(())
}
