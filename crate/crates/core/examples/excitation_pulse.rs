//! Excitation-pulse simulation: emission-time densities, capture and
//! state-preparation success versus detection window.

use ionlink::obe::excitation::{simulate_excitation, ExcitationConfig, WINDOW_START_NS};
use ionlink::source::window_success_s;

fn main() -> ionlink::Result<()> {
    let r = simulate_excitation(&ExcitationConfig::default())?;
    println!("pumping residual in S1/2(-1/2): {:.4}", r.initial_s[0]);
    println!("excitations per attempt: {:.3}", r.excitations);
    println!("1092 nm emission probability: {:.4}", r.emission_probability);
    let total = r.pdf.total_integral();
    for w in [1.0, 3.0, 5.0, 10.0, 15.0, 20.0] {
        let (t_i, t_f) = (WINDOW_START_NS, WINDOW_START_NS + w);
        let (m, p) = r.pdf.window_integrals(t_i, t_f);
        println!(
            "window {w:>4} ns: capture {:.3}, S {:.4}",
            (m + p) / total,
            window_success_s(&r.pdf, t_i, t_f)?
        );
    }
    Ok(())
}
