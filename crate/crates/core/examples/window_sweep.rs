//! Rate against ion phase coherence as the detection window shrinks.

use ionlink::obe::excitation::{simulate_excitation, ExcitationConfig, WINDOW_START_NS};
use ionlink::rate::{attempt_rate, window_tradeoff, RateFactors, TimingBudget};

fn main() -> ionlink::Result<()> {
    let pdf = simulate_excitation(&ExcitationConfig::default())?.pdf;
    let p_p = pdf.emission_probability().expect("simulated pdf carries its scale");
    let factors = RateFactors { p_p, p_c: 0.0168, p_q: 1.0, p_w: 0.0 };
    let attempts = attempt_rate(&TimingBudget::lab(), 0.0)?;
    let windows = [1.0, 2.0, 3.0, 5.0, 10.0, 15.0, 20.0];
    println!("{:>9} {:>7} {:>7} {:>9}", "window_ns", "p_w", "gamma", "rate/s");
    for r in window_tradeoff(&pdf, WINDOW_START_NS, &windows, 11.2, attempts, &factors, 0.0197)? {
        println!("{:>9} {:>7.3} {:>7.3} {:>9.1}", r.window_ns, r.p_w, r.gamma, r.rate_per_s);
    }
    Ok(())
}
