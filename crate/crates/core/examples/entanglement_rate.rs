//! Attempt and entanglement rates for the lab and deployed loops, with a
//! Monte Carlo run that includes cooling breaks.

use ionlink::rate::{attempt_rate, cycle_rate, entanglement_rate, monte_carlo_rate, TimingBudget};

fn main() -> ionlink::Result<()> {
    let lab = TimingBudget::lab();
    for (label, travel, p, leak) in [("lab", 0.0, 7.64e-4, 0.0197), ("deployed", 13.613, 2.57e-4, 0.0234)] {
        let a = attempt_rate(&lab, travel)?;
        println!("{label}: {a:.0} attempts/s, {:.2} entangled/s", entanglement_rate(a, p, leak));
    }
    let cooled = TimingBudget { cooling_us: 100.0, ..lab };
    let mc = monte_carlo_rate(&cooled, 0.0, 7.64e-4, 0.0197, 20.0, 7)?;
    println!(
        "lab with 100 µs cooling every 50 attempts: analytic {:.1}/s, monte carlo {:.1} ± {:.1}/s",
        cycle_rate(&cooled, 0.0, 7.64e-4, 0.0197)?,
        mc.rate_per_s,
        mc.stderr_per_s
    );
    Ok(())
}
