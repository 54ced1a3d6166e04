//! Two-pass shelving readout: simulate counts for known populations and
//! invert the error model.

use ionlink::readout::{correct_counts, simulate_trials, ReadoutErrors};
use ionlink::rng::{substream, Domain};

fn main() -> ionlink::Result<()> {
    let e = ReadoutErrors::MEASURED;
    let k = 1_000_000;
    for (i, p) in [[0.5, 0.48, 0.02], [0.75, 0.25, 0.0], [0.1, 0.8, 0.1]].into_iter().enumerate() {
        let mut rng = substream(2024, Domain::Readout, i as u64, 0);
        let c = simulate_trials(p, &e, k, &mut rng)?;
        let est = correct_counts(&c, &e)?;
        let sd = est.std_dev();
        println!(
            "planted {p:?}: bright {}/{} → n0 {:.4}±{:.4}, n1 {:.4}±{:.4}, n2 {:.4}±{:.4}",
            c.n_b1,
            c.n_b2,
            est.n0 / k as f64,
            sd[0] / k as f64,
            est.n1 / k as f64,
            sd[1] / k as f64,
            est.n2 / k as f64,
            sd[2] / k as f64,
        );
    }
    Ok(())
}
