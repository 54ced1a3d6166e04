//! Shelving contrast versus 1004 nm detuning for a few polarization errors.

use ionlink::obe::shelving::{contrast_scan, ShelvingConfig};

fn main() -> ionlink::Result<()> {
    let cfg = ShelvingConfig::default();
    let detunings: Vec<f64> = (-4..=4).map(|k| 2.0 * k as f64).collect();
    for eps in [0.0, 9e-4, 3e-3] {
        let rows = contrast_scan(&cfg, &detunings, eps)?;
        print!("eps {eps:<7}");
        for r in &rows {
            print!(" {:.4}", r.contrast);
        }
        println!();
    }
    Ok(())
}
