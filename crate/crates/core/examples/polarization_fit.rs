//! Writes synthetic scans with planted polarization errors and fits them back.
//!
//! `cargo run --release --example polarization_fit -- <dir>` also saves the
//! scans as CSV under `<dir>`.

use std::path::PathBuf;

use ionlink::obe::excitation::CalibrationConfig;
use ionlink::obe::fit::{fit_polarization_error, write_scan, PolarizationModel};
use ionlink::obe::shelving::ShelvingConfig;

fn main() -> ionlink::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from);
    let shelving_x: Vec<f64> = (-4..=4).map(|k| 2.0 * k as f64).collect();
    let cases = [
        ("shelving_scan.csv", PolarizationModel::Shelving(ShelvingConfig::default()), 9e-4, shelving_x, ["detuning_mhz", "contrast"]),
        ("calibration_sigma_minus.csv", PolarizationModel::Calibration(CalibrationConfig::sigma(-1)), 0.0088, CalibrationConfig::sigma(-1).times(), ["time_us", "signal"]),
        ("calibration_sigma_plus.csv", PolarizationModel::Calibration(CalibrationConfig::sigma(1)), 0.016, CalibrationConfig::sigma(1).times(), ["time_us", "signal"]),
    ];
    for (name, model, eps, xs, header) in cases {
        let scan = model.synthesize(eps, &xs)?;
        if let Some(dir) = &dir {
            let path = dir.join(name);
            let f = std::fs::File::create(&path).map_err(|e| ionlink::Error::Config(format!("{}: {e}", path.display())))?;
            write_scan(&scan, header, f)?;
        }
        let fit = fit_polarization_error(&scan, &model)?;
        println!("{name}: planted {eps}, fitted {:.6} (±{:.1e}, {} iterations)", fit.eps, fit.stderr, fit.iterations);
    }
    Ok(())
}
