//! Least-squares fits of a polarization error to measured scans.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::excitation::{calibration_trace, CalibrationConfig};
use super::shelving::{contrast_scan, ShelvingConfig};
use crate::{Error, Result};

/// One measured point: `x` is the scan coordinate (1004 nm detuning in MHz for
/// shelving scans, time in µs for calibration traces).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub x: f64,
    pub y: f64,
}

/// Reads a two-column CSV with a header row. Column names are ignored.
pub fn read_scan(path: &Path) -> Result<Vec<ScanPoint>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    })?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Config(format!("{}: expected two columns", path.display())));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: not a number: {s:?}", path.display())))
        };
        out.push(ScanPoint { x: parse(&rec[0])?, y: parse(&rec[1])? });
    }
    Ok(out)
}

pub fn write_scan<W: std::io::Write>(points: &[ScanPoint], header: [&str; 2], w: W) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    wr.write_record(header)?;
    for p in points {
        wr.write_record([format!("{:.16e}", p.x), format!("{:.16e}", p.y)])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Model that maps a polarization error to predictions at the scan points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum PolarizationModel {
    /// Optimized shelving contrast versus 1004 nm detuning.
    Shelving(ShelvingConfig),
    /// Normalized 1092 nm emission density versus probe time.
    Calibration(CalibrationConfig),
}

impl PolarizationModel {
    pub fn predict(&self, eps: f64, xs: &[f64]) -> Result<Vec<f64>> {
        match self {
            PolarizationModel::Shelving(cfg) => {
                Ok(contrast_scan(cfg, xs, eps)?.into_iter().map(|o| o.contrast).collect())
            }
            PolarizationModel::Calibration(cfg) => calibration_trace(cfg, eps, xs),
        }
    }

    /// Synthetic scan at `xs` for a known error.
    pub fn synthesize(&self, eps: f64, xs: &[f64]) -> Result<Vec<ScanPoint>> {
        let ys = self.predict(eps, xs)?;
        Ok(xs.iter().zip(ys).map(|(&x, y)| ScanPoint { x, y }).collect())
    }

    fn upper_bound(&self) -> f64 {
        0.2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarizationFit {
    pub eps: f64,
    pub stderr: f64,
    pub residual_ss: f64,
    pub iterations: usize,
}

/// Options for the simplex search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexOptions {
    pub initial: f64,
    pub step: f64,
    pub x_tol: f64,
    pub max_iter: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { initial: 0.005, step: 0.005, x_tol: 1e-7, max_iter: 200 }
    }
}

/// One-dimensional Nelder-Mead. Returns `(x, f(x), iterations)`.
pub fn nelder_mead_1d<F>(mut f: F, opts: SimplexOptions) -> Result<(f64, f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut s = [(opts.initial, f(opts.initial)?), (opts.initial + opts.step, f(opts.initial + opts.step)?)];
    for it in 0..opts.max_iter {
        if s[1].1 < s[0].1 {
            s.swap(0, 1);
        }
        let (best, worst) = (s[0], s[1]);
        if (worst.0 - best.0).abs() < opts.x_tol {
            return Ok((best.0, best.1, it));
        }
        // the centroid of a 1-D simplex without its worst vertex is the best vertex
        let xr = 2.0 * best.0 - worst.0;
        let fr = f(xr)?;
        if fr < best.1 {
            let xe = 3.0 * best.0 - 2.0 * worst.0;
            let fe = f(xe)?;
            s[1] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else {
            let xc = if fr < worst.1 { 0.5 * (best.0 + xr) } else { 0.5 * (best.0 + worst.0) };
            let fc = f(xc)?;
            if fc < worst.1.min(fr) {
                s[1] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let xs = 0.5 * (best.0 + worst.0);
                s[1] = (xs, f(xs)?);
            }
        }
    }
    Err(Error::NonConvergence(format!("simplex did not converge in {} iterations", opts.max_iter)))
}

/// Fits the polarization error that best reproduces `scan`.
pub fn fit_polarization_error(scan: &[ScanPoint], model: &PolarizationModel) -> Result<PolarizationFit> {
    fit_polarization_error_with(scan, model, SimplexOptions::default())
}

pub fn fit_polarization_error_with(
    scan: &[ScanPoint],
    model: &PolarizationModel,
    opts: SimplexOptions,
) -> Result<PolarizationFit> {
    if scan.len() < 5 {
        return Err(Error::Config(format!("need at least 5 scan points, got {}", scan.len())));
    }
    let xs: Vec<f64> = scan.iter().map(|p| p.x).collect();
    let hi = model.upper_bound();
    let sse = |eps: f64| -> Result<f64> {
        let e = eps.clamp(0.0, hi);
        let pred = model.predict(e, &xs)?;
        let ss: f64 = pred.iter().zip(scan).map(|(p, s)| (p - s.y).powi(2)).sum();
        // quadratic wall keeps the simplex inside the physical range
        let out = eps - e;
        Ok(ss * (1.0 + 1e6 * out * out) + out * out)
    };
    let (eps, _, iterations) = nelder_mead_1d(sse, opts)?;
    let eps = eps.clamp(0.0, hi);
    let residual_ss = sse(eps)?;
    let h = (1e-3 * eps).max(1e-6);
    let (lo, mid) = if eps - h < 0.0 { (eps, eps + h) } else { (eps - h, eps) };
    let (f0, f1, f2) = (sse(lo)?, sse(mid)?, sse(mid + h)?);
    let curvature = (f2 - 2.0 * f1 + f0) / (h * h);
    let dof = (scan.len() - 1) as f64;
    let stderr = if curvature > 0.0 { (2.0 * residual_ss / dof / curvature).sqrt() } else { f64::INFINITY };
    Ok(PolarizationFit { eps, stderr, residual_ss, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_finds_parabola_minimum() {
        let (x, fx, _) = nelder_mead_1d(|x| Ok((x - 0.37).powi(2) + 1.0), SimplexOptions::default()).unwrap();
        assert!((x - 0.37).abs() < 1e-6);
        assert!((fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_reports_nonconvergence() {
        let opts = SimplexOptions { max_iter: 3, ..SimplexOptions::default() };
        let r = nelder_mead_1d(|x| Ok(-x), opts);
        assert!(matches!(r, Err(Error::NonConvergence(_))));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = vec![ScanPoint { x: 0.0, y: 0.9 }; 4];
        let m = PolarizationModel::Shelving(ShelvingConfig::default());
        assert!(matches!(fit_polarization_error(&pts, &m), Err(Error::Config(_))));
    }

    #[test]
    fn scan_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.csv");
        let pts = vec![ScanPoint { x: -1.5, y: 0.25 }, ScanPoint { x: 2.0, y: 1.0 / 3.0 }];
        write_scan(&pts, ["detuning_mhz", "contrast"], std::fs::File::create(&path).unwrap()).unwrap();
        assert_eq!(read_scan(&path).unwrap(), pts);
    }
}
