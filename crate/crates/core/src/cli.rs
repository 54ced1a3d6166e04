//! Subcommands behind the `ionlink` binary.
//!
//! Every command writes deterministic output: the same inputs and seed give
//! the same bytes whatever the thread count. Errors map to exit status 1
//! (configuration), 2 (numerical non-convergence) or 3 (I/O).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::obe::excitation::{simulate_excitation, ExcitationConfig, WINDOW_START_NS};
use crate::obe::fit::{fit_polarization_error, read_scan, PolarizationModel};
use crate::obe::shelving::{contrast_scan, ShelvingConfig};
use crate::photon::{window_capture, DetectorModel};
use crate::rate::{attempt_rate, cycle_rate, entanglement_rate, monte_carlo_rate, window_tradeoff, write_window_csv, RateFactors};
use crate::scenario::Scenario;
use crate::source::window_success_s;
use crate::tomography::{analyze, error_budget_report, simulate_dataset, LinkModel};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ionlink", version, about = "Heralded ion-photon link simulation and analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a tomography dataset and reconstruct the state.
    Tomography {
        scenario: PathBuf,
        /// Heralds per setting; defaults to the scenario's `shots`.
        #[arg(long)]
        shots: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the scenario's bootstrap resample count.
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Analytic rates, optionally checked by a Monte Carlo run.
    Rate {
        scenario: PathBuf,
        /// Simulated wall time, s.
        #[arg(long)]
        mc: Option<f64>,
    },
    /// Optical Bloch equation models.
    Obe {
        #[command(subcommand)]
        command: ObeCommand,
    },
    /// Fit a polarization error to a measured scan.
    FitPolarization { data: PathBuf, config: PathBuf },
    /// Capture, phase coherence and rate versus detection-window length.
    SweepWindow {
        scenario: PathBuf,
        /// Window lengths, ns.
        #[arg(long, value_delimiter = ',', required = true)]
        windows: Vec<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Report problems in a scenario without running it.
    Validate { scenario: PathBuf },
    /// Fidelity lost to each noise mechanism.
    Budget {
        scenario: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum ObeCommand {
    /// Optimized shelving contrast versus 1004 nm detuning.
    ShelvingScan {
        config: PathBuf,
        /// 1004 nm detunings, MHz.
        #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
        detunings: Vec<f64>,
        /// 1004 nm polarization error.
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Emission-time densities of one excitation attempt.
    Excitation {
        config: PathBuf,
        /// Writes the densities as CSV.
        #[arg(long)]
        pdf: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Sizes the global thread pool from `IONLINK_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("IONLINK_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("IONLINK_THREADS={v:?} is not a thread count")))?;
    // a pool that already exists (tests, repeated calls) is left alone
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable output");
    s.push(b'\n');
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn emit(out: &OutArg, bytes: &[u8], stdout: &mut dyn Write) -> Result<()> {
    match &out.out {
        Some(p) => write_file(p, bytes),
        None => stdout.write_all(bytes).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn say(stdout: &mut dyn Write, line: String) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn load_scenario(path: &Path, stochastic: bool) -> Result<Scenario> {
    let s = Scenario::load(path)?;
    s.validate(stochastic)?;
    Ok(s)
}

/// Capture probability of the scenario's gate, from the scenario's value or
/// the excitation model.
fn window_probability(s: &Scenario) -> Result<f64> {
    match s.rate.p_w {
        Some(p) => Ok(p),
        None => {
            let cfg = s.excitation.clone().unwrap_or_default();
            window_capture(&simulate_excitation(&cfg)?.pdf, &s.detector)
        }
    }
}

/// Runs one command, writing human-readable lines to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Tomography { scenario, shots, out, seed, resamples } => {
            let mut s = load_scenario(&scenario, seed.is_none())?;
            if let Some(seed) = seed {
                s.seed = Some(seed);
            }
            let shots = shots.unwrap_or(s.shots);
            if shots == 0 {
                return Err(Error::Config("shots must be > 0".into()));
            }
            let resamples = resamples.unwrap_or(s.analysis.bootstrap_resamples);
            let model = LinkModel::from_scenario(&s)?;
            let data = simulate_dataset(&model, shots, s.seed)?.with_corrected_counts()?;
            let result = analyze(&data, s.analysis.correction, resamples, s.seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_file(&out.join("dataset.json"), &json(&data))?;
            write_file(&out.join("result.json"), &json(&result))?;
            let min_retained = data.settings.iter().map(|x| x.retained()).fold(f64::INFINITY, f64::min);
            say(stdout, format!("scenario {}", s.name))?;
            say(stdout, format!("heralds per setting {shots}, fewest retained {min_retained}"))?;
            let se = |x: Option<f64>| x.map(|v| format!(" ± {v:.4}")).unwrap_or_default();
            say(stdout, format!("fidelity {:.4}{}", result.fidelity, se(result.stderr.map(|e| e.fidelity))))?;
            say(stdout, format!("purity {:.4}{}", result.purity, se(result.stderr.map(|e| e.purity))))?;
            say(stdout, format!("fidelity bound {:.4}", result.f_max))?;
            for c in &result.by_correction {
                say(stdout, format!("  correction {:?}: fidelity {:.4}, purity {:.4}", c.correction, c.fidelity, c.purity))?;
            }
            if !result.converged {
                return Err(Error::NonConvergence(format!(
                    "MLE stopped after {} iterations; best iterate written",
                    result.iterations
                )));
            }
            Ok(())
        }
        Command::Rate { scenario, mc } => {
            let s = load_scenario(&scenario, mc.is_some())?;
            let travel = s.travel_us();
            let attempts = attempt_rate(&s.timing, travel)?;
            let p_w = window_probability(&s)?;
            let predicted = s.predicted_success_probability(p_w);
            let p_ent = s.rate.measured_success_probability.unwrap_or(predicted);
            let leak = s.rate.leakage_fraction;
            say(stdout, format!("scenario {}", s.name))?;
            say(stdout, format!("attempt period {:.3} µs (travel {travel:.3} µs)", s.timing.attempt_period_us(travel)))?;
            say(stdout, format!("attempt rate {attempts:.0}/s"))?;
            say(stdout, format!("window capture {p_w:.4}"))?;
            say(stdout, format!("predicted success probability {predicted:.4e}"))?;
            if let Some(m) = s.rate.measured_success_probability {
                say(stdout, format!("measured success probability {m:.4e}"))?;
            }
            say(stdout, format!("analytic entanglement rate {:.1}/s", entanglement_rate(attempts, p_ent, leak)))?;
            say(stdout, format!("with cooling and readout {:.1}/s", cycle_rate(&s.timing, travel, p_ent, leak)?))?;
            if let Some(duration) = mc {
                if !(duration > 0.0) {
                    return Err(Error::out_of_range("mc", duration));
                }
                let seed = s.seed.expect("validated");
                let r = monte_carlo_rate(&s.timing, travel, p_ent, leak, duration, seed)?;
                say(
                    stdout,
                    format!(
                        "monte carlo {:.1} ± {:.1}/s over {duration} s ({} successes, {} heralds)",
                        r.rate_per_s, r.stderr_per_s, r.successes, r.heralds
                    ),
                )?;
            }
            Ok(())
        }
        Command::Obe { command } => match command {
            ObeCommand::ShelvingScan { config, detunings, eps, out } => {
                let cfg: ShelvingConfig = read_json(&config)?;
                let rows = contrast_scan(&cfg, &detunings, eps)?;
                let mut buf = Vec::new();
                {
                    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut buf);
                    wr.write_record(["detuning_mhz", "shelve_time_us", "contrast", "bright_zero", "bright_one"])?;
                    for (d, r) in detunings.iter().zip(&rows) {
                        wr.write_record(
                            [*d, r.shelve_time_us, r.contrast, r.bright_zero, r.bright_one].map(|x| format!("{x:.16e}")),
                        )?;
                    }
                    wr.flush().map_err(|e| Error::io("<csv>", e))?;
                }
                emit(&out, &buf, stdout)
            }
            ObeCommand::Excitation { config, pdf } => {
                let cfg: ExcitationConfig = read_json(&config)?;
                let r = simulate_excitation(&cfg)?;
                if let Some(path) = pdf {
                    let mut buf = Vec::new();
                    r.pdf.write_csv(&mut buf)?;
                    write_file(&path, &buf)?;
                }
                #[derive(Serialize)]
                struct Window {
                    window_ns: f64,
                    capture: f64,
                    state_success: f64,
                }
                #[derive(Serialize)]
                struct Summary {
                    excitations: f64,
                    emission_probability: f64,
                    final_d32_population: f64,
                    initial_s: [f64; 2],
                    windows: Vec<Window>,
                }
                let windows = [3.0, 20.0]
                    .iter()
                    .map(|&w| {
                        let gate = (WINDOW_START_NS, WINDOW_START_NS + w);
                        let det = DetectorModel {
                            efficiency: 1.0,
                            dark_count_rate_per_s: 0.0,
                            window_ns: gate,
                        };
                        Ok(Window {
                            window_ns: w,
                            capture: window_capture(&r.pdf, &det)?,
                            state_success: window_success_s(&r.pdf, gate.0, gate.1)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let summary = Summary {
                    excitations: r.excitations,
                    emission_probability: r.emission_probability,
                    final_d32_population: r.final_d32_population,
                    initial_s: r.initial_s,
                    windows,
                };
                stdout.write_all(&json(&summary)).map_err(|e| Error::io("<stdout>", e))
            }
        },
        Command::FitPolarization { data, config } => {
            let scan = read_scan(&data)?;
            let model: PolarizationModel = read_json(&config)?;
            let fit = fit_polarization_error(&scan, &model)?;
            stdout.write_all(&json(&fit)).map_err(|e| Error::io("<stdout>", e))
        }
        Command::SweepWindow { scenario, windows, out } => {
            let s = load_scenario(&scenario, false)?;
            let splitting = s
                .qubit_splitting_mhz
                .ok_or_else(|| Error::Config("sweep-window needs qubit_splitting_mhz in the scenario".into()))?;
            let cfg = s.excitation.clone().unwrap_or_default();
            let pdf = simulate_excitation(&cfg)?.pdf;
            let attempts = attempt_rate(&s.timing, s.travel_us())?;
            // the simulated pulse may excite more than once per attempt
            let factors = RateFactors {
                p_p: pdf.emission_probability().unwrap_or(s.rate.p_p),
                p_c: s.rate.p_c_p_q * s.fiber.survival(),
                p_q: 1.0,
                p_w: 0.0,
            };
            let rows = window_tradeoff(&pdf, s.detector.window_ns.0, &windows, splitting, attempts, &factors, s.rate.leakage_fraction)?;
            let mut buf = Vec::new();
            write_window_csv(&rows, &mut buf)?;
            emit(&out, &buf, stdout)
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            let v = s.violations(true);
            if v.is_empty() {
                say(stdout, format!("{}: ok", scenario.display()))
            } else {
                for m in &v {
                    say(stdout, format!("{}: {m}", scenario.display()))?;
                }
                Err(Error::Config(format!("{} violation(s)", v.len())))
            }
        }
        Command::Budget { scenario, out } => {
            let s = load_scenario(&scenario, false)?;
            emit(&out, &json(&error_budget_report(&s)?), stdout)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match init_threads().and_then(|_| run(cli, stdout)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
