//! Command-line front end: TOML run configuration with dotted-path overrides,
//! subcommand dispatch and file output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    calibrate_superposition, fourier_analysis, linspace, prepare_system_state, run_at_scan, run_avoided_crossing,
    run_chevron, run_swap, Metadata, ScanResult, ShotModel,
};
use crate::lindblad::{partial_trace, to_magnon_frame, AssignmentMatrix, DensityMatrix, EvolveOptions};
use crate::model::PhysicalParams;
use crate::operators::Factor;
use crate::schedule::{Protocol, SequenceBuilder, StateTarget};
use crate::selftest::run_selftest;
use crate::tomography::{
    fidelity, reconstruct_density_matrix, square_grid, wigner_map, PopulationSource, TomographyConfig, WignerMap,
};

/// Fallback output directory when neither `--out` nor `output.dir` is given.
pub const OUT_DIR_ENV: &str = "MAGNON_SIM_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub coil_min_ma: f64,
    pub coil_max_ma: f64,
    pub coil_points: usize,
    pub probe_min_ghz: f64,
    pub probe_max_ghz: f64,
    pub probe_points: usize,
    pub at_amp_max_mhz: f64,
    pub at_amp_points: usize,
    pub at_probe_min_ghz: f64,
    pub at_probe_max_ghz: f64,
    pub at_probe_points: usize,
    pub swap_tau_max_ns: f64,
    pub swap_tau_points: usize,
    pub chevron_detuning_max_mhz: f64,
    pub chevron_detuning_points: usize,
    pub chevron_tau_max_ns: f64,
    pub chevron_tau_points: usize,
    /// Prepared state for `prepare`, `wigner` and `reconstruct`.
    pub state: StateTarget,
    /// Half-width of the square α grid.
    pub wigner_extent: f64,
    pub wigner_points: usize,
    pub population_source: PopulationSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            coil_min_ma: -6.0,
            coil_max_ma: -3.0,
            coil_points: 31,
            probe_min_ghz: 5.82,
            probe_max_ghz: 5.87,
            probe_points: 501,
            at_amp_max_mhz: 160.0,
            at_amp_points: 33,
            at_probe_min_ghz: 5.70,
            at_probe_max_ghz: 6.00,
            at_probe_points: 601,
            swap_tau_max_ns: 100.0,
            swap_tau_points: 101,
            chevron_detuning_max_mhz: 15.0,
            chevron_detuning_points: 31,
            chevron_tau_max_ns: 200.0,
            chevron_tau_points: 101,
            state: StateTarget::SingleMagnon,
            wigner_extent: 1.0,
            wigner_points: 5,
            population_source: PopulationSource::Regression,
        }
    }
}

/// Readout block; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotsConfig {
    pub enabled: bool,
    pub shots: u64,
    pub assignment_matrix: AssignmentMatrix,
}

impl Default for ShotsConfig {
    fn default() -> Self {
        let s = ShotModel::default();
        Self { enabled: true, shots: s.shots, assignment_matrix: s.assignment_matrix }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub format: Format,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub physical: PhysicalParams,
    pub protocol: Protocol,
    pub experiment: ExperimentConfig,
    pub shots: ShotsConfig,
    pub output: OutputConfig,
    pub tomography: TomographyConfig,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg =
            RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.physical.validate()?;
        self.protocol.validate()?;
        self.tomography.validate()?;
        self.shot_model().map_or(Ok(()), |s| s.validate())?;
        let e = &self.experiment;
        for (key, n) in [
            ("experiment.coil_points", e.coil_points),
            ("experiment.probe_points", e.probe_points),
            ("experiment.at_amp_points", e.at_amp_points),
            ("experiment.at_probe_points", e.at_probe_points),
            ("experiment.swap_tau_points", e.swap_tau_points),
            ("experiment.chevron_detuning_points", e.chevron_detuning_points),
            ("experiment.chevron_tau_points", e.chevron_tau_points),
            ("experiment.wigner_points", e.wigner_points),
        ] {
            if n < 2 {
                return Err(Error::Config(format!("{key} must be at least 2")));
            }
        }
        Ok(())
    }

    pub fn shot_model(&self) -> Option<ShotModel> {
        self.shots.enabled.then_some(ShotModel {
            shots: self.shots.shots,
            seed: self.seed,
            assignment_matrix: self.shots.assignment_matrix,
        })
    }
}

/// Sets `a.b.c = value` in the table. The value is read as a TOML literal,
/// falling back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) =
        assignment.split_once('=').ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Qubit-magnon avoided crossing versus coil current.
    Anticross,
    /// Autler-Townes spectroscopy versus drive amplitude.
    AtScan,
    /// P₊ versus interaction time and magnon detuning.
    Chevron,
    /// Chevron spectra and the fitted exchange coupling.
    Fourier,
    /// Resonant swap curve and full-swap time.
    Swap,
    /// State preparation and the reduced magnon state.
    Prepare,
    /// Wigner map of the prepared state.
    Wigner,
    /// Density-matrix reconstruction and fidelity.
    Reconstruct,
    /// Invariant suite.
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Anticross => "anticross",
            Command::AtScan => "at-scan",
            Command::Chevron => "chevron",
            Command::Fourier => "fourier",
            Command::Swap => "swap",
            Command::Prepare => "prepare",
            Command::Wigner => "wigner",
            Command::Reconstruct => "reconstruct",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "magnon-sim", version, about = "Qutrit-magnon simulator and Wigner tomography")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `physical.t1_magnon_ns=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,
}

/// Reduced magnon state written by `prepare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreparedState {
    pub target: StateTarget,
    pub rho: DensityMatrix,
    pub fidelity: f64,
    /// Qutrit population left outside |g⟩ at the end of the sequence.
    pub qutrit_residual: f64,
    pub duration_ns: f64,
    pub metadata: Metadata,
}

/// What a subcommand produced: a summary line and named file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: String,
    pub csv: Option<String>,
    pub json: Option<String>,
    pub success: bool,
}

fn with_header(meta: Option<&Metadata>, seed: u64, body: String) -> Result<String> {
    let mut out = format!("# {}\n# seed: {seed}\n", crate::ARTIFACT_VERSION);
    if let Some(m) = meta {
        out.push_str(&format!("# experiment: {}\n", m.experiment));
        out.push_str(&format!("# params: {}\n", serde_json::to_string(&m.params)?));
        if let Some(p) = &m.protocol {
            out.push_str(&format!("# protocol: {}\n", serde_json::to_string(p)?));
        }
    }
    out.push_str(&body);
    Ok(out)
}

fn scan_outcome(mut r: ScanResult, seed: u64, summary: String) -> Result<Outcome> {
    r.metadata.seed = Some(seed);
    Ok(Outcome {
        summary,
        csv: Some(with_header(Some(&r.metadata), seed, r.to_csv())?),
        json: Some(r.to_json()?),
        success: true,
    })
}

fn builder(cfg: &RunConfig) -> Result<SequenceBuilder> {
    SequenceBuilder::new(&cfg.physical, &cfg.protocol)
}

fn state_builder(cfg: &RunConfig) -> Result<SequenceBuilder> {
    let b = builder(cfg)?;
    match cfg.experiment.state {
        StateTarget::Superposition { .. } => calibrate_superposition(&b),
        _ => Ok(b),
    }
}

fn fmt_opt(x: Option<&f64>, digits: usize) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.digits$}"))
}

fn chevron(cfg: &RunConfig, shots: Option<&ShotModel>) -> Result<ScanResult> {
    let e = &cfg.experiment;
    let taus = linspace(0.0, e.chevron_tau_max_ns, e.chevron_tau_points);
    let dets = linspace(-e.chevron_detuning_max_mhz, e.chevron_detuning_max_mhz, e.chevron_detuning_points);
    run_chevron(&builder(cfg)?, &taus, &dets, shots)
}

fn map_for(cfg: &RunConfig) -> Result<WignerMap> {
    let e = &cfg.experiment;
    let alphas = square_grid(e.wigner_extent, e.wigner_points)?;
    let shots = cfg.shot_model();
    let mut map =
        wigner_map(&state_builder(cfg)?, e.state, &alphas, &cfg.tomography, e.population_source, shots.as_ref())?;
    if let Some(m) = map.metadata.as_mut() {
        m.seed = Some(cfg.seed);
    }
    Ok(map)
}

/// Runs one subcommand; nothing is written to disk.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let seed = cfg.seed;
    let shots = cfg.shot_model();
    match command {
        Command::Anticross => {
            let coil = linspace(e.coil_min_ma, e.coil_max_ma, e.coil_points);
            let probe = linspace(e.probe_min_ghz, e.probe_max_ghz, e.probe_points);
            let r = run_avoided_crossing(&cfg.physical, &coil, &probe)?;
            let s = format!(
                "anticross: peak splitting {} MHz at {:.3} mA (eigenvalue splitting {} MHz)",
                fmt_opt(r.summary.get("splitting_mhz"), 3),
                r.summary["resonant_current_ma"],
                fmt_opt(r.summary.get("eigen_splitting_mhz"), 3),
            );
            scan_outcome(r, seed, s)
        }
        Command::AtScan => {
            let amps = linspace(0.0, e.at_amp_max_mhz, e.at_amp_points);
            let probe = linspace(e.at_probe_min_ghz, e.at_probe_max_ghz, e.at_probe_points);
            let r = run_at_scan(&cfg.physical, &amps, &probe)?;
            let dd = cfg.physical.at_drive_detuning_mhz;
            let mut law: f64 = 0.0;
            let mut eig: f64 = 0.0;
            for (k, a) in amps.iter().enumerate() {
                let expect = dd.hypot(*a);
                law = law.max((r.series["separation_mhz"][k] - expect).abs());
                eig = eig.max((r.series["eigen_separation_mhz"][k] - expect).abs());
            }
            let s = format!("at-scan: max |separation − √(Δd²+Ωd²)| = {law:.2e} MHz (eigenvalue block {eig:.2e} MHz)");
            scan_outcome(r, seed, s)
        }
        Command::Chevron => {
            let r = chevron(cfg, shots.as_ref())?;
            let s = format!("chevron: {}×{} map of P₊(Δ, τ)", r.shape()[0], r.shape()[1]);
            scan_outcome(r, seed, s)
        }
        Command::Fourier => {
            let r = fourier_analysis(&chevron(cfg, shots.as_ref())?)?;
            let s = format!(
                "fourier: g_mq = {:.3} ± {:.3} MHz (resonant peak {:.2} MHz)",
                r.summary["fitted_g_mhz"], r.summary["fitted_g_stderr_mhz"], r.summary["resonant_peak_mhz"]
            );
            scan_outcome(r, seed, s)
        }
        Command::Swap => {
            let taus = linspace(0.0, e.swap_tau_max_ns, e.swap_tau_points);
            let r = run_swap(&builder(cfg)?, &taus, shots.as_ref())?;
            let s = format!("swap: first P₊ minimum at {} ns", fmt_opt(r.summary.get("first_minimum_ns"), 2));
            scan_outcome(r, seed, s)
        }
        Command::Prepare => {
            let b = state_builder(cfg)?;
            let (full, t) = prepare_system_state(&b, e.state, EvolveOptions::default())?;
            let rho = to_magnon_frame(&partial_trace(&full, &[Factor::Magnon])?, &b.params, t)?;
            let qutrit = partial_trace(&full, &[Factor::Qutrit])?;
            let residual = 1.0 - qutrit.matrix()[(0, 0)].re;
            let f = fidelity(&rho, &e.state.ideal_state(rho.dim())?)?;
            let mut meta = Metadata::new("prepare", &b.params, Some(&b.protocol), None);
            meta.seed = Some(seed);
            let out = PreparedState {
                target: e.state,
                rho,
                fidelity: f,
                qutrit_residual: residual,
                duration_ns: t,
                metadata: meta,
            };
            let s = format!("prepare: {} in {t:.1} ns, F = {f:.4}, qutrit residual {residual:.4}", e.state.label());
            Ok(Outcome {
                summary: s,
                csv: Some(with_header(Some(&out.metadata), seed, out.rho.to_csv())?),
                json: Some(serde_json::to_string_pretty(&out)?),
                success: true,
            })
        }
        Command::Wigner => {
            let map = map_for(cfg)?;
            let origin = map.alpha_grid.iter().position(|a| a[0] == 0.0 && a[1] == 0.0);
            let w0 = origin.map(|k| format!("{:.4} ± {:.4}", map.values[k], map.std_errors[k]));
            let s = format!(
                "wigner: {} points, W(0) = {}, max |W − W_analytic| = {:.2e}",
                map.values.len(),
                w0.unwrap_or_else(|| "n/a".into()),
                map.max_reference_deviation()
            );
            Ok(Outcome {
                summary: s,
                csv: Some(with_header(map.metadata.as_ref(), seed, map.to_csv())?),
                json: Some(map.to_json()?),
                success: true,
            })
        }
        Command::Reconstruct => {
            let map = map_for(cfg)?;
            let r = reconstruct_density_matrix(&map, &cfg.tomography)?;
            let s = format!(
                "reconstruct: {} F = {} ± {} (min raw eigenvalue {:.3})",
                e.state.label(),
                fmt_opt(r.fidelity.as_ref(), 4),
                fmt_opt(r.fidelity_std.as_ref(), 4),
                r.raw_min_eigenvalue
            );
            Ok(Outcome {
                summary: s,
                csv: Some(with_header(r.metadata.as_ref(), seed, r.rho.to_csv())?),
                json: Some(r.to_json()?),
                success: true,
            })
        }
        Command::Selftest => {
            let report = run_selftest();
            let s =
                format!("selftest: {}/{} checks passed", report.checks.len() - report.failures(), report.checks.len());
            Ok(Outcome {
                summary: s,
                csv: Some(with_header(None, seed, report.to_csv())?),
                json: Some(report.to_json()?),
                success: report.all_passed(),
            })
        }
    }
}

/// Output directory: `--out`, then `output.dir`, then `$MAGNON_SIM_OUT`, then `out`.
pub fn output_dir(cli_out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Writes the outcome files from the calling thread; returns their paths.
pub fn write_outcome(dir: &Path, command: Command, format: Format, outcome: &Outcome) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |ext: &str, body: &Option<String>| -> Result<()> {
        if let Some(b) = body {
            let path = dir.join(format!("{}.{ext}", command.name()));
            fs::write(&path, b)?;
            written.push(path);
        }
        Ok(())
    };
    if matches!(format, Format::Csv | Format::Both) {
        put("csv", &outcome.csv)?;
    }
    if matches!(format, Format::Json | Format::Both) {
        put("json", &outcome.json)?;
    }
    Ok(written)
}

fn configure_workers(workers: Option<usize>) -> Result<()> {
    let Some(n) = workers else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("--workers: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without the `parallel` feature; --workers {n} ignored");
    Ok(())
}

/// Full command-line run; returns the process exit status.
pub fn run(cli: Cli) -> i32 {
    let result = (|| -> Result<(Outcome, Vec<PathBuf>)> {
        configure_workers(cli.workers)?;
        let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        let format = cli.format.unwrap_or(cfg.output.format);
        let dir = output_dir(cli.out.as_deref(), &cfg);
        let outcome = execute(cli.command, &cfg)?;
        let files = write_outcome(&dir, cli.command, format, &outcome)?;
        Ok((outcome, files))
    })();
    match result {
        Ok((outcome, files)) => {
            println!("{}", outcome.summary);
            for f in files {
                log::info!("wrote {}", f.display());
            }
            if outcome.success {
                0
            } else {
                3
            }
        }
        Err(e) => {
            eprintln!("magnon-sim {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
