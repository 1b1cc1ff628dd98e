//! Scans reproducing the measurements: spectroscopy maps, the Autler-Townes
//! scan, swap curves and Chevron maps with their Fourier analysis, and state
//! preparation. Shot noise is optional and seeded per grid point.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lindblad::{
    apply_assignment, partial_trace, readout_qubit_excited, to_magnon_frame, validate_assignment, AssignmentMatrix,
    DensityMatrix, Engine, EvolveOptions,
};
use crate::model::{at_doublet, single_excitation_frequencies, ControlField, PhysicalParams, GHZ};
use crate::numeric::{golden_min, parabolic_offset, scan_min};
use crate::operators::{Factor, HilbertLayout, C64};
use crate::par;
use crate::schedule::{Channel, Protocol, PulseSegment, SequenceBuilder, StateTarget};
use crate::ARTIFACT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(name: &str, unit: &str, values: Vec<f64>) -> Self {
        Self { name: name.into(), unit: unit.into(), values }
    }

    fn column_name(&self) -> String {
        if self.unit.is_empty() {
            self.name.clone()
        } else {
            format!("{}_{}", self.name, self.unit)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub artifact_version: String,
    pub experiment: String,
    pub params: PhysicalParams,
    pub protocol: Option<Protocol>,
    pub seed: Option<u64>,
    pub shots: Option<u64>,
}

impl Metadata {
    pub fn new(
        experiment: &str,
        params: &PhysicalParams,
        protocol: Option<&Protocol>,
        shots: Option<&ShotModel>,
    ) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.into(),
            experiment: experiment.into(),
            params: params.clone(),
            protocol: protocol.cloned(),
            seed: shots.map(|s| s.seed),
            shots: shots.map(|s| s.shots),
        }
    }
}

/// Values on the product of the axis grids (first axis outermost).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanResult {
    pub quantity: String,
    pub unit: String,
    pub probability: bool,
    pub axes: Vec<Axis>,
    pub data: Vec<f64>,
    pub std_error: Option<Vec<f64>>,
    /// Curves along the first axis.
    pub series: BTreeMap<String, Vec<f64>>,
    /// Scalar results such as fitted couplings and landmark times.
    pub summary: BTreeMap<String, f64>,
    pub metadata: Metadata,
}

impl ScanResult {
    pub fn new(
        quantity: &str,
        unit: &str,
        probability: bool,
        axes: Vec<Axis>,
        data: Vec<f64>,
        metadata: Metadata,
    ) -> Result<Self> {
        let r = Self {
            quantity: quantity.into(),
            unit: unit.into(),
            probability,
            axes,
            data,
            std_error: None,
            series: BTreeMap::new(),
            summary: BTreeMap::new(),
            metadata,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.values.len()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(Error::InvalidDimension(format!("{} axes; expected 1 or 2", self.axes.len())));
        }
        let n: usize = self.shape().iter().product();
        if self.data.len() != n {
            return Err(Error::InvalidDimension(format!("data has {} values for grid size {n}", self.data.len())));
        }
        if let Some(e) = &self.std_error {
            if e.len() != n {
                return Err(Error::InvalidDimension("std_error length differs from data".into()));
            }
        }
        let first = self.axes[0].values.len();
        for (k, v) in &self.series {
            if v.len() != first {
                return Err(Error::InvalidDimension(format!("series {k} has {} values, axis has {first}", v.len())));
            }
        }
        if self.probability && self.data.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidState(format!("{} outside [0, 1]", self.quantity)));
        }
        Ok(())
    }

    /// Row `i` of a 2D scan (all values along the second axis).
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.axes.last().map_or(0, |a| a.values.len());
        if self.axes.len() == 1 {
            &self.data
        } else {
            &self.data[i * m..(i + 1) * m]
        }
    }

    /// One row per grid point: axis values, value, then standard error if present.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = self.axes.iter().map(Axis::column_name).collect();
        header.push(self.quantity.clone());
        if self.std_error.is_some() {
            header.push("std_error".into());
        }
        out.push_str(&header.join(","));
        out.push('\n');
        let shape = self.shape();
        for (k, v) in self.data.iter().enumerate() {
            let mut cols = Vec::with_capacity(4);
            if shape.len() == 2 {
                cols.push(self.axes[0].values[k / shape[1]].to_string());
                cols.push(self.axes[1].values[k % shape[1]].to_string());
            } else {
                cols.push(self.axes[0].values[k].to_string());
            }
            cols.push(v.to_string());
            if let Some(e) = &self.std_error {
                cols.push(e[k].to_string());
            }
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: ScanResult = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}

/// Finite-shot readout model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShotModel {
    pub shots: u64,
    pub seed: u64,
    pub assignment_matrix: AssignmentMatrix,
}

impl Default for ShotModel {
    fn default() -> Self {
        Self { shots: 82_500, seed: 0, assignment_matrix: [[1.0, 0.0], [0.0, 1.0]] }
    }
}

impl ShotModel {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::InvalidParameter { key: "shots", reason: "must be >= 1".into() });
        }
        validate_assignment(&self.assignment_matrix)
    }
}

/// Estimate and standard error of a probability from `shots.shots` binomial
/// draws. `stream` selects an independent random stream (the grid point).
pub fn sample_readout(prob: f64, shots: &ShotModel, stream: u64) -> Result<(f64, f64)> {
    shots.validate()?;
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidParameter { key: "prob", reason: format!("{prob} outside [0, 1]") });
    }
    let p = apply_assignment(prob, &shots.assignment_matrix);
    let mut rng = ChaCha8Rng::seed_from_u64(shots.seed);
    rng.set_stream(stream);
    let k = Binomial::new(shots.shots, p)
        .map_err(|e| Error::InvalidParameter { key: "prob", reason: e.to_string() })?
        .sample(&mut rng);
    let n = shots.shots as f64;
    let est = k as f64 / n;
    Ok((est, (est * (1.0 - est) / n).sqrt()))
}

fn sample_all(values: &[f64], shots: &ShotModel) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut est = Vec::with_capacity(values.len());
    let mut err = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        let (e, s) = sample_readout(v.clamp(0.0, 1.0), shots, i as u64)?;
        est.push(e);
        err.push(s);
    }
    Ok((est, err))
}

fn check_grid(name: &'static str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter { key: name, reason: "grid must be non-empty and finite".into() });
    }
    Ok(())
}

/// Evenly spaced grid including both ends.
pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![start],
        _ => (0..n).map(|k| start + (end - start) * k as f64 / (n - 1) as f64).collect(),
    }
}

// ---------------------------------------------------------------------------
// Spectroscopy

/// A transition line of the synthetic spectroscopy map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralLine {
    pub freq_ghz: f64,
    pub hwhm_ghz: f64,
    /// Weights of the e, f and magnon characters.
    pub character: [f64; 3],
}

const MIN_HWHM_GHZ: f64 = 1e-5;

/// Lines of the single-excitation manifold with linewidths mixed from the
/// e, f and magnon coherence decay rates by eigenvector character.
pub fn spectral_lines(p: &PhysicalParams, field: &ControlField) -> Result<Vec<SpectralLine>> {
    let layout = HilbertLayout::two_body(2)?;
    let lines = single_excitation_frequencies(p, &layout, field)?;
    let (ge, gf, gm) = if p.dissipation {
        let t1 = p.t1_qubit_ns();
        let tphi = p.t_phi_qubit_ns();
        let magnon_phi = p.t_phi_magnon_ns.map_or(0.0, |t| 1.0 / t);
        (1.0 / (2.0 * t1) + 1.0 / tphi, 1.0 / t1 + 4.0 / tphi, 1.0 / (2.0 * p.t1_magnon_ns) + magnon_phi)
    } else {
        (0.0, 0.0, 0.0)
    };
    let (ie, i_f, im) = (layout.index(1, 0, 0), layout.index(2, 0, 0), layout.index(0, 1, 0));
    Ok(lines
        .into_iter()
        .map(|(f, v)| {
            let c = [v[ie].norm_sqr(), v[i_f].norm_sqr(), v[im].norm_sqr()];
            let rate = c[0] * ge + c[1] * gf + c[2] * gm;
            SpectralLine { freq_ghz: f, hwhm_ghz: (rate / GHZ).max(MIN_HWHM_GHZ), character: c }
        })
        .collect())
}

/// Sum of unit-height Lorentzians.
pub fn lorentzian_sum(lines: &[SpectralLine], probe_ghz: f64) -> f64 {
    lines.iter().map(|l| 1.0 / (1.0 + ((probe_ghz - l.freq_ghz) / l.hwhm_ghz).powi(2))).sum()
}

/// Local maxima of a sampled curve above `min_fraction` of the global
/// maximum, refined by parabolic interpolation.
pub fn find_peaks(xs: &[f64], ys: &[f64], min_fraction: f64) -> Vec<f64> {
    let top = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for k in 1..ys.len().saturating_sub(1) {
        if ys[k] > ys[k - 1] && ys[k] >= ys[k + 1] && ys[k] >= min_fraction * top {
            let off = parabolic_offset(ys[k - 1], ys[k], ys[k + 1]);
            out.push(xs[k] + off * (xs[k + 1] - xs[k - 1]) / 2.0);
        }
    }
    out
}

/// Spectroscopy map versus coil current (avoided crossing of qubit and magnon).
pub fn run_avoided_crossing(p: &PhysicalParams, coil_grid_ma: &[f64], probe_grid_ghz: &[f64]) -> Result<ScanResult> {
    check_grid("coil_grid", coil_grid_ma)?;
    check_grid("probe_grid", probe_grid_ghz)?;
    p.validate()?;
    let field = ControlField::off(p);
    let column = |current: f64| -> Result<(Vec<f64>, Vec<SpectralLine>)> {
        let q = PhysicalParams { magnon_idle_freq_ghz: p.coil_map.magnon_freq_ghz(current), ..p.clone() };
        let lines = spectral_lines(&q, &field)?;
        Ok((probe_grid_ghz.iter().map(|&f| lorentzian_sum(&lines, f)).collect(), lines))
    };
    let cols = par::map(coil_grid_ma, |_, &i| column(i)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(coil_grid_ma.len() * probe_grid_ghz.len());
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let mut magnon = Vec::new();
    for (col, lines) in &cols {
        data.extend_from_slice(col);
        lower.push(lines[0].freq_ghz);
        upper.push(lines[1].freq_ghz);
    }
    for &i in coil_grid_ma {
        magnon.push(p.coil_map.magnon_freq_ghz(i));
    }
    let mut r = ScanResult::new(
        "spectral_density",
        "",
        false,
        vec![
            Axis::new("coil_current", "ma", coil_grid_ma.to_vec()),
            Axis::new("probe", "ghz", probe_grid_ghz.to_vec()),
        ],
        data,
        Metadata::new("anticross", p, None, None),
    )?;
    r.series.insert("lower_branch_ghz".into(), lower);
    r.series.insert("upper_branch_ghz".into(), upper);
    r.series.insert("bare_magnon_ghz".into(), magnon);

    // splitting read off the map at the resonant current
    let resonant = p.coil_map.current_for(p.qubit_freq_ghz);
    let (col, lines) = column(resonant)?;
    let peaks = find_peaks(probe_grid_ghz, &col, 0.25);
    r.summary.insert("resonant_current_ma".into(), resonant);
    r.summary.insert("eigen_splitting_mhz".into(), (lines[1].freq_ghz - lines[0].freq_ghz) * 1e3);
    if let Some(split) = splitting_around(&peaks, p.qubit_freq_ghz) {
        r.summary.insert("splitting_mhz".into(), split * 1e3);
    }
    Ok(r)
}

/// Distance between the nearest peaks below and above `center`.
fn splitting_around(peaks: &[f64], center: f64) -> Option<f64> {
    let below = peaks.iter().copied().filter(|&x| x <= center).fold(f64::NEG_INFINITY, f64::max);
    let above = peaks.iter().copied().filter(|&x| x > center).fold(f64::INFINITY, f64::min);
    (below.is_finite() && above.is_finite()).then_some(above - below)
}

/// Branch frequencies (GHz, ascending) of the isolated qutrit e/f block under
/// the control field, from a direct eigendecomposition.
pub fn ef_block_branches(p: &PhysicalParams, omega_d_mhz: f64) -> (f64, f64) {
    let mut h = DMatrix::<f64>::zeros(2, 2);
    h[(0, 1)] = omega_d_mhz / 2.0;
    h[(1, 0)] = omega_d_mhz / 2.0;
    h[(1, 1)] = p.at_drive_detuning_mhz;
    let ev = SymmetricEigen::new(h).eigenvalues;
    let (lo, hi) = (ev[0].min(ev[1]), ev[0].max(ev[1]));
    (p.qubit_freq_ghz + lo * 1e-3, p.qubit_freq_ghz + hi * 1e-3)
}

/// Spectroscopy map versus AT drive amplitude, including the magnon line.
pub fn run_at_scan(p: &PhysicalParams, amp_grid_mhz: &[f64], probe_grid_ghz: &[f64]) -> Result<ScanResult> {
    check_grid("amp_grid", amp_grid_mhz)?;
    check_grid("probe_grid", probe_grid_ghz)?;
    p.validate()?;
    if amp_grid_mhz.iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidParameter { key: "amp_grid", reason: "amplitudes must be >= 0".into() });
    }
    let cols = par::map(amp_grid_mhz, |_, &a| -> Result<Vec<f64>> {
        let field = ControlField { amplitude_mhz: a, phase_rad: 0.0, detuning_d_mhz: p.at_drive_detuning_mhz };
        let lines = spectral_lines(p, &field)?;
        Ok(probe_grid_ghz.iter().map(|&f| lorentzian_sum(&lines, f)).collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut r = ScanResult::new(
        "spectral_density",
        "",
        false,
        vec![
            Axis::new("at_amplitude", "mhz", amp_grid_mhz.to_vec()),
            Axis::new("probe", "ghz", probe_grid_ghz.to_vec()),
        ],
        cols.concat(),
        Metadata::new("at-scan", p, None, None),
    )?;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    let mut sep = Vec::new();
    let mut eig_sep = Vec::new();
    for &a in amp_grid_mhz {
        if a == 0.0 && p.at_drive_detuning_mhz == 0.0 {
            // degenerate point: both branches sit on the bare line
            plus.push(p.qubit_freq_ghz);
            minus.push(p.qubit_freq_ghz);
            sep.push(0.0);
        } else {
            let d = at_doublet(a, p.at_drive_detuning_mhz, p)?;
            plus.push(d.omega_plus_ghz);
            minus.push(d.omega_minus_ghz);
            sep.push((d.omega_plus_ghz - d.omega_minus_ghz) * 1e3);
        }
        let (lo, hi) = ef_block_branches(p, a);
        eig_sep.push((hi - lo) * 1e3);
    }
    r.series.insert("branch_plus_ghz".into(), plus);
    r.series.insert("branch_minus_ghz".into(), minus);
    r.series.insert("separation_mhz".into(), sep);
    r.series.insert("eigen_separation_mhz".into(), eig_sep);
    r.summary.insert("magnon_ghz".into(), p.magnon_idle_freq_ghz);
    Ok(r)
}

/// Qubit excitation in the steady state under a weak continuous probe: the
/// slow full-dynamics counterpart of the eigenvalue spectroscopy.
pub fn probe_response(p: &PhysicalParams, field: &ControlField, probe_ghz: f64, probe_amp_mhz: f64) -> Result<f64> {
    let layout = HilbertLayout::two_body(2)?;
    let engine = Engine::new(p, &layout, EvolveOptions::default())?;
    let mut segs =
        vec![PulseSegment::new(Channel::QubitXy, 0.0, 1.0, probe_amp_mhz)
            .with_carrier((probe_ghz - p.qubit_freq_ghz) * 1e3)];
    if field.amplitude_mhz > 0.0 {
        segs.push(
            PulseSegment::new(Channel::AtControl, 0.0, 1.0, field.amplitude_mhz)
                .with_phase(field.phase_rad)
                .with_carrier(-field.detuning_d_mhz),
        );
    }
    readout_qubit_excited(&engine.steady_state(&segs)?)
}

/// Peak of [`probe_response`] within ±`half_width_mhz` of `guess_ghz`.
pub fn probe_peak(p: &PhysicalParams, field: &ControlField, guess_ghz: f64, half_width_mhz: f64) -> Result<f64> {
    let (f, _) = scan_min(
        |f| probe_response(p, field, f, 0.005).map(|v| -v),
        guess_ghz - half_width_mhz * 1e-3,
        guess_ghz + half_width_mhz * 1e-3,
        20,
        1e-8,
    )?;
    Ok(f)
}

// ---------------------------------------------------------------------------
// Swap dynamics

/// Smallest layout that holds the dynamics started from the ground state.
pub fn dynamics_layout(p: &PhysicalParams) -> Result<HilbertLayout> {
    let thermal = p.dissipation && (p.thermal_magnon_nbar > 0.0 || p.thermal_qubit_nbar > 0.0);
    HilbertLayout::two_body(if thermal { 6 } else { 2 })
}

fn check_taus(tau_grid: &[f64]) -> Result<()> {
    check_grid("tau_grid", tau_grid)?;
    if tau_grid.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidParameter { key: "tau_grid", reason: "times must be >= 0".into() });
    }
    Ok(())
}

/// P₊ after the π pulse and `τ` ns at the swap point detuned by `det` MHz,
/// for every τ of the grid. `after_pi` is the state at the end of the π pulse.
fn swap_column(
    b: &SequenceBuilder,
    engine: &Engine,
    after_pi: &DensityMatrix,
    tau_grid: &[f64],
    det: f64,
) -> Result<Vec<f64>> {
    let t_pi = b.pi.duration_ns;
    if b.protocol.at_ramp_ns > 0.0 {
        // the ramp shape depends on τ, so every point is its own schedule
        return tau_grid
            .iter()
            .map(|&tau| {
                let s = b.seq_swap(tau, det)?;
                let tr = engine.evolve_between(&s, t_pi, after_pi, &[s.readout_at_ns])?;
                readout_qubit_excited(&tr.states[0])
            })
            .collect();
    }
    let tmax = tau_grid.iter().copied().fold(0.0, f64::max);
    let sched = b.seq_swap(tmax, det)?;
    let times: Vec<f64> = tau_grid.iter().map(|t| t_pi + t).collect();
    let tr = engine.evolve_between(&sched, t_pi, after_pi, &times)?;
    tr.states.iter().map(readout_qubit_excited).collect()
}

fn state_after_pi(b: &SequenceBuilder, engine: &Engine) -> Result<DensityMatrix> {
    let s = b.seq_swap(0.0, 0.0)?;
    let rho0 = DensityMatrix::ground(&engine.layout());
    Ok(engine.evolve_between(&s, 0.0, &rho0, &[b.pi.duration_ns])?.states.remove(0))
}

/// Noiseless swap curve P₊(τ) at the given magnon detuning.
pub fn swap_curve(b: &SequenceBuilder, tau_grid: &[f64], magnon_detuning_mhz: f64) -> Result<Vec<f64>> {
    check_taus(tau_grid)?;
    let engine = Engine::new(&b.params, &dynamics_layout(&b.params)?, EvolveOptions::default())?;
    let after_pi = state_after_pi(b, &engine)?;
    swap_column(b, &engine, &after_pi, tau_grid, magnon_detuning_mhz)
}

/// First pronounced local minimum of a sampled curve (below the midpoint of
/// its starting value and global minimum), refined parabolically.
pub fn first_minimum(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 3 || xs.len() != ys.len() {
        return None;
    }
    let lowest = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let threshold = 0.5 * (ys[0] + lowest);
    (1..ys.len() - 1).find(|&k| ys[k] < ys[k - 1] && ys[k] <= ys[k + 1] && ys[k] < threshold).map(|k| {
        let off = parabolic_offset(ys[k - 1], ys[k], ys[k + 1]);
        xs[k] + off * (xs[k + 1] - xs[k - 1]) / 2.0
    })
}

/// Resonant swap curve with the full-swap time in the summary.
pub fn run_swap(b: &SequenceBuilder, tau_grid: &[f64], shots: Option<&ShotModel>) -> Result<ScanResult> {
    let clean = swap_curve(b, tau_grid, 0.0)?;
    let mut r = ScanResult::new(
        "p_plus",
        "",
        true,
        vec![Axis::new("tau", "ns", tau_grid.to_vec())],
        clean.clone(),
        Metadata::new("swap", &b.params, Some(&b.protocol), shots),
    )?;
    if let Some(s) = shots {
        let (est, err) = sample_all(&clean, s)?;
        r.data = est;
        r.std_error = Some(err);
    }
    if let Some(t) = first_minimum(tau_grid, &clean) {
        r.summary.insert("first_minimum_ns".into(), t);
        let k = tau_grid.iter().enumerate().min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs())).map(|x| x.0);
        if let Some(k) = k {
            r.summary.insert("p_plus_at_minimum".into(), clean[k]);
        }
    }
    r.summary.insert("pi_pulse_infidelity".into(), b.pi.infidelity);
    r.summary.insert("pi_amplitude_mhz".into(), b.pi.amplitude_mhz);
    r.summary.insert("swap_amplitude_mhz".into(), b.swap_amp_mhz);
    Ok(r)
}

/// P₊(Δ, τ) map; rows are magnon detunings.
pub fn run_chevron(
    b: &SequenceBuilder,
    tau_grid: &[f64],
    detuning_grid_mhz: &[f64],
    shots: Option<&ShotModel>,
) -> Result<ScanResult> {
    check_taus(tau_grid)?;
    check_grid("detuning_grid", detuning_grid_mhz)?;
    let engine = Engine::new(&b.params, &dynamics_layout(&b.params)?, EvolveOptions::default())?;
    let after_pi = state_after_pi(b, &engine)?;
    let rows = par::map(detuning_grid_mhz, |_, &d| swap_column(b, &engine, &after_pi, tau_grid, d))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let clean = rows.concat();
    let mut r = ScanResult::new(
        "p_plus",
        "",
        true,
        vec![Axis::new("detuning", "mhz", detuning_grid_mhz.to_vec()), Axis::new("tau", "ns", tau_grid.to_vec())],
        clean.clone(),
        Metadata::new("chevron", &b.params, Some(&b.protocol), shots),
    )?;
    if let Some(s) = shots {
        let (est, err) = sample_all(&clean, s)?;
        r.data = est;
        r.std_error = Some(err);
    }
    let contrast: Vec<f64> = rows
        .iter()
        .map(|row| {
            row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - row.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .collect();
    r.series.insert("contrast".into(), contrast);
    Ok(r)
}

// ---------------------------------------------------------------------------
// Fourier analysis

fn uniform_step(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let dt = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let ok = dt > 0.0 && xs.windows(2).all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.max(1.0));
    ok.then_some(dt)
}

/// Hann-windowed DFT magnitude of the mean-removed signal at `freqs_mhz`.
pub fn dft_magnitude(taus_ns: &[f64], ys: &[f64], freqs_mhz: &[f64]) -> Vec<f64> {
    let n = ys.len();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let w: Vec<f64> =
        (0..n).map(|k| if n > 1 { 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos() } else { 1.0 }).collect();
    let norm: f64 = w.iter().sum();
    freqs_mhz
        .iter()
        .map(|&f| {
            let mut acc = C64::new(0.0, 0.0);
            for k in 0..n {
                acc += C64::from_polar(w[k] * (ys[k] - mean), -2.0 * PI * f * 1e-3 * taus_ns[k]);
            }
            2.0 * acc.norm() / norm
        })
        .collect()
}

/// Residual of y ≈ c₀ + e^{−γt}(c₁ + c₂ cos ωt + c₃ sin ωt), linear in c.
fn damped_fit_residual(taus: &[f64], ys: &[f64], f_mhz: f64, gamma: f64) -> f64 {
    let w = 2.0 * PI * f_mhz * 1e-3;
    let a = DMatrix::from_fn(ys.len(), 4, |k, j| {
        let t = taus[k] - taus[0];
        let e = (-gamma * t).exp();
        match j {
            0 => 1.0,
            1 => e,
            2 => e * (w * t).cos(),
            _ => e * (w * t).sin(),
        }
    });
    let y = DVector::from_column_slice(ys);
    match a.clone().svd(true, true).solve(&y, 1e-12) {
        Ok(c) => (a * c - y).norm_squared(),
        Err(_) => f64::INFINITY,
    }
}

/// Oscillation frequency of a damped row: DFT peak, refined by a damped
/// sinusoid least-squares fit. Returns (refined, raw DFT peak), MHz.
pub fn row_frequency(taus: &[f64], ys: &[f64], freqs: &[f64], spectrum: &[f64], f_min: f64) -> Result<(f64, f64)> {
    let (k, _) = spectrum
        .iter()
        .enumerate()
        .filter(|(i, _)| freqs[*i] >= f_min)
        .max_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Resolution("empty frequency range".into()))?;
    let raw = if k > 0 && k + 1 < spectrum.len() {
        freqs[k] + parabolic_offset(-spectrum[k - 1], -spectrum[k], -spectrum[k + 1]) * (freqs[k + 1] - freqs[k])
    } else {
        freqs[k]
    };
    let bin = 1e3 / (taus[taus.len() - 1] - taus[0]);
    let best_gamma = |f: f64| -> Result<f64> {
        Ok(scan_min(|g| Ok::<f64, Error>(damped_fit_residual(taus, ys, f, g)), 0.0, 0.05, 12, 1e-6)?.1)
    };
    let (refined, _) = golden_min(best_gamma, (raw - bin).max(0.25 * f_min), raw + bin, 1e-6)?;
    Ok((refined, raw))
}

/// Least-squares fit of peak(Δ) = √(4g² + Δ²). Returns (g, standard error).
pub fn fit_exchange_coupling(detunings: &[f64], peaks: &[f64]) -> Result<(f64, f64)> {
    if detunings.len() != peaks.len() || peaks.is_empty() {
        return Err(Error::InvalidParameter { key: "peaks", reason: "need matching, non-empty inputs".into() });
    }
    let sse =
        |g: f64| -> f64 { detunings.iter().zip(peaks).map(|(d, f)| (f - (4.0 * g * g + d * d).sqrt()).powi(2)).sum() };
    let top = peaks.iter().copied().fold(0.0, f64::max);
    let (g, s) = scan_min(|g| Ok::<f64, Error>(sse(g)), 0.0, top.max(1e-6), 400, 1e-9)?;
    let m = peaks.len();
    let jac: f64 = detunings.iter().map(|d| (4.0 * g / (4.0 * g * g + d * d).sqrt()).powi(2)).sum();
    let se = if m > 1 && jac > 0.0 { (s / (m - 1) as f64 / jac).sqrt() } else { 0.0 };
    Ok((g, se))
}

/// Per-detuning spectra of a Chevron map, their peak frequencies, and the
/// fitted exchange coupling.
pub fn fourier_analysis(chevron: &ScanResult) -> Result<ScanResult> {
    chevron.validate()?;
    if chevron.axes.len() != 2 {
        return Err(Error::InvalidDimension("expected a 2D (detuning, tau) map".into()));
    }
    let dets = &chevron.axes[0].values;
    let taus = &chevron.axes[1].values;
    let dt = uniform_step(taus).ok_or_else(|| Error::Resolution("tau grid must be uniform with >= 2 points".into()))?;
    let span = taus[taus.len() - 1] - taus[0];
    let g_guess = chevron.metadata.params.effective_coupling().unwrap_or(0.0);
    if taus.len() < 8 || (g_guess > 0.0 && span * 1e-3 * 2.0 * g_guess < 1.0) {
        return Err(Error::Resolution(format!(
            "a {span} ns window with {} points cannot resolve 2g = {:.2} MHz; lengthen the tau grid",
            taus.len(),
            2.0 * g_guess
        )));
    }
    let nyquist = 1e3 / (2.0 * dt);
    let df = 0.1;
    let freqs: Vec<f64> = (0..=((nyquist / df).floor() as usize)).map(|k| k as f64 * df).collect();
    let f_min = 1e3 / span;
    let rows = par::map(dets, |i, _| -> Result<(Vec<f64>, f64, f64)> {
        let ys = chevron.row(i);
        let spec = dft_magnitude(taus, ys, &freqs);
        let (refined, raw) = row_frequency(taus, ys, &freqs, &spec, f_min)?;
        Ok((spec, refined, raw))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let peaks: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let raw: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let (g, se) = fit_exchange_coupling(dets, &peaks)?;
    let mut meta = chevron.metadata.clone();
    meta.experiment = "fourier".into();
    let mut r = ScanResult::new(
        "fourier_magnitude",
        "",
        false,
        vec![Axis::new("detuning", "mhz", dets.clone()), Axis::new("frequency", "mhz", freqs)],
        rows.into_iter().flat_map(|r| r.0).collect(),
        meta,
    )?;
    let model: Vec<f64> = dets.iter().map(|d| (4.0 * g * g + d * d).sqrt()).collect();
    let res = dets.iter().enumerate().min_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|x| x.0).unwrap_or(0);
    r.summary.insert("fitted_g_mhz".into(), g);
    r.summary.insert("fitted_g_stderr_mhz".into(), se);
    r.summary.insert("resonant_peak_mhz".into(), peaks[res]);
    r.summary.insert("frequency_resolution_mhz".into(), f_min);
    r.series.insert("peak_mhz".into(), peaks);
    r.series.insert("dft_peak_mhz".into(), raw);
    r.series.insert("model_mhz".into(), model);
    Ok(r)
}

// ---------------------------------------------------------------------------
// State preparation

/// Layout for state preparation from the ground state.
pub fn prep_layout(p: &PhysicalParams) -> Result<HilbertLayout> {
    let thermal = p.dissipation && (p.thermal_magnon_nbar > 0.0 || p.thermal_qubit_nbar > 0.0);
    HilbertLayout::two_body(if thermal { 6 } else { 3 })
}

/// Full system state at the end of the preparation sequence and that time.
pub fn prepare_system_state(
    b: &SequenceBuilder,
    target: StateTarget,
    options: EvolveOptions,
) -> Result<(DensityMatrix, f64)> {
    let layout = prep_layout(&b.params)?;
    let sched = b.seq_state_prep(target)?;
    let engine = Engine::new(&b.params, &layout, options)?;
    let t = sched.readout_at_ns;
    let tr = engine.evolve_between(&sched, 0.0, &DensityMatrix::ground(&layout), &[t])?;
    Ok((tr.states.into_iter().next().expect("one sample requested"), t))
}

/// Reduced magnon state after preparation, in the magnon frame.
pub fn prepare_magnon_state(b: &SequenceBuilder, target: StateTarget) -> Result<DensityMatrix> {
    prepare_magnon_state_with(b, target, EvolveOptions::default())
}

pub fn prepare_magnon_state_with(
    b: &SequenceBuilder,
    target: StateTarget,
    options: EvolveOptions,
) -> Result<DensityMatrix> {
    let (rho, t) = prepare_system_state(b, target, options)?;
    to_magnon_frame(&partial_trace(&rho, &[Factor::Magnon])?, &b.params, t)
}

/// Calibrates the superposition rotation (gain on |c| and phase offset) so that
/// c = 1 prepares the closest state to (|0⟩+|1⟩)/√2: real positive ρ₀₁ and
/// maximal overlap. Values already fixed in the protocol are kept.
pub fn calibrate_superposition(b: &SequenceBuilder) -> Result<SequenceBuilder> {
    let mut out = b.clone();
    let target = StateTarget::superposition(C64::new(1.0, 0.0));
    let measure = |gain: f64, offset: f64| -> Result<(f64, C64)> {
        let mut trial = b.clone();
        trial.superposition_gain = gain;
        trial.superposition_phase_offset_rad = offset;
        let m = prepare_magnon_state(&trial, target)?;
        let rho = m.matrix();
        let overlap = 0.5 * (rho[(0, 0)].re + rho[(1, 1)].re) + rho[(0, 1)].re;
        Ok((overlap, rho[(0, 1)]))
    };
    let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
    if b.protocol.superposition_phase_offset_rad.is_none() {
        let probe = 0.5;
        let (_, r0) = measure(out.superposition_gain, 0.0)?;
        let (_, r1) = measure(out.superposition_gain, probe)?;
        let slope = wrap(r1.arg() - r0.arg()) / probe;
        if slope.abs() < 0.1 {
            return Err(Error::Calibration("superposition phase does not respond to the rotation phase".into()));
        }
        let mut offset = wrap(-r0.arg() / slope);
        for _ in 0..2 {
            let (_, r) = measure(out.superposition_gain, offset)?;
            offset = wrap(offset - r.arg() / slope);
        }
        out.superposition_phase_offset_rad = offset;
    }
    if b.protocol.superposition_gain.is_none() {
        let offset = out.superposition_phase_offset_rad;
        let (gain, _) = golden_min(|g| measure(g, offset).map(|v| -v.0), 0.3, 3.0, 1e-5)?;
        out.superposition_gain = gain;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::ONE;
    use crate::schedule::Protocol;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn builder() -> SequenceBuilder {
        static B: std::sync::OnceLock<SequenceBuilder> = std::sync::OnceLock::new();
        B.get_or_init(|| SequenceBuilder::new(&PhysicalParams::default(), &Protocol::default()).unwrap()).clone()
    }

    fn meta() -> Metadata {
        Metadata::new("test", &PhysicalParams::default(), None, None)
    }

    #[test]
    fn resonant_anticrossing_splitting() {
        let p = PhysicalParams::default();
        let coil = linspace(-6.0, -3.0, 7);
        let probe = linspace(5.82, 5.87, 501);
        let r = run_avoided_crossing(&p, &coil, &probe).unwrap();
        assert_abs_diff_eq!(r.summary["splitting_mhz"], 11.10, epsilon = 0.02);
        assert_abs_diff_eq!(r.summary["eigen_splitting_mhz"], 11.10, epsilon = 1e-9);
        assert_abs_diff_eq!(r.summary["resonant_current_ma"], -4.5, epsilon = 1e-9);
    }

    #[test]
    fn far_detuned_single_qubit_peak() {
        let p = PhysicalParams::default();
        let probe = linspace(5.83, 5.86, 3001);
        let r = run_avoided_crossing(&p, &[-20.0], &probe).unwrap();
        let peaks = find_peaks(&probe, r.row(0), 0.25);
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0] - p.qubit_freq_ghz).abs() * 1e3 < 0.1);
    }

    #[test]
    fn detuned_eigen_splitting() {
        let p = PhysicalParams { magnon_idle_freq_ghz: 5.846 + 0.0111, ..PhysicalParams::default() };
        let l = spectral_lines(&p, &ControlField::off(&p)).unwrap();
        let expect = (4.0f64 * 5.55 * 5.55 + 11.1 * 11.1).sqrt();
        assert_abs_diff_eq!((l[1].freq_ghz - l[0].freq_ghz) * 1e3, expect, epsilon = 1e-9);
        assert_abs_diff_eq!(expect, 15.70, epsilon = 0.01);
    }

    #[test]
    fn at_scan_branches() {
        let p = PhysicalParams::default();
        let amps = vec![0.0, 20.0, 44.9, 131.0, 161.0];
        let probe = linspace(5.75, 5.95, 201);
        let r = run_at_scan(&p, &amps, &probe).unwrap();
        for (k, &a) in amps.iter().enumerate() {
            let expect = (9.0f64 + a * a).sqrt();
            assert!((r.series["separation_mhz"][k] - expect).abs() <= 1e-6);
            assert!((r.series["eigen_separation_mhz"][k] - expect).abs() <= 1e-9);
        }
        assert_abs_diff_eq!(r.series["separation_mhz"][3], 131.03, epsilon = 0.01);
        // with the drive off a single line sits near ωq
        let fine = linspace(5.836, 5.856, 2001);
        let off = run_at_scan(&p, &[0.0], &fine).unwrap();
        let peaks = find_peaks(&fine, off.row(0), 0.25);
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0] - p.qubit_freq_ghz).abs() * 1e3 < 0.5);
    }

    #[test]
    fn weak_probe_agrees_with_eigenvalues() {
        let p = PhysicalParams::default();
        for current in [-4.5, -4.3, -4.8, -3.5, -5.5] {
            let q = PhysicalParams { magnon_idle_freq_ghz: p.coil_map.magnon_freq_ghz(current), ..p.clone() };
            let lines = spectral_lines(&q, &ControlField::off(&q)).unwrap();
            // the most qubit-like line
            let l = lines.iter().max_by(|a, b| a.character[0].total_cmp(&b.character[0])).unwrap();
            let f = probe_peak(&q, &ControlField::off(&q), l.freq_ghz, 1.0).unwrap();
            assert!((f - l.freq_ghz).abs() * 1e3 <= 0.2, "current {current}: {f} vs {}", l.freq_ghz);
        }
    }

    #[test]
    fn shot_sampling() {
        let s = ShotModel::default();
        assert_eq!(sample_readout(0.0, &s, 3).unwrap(), (0.0, 0.0));
        let (est, err) = sample_readout(0.5, &s, 7).unwrap();
        assert!((est - 0.5).abs() < 0.01);
        assert_abs_diff_eq!(err, 0.5 / (82_500f64).sqrt(), epsilon = 2e-5);
        assert_abs_diff_eq!(0.5 / (82_500f64).sqrt(), 0.0017, epsilon = 1e-4);
        assert_eq!(sample_readout(0.3, &s, 11).unwrap(), sample_readout(0.3, &s, 11).unwrap());
        assert_ne!(sample_readout(0.3, &s, 11).unwrap(), sample_readout(0.3, &s, 12).unwrap());
        let bad = ShotModel { assignment_matrix: [[0.9, 0.0], [0.2, 1.0]], ..s };
        assert!(sample_readout(0.3, &bad, 0).is_err());
        assert!(sample_readout(1.3, &s, 0).is_err());
    }

    #[test]
    fn shot_noise_converges() {
        let s = ShotModel { shots: 1_000_000, seed: 5, ..ShotModel::default() };
        let values = linspace(0.0, 1.0, 41);
        let (est, _) = sample_all(&values, &s).unwrap();
        let dev = values.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 5.0 / 1e3);
    }

    #[test]
    fn resonant_swap_time() {
        let b = builder();
        let taus = linspace(0.0, 100.0, 101);
        let r = run_swap(&b, &taus, None).unwrap();
        let t = r.summary["first_minimum_ns"];
        // damped exchange: the zero of the qubit amplitude is delayed by
        // atan(κ/4Ω')/Ω' with Ω' = √(g² − κ²/16)
        let g = 2.0 * PI * 5.55e-3;
        let kappa = 1.0 / b.params.t1_magnon_ns;
        let w = (g * g - kappa * kappa / 16.0).sqrt();
        let damped = (PI / 2.0 + (kappa / (4.0 * w)).atan()) / w;
        assert!((t - damped).abs() <= 0.5, "first minimum at {t}, damped closed form {damped}");
        let free = SequenceBuilder { params: b.params.decoherence_free(), ..b.clone() };
        let t0 = run_swap(&free, &taus, None).unwrap().summary["first_minimum_ns"];
        assert!((t0 - 45.05).abs() <= 0.5, "decoherence-free minimum at {t0}");
        // finite lifetimes leave a floor above zero
        assert!(r.summary["p_plus_at_minimum"] > 0.0);
    }

    #[test]
    fn chevron_properties() {
        let b = builder();
        let taus = linspace(0.0, 200.0, 101);
        let dets = vec![-11.1, -5.0, 0.0, 5.0, 11.1];
        let c = run_chevron(&b, &taus, &dets, None).unwrap();
        let contrast = &c.series["contrast"];
        assert!(contrast[2] > contrast[3] && contrast[3] > contrast[4]);
        let f = fourier_analysis(&c).unwrap();
        let peaks = &f.series["peak_mhz"];
        assert!((peaks[2] - 11.1).abs() <= 0.5, "resonant peak {}", peaks[2]);
        assert!((peaks[4] - 15.70).abs() <= 0.5, "detuned peak {}", peaks[4]);
    }

    #[test]
    fn fourier_of_pure_cosine() {
        let taus = linspace(0.0, 200.0, 101);
        let ys: Vec<f64> = taus.iter().map(|t| 0.5 + 0.5 * (2.0 * PI * 10.0e-3 * t).cos()).collect();
        let freqs: Vec<f64> = (0..=2500).map(|k| k as f64 * 0.1).collect();
        let spec = dft_magnitude(&taus, &ys, &freqs);
        let (refined, raw) = row_frequency(&taus, &ys, &freqs, &spec, 5.0).unwrap();
        assert!((raw - 10.0).abs() <= 5.0);
        assert_abs_diff_eq!(refined, 10.0, epsilon = 1e-3);
    }

    #[test]
    fn fourier_rejects_short_window() {
        let taus = linspace(0.0, 30.0, 16);
        let data = vec![0.5; 16];
        let c = ScanResult::new(
            "p_plus",
            "",
            true,
            vec![Axis::new("detuning", "mhz", vec![0.0]), Axis::new("tau", "ns", taus)],
            data,
            meta(),
        )
        .unwrap();
        assert!(matches!(fourier_analysis(&c), Err(Error::Resolution(_))));
    }

    #[test]
    fn coupling_fit_recovers_synthetic_g() {
        let dets = linspace(-15.0, 15.0, 31);
        let peaks: Vec<f64> = dets.iter().map(|d| (4.0 * 5.55f64.powi(2) + d * d).sqrt()).collect();
        let (g, se) = fit_exchange_coupling(&dets, &peaks).unwrap();
        assert_abs_diff_eq!(g, 5.55, epsilon = 1e-6);
        assert!(se < 1e-6);
    }

    #[test]
    fn prepared_states() {
        let b = builder();
        let free = SequenceBuilder { params: b.params.decoherence_free(), ..b.clone() };
        let vac = prepare_magnon_state(&free, StateTarget::Vacuum).unwrap();
        assert!(vac.matrix()[(1, 1)].re.abs() < 1e-12);
        let ideal = EvolveOptions { ideal_qubit_rotations: true, ..EvolveOptions::default() };
        let one = prepare_magnon_state_with(&free, StateTarget::SingleMagnon, ideal).unwrap();
        assert!(one.matrix()[(1, 1)].re.sqrt() >= 0.999);
        let lossy = prepare_magnon_state(&b, StateTarget::SingleMagnon).unwrap();
        let f = lossy.matrix()[(1, 1)].re.sqrt();
        assert!((0.78..=0.92).contains(&f), "fidelity {f}");
        lossy.validate().unwrap();
    }

    #[test]
    fn superposition_calibration() {
        let b = calibrate_superposition(&builder()).unwrap();
        let m = prepare_magnon_state(&b, StateTarget::superposition(ONE)).unwrap();
        let r01 = m.matrix()[(0, 1)];
        assert!(r01.arg().abs() < 1e-3, "phase {}", r01.arg());
        assert!(r01.re > 0.3);
    }

    #[test]
    fn scan_result_round_trip_and_csv() {
        let mut r = ScanResult::new(
            "p_plus",
            "",
            true,
            vec![Axis::new("detuning", "mhz", vec![-1.0, 1.0]), Axis::new("tau", "ns", vec![0.0, 2.0, 4.0])],
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            meta(),
        )
        .unwrap();
        r.std_error = Some(vec![0.01; 6]);
        r.summary.insert("x".into(), 1.0 / 3.0);
        let back = ScanResult::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "detuning_mhz,tau_ns,p_plus,std_error");
        assert_eq!(lines[4], "1,0,0.4,0.01");
        assert!(ScanResult::new("p", "", true, vec![Axis::new("a", "", vec![0.0])], vec![1.5], meta()).is_err());
        assert!(ScanResult::new("p", "", true, vec![Axis::new("a", "", vec![0.0])], vec![0.5, 0.5], meta()).is_err());
    }

    /// Exchange from the bare |+, 0⟩ depends on the detuning only through Δ².
    fn bare_start_row(b: &SequenceBuilder, det: f64, n: usize) -> Vec<f64> {
        use crate::lindblad::SectorPropagator;
        let p = &b.params;
        let layout = dynamics_layout(p).unwrap();
        let field = ControlField {
            amplitude_mhz: b.swap_amplitude(det).unwrap(),
            phase_rad: 0.0,
            detuning_d_mhz: p.at_drive_detuning_mhz,
        };
        let q = field.coupled_state(crate::model::ExchangeModel::DressedQubit);
        let mut psi = vec![C64::new(0.0, 0.0); layout.dim()];
        psi[layout.index(1, 0, 0)] = q[1];
        psi[layout.index(2, 0, 0)] = q[2];
        let rho = DensityMatrix::pure(layout.factors(), &psi).unwrap();
        let prop = SectorPropagator::new(p, &layout, &field, 2.0).unwrap();
        prop.excited_curve(&prop.project(&rho).unwrap(), n)
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]
        #[test]
        fn sampled_estimates_are_probabilities(prob in 0.0f64..=1.0, seed in any::<u64>(), shots in 1u64..10_000) {
            let s = ShotModel { shots, seed, ..ShotModel::default() };
            let (e, err) = sample_readout(prob, &s, 0).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(err >= 0.0);
        }

        #[test]
        fn bare_exchange_symmetric_in_detuning(det in 0.5f64..15.0) {
            let b = builder();
            let free = SequenceBuilder { params: b.params.decoherence_free(), ..b.clone() };
            // qubit dephasing mixes |+⟩ with the uncoupled |−⟩, a small non-two-body effect
            for (bb, tol) in [(&free, 1e-9), (&b, 1e-4)] {
                let plus = bare_start_row(bb, det, 60);
                let minus = bare_start_row(bb, -det, 60);
                for (x, y) in plus.iter().zip(&minus) {
                    prop_assert!((x - y).abs() <= tol, "{x} vs {y}");
                }
            }
        }

        #[test]
        fn swap_probabilities_in_unit_interval(det in -20.0f64..20.0) {
            let b = builder();
            let taus = linspace(0.0, 120.0, 13);
            for v in swap_curve(&b, &taus, det).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
