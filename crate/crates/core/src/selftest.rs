//! Invariant suite behind the `selftest` subcommand: operator algebra,
//! closed-form oracles, physicality of trajectories and tomography round trips.

use std::f64::consts::PI;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::experiments::{dynamics_layout, ef_block_branches, sample_readout, ShotModel};
use crate::lindblad::{
    evolve_with, readout_qubit_excited, DensityMatrix, EvolveOptions, HERMITICITY_TOL, POSITIVITY_TOL,
    TRACE_DRIFT_LIMIT,
};
use crate::model::{at_doublet, PhysicalParams};
use crate::operators::{displacement, identity, max_abs_diff, outer, parity, ComplexMatrix, C64};
use crate::schedule::{Protocol, SequenceBuilder, StateTarget};
use crate::tomography::{
    fidelity, fit_populations, reconstruct_density_matrix, square_grid, swap_templates, trace_distance,
    wigner_analytic, wigner_map, FitOptions, PopulationSource, TomographyConfig, WignerMap,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Columns name, passed, detail.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,passed,detail\n");
        for c in &self.checks {
            out.push_str(&format!("{},{},\"{}\"\n", c.name, c.passed, c.detail.replace('"', "'")));
        }
        out
    }
}

type Outcome = Result<(bool, String)>;
type NamedCheck = (&'static str, fn() -> Outcome);

fn displacement_algebra() -> Outcome {
    let d = displacement(C64::new(0.7, -0.4), 60)?;
    let gram = d.adjoint() * &d;
    let unitary = max_abs_diff(&gram.view((0, 0), (20, 20)).into_owned(), &identity(20)) <= 1e-9;
    let p = parity(12);
    let involution = max_abs_diff(&(&p * &p), &identity(12)) <= 1e-15;
    Ok((unitary && involution, format!("low block unitary: {unitary}, parity² = 1: {involution}")))
}

fn at_branch_law() -> Outcome {
    let p = PhysicalParams::default();
    let mut worst: f64 = 0.0;
    let mut worst_eig: f64 = 0.0;
    for omega in [0.5, 10.0, 44.9, 160.0, 400.0] {
        let d = at_doublet(omega, p.at_drive_detuning_mhz, &p)?;
        let sep = (d.omega_plus_ghz - d.omega_minus_ghz) * 1e3;
        worst = worst.max((sep - p.at_drive_detuning_mhz.hypot(omega)).abs());
        let (lo, hi) = ef_block_branches(&p, omega);
        worst_eig = worst_eig.max(((hi - d.omega_plus_ghz) * 1e3).abs().max(((lo - d.omega_minus_ghz) * 1e3).abs()));
    }
    Ok((worst <= 1e-6 && worst_eig <= 1e-9, format!("formula {worst:.2e} MHz, e/f block {worst_eig:.2e} MHz")))
}

fn vacuum_rabi_template() -> Outcome {
    let p = PhysicalParams::default().decoherence_free();
    let b = SequenceBuilder::new(&p, &Protocol::default())?;
    let taus: Vec<f64> = (0..=50).map(|k| 2.0 * k as f64).collect();
    let t = swap_templates(&b, 2, &taus, 4)?;
    let g = p.effective_coupling()?;
    let worst = taus
        .iter()
        .enumerate()
        .map(|(k, &tau)| (t.templates[1][k] - (2.0 * PI * g * 1e-3 * tau).sin().powi(2)).abs())
        .fold(0.0, f64::max);
    let zero = t.templates[0].iter().fold(0.0f64, |m, x| m.max(x.abs()));
    Ok((worst <= 0.02 && zero <= 1e-12, format!("|P1 − sin²(gτ)| ≤ {worst:.2e}, |P0| ≤ {zero:.1e}")))
}

fn swap_physicality() -> Outcome {
    let p = PhysicalParams::default();
    let b = SequenceBuilder::new(&p, &Protocol::default())?;
    let layout = dynamics_layout(&p)?;
    let sched = b.seq_swap(120.0, 0.0)?;
    let times: Vec<f64> = (0..=56).map(|k| 3.0 * k as f64).collect();
    let run = |step: f64| {
        evolve_with(
            &p,
            &layout,
            &sched,
            &DensityMatrix::ground(&layout),
            &times,
            EvolveOptions { rk4_step_ns: step, ..EvolveOptions::default() },
        )
    };
    let coarse = run(0.05)?;
    let mut herm: f64 = 0.0;
    let mut trace: f64 = 0.0;
    let mut min_eig = f64::INFINITY;
    for s in &coarse.states {
        let ph = s.physicality();
        herm = herm.max(ph.hermiticity);
        trace = trace.max(ph.trace_error);
        min_eig = min_eig.min(ph.min_eigenvalue);
    }
    let fine = run(0.025)?;
    let mut halving: f64 = 0.0;
    for (a, b) in coarse.states.iter().zip(&fine.states) {
        halving = halving.max((readout_qubit_excited(a)? - readout_qubit_excited(b)?).abs());
    }
    let ok = coarse.max_trace_drift <= TRACE_DRIFT_LIMIT
        && herm <= HERMITICITY_TOL
        && min_eig >= -POSITIVITY_TOL
        && halving <= 1e-6;
    Ok((
        ok,
        format!(
            "drift {:.1e}, trace {trace:.1e}, hermiticity {herm:.1e}, min eigenvalue {min_eig:.1e}, step halving {halving:.1e}",
            coarse.max_trace_drift
        ),
    ))
}

fn wigner_closed_forms() -> Outcome {
    let mut m = ComplexMatrix::zeros(3, 3);
    m[(1, 1)] = C64::new(1.0, 0.0);
    let rho = DensityMatrix::magnon(m)?;
    let mut worst: f64 = 0.0;
    for &(re, im) in &[(0.0, 0.0), (0.5, 0.0), (0.4, 0.9), (-1.3, 0.2)] {
        let a = C64::new(re, im);
        let r2 = a.norm_sqr();
        let expect = 2.0 / PI * (4.0 * r2 - 1.0) * (-2.0 * r2).exp();
        worst = worst.max((wigner_analytic(&rho, a)? - expect).abs());
    }
    Ok((worst <= 1e-10, format!("|W − closed form| ≤ {worst:.1e}")))
}

fn fit_recovery() -> Outcome {
    let p = PhysicalParams::default().decoherence_free();
    let b = SequenceBuilder::new(&p, &Protocol::default())?;
    let t = swap_templates(&b, 9, &TomographyConfig::default().tau_grid(), 11)?;
    let mix: Vec<f64> = t.templates[1].iter().zip(&t.templates[2]).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    let basis = fit_populations(&t.templates[1], None, &t, &FitOptions::default())?;
    let mixed = fit_populations(&mix, None, &t, &FitOptions::default())?;
    let e1 = (basis.populations[1] - 1.0).abs();
    let e2 = (mixed.populations[1] - 0.5).abs().max((mixed.populations[2] - 0.5).abs());
    Ok((e1 <= 1e-6 && e2 <= 1e-4, format!("basis error {e1:.1e}, mixture error {e2:.1e}")))
}

fn exact_pipeline() -> Outcome {
    let p = PhysicalParams::default().decoherence_free();
    let b = SequenceBuilder::new(&p, &Protocol::default())?;
    let map = wigner_map(
        &b,
        StateTarget::SingleMagnon,
        &square_grid(1.0, 3)?,
        &TomographyConfig::default(),
        PopulationSource::Exact,
        None,
    )?;
    let dev = map.max_reference_deviation();
    Ok((dev <= 1e-6, format!("max |W_map − W_analytic| = {dev:.1e}")))
}

fn reconstruction_round_trip() -> Outcome {
    let cfg = TomographyConfig::default();
    let grid = square_grid(1.0, 5)?;
    let s = C64::new(0.5f64.sqrt(), 0.0);
    let z = C64::new(0.0, 0.0);
    let cases = [
        (vec![z, C64::new(1.0, 0.0), z, z], StateTarget::SingleMagnon),
        (vec![s, s, z, z], StateTarget::superposition(C64::new(1.0, 0.0))),
    ];
    let mut worst_f: f64 = 1.0;
    let mut worst_d: f64 = 0.0;
    for (psi, target) in cases {
        let rho = DensityMatrix::magnon(outer(&psi, &psi))?;
        let mut map = WignerMap::analytic(&rho, &grid)?;
        map.target = Some(target);
        let rec = reconstruct_density_matrix(&map, &cfg)?;
        worst_f = worst_f.min(fidelity(&rec.rho, &psi)?);
        worst_d = worst_d.max(trace_distance(&rec.rho, &rho)?);
    }
    Ok((worst_f >= 0.99 && worst_d <= 1e-6, format!("fidelity ≥ {worst_f:.6}, trace distance ≤ {worst_d:.1e}")))
}

fn shot_determinism() -> Outcome {
    let shots = ShotModel { seed: 7, ..ShotModel::default() };
    let a: Vec<_> = (0..16).map(|i| sample_readout(0.3, &shots, i)).collect::<Result<_>>()?;
    let b: Vec<_> = (0..16).map(|i| sample_readout(0.3, &shots, i)).collect::<Result<_>>()?;
    Ok((a == b, "repeated draws identical".into()))
}

/// Runs every check; failures are recorded, never propagated.
pub fn run_selftest() -> SelftestReport {
    let checks: [NamedCheck; 9] = [
        ("displacement_algebra", displacement_algebra),
        ("at_branch_law", at_branch_law),
        ("vacuum_rabi_template", vacuum_rabi_template),
        ("swap_physicality", swap_physicality),
        ("wigner_closed_forms", wigner_closed_forms),
        ("fit_recovery", fit_recovery),
        ("exact_wigner_pipeline", exact_pipeline),
        ("reconstruction_round_trip", reconstruction_round_trip),
        ("shot_determinism", shot_determinism),
    ];
    let checks = checks
        .iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            log::info!("selftest {name}: {} in {:.2?}", if passed { "pass" } else { "FAIL" }, start.elapsed());
            Check { name: (*name).into(), passed, detail }
        })
        .collect();
    SelftestReport { checks }
}
