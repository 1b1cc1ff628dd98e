//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every function returns a flat `Float64Array`; the layouts are documented
//! per function.

use magnon_sim::experiments::{linspace, prepare_magnon_state, swap_curve};
use magnon_sim::model::at_doublet;
use magnon_sim::operators::C64;
use magnon_sim::schedule::{Protocol, SequenceBuilder, StateTarget};
use magnon_sim::tomography::{square_grid, wigner_analytic};
use magnon_sim::{Error, PhysicalParams, Result};
use wasm_bindgen::prelude::*;

fn js<T>(r: Result<T>) -> std::result::Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e.to_string()))
}

fn params(t1_magnon_ns: f64) -> PhysicalParams {
    let p = PhysicalParams::default();
    if t1_magnon_ns.is_finite() {
        PhysicalParams { t1_magnon_ns, ..p }
    } else {
        p.decoherence_free()
    }
}

fn target(state: &str) -> Result<StateTarget> {
    match state {
        "vacuum" => Ok(StateTarget::Vacuum),
        "single_magnon" => Ok(StateTarget::SingleMagnon),
        "superposition" => Ok(StateTarget::superposition(C64::new(1.0, 0.0))),
        other => Err(Error::InvalidParameter { key: "state", reason: format!("unknown state `{other}`") }),
    }
}

fn branches(amp_max_mhz: f64, points: usize, detuning_mhz: f64) -> Result<Vec<f64>> {
    let p = PhysicalParams::default();
    let mut out = Vec::with_capacity(3 * points);
    for a in linspace(amp_max_mhz / points as f64, amp_max_mhz, points) {
        let d = at_doublet(a, detuning_mhz, &p)?;
        out.extend([a, d.omega_plus_ghz, d.omega_minus_ghz]);
    }
    Ok(out)
}

fn swap_rows(t1_magnon_ns: f64, tau_max_ns: f64, points: usize) -> Result<Vec<f64>> {
    let b = SequenceBuilder::new(&params(t1_magnon_ns), &Protocol::default())?;
    let taus = linspace(0.0, tau_max_ns, points);
    let ys = swap_curve(&b, &taus, 0.0)?;
    Ok(taus.iter().zip(&ys).flat_map(|(t, y)| [*t, *y]).collect())
}

fn wigner_values(state: &str, t1_magnon_ns: f64, extent: f64, n: usize) -> Result<Vec<f64>> {
    let b = SequenceBuilder::new(&params(t1_magnon_ns), &Protocol::default())?;
    let rho = prepare_magnon_state(&b, target(state)?)?;
    square_grid(extent, n)?.into_iter().map(|a| wigner_analytic(&rho, a)).collect()
}

/// Autler-Townes doublet versus drive amplitude: rows of
/// `[amplitude_mhz, plus_ghz, minus_ghz]` for amplitudes in (0, `amp_max_mhz`].
#[wasm_bindgen]
pub fn at_branches(amp_max_mhz: f64, points: usize, detuning_mhz: f64) -> std::result::Result<Vec<f64>, JsValue> {
    js(branches(amp_max_mhz, points, detuning_mhz))
}

/// Resonant swap curve: rows of `[tau_ns, p_plus]`. A non-finite
/// `t1_magnon_ns` switches dissipation off.
#[wasm_bindgen]
pub fn swap(t1_magnon_ns: f64, tau_max_ns: f64, points: usize) -> std::result::Result<Vec<f64>, JsValue> {
    js(swap_rows(t1_magnon_ns, tau_max_ns, points))
}

/// Wigner function of the simulated prepared state on an `n`×`n` grid over
/// [−extent, extent]², row-major with Re α fastest.
#[wasm_bindgen]
pub fn wigner_grid(state: &str, t1_magnon_ns: f64, extent: f64, n: usize) -> std::result::Result<Vec<f64>, JsValue> {
    js(wigner_values(state, t1_magnon_ns, extent, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branches_follow_the_doublet_law() {
        let rows = branches(120.0, 4, 3.0).unwrap();
        assert_eq!(rows.len(), 12);
        for r in rows.chunks(3) {
            assert!(((r[1] - r[2]) * 1e3 - r[0].hypot(3.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn lossless_swap_empties_the_qubit() {
        let rows = swap_rows(f64::INFINITY, 90.0, 31).unwrap();
        let min = rows.chunks(2).map(|r| r[1]).fold(1.0, f64::min);
        // the dressed |+⟩ keeps a ~2% |e⟩/|f⟩ admixture that never swaps out
        assert!(min < 0.03, "{min}");
    }

    #[test]
    fn vacuum_wigner_peaks_at_origin() {
        let w = wigner_values("vacuum", 128.0, 1.0, 3).unwrap();
        assert!((w[4] - std::f64::consts::FRAC_2_PI).abs() < 1e-3);
        assert!(wigner_values("cat", 128.0, 1.0, 3).is_err());
    }
}
