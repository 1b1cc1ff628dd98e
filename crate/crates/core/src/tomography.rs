//! Wigner tomography of the magnon mode.
//!
//! A displaced magnon state is swapped against the qubit at the swap point;
//! the resulting P₊(τ) curve is a non-negative mixture of per-Fock templates.
//! Fitting the mixture gives Fock populations, whose parity sum is W(α).
//! A linear model over many α then reconstructs the magnon density matrix.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{linspace, prep_layout, sample_readout, Metadata, ShotModel};
use crate::lindblad::{partial_trace, to_magnon_frame, DensityMatrix, Engine, EvolveOptions, SectorPropagator};
use crate::model::{ControlField, PhysicalParams, GHZ};
use crate::operators::{displacement, displacement_fits, parity, ComplexMatrix, Factor, HilbertLayout, C64};
use crate::par;
use crate::schedule::{SequenceBuilder, StateTarget};

/// Numerical choices of the tomography pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TomographyConfig {
    /// Highest Fock number in the regression.
    pub n_max: usize,
    pub tau_step_ns: f64,
    pub tau_max_ns: f64,
    /// Magnon truncation for the displaced states; `None` picks one from the α grid.
    pub magnon_dim: Option<usize>,
    /// Fock dimension used to evaluate reconstruction kernels.
    pub kernel_dim: usize,
    pub reconstruction_dim: usize,
    pub bootstrap_resamples: usize,
    pub condition_limit: f64,
    /// Adds a constant column to the regression for qubit excitation left
    /// over from the preparation.
    pub background: bool,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            n_max: 9,
            tau_step_ns: 2.0,
            tau_max_ns: 200.0,
            magnon_dim: None,
            kernel_dim: 40,
            reconstruction_dim: 4,
            bootstrap_resamples: 25,
            condition_limit: 1e8,
            background: true,
        }
    }
}

impl TomographyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 1 {
            return Err(Error::InvalidParameter { key: "n_max", reason: "must be >= 1".into() });
        }
        if !(self.tau_step_ns > 0.0 && self.tau_max_ns >= self.tau_step_ns) {
            return Err(Error::InvalidParameter {
                key: "tau_grid",
                reason: "need 0 < tau_step_ns <= tau_max_ns".into(),
            });
        }
        if self.reconstruction_dim < 2 || self.kernel_dim < self.reconstruction_dim + 8 {
            return Err(Error::InvalidParameter {
                key: "reconstruction_dim",
                reason: "need 2 <= reconstruction_dim and kernel_dim >= reconstruction_dim + 8".into(),
            });
        }
        if !(self.condition_limit > 1.0) {
            return Err(Error::InvalidParameter { key: "condition_limit", reason: "must be > 1".into() });
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions { condition_limit: self.condition_limit, background: self.background }
    }

    /// 0, step, …, max (inclusive).
    pub fn tau_grid(&self) -> Vec<f64> {
        let n = (self.tau_max_ns / self.tau_step_ns + 1e-9).floor() as usize;
        (0..=n).map(|k| k as f64 * self.tau_step_ns).collect()
    }

    /// Magnon truncation for a set of displacements.
    pub fn magnon_dim_for(&self, alphas: &[C64]) -> usize {
        if let Some(d) = self.magnon_dim {
            return d;
        }
        let r = alphas.iter().map(|a| a.norm()).fold(0.0, f64::max);
        (self.n_max + 2).max((r * r + 6.0 * r).ceil() as usize + 6)
    }
}

/// Uniform n × n grid over Re, Im ∈ [−extent, extent], real part fastest.
pub fn square_grid(extent: f64, n: usize) -> Result<Vec<C64>> {
    if n == 0 || !(extent >= 0.0) || !extent.is_finite() {
        return Err(Error::InvalidParameter { key: "alpha_grid", reason: "need n >= 1 and a finite extent".into() });
    }
    let xs = if n == 1 { vec![0.0] } else { linspace(-extent, extent, n) };
    Ok(xs.iter().flat_map(|&im| xs.iter().map(move |&re| C64::new(re, im))).collect())
}

/// AT field during the swap window of the tomography sequence.
pub fn swap_field(b: &SequenceBuilder) -> ControlField {
    ControlField { amplitude_mhz: b.swap_amp_mhz, phase_rad: 0.0, detuning_d_mhz: b.params.at_drive_detuning_mhz }
}

fn swap_propagator(b: &SequenceBuilder, layout: &HilbertLayout, step_ns: f64) -> Result<SectorPropagator> {
    SectorPropagator::new(&b.params, layout, &swap_field(b), step_ns)
}

fn check_tau_grid(tau_grid: &[f64]) -> Result<()> {
    let ok = !tau_grid.is_empty()
        && tau_grid.iter().all(|t| t.is_finite() && *t >= 0.0)
        && tau_grid.windows(2).all(|w| w[1] > w[0]);
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidParameter { key: "tau_grid", reason: "must be non-empty, >= 0 and increasing".into() })
    }
}

/// Simulated P₊(τ) curves for the magnon starting in |n⟩ and the qubit in |g⟩.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapTemplateSet {
    pub n_max: usize,
    pub tau_grid: Vec<f64>,
    /// templates[n][k] = P_n(τ_k).
    pub templates: Vec<Vec<f64>>,
    pub params: PhysicalParams,
}

impl SwapTemplateSet {
    /// Rows τ, columns n.
    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.tau_grid.len(), self.n_max + 1, |k, n| self.templates[n][k])
    }
}

fn templates_with(
    b: &SequenceBuilder,
    prop: &SectorPropagator,
    n_max: usize,
    tau_grid: &[f64],
) -> Result<SwapTemplateSet> {
    let ns: Vec<usize> = (0..=n_max).collect();
    let templates = par::map(&ns, |_, &n| prop.excited_at(&prop.basis_vector(0, n, 0), tau_grid))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SwapTemplateSet { n_max, tau_grid: tau_grid.to_vec(), templates, params: b.params.clone() })
}

/// Templates at the swap point of `b`, simulated with `magnon_dim` levels.
pub fn swap_templates(
    b: &SequenceBuilder,
    n_max: usize,
    tau_grid: &[f64],
    magnon_dim: usize,
) -> Result<SwapTemplateSet> {
    if n_max < 1 {
        return Err(Error::InvalidParameter { key: "n_max", reason: "must be >= 1".into() });
    }
    if magnon_dim < n_max + 2 {
        return Err(Error::InvalidDimension(format!(
            "magnon_dim {magnon_dim} must be at least n_max + 2 = {}",
            n_max + 2
        )));
    }
    check_tau_grid(tau_grid)?;
    let layout = HilbertLayout::two_body(magnon_dim)?;
    let step = tau_grid.windows(2).next().map_or(1.0, |w| w[1] - w[0]);
    let prop = swap_propagator(b, &layout, step)?;
    templates_with(b, &prop, n_max, tau_grid)
}

/// Settings of [`fit_populations`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub condition_limit: f64,
    pub background: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { condition_limit: 1e8, background: false }
    }
}

/// Fock populations from one swap curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFit {
    pub populations: Vec<f64>,
    /// Weight of the constant column (0 without background).
    pub background: f64,
    pub covariance: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub condition_number: f64,
}

impl PopulationFit {
    /// Parity sum and its propagated standard error.
    pub fn wigner(&self) -> (f64, f64) {
        let s: Vec<f64> = (0..self.populations.len()).map(|n| parity_sign(n) * 2.0 / PI).collect();
        let mut var = 0.0;
        for (i, row) in self.covariance.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                var += s[i] * c * s[j];
            }
        }
        (wigner_point(&self.populations), var.max(0.0).sqrt())
    }
}

fn parity_sign(n: usize) -> f64 {
    if n.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// min ‖A_S z − y‖² subject to Σz = 1 over the columns S flagged in `cols`.
fn sum_constrained_solve(a: &DMatrix<f64>, y: &DVector<f64>, cols: &[bool]) -> DVector<f64> {
    let idx: Vec<usize> = (0..a.ncols()).filter(|&j| cols[j]).collect();
    let mut out = DVector::zeros(a.ncols());
    let Some((&first, rest)) = idx.split_first() else {
        return out;
    };
    if rest.is_empty() {
        out[first] = 1.0;
        return out;
    }
    // z_first = 1 − Σ z_rest
    let base = a.column(first);
    let reduced = DMatrix::from_fn(a.nrows(), rest.len(), |r, c| a[(r, rest[c])] - base[r]);
    let rhs = y - base;
    let svd = reduced.svd(true, true);
    let eps = 1e-13 * svd.singular_values.max();
    let w = svd.solve(&rhs, eps).unwrap_or_else(|_| DVector::zeros(rest.len()));
    out[first] = 1.0 - w.sum();
    for (k, &j) in rest.iter().enumerate() {
        out[j] = w[k];
    }
    out
}

/// Active-set least squares on the probability simplex (p ≥ 0, Σp = 1), in
/// the Lawson–Hanson style with the sum rule carried by every subproblem.
fn simplex_least_squares(a: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let start = (0..n)
        .min_by(|&i, &j| (a.column(i) - y).norm().total_cmp(&(a.column(j) - y).norm()))
        .expect("at least one column");
    let mut x = DVector::zeros(n);
    x[start] = 1.0;
    let mut passive = vec![false; n];
    passive[start] = true;
    let scale = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-11 * scale * y.norm().max(scale);
    for _ in 0..3 * n + 10 {
        let g = a.transpose() * (y - a * &x);
        let members: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let mu = members.iter().map(|&j| g[j]).sum::<f64>() / members.len() as f64;
        let entering = (0..n).filter(|&j| !passive[j]).max_by(|&i, &j| g[i].total_cmp(&g[j]));
        match entering {
            Some(j) if g[j] - mu > tol => passive[j] = true,
            _ => break,
        }
        for _ in 0..3 * n + 10 {
            let z = sum_constrained_solve(a, y, &passive);
            if (0..n).filter(|&j| passive[j]).all(|j| z[j] > 0.0) {
                x = z;
                break;
            }
            let mut step = f64::INFINITY;
            for j in (0..n).filter(|&j| passive[j] && z[j] <= 0.0) {
                step = step.min(x[j] / (x[j] - z[j]));
            }
            x = &x + (&z - &x) * step;
            for j in 0..n {
                if passive[j] && x[j] <= 1e-15 {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                let j = (0..n).max_by(|&i, &j| x[i].total_cmp(&x[j])).expect("non-empty");
                passive[j] = true;
            }
        }
    }
    x
}

/// Euclidean projection onto {p ≥ 0, Σp = 1}.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / min
    }
}

/// Constrained regression of a swap curve onto the templates: p ≥ 0, Σp = 1.
///
/// With `background` a constant column joins the simplex; its weight absorbs
/// P₊ offsets from residual qubit excitation and is excluded from the
/// populations, which then sum to 1 − background. With `std_errors` the rows
/// are weighted by 1/σ and the covariance is absolute; without them it is
/// scaled by the residual variance.
pub fn fit_populations(
    measured: &[f64],
    std_errors: Option<&[f64]>,
    templates: &SwapTemplateSet,
    options: &FitOptions,
) -> Result<PopulationFit> {
    let m = templates.tau_grid.len();
    if measured.len() != m || std_errors.is_some_and(|s| s.len() != m) {
        return Err(Error::InvalidParameter {
            key: "measured",
            reason: format!("curve has {} points, templates have {m}", measured.len()),
        });
    }
    if measured.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter { key: "measured", reason: "non-finite value".into() });
    }
    let k = templates.n_max + 1;
    let weights: Vec<f64> = match std_errors {
        Some(s) if s.iter().all(|&e| e > 0.0 && e.is_finite()) => s.iter().map(|e| 1.0 / e).collect(),
        Some(_) => {
            return Err(Error::InvalidParameter { key: "std_errors", reason: "must be positive and finite".into() })
        }
        None => vec![1.0; m],
    };
    let mut a = templates.design_matrix();
    if options.background {
        a = a.insert_column(k, 1.0);
    }
    for (r, w) in weights.iter().enumerate() {
        a.row_mut(r).scale_mut(*w);
    }
    let y = DVector::from_iterator(m, measured.iter().zip(&weights).map(|(v, w)| v * w));
    let kk = a.ncols();

    let cond = condition_number(&a.clone().insert_row(m, 1.0));
    if cond > options.condition_limit {
        return Err(Error::Conditioning(format!(
            "template matrix condition number {cond:.3e} exceeds {:.1e}; use a longer tau grid or a smaller n_max",
            options.condition_limit
        )));
    }

    let x = simplex_least_squares(&a, &y);
    // removes the rounding left by the active-set solve
    let weights_fit = project_to_simplex(x.as_slice());

    let p = DVector::from_column_slice(&weights_fit);
    let residual_norm = (&y - &a * &p).norm();
    let active: Vec<usize> = (0..kk).filter(|&j| weights_fit[j] > 0.0).collect();
    let mut covariance = vec![vec![0.0; k]; k];
    if active.len() > 1 {
        let sigma2 = if std_errors.is_some() {
            1.0
        } else {
            let dof = m.saturating_sub(active.len() - 1).max(1);
            residual_norm * residual_norm / dof as f64
        };
        // directions inside the simplex: e_i − e_first
        let ap = a.select_columns(&active);
        let h = ap.transpose() * &ap;
        let na = active.len();
        let z = DMatrix::from_fn(na, na - 1, |r, c| {
            if r == c + 1 {
                1.0
            } else if r == 0 {
                -1.0
            } else {
                0.0
            }
        });
        let reduced = z.transpose() * &h * &z;
        let eps = 1e-12 * reduced.norm().max(1e-300);
        if let Ok(inv) = reduced.pseudo_inverse(eps) {
            let c = &z * inv * z.transpose() * sigma2;
            for (r, &i) in active.iter().enumerate().filter(|(_, &i)| i < k) {
                for (s, &j) in active.iter().enumerate().filter(|(_, &j)| j < k) {
                    covariance[i][j] = c[(r, s)];
                }
            }
        }
    }
    let background = if options.background { weights_fit[k] } else { 0.0 };
    Ok(PopulationFit {
        populations: weights_fit[..k].to_vec(),
        background,
        covariance,
        residual_norm,
        condition_number: cond,
    })
}

/// W = (2/π) Σ (−1)ⁿ pₙ.
pub fn wigner_point(populations: &[f64]) -> f64 {
    2.0 / PI * populations.iter().enumerate().map(|(n, p)| parity_sign(n) * p).sum::<f64>()
}

fn magnon_only(rho: &DensityMatrix) -> Result<usize> {
    match rho.factors() {
        [(Factor::Magnon, d)] => Ok(*d),
        _ => Err(Error::InvalidState("expected a magnon-only density matrix".into())),
    }
}

fn padded(m: &ComplexMatrix, dim: usize) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(dim, dim);
    let d = m.nrows().min(dim);
    out.view_mut((0, 0), (d, d)).copy_from(&m.view((0, 0), (d, d)));
    out
}

/// Working Fock dimension that keeps a displacement by |α| converged for a
/// state supported on `dim` levels.
fn working_dim(dim: usize, alpha: C64) -> usize {
    let r = alpha.norm();
    dim + (r * r + 6.0 * r).ceil() as usize + 12
}

/// W(α) = (2/π) Tr[P D(−α) ρ D(α)], evaluated in an enlarged Fock space.
pub fn wigner_analytic(rho: &DensityMatrix, alpha: C64) -> Result<f64> {
    let d = magnon_only(rho)?;
    if !displacement_fits(alpha, d.max(2)) {
        log::debug!("wigner_analytic: |alpha| = {:.3} is large for a {d}-level state", alpha.norm());
    }
    let dim = working_dim(d, alpha);
    let disp = displacement(-alpha, dim)?;
    let moved = &disp * padded(rho.matrix(), dim) * disp.adjoint();
    Ok(2.0 / PI * (0..dim).map(|n| parity_sign(n) * moved[(n, n)].re).sum::<f64>())
}

/// (2/π) D(α) P D(α)†, so that W(α) = Tr[ρ K(α)].
fn wigner_kernel(alpha: C64, dim: usize) -> Result<ComplexMatrix> {
    let disp = displacement(alpha, dim)?;
    Ok((&disp * parity(dim) * disp.adjoint()) * C64::new(2.0 / PI, 0.0))
}

/// How the Fock populations of the displaced state are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationSource {
    /// Ideal D(−α) applied to the simulated prepared state; populations read directly.
    Exact,
    /// Simulated displacement pulse; populations read directly.
    Pulsed,
    /// Simulated displacement pulse and swap window, populations from the regression.
    Regression,
}

/// W(α) over a grid of displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WignerMap {
    pub target: Option<StateTarget>,
    pub source: PopulationSource,
    /// Grid as [Re α, Im α] pairs.
    pub alpha_grid: Vec<[f64; 2]>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Fock populations p_0..p_nmax per α.
    pub populations: Vec<Vec<f64>>,
    /// Analytic W(α) of the simulated prepared magnon state.
    pub reference: Vec<f64>,
    /// Simulated prepared magnon state (magnon frame).
    pub prepared_state: Option<DensityMatrix>,
    /// Noiseless simulated swap curves (regression source only).
    pub curves: Vec<Vec<f64>>,
    pub templates: Option<SwapTemplateSet>,
    pub shots: Option<ShotModel>,
    pub metadata: Option<Metadata>,
}

impl WignerMap {
    pub fn alphas(&self) -> Vec<C64> {
        self.alpha_grid.iter().map(|a| C64::new(a[0], a[1])).collect()
    }

    /// Exact map of a magnon state (no simulation, no noise).
    pub fn analytic(rho: &DensityMatrix, alphas: &[C64]) -> Result<Self> {
        magnon_only(rho)?;
        let values = alphas.iter().map(|&a| wigner_analytic(rho, a)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            target: None,
            source: PopulationSource::Exact,
            alpha_grid: alphas.iter().map(|a| [a.re, a.im]).collect(),
            std_errors: vec![0.0; values.len()],
            populations: Vec::new(),
            reference: values.clone(),
            values,
            prepared_state: Some(rho.clone()),
            curves: Vec::new(),
            templates: None,
            shots: None,
            metadata: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.alpha_grid.len();
        if n == 0 || self.values.len() != n || self.std_errors.len() != n {
            return Err(Error::InvalidParameter { key: "alpha_grid", reason: "grid and values disagree".into() });
        }
        Ok(())
    }

    /// Largest |W_map − W_reference|.
    pub fn max_reference_deviation(&self) -> f64 {
        self.values.iter().zip(&self.reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Columns alpha_re, alpha_im, wigner, std_error, reference, p0..p_nmax.
    pub fn to_csv(&self) -> String {
        let np = self.populations.first().map_or(0, Vec::len);
        let mut out = String::from("alpha_re,alpha_im,wigner,std_error,reference");
        for n in 0..np {
            out.push_str(&format!(",p{n}"));
        }
        out.push('\n');
        for (i, a) in self.alpha_grid.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}",
                a[0],
                a[1],
                self.values[i],
                self.std_errors[i],
                self.reference.get(i).copied().unwrap_or(f64::NAN)
            ));
            if let Some(p) = self.populations.get(i) {
                for x in p {
                    out.push_str(&format!(",{x}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

fn apply_magnon_displacement(rho: &DensityMatrix, beta: C64) -> Result<DensityMatrix> {
    let layout = rho.layout()?;
    let d = layout.embed_magnon(&displacement(beta, layout.magnon_dim)?);
    DensityMatrix::new(rho.factors().to_vec(), &d * rho.matrix() * d.adjoint())
}

/// W from the exact magnon populations of `rho`; p_0..p_nmax are reported.
fn direct_point(rho: &DensityMatrix, magnon_dim: usize, n_max: usize) -> Result<PointResult> {
    let mut populations = partial_trace(rho, &[Factor::Magnon])?.populations();
    let value = wigner_point(&populations);
    let edge = populations.get(magnon_dim - 1).copied().unwrap_or(0.0);
    populations.resize(n_max + 1, 0.0);
    if edge > 1e-6 {
        log::warn!("{edge:.2e} of the displaced population sits in the last Fock level");
    }
    Ok(PointResult { curve: Vec::new(), populations, value, std_error: 0.0 })
}

/// Inverts the assignment matrix on a measured excited-state probability.
fn unassign(p_measured: f64, shots: &ShotModel) -> f64 {
    let m = shots.assignment_matrix;
    let span = m[1][1] - m[1][0];
    if span.abs() < 1e-12 {
        p_measured
    } else {
        (p_measured - m[1][0]) / span
    }
}

/// Shot-sampled swap curve (assignment-corrected) and its standard errors.
fn sample_curve(curve: &[f64], shots: &ShotModel, stream_base: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let floor = 1.0 / shots.shots as f64;
    let span = (shots.assignment_matrix[1][1] - shots.assignment_matrix[1][0]).abs().max(1e-12);
    let mut est = Vec::with_capacity(curve.len());
    let mut err = Vec::with_capacity(curve.len());
    for (k, &v) in curve.iter().enumerate() {
        let (e, s) = sample_readout(v.clamp(0.0, 1.0), shots, stream_base + k as u64)?;
        est.push(unassign(e, shots));
        err.push(s.max(floor) / span);
    }
    Ok((est, err))
}

/// Output of one α of the pipeline.
struct PointResult {
    curve: Vec<f64>,
    populations: Vec<f64>,
    value: f64,
    std_error: f64,
}

/// Runs the tomography sequence for `target` at every α.
///
/// `b` should already carry the superposition calibration when the target
/// needs it. Shot noise applies to the regression source only.
pub fn wigner_map(
    b: &SequenceBuilder,
    target: StateTarget,
    alphas: &[C64],
    cfg: &TomographyConfig,
    source: PopulationSource,
    shots: Option<&ShotModel>,
) -> Result<WignerMap> {
    cfg.validate()?;
    if alphas.is_empty() || alphas.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
        return Err(Error::InvalidParameter { key: "alpha_grid", reason: "must be non-empty and finite".into() });
    }
    if let Some(s) = shots {
        s.validate()?;
    }
    let p = &b.params;
    let magnon_dim = cfg.magnon_dim_for(alphas);
    if magnon_dim < cfg.n_max + 2 {
        return Err(Error::InvalidDimension(format!(
            "magnon_dim {magnon_dim} must be at least n_max + 2 = {}",
            cfg.n_max + 2
        )));
    }
    let (prepared, t_prep) = {
        let layout = prep_layout(p)?;
        let sched = b.seq_state_prep(target)?;
        let engine = Engine::new(p, &layout, EvolveOptions::default())?;
        let t = sched.readout_at_ns;
        let tr = engine.evolve_between(&sched, 0.0, &DensityMatrix::ground(&layout), &[t])?;
        (tr.states.into_iter().next().expect("one sample requested"), t)
    };
    let reduced = to_magnon_frame(&partial_trace(&prepared, &[Factor::Magnon])?, p, t_prep)?;
    let reference = alphas.iter().map(|&a| wigner_analytic(&reduced, a)).collect::<Result<Vec<_>>>()?;
    let state = prepared.with_magnon_dim(magnon_dim)?;
    let layout = state.layout()?;
    let prep_sched = b.seq_state_prep(target)?;
    let t_disp = b.protocol.displacement_duration_ns;
    let tau_grid = cfg.tau_grid();

    let (templates, prop) = if source == PopulationSource::Regression {
        let prop = swap_propagator(b, &layout, cfg.tau_step_ns)?;
        (Some(templates_with(b, &prop, cfg.n_max, &tau_grid)?), Some(prop))
    } else {
        (None, None)
    };
    let engine = Engine::new(p, &layout, EvolveOptions::default())?;
    let theta = (p.magnon_idle_freq_ghz - p.qubit_freq_ghz) * GHZ * t_prep;

    let points = par::map(alphas, |i, &alpha| -> Result<PointResult> {
        let displaced = match source {
            PopulationSource::Exact => {
                // D(−α) in the magnon frame is D(−α e^{−iθ}) in the common frame
                return {
                    let wd = working_dim(magnon_dim, alpha);
                    let moved =
                        apply_magnon_displacement(&state.with_magnon_dim(wd)?, -alpha * C64::from_polar(1.0, -theta))?;
                    Ok(direct_point(&moved, wd, cfg.n_max)?)
                };
            }
            _ => {
                let sched = b.seq_wigner_point(&prep_sched, alpha, 0.0)?;
                let tr = engine.evolve_between(&sched, t_prep, &state, &[t_prep + t_disp])?;
                tr.states.into_iter().next().expect("one sample requested")
            }
        };
        if source == PopulationSource::Pulsed {
            return direct_point(&displaced, magnon_dim, cfg.n_max);
        }
        let prop = prop.as_ref().expect("regression propagator");
        let templates = templates.as_ref().expect("regression templates");
        let curve = prop.excited_at(&prop.project(&displaced)?, &tau_grid)?;
        let fit = match shots {
            Some(s) => {
                let (est, err) = sample_curve(&curve, s, (i * tau_grid.len()) as u64)?;
                fit_populations(&est, Some(&err), templates, &cfg.fit_options())?
            }
            None => fit_populations(&curve, None, templates, &cfg.fit_options())?,
        };
        let (value, std_error) = fit.wigner();
        Ok(PointResult { curve, populations: fit.populations, value, std_error })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut map = WignerMap {
        target: Some(target),
        source,
        alpha_grid: alphas.iter().map(|a| [a.re, a.im]).collect(),
        values: points.iter().map(|r| r.value).collect(),
        std_errors: points.iter().map(|r| r.std_error).collect(),
        populations: Vec::with_capacity(points.len()),
        reference,
        prepared_state: Some(reduced),
        curves: Vec::new(),
        templates,
        shots: if source == PopulationSource::Regression { shots.copied() } else { None },
        metadata: Some(Metadata::new("wigner", p, Some(&b.protocol), shots)),
    };
    for r in points {
        map.populations.push(r.populations);
        if source == PopulationSource::Regression {
            map.curves.push(r.curve);
        }
    }
    Ok(map)
}

/// Reconstructed magnon state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionResult {
    pub rho: DensityMatrix,
    /// Smallest eigenvalue before clipping.
    pub raw_min_eigenvalue: f64,
    /// ‖W_model − W_data‖ (weighted when the map has standard errors).
    pub residual_norm: f64,
    pub fidelity: Option<f64>,
    pub fidelity_std: Option<f64>,
    pub bootstrap_fidelities: Vec<f64>,
    pub metadata: Option<Metadata>,
}

impl ReconstructionResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Linear model W_k = Tr[ρ K_k] over Hermitian, unit-trace ρ of dimension d.
struct ReconstructionModel {
    d: usize,
    /// Kernel blocks restricted to the first d levels.
    kernels: Vec<ComplexMatrix>,
    design: DMatrix<f64>,
    offset: Vec<f64>,
}

impl ReconstructionModel {
    /// Parameters: ρ_ii (i ≥ 1), then Re ρ_ij and Im ρ_ij for i < j.
    fn new(alphas: &[C64], d: usize, kernel_dim: usize) -> Result<Self> {
        let kernels = alphas
            .iter()
            .map(|&a| Ok(wigner_kernel(a, kernel_dim)?.view((0, 0), (d, d)).into_owned()))
            .collect::<Result<Vec<_>>>()?;
        let np = d * d - 1;
        let mut design = DMatrix::zeros(alphas.len(), np);
        let mut offset = Vec::with_capacity(alphas.len());
        for (k, kern) in kernels.iter().enumerate() {
            offset.push(kern[(0, 0)].re);
            let mut col = 0;
            for i in 1..d {
                design[(k, col)] = kern[(i, i)].re - kern[(0, 0)].re;
                col += 1;
            }
            for i in 0..d {
                for j in i + 1..d {
                    design[(k, col)] = 2.0 * kern[(j, i)].re;
                    design[(k, col + 1)] = -2.0 * kern[(j, i)].im;
                    col += 2;
                }
            }
        }
        Ok(Self { d, kernels, design, offset })
    }

    fn matrix(&self, x: &DVector<f64>) -> ComplexMatrix {
        let d = self.d;
        let mut rho = ComplexMatrix::zeros(d, d);
        let mut col = 0;
        let mut rest = 0.0;
        for i in 1..d {
            rho[(i, i)] = C64::new(x[col], 0.0);
            rest += x[col];
            col += 1;
        }
        rho[(0, 0)] = C64::new(1.0 - rest, 0.0);
        for i in 0..d {
            for j in i + 1..d {
                let z = C64::new(x[col], x[col + 1]);
                rho[(i, j)] = z;
                rho[(j, i)] = z.conj();
                col += 2;
            }
        }
        rho
    }

    /// Unconstrained-sign least squares; returns the Hermitian, unit-trace estimate.
    fn solve(&self, values: &[f64], weights: &[f64]) -> Result<(ComplexMatrix, f64)> {
        let mut a = self.design.clone();
        let mut y = DVector::from_iterator(values.len(), values.iter().zip(&self.offset).map(|(v, o)| v - o));
        for (k, &w) in weights.iter().enumerate() {
            a.row_mut(k).scale_mut(w);
            y[k] *= w;
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > 1e-10 * smax) {
            return Err(Error::Informativeness(format!(
                "reconstruction kernel is rank deficient (singular value ratio {:.2e}); widen the alpha grid",
                smin / smax
            )));
        }
        let x = svd.solve(&y, 0.0).map_err(|e| Error::Informativeness(e.to_string()))?;
        let residual = (&a * &x - &y).norm();
        Ok((self.matrix(&x), residual))
    }

    fn predict(&self, rho: &ComplexMatrix) -> Vec<f64> {
        self.kernels.iter().map(|k| (rho * k).trace().re).collect()
    }
}

/// Clips negative eigenvalues and renormalizes the trace.
fn positive_part(rho: &ComplexMatrix) -> (ComplexMatrix, f64) {
    let eig = SymmetricEigen::new(rho.clone());
    let raw_min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let d = rho.nrows();
    let mut out = ComplexMatrix::zeros(d, d);
    for (k, &l) in clipped.iter().enumerate() {
        if l > 0.0 {
            let v = eig.eigenvectors.column(k);
            out += v * v.adjoint() * C64::new(l / total, 0.0);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let z = 0.5 * (out[(i, j)] + out[(j, i)].conj());
            out[(i, j)] = z;
            out[(j, i)] = z.conj();
        }
        out[(i, i)].im = 0.0;
    }
    (out, raw_min)
}

fn reconstruct_values(
    model: &ReconstructionModel,
    values: &[f64],
    weights: &[f64],
) -> Result<(ComplexMatrix, f64, f64)> {
    let (raw, _) = model.solve(values, weights)?;
    let (rho, raw_min) = positive_part(&raw);
    let predicted = model.predict(&rho);
    let residual =
        predicted.iter().zip(values).zip(weights).map(|((p, v), w)| ((p - v) * w).powi(2)).sum::<f64>().sqrt();
    Ok((rho, raw_min, residual))
}

/// Reconstructs the magnon density matrix (dimension `cfg.reconstruction_dim`)
/// from a Wigner map. The fidelity to the map's target is reported with a
/// bootstrap spread over fresh shot-noise seeds when the map carries the
/// noiseless curves, or over Gaussian resamples of the values otherwise.
pub fn reconstruct_density_matrix(map: &WignerMap, cfg: &TomographyConfig) -> Result<ReconstructionResult> {
    cfg.validate()?;
    map.validate()?;
    let d = cfg.reconstruction_dim;
    let alphas = map.alphas();
    if alphas.len() < d * d {
        return Err(Error::Informativeness(format!(
            "{} alpha points cannot determine a {d}-dimensional state (need {})",
            alphas.len(),
            d * d
        )));
    }
    if let Some(t) = &map.templates {
        if d > t.n_max + 1 {
            return Err(Error::InvalidDimension(format!("reconstruction_dim {d} exceeds n_max + 1 = {}", t.n_max + 1)));
        }
    }
    let weighted = map.std_errors.iter().all(|&s| s > 0.0);
    let weights: Vec<f64> =
        if weighted { map.std_errors.iter().map(|s| 1.0 / s).collect() } else { vec![1.0; alphas.len()] };
    let model = ReconstructionModel::new(&alphas, d, cfg.kernel_dim)?;
    let (rho, raw_min, residual) = reconstruct_values(&model, &map.values, &weights)?;
    let rho = DensityMatrix::magnon(rho)?;

    let target = match map.target {
        Some(t) => Some(t.ideal_state(d)?),
        None => None,
    };
    let fid = match &target {
        Some(psi) => Some(fidelity(&rho, psi)?),
        None => None,
    };

    let mut boot = Vec::new();
    if let (Some(psi), true) = (&target, cfg.bootstrap_resamples > 0) {
        let resamples: Vec<u64> = (0..cfg.bootstrap_resamples as u64).collect();
        let draws = par::map(&resamples, |_, &r| -> Result<Option<f64>> {
            let values = match (&map.shots, &map.templates, map.curves.len() == alphas.len()) {
                (Some(s), Some(t), true) => {
                    let s = ShotModel { seed: s.seed.wrapping_add(1 + r), ..*s };
                    map.curves
                        .iter()
                        .enumerate()
                        .map(|(i, c)| {
                            let (est, err) = sample_curve(c, &s, (i * c.len()) as u64)?;
                            Ok(fit_populations(&est, Some(&err), t, &cfg.fit_options())?.wigner().0)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                _ if weighted => {
                    let seed = map.shots.map_or(0, |s| s.seed).wrapping_add(1 + r);
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    map.values
                        .iter()
                        .zip(&map.std_errors)
                        .map(|(v, s)| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            v + s * z
                        })
                        .collect()
                }
                _ => return Ok(None),
            };
            let (rho_b, _, _) = reconstruct_values(&model, &values, &weights)?;
            Ok(Some(fidelity(&DensityMatrix::magnon(rho_b)?, psi)?))
        });
        for x in draws {
            if let Some(f) = x? {
                boot.push(f);
            }
        }
    }
    let fidelity_std = match (&fid, boot.len()) {
        (Some(_), n) if n >= 2 => {
            let mean = boot.iter().sum::<f64>() / n as f64;
            Some((boot.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
        }
        (Some(_), _) => Some(0.0),
        _ => None,
    };
    Ok(ReconstructionResult {
        rho,
        raw_min_eigenvalue: raw_min,
        residual_norm: residual,
        fidelity: fid,
        fidelity_std,
        bootstrap_fidelities: boot,
        metadata: map.metadata.clone().map(|mut m| {
            m.experiment = "reconstruct".into();
            m
        }),
    })
}

/// F = √⟨ψ|ρ|ψ⟩.
pub fn fidelity(rho: &DensityMatrix, target: &[C64]) -> Result<f64> {
    let d = magnon_only(rho)?;
    if target.len() != d {
        return Err(Error::InvalidDimension(format!("target has dimension {}, state {d}", target.len())));
    }
    let norm: f64 = target.iter().map(|c| c.norm_sqr()).sum();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidState(format!("target vector has norm² {norm}")));
    }
    let psi = DVector::from_column_slice(target);
    let overlap = (psi.adjoint() * rho.matrix() * &psi)[(0, 0)].re;
    Ok(overlap.clamp(0.0, 1.0).sqrt())
}

/// ½‖ρ − σ‖₁ for states of equal dimension (the smaller one is zero-padded).
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    let dim = a.dim().max(b.dim());
    let diff = padded(a.matrix(), dim) - padded(b.matrix(), dim);
    let eig = SymmetricEigen::new(diff);
    Ok(0.5 * eig.eigenvalues.iter().map(|l| l.abs()).sum::<f64>())
}

/// Density matrix as two CSV blocks (real part, then imaginary part).
pub fn density_matrix_csv(rho: &DensityMatrix) -> String {
    rho.to_csv()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{coherent_state, outer};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const ZERO: C64 = C64::new(0.0, 0.0);

    fn builder(p: &PhysicalParams) -> SequenceBuilder {
        SequenceBuilder::new(p, &crate::schedule::Protocol::default()).unwrap()
    }

    fn fock(n: usize, d: usize) -> DensityMatrix {
        let mut m = ComplexMatrix::zeros(d, d);
        m[(n, n)] = C64::new(1.0, 0.0);
        DensityMatrix::magnon(m).unwrap()
    }

    fn plus_state(d: usize) -> DensityMatrix {
        let s = C64::new(1.0 / 2f64.sqrt(), 0.0);
        let mut v = vec![ZERO; d];
        v[0] = s;
        v[1] = s;
        DensityMatrix::magnon(outer(&v, &v)).unwrap()
    }

    fn free_templates(n_max: usize) -> SwapTemplateSet {
        let b = builder(&PhysicalParams::default().decoherence_free());
        swap_templates(&b, n_max, &TomographyConfig::default().tau_grid(), n_max + 2).unwrap()
    }

    #[test]
    fn wigner_point_examples() {
        assert_abs_diff_eq!(wigner_point(&[1.0, 0.0]), 2.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wigner_point(&[0.0, 1.0, 0.0]), -2.0 / PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wigner_point(&[0.5, 0.5, 0.0]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn analytic_wigner_closed_forms() {
        assert_abs_diff_eq!(wigner_analytic(&fock(0, 4), C64::new(0.0, 0.0)).unwrap(), 2.0 / PI, epsilon = 1e-12);
        for &(re, im) in &[(0.0, 0.0), (0.5, 0.0), (0.3, -0.7), (1.2, 0.4)] {
            let a = C64::new(re, im);
            let r2 = a.norm_sqr();
            let expect = 2.0 / PI * (4.0 * r2 - 1.0) * (-2.0 * r2).exp();
            assert_abs_diff_eq!(wigner_analytic(&fock(1, 4), a).unwrap(), expect, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(wigner_analytic(&fock(1, 4), C64::new(0.5, 0.0)).unwrap(), 0.0, epsilon = 1e-10);
        let beta = C64::new(0.6, -0.4);
        let coh = DensityMatrix::magnon({
            let v = coherent_state(beta, 30).unwrap();
            outer(&v, &v)
        })
        .unwrap();
        for &a in &[beta, C64::new(0.0, 0.0), C64::new(1.0, 1.0)] {
            let expect = 2.0 / PI * (-2.0 * (a - beta).norm_sqr()).exp();
            assert_abs_diff_eq!(wigner_analytic(&coh, a).unwrap(), expect, epsilon = 1e-9);
        }
    }

    #[test]
    fn templates_follow_vacuum_rabi() {
        let t = free_templates(3);
        let g = PhysicalParams::default().effective_coupling().unwrap();
        for (k, &tau) in t.tau_grid.iter().enumerate() {
            assert_abs_diff_eq!(t.templates[0][k], 0.0, epsilon = 1e-12);
            let expect = (2.0 * PI * g * 1e-3 * tau).sin().powi(2);
            assert_abs_diff_eq!(t.templates[1][k], expect, epsilon = 2e-2);
        }
        let first_max = |c: &Vec<f64>| {
            let k = (1..c.len() - 1).find(|&k| c[k] >= c[k - 1] && c[k] >= c[k + 1]).unwrap();
            t.tau_grid[k]
        };
        assert!((first_max(&t.templates[1]) - 45.0).abs() <= 2.0);
        assert!((first_max(&t.templates[2]) - 45.0 / 2f64.sqrt()).abs() <= 2.0);
        assert!(first_max(&t.templates[3]) < first_max(&t.templates[2]));
    }

    #[test]
    fn lossy_templates_stay_bounded() {
        let b = builder(&PhysicalParams::default());
        let t = swap_templates(&b, 4, &TomographyConfig::default().tau_grid(), 6).unwrap();
        assert!(t.templates.iter().flatten().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(t.templates[0].iter().all(|&x| x <= 0.02));
    }

    #[test]
    fn template_truncation_guard() {
        let b = builder(&PhysicalParams::default().decoherence_free());
        let err = swap_templates(&b, 9, &[0.0, 2.0, 4.0], 10).unwrap_err();
        assert!(matches!(err, Error::InvalidDimension(_)));
    }

    #[test]
    fn fit_recovers_basis_and_mixture() {
        let t = free_templates(9);
        for background in [false, true] {
            let opts = FitOptions { background, ..FitOptions::default() };
            let fit = fit_populations(&t.templates[1], None, &t, &opts).unwrap();
            for (n, p) in fit.populations.iter().enumerate() {
                assert_abs_diff_eq!(*p, if n == 1 { 1.0 } else { 0.0 }, epsilon = 1e-6);
            }
            let mix: Vec<f64> = t.templates[1].iter().zip(&t.templates[2]).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            let fit = fit_populations(&mix, None, &t, &opts).unwrap();
            assert_abs_diff_eq!(fit.populations[1], 0.5, epsilon = 1e-4);
            assert_abs_diff_eq!(fit.populations[2], 0.5, epsilon = 1e-4);
        }
    }

    #[test]
    fn background_absorbs_constant_offset() {
        let t = free_templates(6);
        let curve: Vec<f64> = t.templates[1].iter().map(|x| 0.97 * x + 0.03).collect();
        let fit = fit_populations(&curve, None, &t, &FitOptions { background: true, ..FitOptions::default() }).unwrap();
        assert_abs_diff_eq!(fit.background, 0.03, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.populations[1], 0.97, epsilon = 1e-9);
    }

    #[test]
    fn displaced_vacuum_is_poissonian() {
        let b = builder(&PhysicalParams::default().decoherence_free());
        let cfg = TomographyConfig::default();
        let map = wigner_map(&b, StateTarget::Vacuum, &[C64::new(1.0, 0.0)], &cfg, PopulationSource::Regression, None)
            .unwrap();
        let pops = &map.populations[0];
        let mut poisson = (-1.0f64).exp();
        for (n, p) in pops.iter().enumerate().take(5) {
            assert!((p - poisson).abs() <= 0.02, "n = {n}: {p} vs {poisson}");
            poisson /= (n + 1) as f64;
        }
    }

    #[test]
    fn conditioning_error_on_degenerate_templates() {
        let mut t = free_templates(3);
        t.templates[3] = t.templates[2].clone();
        let err = fit_populations(&t.templates[1], None, &t, &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Conditioning(_)));
    }

    #[test]
    fn mismatched_curve_rejected() {
        let t = free_templates(2);
        assert!(fit_populations(&[0.1, 0.2], None, &t, &FitOptions::default()).is_err());
    }

    #[test]
    fn covariance_propagates_to_wigner_error() {
        let t = free_templates(4);
        let shots = ShotModel::default();
        let mix: Vec<f64> = t.templates[1].iter().zip(&t.templates[2]).map(|(a, b)| 0.7 * a + 0.3 * b).collect();
        let (est, err) = sample_curve(&mix, &shots, 0).unwrap();
        let fit = fit_populations(&est, Some(&err), &t, &FitOptions::default()).unwrap();
        let (w, sw) = fit.wigner();
        assert!(sw > 0.0 && sw < 0.05);
        assert!((w - wigner_point(&[0.0, 0.7, 0.3])).abs() <= 4.0 * sw + 1e-3);
    }

    #[test]
    fn exact_pipeline_matches_analytic() {
        let b = builder(&PhysicalParams::default().decoherence_free());
        let alphas = square_grid(1.0, 3).unwrap();
        let cfg = TomographyConfig::default();
        let map = wigner_map(&b, StateTarget::SingleMagnon, &alphas, &cfg, PopulationSource::Exact, None).unwrap();
        assert!(map.max_reference_deviation() <= 1e-6, "{}", map.max_reference_deviation());
    }

    #[test]
    fn vacuum_regression_matches_analytic() {
        let b = builder(&PhysicalParams::default().decoherence_free());
        let alphas = square_grid(1.0, 3).unwrap();
        let map = wigner_map(
            &b,
            StateTarget::Vacuum,
            &alphas,
            &TomographyConfig::default(),
            PopulationSource::Regression,
            None,
        )
        .unwrap();
        let rho0 = fock(0, 4);
        for (a, w) in alphas.iter().zip(&map.values) {
            assert!((w - wigner_analytic(&rho0, *a).unwrap()).abs() <= 0.01);
        }
    }

    #[test]
    fn single_magnon_origin_is_negative() {
        let b = builder(&PhysicalParams::default());
        let map = wigner_map(
            &b,
            StateTarget::SingleMagnon,
            &[C64::new(0.0, 0.0)],
            &TomographyConfig::default(),
            PopulationSource::Regression,
            Some(&ShotModel::default()),
        )
        .unwrap();
        assert!(map.values[0] <= -0.2, "{}", map.values[0]);
        assert!(map.values[0].abs() <= 2.0 / PI + 3.0 * map.std_errors[0]);
    }

    #[test]
    fn noiseless_round_trip() {
        let alphas = square_grid(1.0, 5).unwrap();
        let cfg = TomographyConfig::default();
        for (rho, target) in
            [(fock(1, 4), StateTarget::SingleMagnon), (plus_state(4), StateTarget::superposition(C64::new(1.0, 0.0)))]
        {
            let mut map = WignerMap::analytic(&rho, &alphas).unwrap();
            map.target = Some(target);
            let rec = reconstruct_density_matrix(&map, &cfg).unwrap();
            assert!(rec.fidelity.unwrap() >= 0.99);
            assert!(trace_distance(&rec.rho, &rho).unwrap() <= 1e-6);
            rec.rho.validate().unwrap();
        }
        let rec = reconstruct_density_matrix(&WignerMap::analytic(&plus_state(4), &alphas).unwrap(), &cfg).unwrap();
        assert_abs_diff_eq!(rec.rho.matrix()[(0, 1)].re, 0.5, epsilon = 0.01);
    }

    #[test]
    fn too_few_points_is_uninformative() {
        let alphas = square_grid(1.0, 3).unwrap();
        let map = WignerMap::analytic(&fock(1, 4), &alphas).unwrap();
        let err = reconstruct_density_matrix(&map, &TomographyConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Informativeness(_)));
        let cfg = TomographyConfig { reconstruction_dim: 3, ..TomographyConfig::default() };
        let map = WignerMap::analytic(&fock(1, 4), &[C64::new(0.0, 0.0); 9]).unwrap();
        assert!(matches!(reconstruct_density_matrix(&map, &cfg).unwrap_err(), Error::Informativeness(_)));
    }

    #[test]
    fn fidelity_examples() {
        let one = [ZERO, C64::new(1.0, 0.0)];
        assert_abs_diff_eq!(fidelity(&fock(1, 2), &one).unwrap(), 1.0, epsilon = 1e-15);
        let mixed = DensityMatrix::magnon(ComplexMatrix::identity(2, 2) * C64::new(0.5, 0.0)).unwrap();
        assert_abs_diff_eq!(fidelity(&mixed, &[C64::new(1.0, 0.0), ZERO]).unwrap(), 0.5f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(fidelity(&mixed, &[C64::new(2.0, 0.0), ZERO]), Err(Error::InvalidState(_))));
        assert!(matches!(fidelity(&mixed, &[C64::new(1.0, 0.0)]), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn map_serialization_round_trip() {
        let map = WignerMap::analytic(&fock(1, 3), &square_grid(1.0, 2).unwrap()).unwrap();
        let back = WignerMap::from_json(&map.to_json().unwrap()).unwrap();
        assert_eq!(back, map);
        assert!(map.to_csv().starts_with("alpha_re,alpha_im,wigner,std_error,reference"));
        assert_eq!(map.to_csv().lines().count(), 5);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]
        #[test]
        fn simplex_projection_is_exact(v in proptest::collection::vec(-2.0f64..2.0, 1..12)) {
            let p = project_to_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn fitted_populations_on_simplex(w in proptest::collection::vec(0.0f64..1.0, 5), noise in 0.0f64..0.05, background in any::<bool>()) {
            let t = free_templates(4);
            let total: f64 = w.iter().sum::<f64>().max(1e-9);
            let curve: Vec<f64> = (0..t.tau_grid.len())
                .map(|k| (0..5).map(|n| w[n] / total * t.templates[n][k]).sum::<f64>() + noise * ((k as f64) * 0.7).sin())
                .collect();
            let fit = fit_populations(&curve, None, &t, &FitOptions { background, ..FitOptions::default() }).unwrap();
            prop_assert!(fit.populations.iter().all(|&x| x >= 0.0));
            prop_assert!(fit.background >= 0.0);
            prop_assert!((fit.populations.iter().sum::<f64>() + fit.background - 1.0).abs() <= 1e-12);
            let (wv, _) = fit.wigner();
            prop_assert!(wv.abs() <= 2.0 / PI + 1e-12);
        }

        #[test]
        fn reconstruction_idempotent(a in 0.0f64..1.0, b in 0.0f64..1.0, c in -0.5f64..0.5, ph in 0.0f64..std::f64::consts::TAU) {
            // random 3-level state with a mixed component
            let v = [C64::new(a, 0.0), C64::from_polar(b, ph), C64::new(c, 0.2)];
            let norm: f64 = v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            let v: Vec<C64> = v.iter().map(|x| x / norm).collect();
            let mut m = outer(&v, &v) * C64::new(0.8, 0.0);
            m[(2, 2)] += C64::new(0.2, 0.0);
            let rho = DensityMatrix::magnon(padded(&m, 4)).unwrap();
            let map = WignerMap::analytic(&rho, &square_grid(1.0, 5).unwrap()).unwrap();
            let rec = reconstruct_density_matrix(&map, &TomographyConfig::default()).unwrap();
            prop_assert!(trace_distance(&rec.rho, &rho).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn shot_noise_costs_little_fidelity() {
        let b = builder(&PhysicalParams::default().decoherence_free());
        let cfg = TomographyConfig::default();
        let grid = square_grid(1.0, 5).unwrap();
        let noiseless =
            wigner_map(&b, StateTarget::SingleMagnon, &grid, &cfg, PopulationSource::Regression, None).unwrap();
        let noisy = wigner_map(
            &b,
            StateTarget::SingleMagnon,
            &grid,
            &cfg,
            PopulationSource::Regression,
            Some(&ShotModel::default()),
        )
        .unwrap();
        let f0 = reconstruct_density_matrix(&noiseless, &cfg).unwrap().fidelity.unwrap();
        let rec = reconstruct_density_matrix(&noisy, &cfg).unwrap();
        let f1 = rec.fidelity.unwrap();
        assert!(f0 - f1 <= 0.02, "{f0} vs {f1}");
        assert_eq!(rec.bootstrap_fidelities.len(), cfg.bootstrap_resamples);
        assert!(rec.fidelity_std.unwrap() > 0.0);
        for (w, s) in noisy.values.iter().zip(&noisy.std_errors) {
            assert!(w.abs() <= 2.0 / PI + 3.0 * s + 1e-12);
        }
    }

    #[test]
    fn superposition_map_conjugation_symmetry() {
        let b = crate::experiments::calibrate_superposition(&builder(&PhysicalParams::default().decoherence_free()))
            .unwrap();
        let grid = vec![C64::new(0.5, 0.5), C64::new(0.5, -0.5), C64::new(0.5, 0.0), C64::new(-0.5, 0.0)];
        let map = wigner_map(
            &b,
            StateTarget::superposition(C64::new(1.0, 0.0)),
            &grid,
            &TomographyConfig::default(),
            PopulationSource::Exact,
            None,
        )
        .unwrap();
        assert!((map.values[0] - map.values[1]).abs() <= 1e-2);
        assert!((map.values[2] - map.values[3]).abs() >= 0.3);
    }
}
