//! Master-equation propagation of pulse schedules.
//!
//! dρ/dt = −i[H(t), ρ] + Σ_k (L_k ρ L_k† − ½{L_k†L_k, ρ})
//!
//! Between schedule breakpoints the engine moves into the frame of the active
//! drive carrier, where rectangular segments give a constant generator. Those
//! intervals are advanced with a Taylor-series action of the exact
//! exponential (substeps with h‖𝓛‖ ≤ θ, truncated at machine precision).
//! Shaped envelopes and multi-carrier intervals fall back to fixed-step RK4.
//!
//! Every term of the generator conserves the coherence order N_j − N_k of a
//! matrix element except the drives, so readout windows without drives can be
//! propagated on the order-zero sector alone ([`SectorPropagator`]).

use std::f64::consts::PI;

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    drive_offset_mhz, static_hamiltonian, ControlField, ExchangeModel, ModelOperators, PhysicalParams, GHZ, MHZ,
};
use crate::operators::{
    fock_annihilation, hermiticity_residual, matrix_exp, matrix_serde, number_operator, qutrit_operators,
    ComplexMatrix, Factor, HilbertLayout, C64, I, ONE, ZERO,
};
use crate::schedule::{Channel, PulseSchedule, PulseSegment};

pub const HERMITICITY_TOL: f64 = 1e-9;
pub const TRACE_TOL: f64 = 1e-9;
pub const POSITIVITY_TOL: f64 = 1e-8;
/// Largest trace error tolerated (and silently removed) during propagation.
pub const TRACE_DRIFT_LIMIT: f64 = 1e-7;
const TIME_EPS: f64 = 1e-9;

/// Density matrix on an ordered list of tensor factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix {
    factors: Vec<(Factor, usize)>,
    #[serde(with = "matrix_serde")]
    matrix: ComplexMatrix,
}

/// Deviations of a state from the density-matrix axioms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Physicality {
    pub trace_error: f64,
    pub hermiticity: f64,
    pub min_eigenvalue: f64,
}

impl Physicality {
    pub fn is_valid(&self) -> bool {
        self.trace_error <= TRACE_TOL && self.hermiticity <= HERMITICITY_TOL && self.min_eigenvalue >= -POSITIVITY_TOL
    }
}

impl DensityMatrix {
    pub fn new(factors: Vec<(Factor, usize)>, matrix: ComplexMatrix) -> Result<Self> {
        let rho = Self::unchecked(factors, matrix)?;
        rho.validate()?;
        Ok(rho)
    }

    fn unchecked(factors: Vec<(Factor, usize)>, matrix: ComplexMatrix) -> Result<Self> {
        let dim: usize = factors.iter().map(|f| f.1).product();
        if factors.is_empty() || matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::InvalidDimension(format!(
                "factor dimensions multiply to {dim} but the matrix is {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(Self { factors, matrix })
    }

    /// Magnon-only state.
    pub fn magnon(matrix: ComplexMatrix) -> Result<Self> {
        let d = matrix.nrows();
        Self::new(vec![(Factor::Magnon, d)], matrix)
    }

    /// |ψ⟩⟨ψ| for a normalized ψ.
    pub fn pure(factors: Vec<(Factor, usize)>, psi: &[C64]) -> Result<Self> {
        let norm: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidState(format!("state vector norm² is {norm}, expected 1")));
        }
        let v = DVector::from_column_slice(psi);
        Self::new(factors, &v * v.adjoint())
    }

    pub fn basis(layout: &HilbertLayout, q: usize, n: usize, c: usize) -> Self {
        let mut m = ComplexMatrix::zeros(layout.dim(), layout.dim());
        let i = layout.index(q, n, c);
        m[(i, i)] = ONE;
        Self { factors: layout.factors(), matrix: m }
    }

    pub fn ground(layout: &HilbertLayout) -> Self {
        Self::basis(layout, 0, 0, 0)
    }

    pub fn factors(&self) -> &[(Factor, usize)] {
        &self.factors
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The Hilbert layout, for states on qutrit ⊗ magnon (⊗ cavity).
    pub fn layout(&self) -> Result<HilbertLayout> {
        match self.factors.as_slice() {
            [(Factor::Qutrit, 3), (Factor::Magnon, m)] => HilbertLayout::new(*m, 0),
            [(Factor::Qutrit, 3), (Factor::Magnon, m), (Factor::Cavity, c)] => HilbertLayout::new(*m, *c),
            _ => Err(Error::InvalidSelector(format!("state on {:?} is not a full system state", self.factors))),
        }
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn purity(&self) -> f64 {
        // Tr(ρ²) = Σ |ρ_ij|² for Hermitian ρ
        self.matrix.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|z| z.re).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let h = (&self.matrix + self.matrix.adjoint()) * C64::new(0.5, 0.0);
        SymmetricEigen::new(h).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn physicality(&self) -> Physicality {
        Physicality {
            trace_error: (self.matrix.diagonal().iter().sum::<C64>() - ONE).norm(),
            hermiticity: hermiticity_residual(&self.matrix),
            min_eigenvalue: self.min_eigenvalue(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ph = self.physicality();
        if ph.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidState(format!(
                "trace error {:.2e}, hermiticity residual {:.2e}, min eigenvalue {:.2e}",
                ph.trace_error, ph.hermiticity, ph.min_eigenvalue
            )))
        }
    }

    /// ρ_A ⊗ ρ_B.
    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        let mut factors = self.factors.clone();
        factors.extend_from_slice(&other.factors);
        Self { factors, matrix: self.matrix.kronecker(&other.matrix) }
    }

    /// Same full-system state with the magnon factor resized. Shrinking is
    /// refused if it would drop more than 1e-12 of weight.
    pub fn with_magnon_dim(&self, magnon_dim: usize) -> Result<Self> {
        let old = self.layout()?;
        let new = HilbertLayout::new(magnon_dim, old.cavity_dim)?;
        let mut m = ComplexMatrix::zeros(new.dim(), new.dim());
        let mut dropped = 0.0;
        for j in 0..old.dim() {
            let (qj, nj, cj) = old.decompose(j);
            for i in 0..old.dim() {
                let (qi, ni, ci) = old.decompose(i);
                let v = self.matrix[(i, j)];
                if ni < magnon_dim && nj < magnon_dim {
                    m[(new.index(qi, ni, ci), new.index(qj, nj, cj))] = v;
                } else if i == j {
                    dropped += v.re;
                }
            }
        }
        if dropped > 1e-12 {
            return Err(Error::Truncation(format!(
                "resizing the magnon space to {magnon_dim} would drop population {dropped:.2e}"
            )));
        }
        Ok(Self { factors: new.factors(), matrix: m })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: DensityMatrix = serde_json::from_str(s)?;
        Self::new(raw.factors, raw.matrix)
    }

    /// Real part then imaginary part, each as a block of comma-separated rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (label, part) in [("re", 0), ("im", 1)] {
            out.push_str(&format!("# {label}\n"));
            for i in 0..self.dim() {
                let row: Vec<String> = (0..self.dim())
                    .map(|j| {
                        let z = self.matrix[(i, j)];
                        format!("{}", if part == 0 { z.re } else { z.im })
                    })
                    .collect();
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        out
    }
}

/// Tr(ρ·obs) for a Hermitian observable.
pub fn expectation(rho: &DensityMatrix, obs: &ComplexMatrix) -> Result<f64> {
    if obs.nrows() != rho.dim() || obs.ncols() != rho.dim() {
        return Err(Error::InvalidObservable(format!(
            "observable is {}x{}, state dimension {}",
            obs.nrows(),
            obs.ncols(),
            rho.dim()
        )));
    }
    let scale = 1.0 + obs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if hermiticity_residual(obs) > 1e-10 * scale {
        return Err(Error::InvalidObservable("observable is not Hermitian".into()));
    }
    let m = rho.matrix();
    let mut acc = ZERO;
    for i in 0..rho.dim() {
        for j in 0..rho.dim() {
            acc += m[(i, j)] * obs[(j, i)];
        }
    }
    if acc.im.abs() > 1e-10 * scale {
        return Err(Error::InvalidObservable(format!("expectation has imaginary part {:.2e}", acc.im)));
    }
    Ok(acc.re)
}

/// Reduced state on the factors listed in `keep` (kept in their original order).
pub fn partial_trace(rho: &DensityMatrix, keep: &[Factor]) -> Result<DensityMatrix> {
    if keep.is_empty() {
        return Err(Error::InvalidSelector("empty factor selector".into()));
    }
    for k in keep {
        if !rho.factors.iter().any(|f| f.0 == *k) {
            return Err(Error::InvalidSelector(format!("factor {k:?} not present in {:?}", rho.factors)));
        }
    }
    let dims: Vec<usize> = rho.factors.iter().map(|f| f.1).collect();
    let kept: Vec<bool> = rho.factors.iter().map(|f| keep.contains(&f.0)).collect();
    let kept_factors: Vec<(Factor, usize)> =
        rho.factors.iter().zip(&kept).filter(|(_, k)| **k).map(|(f, _)| *f).collect();
    let kd: usize = kept_factors.iter().map(|f| f.1).product();
    let td = rho.dim() / kd;

    // split every basis index into (kept index, traced index)
    let split = |mut i: usize| {
        let (mut ki, mut ti, mut kstride, mut tstride) = (0, 0, 1, 1);
        for (d, k) in dims.iter().zip(&kept).rev() {
            let digit = i % d;
            i /= d;
            if *k {
                ki += digit * kstride;
                kstride *= d;
            } else {
                ti += digit * tstride;
                tstride *= d;
            }
        }
        (ki, ti)
    };
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); td];
    for i in 0..rho.dim() {
        let (ki, ti) = split(i);
        groups[ti].push((i, ki));
    }
    let mut out = ComplexMatrix::zeros(kd, kd);
    for g in &groups {
        for &(i, ki) in g {
            for &(j, kj) in g {
                out[(ki, kj)] += rho.matrix[(i, j)];
            }
        }
    }
    Ok(DensityMatrix { factors: kept_factors, matrix: out })
}

fn qutrit_index(rho: &DensityMatrix) -> Result<usize> {
    rho.factors
        .iter()
        .position(|f| f.0 == Factor::Qutrit)
        .ok_or_else(|| Error::InvalidSelector("state has no qutrit factor".into()))
}

/// Combined population of the qutrit e and f levels.
pub fn readout_qubit_excited(rho: &DensityMatrix) -> Result<f64> {
    qutrit_index(rho)?;
    let q = partial_trace(rho, &[Factor::Qutrit])?;
    Ok((q.matrix[(1, 1)].re + q.matrix[(2, 2)].re).clamp(0.0, 1.0))
}

/// Column-stochastic 2×2 assignment matrix: `m[measured][true]`.
pub type AssignmentMatrix = [[f64; 2]; 2];

pub fn validate_assignment(m: &AssignmentMatrix) -> Result<()> {
    for col in 0..2 {
        let s = m[0][col] + m[1][col];
        if (s - 1.0).abs() > 1e-12 || m[0][col] < 0.0 || m[1][col] < 0.0 {
            return Err(Error::InvalidParameter {
                key: "assignment_matrix",
                reason: format!("column {col} is not a probability vector"),
            });
        }
    }
    Ok(())
}

/// Excited-state probability as reported by a detector with assignment errors.
pub fn apply_assignment(p_excited: f64, m: &AssignmentMatrix) -> f64 {
    (m[1][0] * (1.0 - p_excited) + m[1][1] * p_excited).clamp(0.0, 1.0)
}

pub fn readout_qubit_excited_with(rho: &DensityMatrix, m: &AssignmentMatrix) -> Result<f64> {
    validate_assignment(m)?;
    Ok(apply_assignment(readout_qubit_excited(rho)?, m))
}

/// Converts a magnon-only state from the common frame (rotating at ω_q) to
/// the magnon's own frame at time `t_ns`.
pub fn to_magnon_frame(rho_m: &DensityMatrix, p: &PhysicalParams, t_ns: f64) -> Result<DensityMatrix> {
    if rho_m.factors.len() != 1 || rho_m.factors[0].0 != Factor::Magnon {
        return Err(Error::InvalidSelector("expected a magnon-only state".into()));
    }
    let w = (p.magnon_idle_freq_ghz - p.qubit_freq_ghz) * GHZ * t_ns;
    let d = rho_m.dim();
    let m = ComplexMatrix::from_fn(d, d, |n, k| rho_m.matrix[(n, k)] * C64::from_polar(1.0, w * (n as f64 - k as f64)));
    Ok(DensityMatrix { factors: rho_m.factors.clone(), matrix: m })
}

/// A jump operator L = √rate · operator.
#[derive(Debug, Clone)]
pub struct CollapseOp {
    pub name: &'static str,
    /// Rate in 1/ns.
    pub rate: f64,
    pub operator: ComplexMatrix,
}

#[derive(Debug, Clone, Default)]
pub struct CollapseSet {
    pub ops: Vec<CollapseOp>,
}

impl CollapseSet {
    pub fn new(p: &PhysicalParams, layout: &HilbertLayout) -> Result<Self> {
        let mut ops = Vec::new();
        if !p.dissipation {
            return Ok(Self { ops });
        }
        let q = qutrit_operators();
        let t1 = p.t1_qubit_ns();
        let nq = p.thermal_qubit_nbar;
        let mut push = |name, rate: f64, operator: ComplexMatrix| {
            if rate > 0.0 {
                ops.push(CollapseOp { name, rate, operator });
            }
        };
        push("qubit_relax_eg", (1.0 + nq) / t1, layout.embed_qutrit(&q.lower_ge));
        push("qubit_relax_fe", 2.0 * (1.0 + nq) / t1, layout.embed_qutrit(&q.lower_ef));
        push("qubit_excite_ge", nq / t1, layout.embed_qutrit(&q.lower_ge.adjoint()));
        push("qubit_excite_ef", 2.0 * nq / t1, layout.embed_qutrit(&q.lower_ef.adjoint()));
        let mut deph = ComplexMatrix::zeros(3, 3);
        deph[(1, 1)] = ONE;
        deph[(2, 2)] = C64::new(2.0, 0.0);
        push("qubit_dephasing", 2.0 / p.t_phi_qubit_ns(), layout.embed_qutrit(&deph));

        let b = layout.embed_magnon(&fock_annihilation(layout.magnon_dim)?);
        let nm = p.thermal_magnon_nbar;
        push("magnon_decay", (1.0 + nm) / p.t1_magnon_ns, b.clone());
        push("magnon_excite", nm / p.t1_magnon_ns, b.adjoint());
        if let Some(tphi) = p.t_phi_magnon_ns {
            push("magnon_dephasing", 2.0 / tphi, layout.embed_magnon(&number_operator(layout.magnon_dim)));
        }
        if layout.has_cavity() {
            let kappa = p.cavity_decay_mhz * MHZ;
            push("cavity_decay", kappa, layout.embed_cavity(&fock_annihilation(layout.cavity_dim)?)?);
        }
        Ok(Self { ops })
    }

    fn jumps(&self) -> Vec<Csr> {
        self.ops.iter().map(|o| Csr::from_dense(&(&o.operator * C64::new(o.rate.sqrt(), 0.0)))).collect()
    }

    /// −(i/2) Σ L†L.
    fn anti_hermitian_part(&self, dim: usize) -> ComplexMatrix {
        let mut acc = ComplexMatrix::zeros(dim, dim);
        for o in &self.ops {
            acc += o.operator.adjoint() * &o.operator * C64::new(o.rate, 0.0);
        }
        acc * C64::new(0.0, -0.5)
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
struct Csr {
    n: usize,
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<C64>,
}

impl Csr {
    fn from_dense(m: &ComplexMatrix) -> Self {
        let n = m.nrows();
        let mut ptr = Vec::with_capacity(n + 1);
        let (mut idx, mut val) = (Vec::new(), Vec::new());
        ptr.push(0);
        for i in 0..n {
            for j in 0..n {
                let v = m[(i, j)];
                if v != ZERO {
                    idx.push(j);
                    val.push(v);
                }
            }
            ptr.push(idx.len());
        }
        Self { n, ptr, idx, val }
    }

    /// out = A·x.
    fn mul_into(&self, x: &ComplexMatrix, out: &mut ComplexMatrix) {
        let n = self.n;
        let cols = x.ncols();
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        for c in 0..cols {
            let xc = &xs[c * n..(c + 1) * n];
            let oc = &mut os[c * n..(c + 1) * n];
            for (i, o) in oc.iter_mut().enumerate() {
                let mut acc = ZERO;
                for k in self.ptr[i]..self.ptr[i + 1] {
                    acc += self.val[k] * xc[self.idx[k]];
                }
                *o = acc;
            }
        }
    }

    fn mul(&self, x: &ComplexMatrix) -> ComplexMatrix {
        let mut out = ComplexMatrix::zeros(self.n, x.ncols());
        self.mul_into(x, &mut out);
        out
    }

    /// Upper bound on the spectral norm, √(‖A‖₁‖A‖∞).
    fn norm_bound(&self) -> f64 {
        let mut rows = vec![0.0; self.n];
        let mut cols = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.ptr[i]..self.ptr[i + 1] {
                let a = self.val[k].norm();
                rows[i] += a;
                cols[self.idx[k]] += a;
            }
        }
        let r = rows.iter().copied().fold(0.0, f64::max);
        let c = cols.iter().copied().fold(0.0, f64::max);
        (r * c).sqrt()
    }
}

/// Liouvillian for a fixed Hamiltonian.
struct Generator<'a> {
    heff: Csr,
    jumps: &'a [Csr],
    norm: f64,
}

impl<'a> Generator<'a> {
    fn new(h: &ComplexMatrix, anti: &ComplexMatrix, jumps: &'a [Csr]) -> Self {
        let n = h.nrows();
        // a multiple of the identity drops out of the commutator; centring the
        // diagonal tightens the norm bound
        let (lo, hi) =
            h.diagonal().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z.re), hi.max(z.re)));
        let shift = if n > 0 { 0.5 * (lo + hi) } else { 0.0 };
        let mut heff = h + anti;
        for i in 0..n {
            heff[(i, i)] -= C64::new(shift, 0.0);
        }
        let heff = Csr::from_dense(&heff);
        let norm = 2.0 * heff.norm_bound() + jumps.iter().map(|l| l.norm_bound().powi(2)).sum::<f64>();
        Self { heff, jumps, norm }
    }

    /// 𝓛(ρ) for Hermitian ρ (the result is Hermitian as well).
    fn apply_hermitian(&self, rho: &ComplexMatrix) -> ComplexMatrix {
        let x = self.heff.mul(rho) * (-I);
        let mut out = &x + x.adjoint();
        for l in self.jumps {
            let y = l.mul(rho);
            out += l.mul(&y.adjoint());
        }
        out
    }

    /// 𝓛(X) for arbitrary X.
    fn apply_general(&self, x: &ComplexMatrix) -> ComplexMatrix {
        let a = self.heff.mul(x) * (-I);
        let b = self.heff.mul(&x.adjoint()).adjoint() * I;
        let mut out = a + b;
        for l in self.jumps {
            let y = l.mul(x);
            out += l.mul(&y.adjoint()).adjoint();
        }
        out
    }
}

fn hermitize(m: &mut ComplexMatrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let a = 0.5 * (m[(i, j)] + m[(j, i)].conj());
            m[(i, j)] = a;
            m[(j, i)] = a.conj();
        }
        m[(j, j)].im = 0.0;
    }
}

/// ρ ← exp(t𝓛)ρ by truncated Taylor series on substeps with h‖𝓛‖ ≤ θ.
fn taylor_advance(g: &Generator, rho: &mut ComplexMatrix, t: f64, theta: f64) {
    if t <= 0.0 {
        return;
    }
    let steps = (t * g.norm / theta).ceil().max(1.0) as usize;
    let h = t / steps as f64;
    for _ in 0..steps {
        let mut term = rho.clone();
        for k in 1..=60 {
            term = g.apply_hermitian(&term) * C64::new(h / k as f64, 0.0);
            *rho += &term;
            if term.norm() <= 1e-17 * rho.norm() {
                break;
            }
        }
        hermitize(rho);
    }
}

/// Options of the propagation engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveOptions {
    /// RK4 step for shaped or multi-carrier intervals.
    pub rk4_step_ns: f64,
    /// Taylor substep bound h‖𝓛‖ for constant intervals.
    pub taylor_theta: f64,
    /// Replace qubit XY pulses by instantaneous ideal rotations |g⟩ ↔ |+⟩
    /// applied at the end of each pulse.
    pub ideal_qubit_rotations: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { rk4_step_ns: 0.05, taylor_theta: 1.0, ideal_qubit_rotations: false }
    }
}

/// States at the requested sample times, plus the largest trace drift removed.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DensityMatrix>,
    pub max_trace_drift: f64,
}

/// Reusable propagation context for one parameter set and layout.
pub struct Engine {
    params: PhysicalParams,
    ops: ModelOperators,
    excitations: Vec<f64>,
    anti: ComplexMatrix,
    jumps: Vec<Csr>,
    raising: [Option<ComplexMatrix>; 3],
    pub options: EvolveOptions,
}

fn channel_slot(c: Channel) -> usize {
    match c {
        Channel::QubitXy => 0,
        Channel::AtControl => 1,
        Channel::MagnonDrive => 2,
    }
}

impl Engine {
    pub fn new(p: &PhysicalParams, layout: &HilbertLayout, options: EvolveOptions) -> Result<Self> {
        p.validate()?;
        if !(options.rk4_step_ns > 0.0 && options.taylor_theta > 0.0) {
            return Err(Error::InvalidParameter { key: "evolve_options", reason: "steps must be > 0".into() });
        }
        let ops = ModelOperators::new(*layout)?;
        let collapse = CollapseSet::new(p, layout)?;
        let raising = [
            ops.drive_raising(Channel::QubitXy),
            ops.drive_raising(Channel::AtControl),
            ops.drive_raising(Channel::MagnonDrive),
        ];
        Ok(Self {
            params: p.clone(),
            excitations: ops.excitations.clone(),
            anti: collapse.anti_hermitian_part(layout.dim()),
            jumps: collapse.jumps(),
            ops,
            raising,
            options,
        })
    }

    pub fn layout(&self) -> HilbertLayout {
        self.ops.layout
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    fn carrier_rad(&self, seg: &PulseSegment) -> f64 {
        drive_offset_mhz(&self.params, &seg.drive_at(seg.start_ns)) * MHZ
    }

    fn control_field(&self, active: &[&PulseSegment], t: f64) -> Result<ControlField> {
        let mut at = active.iter().filter(|s| s.channel == Channel::AtControl);
        let field = match at.next() {
            Some(s) => ControlField::from_drive(&s.drive_at(t)),
            None => ControlField::off(&self.params),
        };
        if at.next().is_some() {
            return Err(Error::Assembly("more than one active at_control segment".into()));
        }
        Ok(field)
    }

    /// Hamiltonian in the frame rotating at `delta` (rad/ns) per excitation.
    fn frame_hamiltonian(&self, active: &[&PulseSegment], t: f64, delta: f64) -> Result<ComplexMatrix> {
        let field = self.control_field(active, t)?;
        let mut h = static_hamiltonian(&self.params, &self.ops, &field)?;
        for (i, n) in self.excitations.iter().enumerate() {
            h[(i, i)] -= C64::new(delta * n, 0.0);
        }
        for s in active {
            let Some(raise) = &self.raising[channel_slot(s.channel)] else { continue };
            let d = s.drive_at(t);
            if d.amplitude_mhz == 0.0 {
                continue;
            }
            let phase = d.phase_rad - (self.carrier_rad(s) - delta) * t;
            let coef = C64::from_polar(d.amplitude_mhz / 2.0 * MHZ, phase);
            let n = h.nrows();
            for j in 0..n {
                for i in 0..n {
                    let v = raise[(i, j)];
                    if v != ZERO {
                        h[(i, j)] += v * coef;
                        h[(j, i)] += (v * coef).conj();
                    }
                }
            }
        }
        Ok(h)
    }

    fn frame_phase(&self, rho: &mut ComplexMatrix, angle: f64) {
        if angle == 0.0 {
            return;
        }
        let n = rho.nrows();
        for j in 0..n {
            for i in 0..n {
                let dn = self.excitations[i] - self.excitations[j];
                if dn != 0.0 {
                    rho[(i, j)] *= C64::from_polar(1.0, angle * dn);
                }
            }
        }
    }

    /// Instantaneous rotation standing in for an XY segment ending at `t`.
    fn ideal_rotation(&self, seg: &PulseSegment, field: &ControlField, t: f64) -> Result<ComplexMatrix> {
        let q = field.coupled_state(ExchangeModel::DressedQubit);
        let angle = match seg.nominal_angle_rad {
            Some(a) => a,
            None => 2.0 * PI * seg.amplitude_mhz * 1e-3 * seg.envelope.mean(seg.duration_ns) * seg.duration_ns,
        };
        let phase = seg.phase_rad - self.carrier_rad(seg) * t;
        let mut gen = ComplexMatrix::zeros(3, 3);
        let e = C64::from_polar(1.0, phase);
        for k in 1..3 {
            gen[(k, 0)] = e * q[k];
            gen[(0, k)] = (e * q[k]).conj();
        }
        let u = matrix_exp(&(gen * (-I * (angle / 2.0))))?;
        Ok(self.ops.layout.embed_qutrit(&u))
    }

    /// Evolves `rho0` from `t_start` and returns the states at `sample_times`
    /// (any order, each within [t_start, total_duration]).
    pub fn evolve_between(
        &self,
        sched: &PulseSchedule,
        t_start: f64,
        rho0: &DensityMatrix,
        sample_times: &[f64],
    ) -> Result<Trajectory> {
        if rho0.factors() != self.ops.layout.factors().as_slice() {
            return Err(Error::InvalidState(format!(
                "initial state on {:?} does not match layout {:?}",
                rho0.factors(),
                self.ops.layout.factors()
            )));
        }
        rho0.validate()?;
        sched.validate()?;
        for &t in sample_times {
            if !(t >= t_start - TIME_EPS && t <= sched.total_duration_ns + TIME_EPS) {
                return Err(Error::Schedule(format!(
                    "sample time {t} outside [{t_start}, {}]",
                    sched.total_duration_ns
                )));
            }
        }
        let t_end = sample_times.iter().copied().fold(t_start, f64::max);
        let mut grid: Vec<f64> = sched.breakpoints().into_iter().filter(|&t| t > t_start && t < t_end).collect();
        grid.extend(sample_times.iter().copied());
        grid.push(t_start);
        grid.sort_by(f64::total_cmp);
        grid.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);

        let mut states: Vec<Option<DensityMatrix>> = vec![None; sample_times.len()];
        let mut rho = rho0.matrix.clone();
        let mut max_drift: f64 = 0.0;
        let record = |states: &mut Vec<Option<DensityMatrix>>, t: f64, rho: &ComplexMatrix| {
            for (k, &s) in sample_times.iter().enumerate() {
                if (s - t).abs() <= TIME_EPS {
                    states[k] = Some(DensityMatrix { factors: rho0.factors.clone(), matrix: rho.clone() });
                }
            }
        };
        record(&mut states, t_start, &rho);

        type Cached<'a> = (Vec<usize>, f64, Generator<'a>);
        let mut cached: Option<Cached> = None;
        for w in grid.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= TIME_EPS {
                continue;
            }
            let mid = 0.5 * (a + b);
            let active_idx: Vec<usize> = sched
                .segments
                .iter()
                .enumerate()
                .filter(|(_, s)| s.is_active(mid))
                .filter(|(_, s)| !(self.options.ideal_qubit_rotations && s.channel == Channel::QubitXy))
                .map(|(i, _)| i)
                .collect();
            let active: Vec<&PulseSegment> = active_idx.iter().map(|&i| &sched.segments[i]).collect();
            let carriers: Vec<f64> = active
                .iter()
                .filter(|s| self.raising[channel_slot(s.channel)].is_some() && s.amplitude_mhz != 0.0)
                .map(|s| self.carrier_rad(s))
                .collect();
            let delta = carriers
                .first()
                .copied()
                .unwrap_or((self.params.magnon_idle_freq_ghz - self.params.qubit_freq_ghz) * GHZ);
            let constant = active.iter().all(|s| s.envelope.is_constant())
                && carriers.iter().all(|c| (c - delta).abs() <= 1e-15 * (1.0 + delta.abs()));

            self.frame_phase(&mut rho, delta * a);
            if constant {
                let reuse = matches!(&cached, Some((idx, d, _)) if *idx == active_idx && *d == delta);
                if !reuse {
                    let h = self.frame_hamiltonian(&active, mid, delta)?;
                    cached = Some((active_idx.clone(), delta, Generator::new(&h, &self.anti, &self.jumps)));
                }
                let g = &cached.as_ref().expect("generator cached above").2;
                taylor_advance(g, &mut rho, b - a, self.options.taylor_theta);
            } else {
                self.rk4_advance(&active, &mut rho, a, b, delta)?;
            }
            self.frame_phase(&mut rho, -delta * b);

            let tr: f64 = rho.diagonal().iter().map(|z| z.re).sum();
            let drift = (tr - 1.0).abs();
            if drift > TRACE_DRIFT_LIMIT {
                return Err(Error::IntegratorAccuracy(format!(
                    "trace drift {drift:.2e} over [{a}, {b}] ns; reduce rk4_step_ns or taylor_theta"
                )));
            }
            max_drift = max_drift.max(drift);
            rho /= C64::new(tr, 0.0);

            if self.options.ideal_qubit_rotations {
                for s in sched.segments.iter().filter(|s| s.channel == Channel::QubitXy) {
                    if (s.end_ns() - b).abs() <= TIME_EPS {
                        let all_active: Vec<&PulseSegment> = sched.active_segments(mid).collect();
                        let field = self.control_field(&all_active, mid)?;
                        let u = self.ideal_rotation(s, &field, b)?;
                        rho = &u * rho * u.adjoint();
                        hermitize(&mut rho);
                    }
                }
            }
            record(&mut states, b, &rho);
        }

        let states = states
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::Schedule("sample time not reached".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory { times: sample_times.to_vec(), states, max_trace_drift: max_drift })
    }

    /// Stationary state under time-independent drives sharing one carrier,
    /// expressed in the frame of that carrier. Needs dissipation for
    /// uniqueness.
    pub fn steady_state(&self, segments: &[PulseSegment]) -> Result<DensityMatrix> {
        if self.jumps.is_empty() {
            return Err(Error::InvalidParameter {
                key: "dissipation",
                reason: "a steady state needs at least one decay channel".into(),
            });
        }
        let active: Vec<&PulseSegment> = segments.iter().collect();
        let carriers: Vec<f64> = active
            .iter()
            .filter(|s| self.raising[channel_slot(s.channel)].is_some())
            .map(|s| self.carrier_rad(s))
            .collect();
        let delta = carriers.first().copied().unwrap_or(0.0);
        if carriers.iter().any(|c| (c - delta).abs() > 1e-12) || active.iter().any(|s| !s.envelope.is_constant()) {
            return Err(Error::Schedule("steady state needs constant drives on one carrier".into()));
        }
        let h = self.frame_hamiltonian(&active, 0.0, delta)?;
        let g = Generator::new(&h, &self.anti, &self.jumps);
        let d = h.nrows();
        let n = d * d;
        let mut lv = ComplexMatrix::zeros(n, n);
        let mut e = ComplexMatrix::zeros(d, d);
        for col in 0..n {
            e[(col % d, col / d)] = ONE;
            let img = g.apply_general(&e);
            e[(col % d, col / d)] = ZERO;
            for (row, v) in img.as_slice().iter().enumerate() {
                lv[(row, col)] = *v;
            }
        }
        // replace one equation by the trace condition
        let mut rhs = DVector::zeros(n);
        for col in 0..n {
            lv[(0, col)] = if col % d == col / d { ONE } else { ZERO };
        }
        rhs[0] = ONE;
        let x = lv
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::NoSolution("singular Liouvillian: steady state not unique".into()))?;
        let mut rho = ComplexMatrix::from_column_slice(d, d, x.as_slice());
        hermitize(&mut rho);
        DensityMatrix::new(self.ops.layout.factors(), rho)
    }

    fn rk4_advance(&self, active: &[&PulseSegment], rho: &mut ComplexMatrix, a: f64, b: f64, delta: f64) -> Result<()> {
        let steps = ((b - a) / self.options.rk4_step_ns).ceil().max(1.0) as usize;
        let h = (b - a) / steps as f64;
        let gen_at = |t: f64| -> Result<Generator> {
            let ham = self.frame_hamiltonian(active, t, delta)?;
            Ok(Generator::new(&ham, &self.anti, &self.jumps))
        };
        let half = C64::new(h / 2.0, 0.0);
        let full = C64::new(h, 0.0);
        for k in 0..steps {
            let t = a + k as f64 * h;
            let g0 = gen_at(t)?;
            let gm = gen_at(t + h / 2.0)?;
            let g1 = gen_at(t + h)?;
            let k1 = g0.apply_hermitian(rho);
            let k2 = gm.apply_hermitian(&(&*rho + &k1 * half));
            let k3 = gm.apply_hermitian(&(&*rho + &k2 * half));
            let k4 = g1.apply_hermitian(&(&*rho + &k3 * full));
            *rho += (k1 + (k2 + k3) * C64::new(2.0, 0.0) + k4) * C64::new(h / 6.0, 0.0);
            hermitize(rho);
        }
        Ok(())
    }
}

/// Evolves from t = 0 with default options.
pub fn evolve(
    p: &PhysicalParams,
    layout: &HilbertLayout,
    sched: &PulseSchedule,
    rho0: &DensityMatrix,
    sample_times: &[f64],
) -> Result<Vec<DensityMatrix>> {
    Ok(evolve_with(p, layout, sched, rho0, sample_times, EvolveOptions::default())?.states)
}

pub fn evolve_with(
    p: &PhysicalParams,
    layout: &HilbertLayout,
    sched: &PulseSchedule,
    rho0: &DensityMatrix,
    sample_times: &[f64],
    options: EvolveOptions,
) -> Result<Trajectory> {
    Engine::new(p, layout, options)?.evolve_between(sched, 0.0, rho0, sample_times)
}

/// Exact propagator of the coherence-order-zero sector (elements ρ_jk with
/// N_j = N_k) over a fixed time step, for a drive-free window at a fixed AT
/// control field. This sector alone determines all populations.
#[derive(Debug, Clone)]
pub struct SectorPropagator {
    layout: HilbertLayout,
    pairs: Vec<(usize, usize)>,
    step_ns: f64,
    generator: ComplexMatrix,
    step: ComplexMatrix,
    excited: Vec<usize>,
}

impl SectorPropagator {
    pub fn new(p: &PhysicalParams, layout: &HilbertLayout, field: &ControlField, step_ns: f64) -> Result<Self> {
        if !(step_ns > 0.0) {
            return Err(Error::InvalidParameter { key: "step_ns", reason: "must be > 0".into() });
        }
        let ops = ModelOperators::new(*layout)?;
        let collapse = CollapseSet::new(p, layout)?;
        let jumps = collapse.jumps();
        let anti = collapse.anti_hermitian_part(layout.dim());
        let mut h = static_hamiltonian(p, &ops, field)?;
        let delta = (p.magnon_idle_freq_ghz - p.qubit_freq_ghz) * GHZ;
        for (i, n) in ops.excitations.iter().enumerate() {
            h[(i, i)] -= C64::new(delta * n, 0.0);
        }
        let g = Generator::new(&h, &anti, &jumps);

        let dim = layout.dim();
        let mut pairs = Vec::new();
        for j in 0..dim {
            for i in 0..dim {
                if ops.excitations[i] == ops.excitations[j] {
                    pairs.push((i, j));
                }
            }
        }
        let mut pos = vec![usize::MAX; dim * dim];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            pos[j * dim + i] = k;
        }
        let ns = pairs.len();
        let mut gen = ComplexMatrix::zeros(ns, ns);
        let mut e = ComplexMatrix::zeros(dim, dim);
        for (col, &(i, j)) in pairs.iter().enumerate() {
            e[(i, j)] = ONE;
            let img = g.apply_general(&e);
            e[(i, j)] = ZERO;
            for jj in 0..dim {
                for ii in 0..dim {
                    let v = img[(ii, jj)];
                    if v != ZERO {
                        let row = pos[jj * dim + ii];
                        if row == usize::MAX {
                            return Err(Error::Assembly("generator leaves the order-zero sector".into()));
                        }
                        gen[(row, col)] = v;
                    }
                }
            }
        }
        let step = matrix_exp(&(&gen * C64::new(step_ns, 0.0)))?;
        let excited = pairs
            .iter()
            .enumerate()
            .filter(|(_, (i, j))| i == j && layout.decompose(*i).0 > 0)
            .map(|(k, _)| k)
            .collect();
        Ok(Self { layout: *layout, pairs, step_ns, generator: gen, step, excited })
    }

    pub fn step_ns(&self) -> f64 {
        self.step_ns
    }

    pub fn sector_dim(&self) -> usize {
        self.pairs.len()
    }

    pub fn project(&self, rho: &DensityMatrix) -> Result<DVector<C64>> {
        if rho.factors() != self.layout.factors().as_slice() {
            return Err(Error::InvalidState("state does not match the propagator layout".into()));
        }
        Ok(DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&(i, j)| rho.matrix[(i, j)])))
    }

    /// Sector vector of the basis state |q, n, c⟩⟨q, n, c|.
    pub fn basis_vector(&self, q: usize, n: usize, c: usize) -> DVector<C64> {
        let i = self.layout.index(q, n, c);
        DVector::from_iterator(self.pairs.len(), self.pairs.iter().map(|&p| if p == (i, i) { ONE } else { ZERO }))
    }

    pub fn advance(&self, v: &DVector<C64>) -> DVector<C64> {
        &self.step * v
    }

    pub fn excited_population(&self, v: &DVector<C64>) -> f64 {
        self.excited.iter().map(|&k| v[k].re).sum::<f64>().clamp(0.0, 1.0)
    }

    /// P_e + P_f at t = 0, step, …, (n_points − 1)·step.
    pub fn excited_curve(&self, v0: &DVector<C64>, n_points: usize) -> Vec<f64> {
        let mut v = v0.clone();
        let mut out = Vec::with_capacity(n_points);
        for k in 0..n_points {
            if k > 0 {
                v = self.advance(&v);
            }
            out.push(self.excited_population(&v));
        }
        out
    }

    /// P_e + P_f at arbitrary ascending times (ns, from the state `v0` at 0).
    /// Increments equal to the step reuse the cached propagator.
    pub fn excited_at(&self, v0: &DVector<C64>, times: &[f64]) -> Result<Vec<f64>> {
        let mut v = v0.clone();
        let mut t = 0.0;
        let mut out = Vec::with_capacity(times.len());
        for &target in times {
            let dt = target - t;
            if dt < -TIME_EPS {
                return Err(Error::Schedule("sample times must ascend from 0".into()));
            }
            if (dt - self.step_ns).abs() <= TIME_EPS {
                v = self.advance(&v);
            } else if dt > TIME_EPS {
                v = matrix_exp(&(&self.generator * C64::new(dt, 0.0)))? * v;
            }
            t = target;
            out.push(self.excited_population(&v));
        }
        Ok(out)
    }

    /// Embeds a sector vector back into a full (block-diagonal) matrix.
    pub fn to_matrix(&self, v: &DVector<C64>) -> ComplexMatrix {
        let mut m = ComplexMatrix::zeros(self.layout.dim(), self.layout.dim());
        for (k, &(i, j)) in self.pairs.iter().enumerate() {
            m[(i, j)] = v[k];
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{coherent_state, identity, outer};
    use crate::schedule::{Envelope, Protocol, SequenceBuilder, StateTarget};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn idle(total: f64) -> PulseSchedule {
        PulseSchedule::new(vec![], total, total).unwrap()
    }

    fn resonant_params(dissipation: bool) -> PhysicalParams {
        PhysicalParams { magnon_idle_freq_ghz: 5.846, dissipation, ..PhysicalParams::default() }
    }

    fn builder() -> SequenceBuilder {
        static B: std::sync::OnceLock<SequenceBuilder> = std::sync::OnceLock::new();
        B.get_or_init(|| SequenceBuilder::new(&PhysicalParams::default(), &Protocol::default()).unwrap()).clone()
    }

    #[test]
    fn magnon_decay_one_over_e() {
        let p = PhysicalParams::default();
        let layout = HilbertLayout::two_body(3).unwrap();
        // detune the qubit far away so that only the magnon decays
        let p = PhysicalParams { effective_coupling_override_mhz: Some(0.0), ..p };
        let rho0 = DensityMatrix::basis(&layout, 0, 1, 0);
        let out = evolve(&p, &layout, &idle(128.0), &rho0, &[128.0]).unwrap();
        let m = partial_trace(&out[0], &[Factor::Magnon]).unwrap();
        assert_abs_diff_eq!(m.matrix()[(1, 1)].re, (-1.0f64).exp(), epsilon = 1e-3);
    }

    #[test]
    fn ground_state_is_stationary() {
        let p = PhysicalParams::default();
        let layout = HilbertLayout::two_body(4).unwrap();
        let rho0 = DensityMatrix::ground(&layout);
        let out = evolve(&p, &layout, &idle(300.0), &rho0, &[0.0, 150.0, 300.0]).unwrap();
        for s in out {
            assert!(crate::operators::max_abs_diff(s.matrix(), rho0.matrix()) < 1e-14);
        }
    }

    #[test]
    fn vacuum_rabi_closed_form() {
        let p = resonant_params(false);
        let layout = HilbertLayout::two_body(3).unwrap();
        let rho0 = DensityMatrix::basis(&layout, 1, 0, 0);
        let g = 5.55e-3;
        let times: Vec<f64> = (0..=30).map(|k| k as f64 * 3.0).collect();
        let out = evolve(&p, &layout, &idle(90.0), &rho0, &times).unwrap();
        for (t, s) in times.iter().zip(&out) {
            let pe = readout_qubit_excited(s).unwrap();
            assert_abs_diff_eq!(pe, (2.0 * PI * g * t).cos().powi(2), epsilon = 1e-9);
        }
        // first zero of cos²(2πgt)
        assert_abs_diff_eq!(1.0 / (4.0 * g), 45.045, epsilon = 1e-3);
    }

    #[test]
    fn ramsey_decay_gives_t2() {
        let p = PhysicalParams { effective_coupling_override_mhz: Some(0.0), ..PhysicalParams::default() };
        let layout = HilbertLayout::two_body(2).unwrap();
        let mut psi = vec![ZERO; layout.dim()];
        psi[layout.index(0, 0, 0)] = C64::new(0.5f64.sqrt(), 0.0);
        psi[layout.index(1, 0, 0)] = C64::new(0.5f64.sqrt(), 0.0);
        let rho0 = DensityMatrix::pure(layout.factors(), &psi).unwrap();
        let times: Vec<f64> = (0..=8).map(|k| k as f64 * 500.0).collect();
        let out = evolve(&p, &layout, &idle(4000.0), &rho0, &times).unwrap();
        let (ig, ie) = (layout.index(0, 0, 0), layout.index(1, 0, 0));
        // least-squares slope of ln|ρ_ge|
        let ys: Vec<f64> = out.iter().map(|s| s.matrix()[(ig, ie)].norm().ln()).collect();
        let n = times.len() as f64;
        let (mx, my) = (times.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let sxy: f64 = times.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = times.iter().map(|x| (x - mx).powi(2)).sum();
        let t2 = -sxx / sxy;
        let expect = 1.0 / (1.0 / (2.0 * 3650.0) + 1.0 / 9200.0);
        assert_abs_diff_eq!(expect, 4070.0, epsilon = 5.0);
        assert!((t2 / expect - 1.0).abs() <= 0.02, "T2 = {t2}");
    }

    #[test]
    fn expectation_examples() {
        let d = 20;
        let n = number_operator(d);
        let vac = DensityMatrix::pure(vec![(Factor::Magnon, d)], &coherent_state(ZERO, d).unwrap()).unwrap();
        assert_abs_diff_eq!(expectation(&vac, &n).unwrap(), 0.0);
        let coh = DensityMatrix::pure(vec![(Factor::Magnon, d)], &coherent_state(ONE, d).unwrap()).unwrap();
        assert_abs_diff_eq!(expectation(&coh, &n).unwrap(), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(expectation(&coh, &identity(d)).unwrap(), 1.0, epsilon = 1e-12);
        let mut bad = identity(d);
        bad[(0, 1)] = ONE;
        assert!(matches!(expectation(&coh, &bad), Err(Error::InvalidObservable(_))));
        assert!(matches!(expectation(&coh, &identity(3)), Err(Error::InvalidObservable(_))));
    }

    #[test]
    fn partial_trace_examples() {
        let mut rq = ComplexMatrix::zeros(3, 3);
        rq[(0, 0)] = C64::new(0.7, 0.0);
        rq[(1, 1)] = C64::new(0.3, 0.0);
        rq[(0, 1)] = C64::new(0.1, 0.2);
        rq[(1, 0)] = C64::new(0.1, -0.2);
        let rm = DensityMatrix::pure(
            vec![(Factor::Magnon, 4)],
            &coherent_state(C64::new(0.3, 0.1), 4)
                .unwrap()
                .iter()
                .map(|z| {
                    z / coherent_state(C64::new(0.3, 0.1), 4).unwrap().iter().map(|w| w.norm_sqr()).sum::<f64>().sqrt()
                })
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let q = DensityMatrix::new(vec![(Factor::Qutrit, 3)], rq).unwrap();
        let prod = q.tensor(&rm);
        let red = partial_trace(&prod, &[Factor::Magnon]).unwrap();
        assert!(crate::operators::max_abs_diff(red.matrix(), rm.matrix()) < 1e-15);
        let redq = partial_trace(&prod, &[Factor::Qutrit]).unwrap();
        assert!(crate::operators::max_abs_diff(redq.matrix(), q.matrix()) < 1e-15);

        let layout = HilbertLayout::two_body(2).unwrap();
        let mut psi = vec![ZERO; 6];
        psi[layout.index(0, 1, 0)] = C64::new(0.5f64.sqrt(), 0.0);
        psi[layout.index(1, 0, 0)] = C64::new(0.5f64.sqrt(), 0.0);
        let bell = DensityMatrix::pure(layout.factors(), &psi).unwrap();
        let m = partial_trace(&bell, &[Factor::Magnon]).unwrap();
        assert_abs_diff_eq!(m.matrix()[(0, 0)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.matrix()[(1, 1)].re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.matrix()[(0, 1)].norm(), 0.0, epsilon = 1e-15);
        assert!(matches!(partial_trace(&bell, &[]), Err(Error::InvalidSelector(_))));
        assert!(matches!(partial_trace(&bell, &[Factor::Cavity]), Err(Error::InvalidSelector(_))));
    }

    #[test]
    fn readout_examples() {
        let layout = HilbertLayout::two_body(3).unwrap();
        assert_eq!(readout_qubit_excited(&DensityMatrix::ground(&layout)).unwrap(), 0.0);
        let f = DensityMatrix::basis(&layout, 2, 1, 0);
        assert_eq!(readout_qubit_excited(&f).unwrap(), 1.0);
        let m = [[0.95, 0.1], [0.05, 0.9]];
        assert_abs_diff_eq!(readout_qubit_excited_with(&f, &m).unwrap(), 0.9);
        assert!(readout_qubit_excited_with(&f, &[[0.9, 0.1], [0.2, 0.9]]).is_err());
    }

    #[test]
    fn invalid_initial_state_rejected() {
        let layout = HilbertLayout::two_body(2).unwrap();
        let mut m = ComplexMatrix::zeros(6, 6);
        m[(0, 0)] = C64::new(1.2, 0.0);
        m[(1, 1)] = C64::new(-0.2, 0.0);
        assert!(DensityMatrix::new(layout.factors(), m.clone()).is_err());
        let bad = DensityMatrix { factors: layout.factors(), matrix: m };
        let r = evolve(&PhysicalParams::default(), &layout, &idle(1.0), &bad, &[1.0]);
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn post_pi_pulse_population() {
        let b = builder();
        let layout = HilbertLayout::two_body(3).unwrap();
        let sched = b.seq_swap(0.0, 0.0).unwrap();
        let run = |p: &PhysicalParams| {
            let out = evolve(p, &layout, &sched, &DensityMatrix::ground(&layout), &[sched.readout_at_ns]).unwrap();
            readout_qubit_excited(&out[0]).unwrap()
        };
        let free = PhysicalParams::default().decoherence_free();
        let uncoupled = PhysicalParams { effective_coupling_override_mhz: Some(0.0), ..free.clone() };
        assert!(run(&uncoupled) >= 1.0 - 2e-4);
        // the detuned magnon still pulls ~1% off the qubit during the pulse
        assert!(run(&free) >= 0.98);
    }

    #[test]
    fn sector_propagator_matches_full_evolution() {
        let b = builder();
        let p = PhysicalParams::default();
        let layout = HilbertLayout::two_body(4).unwrap();
        let tau = 60.0;
        let sched = b.seq_swap(tau, 0.0).unwrap();
        let t_pi = b.pi.duration_ns;
        let times: Vec<f64> = (0..=15).map(|k| t_pi + 4.0 * k as f64).collect();
        let full = evolve(&p, &layout, &sched, &DensityMatrix::ground(&layout), &times).unwrap();
        let field =
            ControlField { amplitude_mhz: b.swap_amp_mhz, phase_rad: 0.0, detuning_d_mhz: p.at_drive_detuning_mhz };
        let prop = SectorPropagator::new(&p, &layout, &field, 4.0).unwrap();
        let curve = prop.excited_curve(&prop.project(&full[0]).unwrap(), times.len());
        for (s, c) in full.iter().zip(curve) {
            assert_abs_diff_eq!(readout_qubit_excited(s).unwrap(), c, epsilon = 1e-9);
        }
    }

    #[test]
    fn ideal_rotations_prepare_single_magnon() {
        let b = builder();
        let p = PhysicalParams::default().decoherence_free();
        let layout = HilbertLayout::two_body(4).unwrap();
        let sched = b.seq_state_prep(StateTarget::SingleMagnon).unwrap();
        let opts = EvolveOptions { ideal_qubit_rotations: true, ..EvolveOptions::default() };
        let tr =
            evolve_with(&p, &layout, &sched, &DensityMatrix::ground(&layout), &[sched.readout_at_ns], opts).unwrap();
        let m = partial_trace(&tr.states[0], &[Factor::Magnon]).unwrap();
        assert!(m.matrix()[(1, 1)].re.sqrt() >= 0.999, "p1 = {}", m.matrix()[(1, 1)].re);
    }

    #[test]
    fn unitary_evolution_preserves_purity() {
        let b = builder();
        let p = PhysicalParams::default().decoherence_free();
        let layout = HilbertLayout::two_body(4).unwrap();
        let prep = b.seq_state_prep(StateTarget::superposition(ONE)).unwrap();
        let sched = b.seq_wigner_point(&prep, C64::new(0.4, 0.3), 30.0).unwrap();
        let times: Vec<f64> = (0..=10).map(|k| sched.total_duration_ns * k as f64 / 10.0).collect();
        let out = evolve(&p, &layout, &sched, &DensityMatrix::ground(&layout), &times).unwrap();
        for s in &out {
            assert_abs_diff_eq!(s.purity(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn rk4_step_halving_converges() {
        let p = PhysicalParams::default();
        let layout = HilbertLayout::two_body(3).unwrap();
        let seg = PulseSegment::new(Channel::QubitXy, 0.0, 30.0, 30.0)
            .with_envelope(Envelope::Gaussian { sigma_ns: 7.0 })
            .with_carrier(1.0);
        let sched = PulseSchedule::ending_at_last_segment(vec![seg]).unwrap();
        let run = |step: f64| {
            let o = EvolveOptions { rk4_step_ns: step, ..EvolveOptions::default() };
            let t = evolve_with(&p, &layout, &sched, &DensityMatrix::ground(&layout), &[30.0], o).unwrap();
            readout_qubit_excited(&t.states[0]).unwrap()
        };
        assert!((run(0.05) - run(0.025)).abs() <= 1e-6);
    }

    #[test]
    fn json_and_csv() {
        let layout = HilbertLayout::two_body(2).unwrap();
        let rho = DensityMatrix::basis(&layout, 1, 1, 0);
        let back = DensityMatrix::from_json(&rho.to_json().unwrap()).unwrap();
        assert_eq!(back, rho);
        let csv = rho.to_csv();
        assert!(csv.starts_with("# re\n"));
        assert_eq!(csv.lines().count(), 2 * (6 + 1));
    }

    #[test]
    fn resize_magnon_space() {
        let layout = HilbertLayout::two_body(3).unwrap();
        let rho = DensityMatrix::basis(&layout, 1, 1, 0);
        let big = rho.with_magnon_dim(6).unwrap();
        let l6 = HilbertLayout::two_body(6).unwrap();
        assert_eq!(big.matrix()[(l6.index(1, 1, 0), l6.index(1, 1, 0))], ONE);
        assert!(matches!(rho.with_magnon_dim(1), Err(Error::InvalidDimension(_))));
        assert!(matches!(DensityMatrix::basis(&layout, 0, 2, 0).with_magnon_dim(2), Err(Error::Truncation(_))));
    }

    #[test]
    fn magnon_frame_conversion() {
        let p = PhysicalParams::default();
        let psi = [C64::new(0.6, 0.0), C64::new(0.8, 0.0)];
        let rho = DensityMatrix::pure(vec![(Factor::Magnon, 2)], &psi).unwrap();
        let t = 1.0 / (p.magnon_idle_freq_ghz - p.qubit_freq_ghz);
        let same = to_magnon_frame(&rho, &p, t).unwrap();
        assert!(crate::operators::max_abs_diff(same.matrix(), rho.matrix()) < 1e-12);
        let quarter = to_magnon_frame(&rho, &p, t / 4.0).unwrap();
        assert_abs_diff_eq!(quarter.matrix()[(1, 0)].im, 0.48, epsilon = 1e-12);
        let _ = outer(&psi, &psi);
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]
        #[test]
        fn trajectories_stay_physical(
            tau in 0.0f64..80.0, det in -10.0f64..10.0, re in -1.0f64..1.0, im in -1.0f64..1.0,
        ) {
            let b = builder();
            let p = PhysicalParams::default();
            let layout = HilbertLayout::two_body(5).unwrap();
            let prep = b.seq_state_prep(StateTarget::superposition(C64::new(re, im))).unwrap();
            let sched = b.seq_wigner_point(&prep, C64::new(im, re), tau).unwrap();
            let times: Vec<f64> = (0..=6).map(|k| sched.total_duration_ns * k as f64 / 6.0).collect();
            let tr = evolve_with(&p, &layout, &sched, &DensityMatrix::ground(&layout), &times, EvolveOptions::default()).unwrap();
            prop_assert!(tr.max_trace_drift <= TRACE_DRIFT_LIMIT);
            for s in &tr.states {
                let ph = s.physicality();
                prop_assert!(ph.hermiticity <= 1e-9);
                prop_assert!(ph.min_eigenvalue >= -1e-8);
                prop_assert!(ph.trace_error <= 1e-9);
            }
            let swap = b.seq_swap(tau, det).unwrap();
            let out = evolve(&p, &layout, &swap, &DensityMatrix::ground(&layout), &[swap.readout_at_ns]).unwrap();
            let pe = readout_qubit_excited(&out[0]).unwrap();
            prop_assert!((0.0..=1.0).contains(&pe));
        }
    }
}
