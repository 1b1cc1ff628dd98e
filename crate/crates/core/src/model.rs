//! Physical parameters and closed-form theory of the qutrit-magnon hybrid:
//! the cavity-mediated coupling, Autler-Townes (AT) dressed states, and the
//! rotating-frame Hamiltonian.
//!
//! Frame convention: every excitation (qutrit e/f, magnon, cavity photon)
//! rotates at the bare qubit frequency, and |f⟩ additionally rotates at the
//! AT control carrier ω_d. In this frame the AT drive is static, the |f⟩
//! level sits at Δd = ω_ef − ω_d, and all exchange terms are static, so
//! rectangular segments are piecewise time-independent. Hamiltonians are in
//! angular units (rad/ns).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::{
    fock_annihilation, hermiticity_residual, qutrit_operators, ComplexMatrix, HilbertLayout, C64, ONE, ZERO,
};
use crate::schedule::Channel;

/// rad/ns per MHz.
pub const MHZ: f64 = 2.0 * PI * 1e-3;
/// rad/ns per GHz.
pub const GHZ: f64 = 2.0 * PI;

/// Affine map from electromagnet coil current to magnon frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilMap {
    pub offset_ghz: f64,
    pub slope_ghz_per_ma: f64,
}

impl CoilMap {
    pub fn magnon_freq_ghz(&self, current_ma: f64) -> f64 {
        self.offset_ghz + self.slope_ghz_per_ma * current_ma
    }

    pub fn current_for(&self, freq_ghz: f64) -> f64 {
        (freq_ghz - self.offset_ghz) / self.slope_ghz_per_ma
    }
}

impl Default for CoilMap {
    /// 28 MHz/mA, with the magnon degenerate with the 5.846 GHz qubit at −4.5 mA.
    fn default() -> Self {
        Self { offset_ghz: 5.846 + 0.028 * 4.5, slope_ghz_per_ma: 0.028 }
    }
}

/// Which qutrit state the magnon exchange term addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeModel {
    /// The magnon couples with strength g_mq to the operational qubit
    /// transition: |g⟩↔|e⟩ with the AT drive off, |g⟩↔|+⟩ with it on.
    DressedQubit,
    /// Bare dipole coupling |g⟩↔|e⟩ only; the dressed coupling is then g·cosθ.
    Dipole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalParams {
    pub cavity_freq_ghz: f64,
    pub qubit_freq_ghz: f64,
    pub anharmonicity_ghz: f64,
    pub magnon_idle_freq_ghz: f64,
    pub qubit_cavity_coupling_mhz: f64,
    pub magnon_cavity_coupling_mhz: f64,
    /// Pins g_mq instead of deriving it from the bare couplings.
    pub effective_coupling_override_mhz: Option<f64>,
    /// Δd = ω_ef − ω_d of the AT control carrier.
    pub at_drive_detuning_mhz: f64,
    pub t1_qubit_us: f64,
    pub t_phi_qubit_us: f64,
    pub t1_magnon_ns: f64,
    /// Magnon pure dephasing time; `None` disables it.
    pub t_phi_magnon_ns: Option<f64>,
    /// κ/2π of the cavity (three-body model only).
    pub cavity_decay_mhz: f64,
    pub thermal_qubit_nbar: f64,
    pub thermal_magnon_nbar: f64,
    /// Master switch for every collapse channel.
    pub dissipation: bool,
    pub exchange_model: ExchangeModel,
    /// Minimum detuning from the cavity, in units of the bare coupling.
    pub dispersive_guard_factor: f64,
    pub coil_map: CoilMap,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self {
            cavity_freq_ghz: 6.388,
            qubit_freq_ghz: 5.846,
            anharmonicity_ghz: -0.354,
            magnon_idle_freq_ghz: 5.928,
            qubit_cavity_coupling_mhz: 52.6,
            magnon_cavity_coupling_mhz: 52.6,
            effective_coupling_override_mhz: Some(5.55),
            at_drive_detuning_mhz: 3.0,
            t1_qubit_us: 3.65,
            t_phi_qubit_us: 9.20,
            t1_magnon_ns: 128.0,
            t_phi_magnon_ns: None,
            cavity_decay_mhz: 0.0,
            thermal_qubit_nbar: 0.0,
            thermal_magnon_nbar: 0.0,
            dissipation: true,
            exchange_model: ExchangeModel::DressedQubit,
            dispersive_guard_factor: 5.0,
            coil_map: CoilMap::default(),
        }
    }
}

impl PhysicalParams {
    /// Same system with every decoherence channel switched off.
    pub fn decoherence_free(&self) -> Self {
        Self { dissipation: false, ..self.clone() }
    }

    pub fn ef_freq_ghz(&self) -> f64 {
        self.qubit_freq_ghz + self.anharmonicity_ghz
    }

    /// The AT control carrier ω_d/2π.
    pub fn at_carrier_ghz(&self) -> f64 {
        self.ef_freq_ghz() - self.at_drive_detuning_mhz * 1e-3
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t1_qubit_us", self.t1_qubit_us),
            ("t_phi_qubit_us", self.t_phi_qubit_us),
            ("t1_magnon_ns", self.t1_magnon_ns),
            ("dispersive_guard_factor", self.dispersive_guard_factor),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { key, reason: format!("must be > 0, got {v}") });
            }
        }
        if let Some(t) = self.t_phi_magnon_ns {
            if !(t > 0.0) {
                return Err(Error::InvalidParameter {
                    key: "t_phi_magnon_ns",
                    reason: format!("must be > 0, got {t}"),
                });
            }
        }
        let non_negative = [
            ("qubit_cavity_coupling_mhz", self.qubit_cavity_coupling_mhz),
            ("magnon_cavity_coupling_mhz", self.magnon_cavity_coupling_mhz),
            ("cavity_decay_mhz", self.cavity_decay_mhz),
            ("thermal_qubit_nbar", self.thermal_qubit_nbar),
            ("thermal_magnon_nbar", self.thermal_magnon_nbar),
            ("effective_coupling_override_mhz", self.effective_coupling_override_mhz.unwrap_or(0.0)),
        ];
        for (key, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { key, reason: format!("must be >= 0, got {v}") });
            }
        }
        for (key, v) in [
            ("cavity_freq_ghz", self.cavity_freq_ghz),
            ("qubit_freq_ghz", self.qubit_freq_ghz),
            ("magnon_idle_freq_ghz", self.magnon_idle_freq_ghz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { key, reason: format!("must be > 0, got {v}") });
            }
        }
        if !self.coil_map.slope_ghz_per_ma.is_finite() || self.coil_map.slope_ghz_per_ma == 0.0 {
            return Err(Error::InvalidParameter {
                key: "coil_map.slope_ghz_per_ma",
                reason: "must be finite and non-zero".into(),
            });
        }
        Ok(())
    }

    /// Both modes must sit far enough from the cavity for the virtual-photon
    /// picture to apply.
    pub fn check_dispersive_guard(&self) -> Result<()> {
        let dq = (self.qubit_freq_ghz - self.cavity_freq_ghz).abs() * 1e3;
        let dm = (self.magnon_idle_freq_ghz - self.cavity_freq_ghz).abs() * 1e3;
        let k = self.dispersive_guard_factor;
        if dq < k * self.qubit_cavity_coupling_mhz {
            return Err(Error::DispersiveRegime(format!(
                "qubit-cavity detuning {dq:.1} MHz < {k} x {} MHz",
                self.qubit_cavity_coupling_mhz
            )));
        }
        if dm < k * self.magnon_cavity_coupling_mhz {
            return Err(Error::DispersiveRegime(format!(
                "magnon-cavity detuning {dm:.1} MHz < {k} x {} MHz",
                self.magnon_cavity_coupling_mhz
            )));
        }
        Ok(())
    }

    /// Cavity-mediated magnon-qubit coupling g_mq/2π in MHz.
    pub fn effective_coupling(&self) -> Result<f64> {
        effective_coupling(self)
    }

    pub fn t1_qubit_ns(&self) -> f64 {
        self.t1_qubit_us * 1e3
    }

    pub fn t_phi_qubit_ns(&self) -> f64 {
        self.t_phi_qubit_us * 1e3
    }
}

/// g_mq = |g_mc g_qc / 2 · (1/Δm + 1/Δq)|, or the override when set.
pub fn effective_coupling(p: &PhysicalParams) -> Result<f64> {
    p.check_dispersive_guard()?;
    if let Some(g) = p.effective_coupling_override_mhz {
        return Ok(g);
    }
    let dm = (p.magnon_idle_freq_ghz - p.cavity_freq_ghz) * 1e3;
    let dq = (p.qubit_freq_ghz - p.cavity_freq_ghz) * 1e3;
    let g = p.magnon_cavity_coupling_mhz * p.qubit_cavity_coupling_mhz / 2.0 * (1.0 / dm + 1.0 / dq);
    Ok(g.abs())
}

/// AT doublet of the qutrit under a control drive on e↔f.
///
/// |+⟩ = cosθ|e⟩ + sinθ|f⟩, |−⟩ = sinθ|e⟩ − cosθ|f⟩ (the |f⟩ component carries
/// one fewer control photon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ATDoublet {
    pub theta: f64,
    pub omega_plus_ghz: f64,
    pub omega_minus_ghz: f64,
    pub plus_coeffs: (f64, f64),
    pub minus_coeffs: (f64, f64),
}

impl ATDoublet {
    /// ω₊ − ω_q in MHz.
    pub fn plus_shift_mhz(&self, p: &PhysicalParams) -> f64 {
        (self.omega_plus_ghz - p.qubit_freq_ghz) * 1e3
    }

    pub fn minus_shift_mhz(&self, p: &PhysicalParams) -> f64 {
        (self.omega_minus_ghz - p.qubit_freq_ghz) * 1e3
    }
}

/// Mixing angle from tanθ = Ωd / (√(Δd² + Ωd²) − Δd).
///
/// At Ωd = 0 the limit is θ = π/2 for Δd > 0 (|+⟩ = |f⟩) and θ = 0 for
/// Δd < 0 (|+⟩ = |e⟩).
pub fn at_mixing_angle(omega_d_mhz: f64, detuning_d_mhz: f64) -> Result<f64> {
    if omega_d_mhz < 0.0 || !omega_d_mhz.is_finite() {
        return Err(Error::InvalidParameter {
            key: "omega_d_amp",
            reason: format!("drive amplitude must be >= 0, got {omega_d_mhz}"),
        });
    }
    if omega_d_mhz == 0.0 && detuning_d_mhz == 0.0 {
        return Err(Error::DegenerateInput("Omega_d = 0 and Delta_d = 0: doublet undefined".into()));
    }
    let r = detuning_d_mhz.hypot(omega_d_mhz);
    // (R − Δ) = Ω² / (R + Δ) avoids cancellation for Δ > 0
    Ok(if detuning_d_mhz >= 0.0 {
        (r + detuning_d_mhz).atan2(omega_d_mhz)
    } else {
        omega_d_mhz.atan2(r - detuning_d_mhz)
    })
}

pub fn at_doublet(omega_d_mhz: f64, detuning_d_mhz: f64, p: &PhysicalParams) -> Result<ATDoublet> {
    let theta = at_mixing_angle(omega_d_mhz, detuning_d_mhz)?;
    let r = detuning_d_mhz.hypot(omega_d_mhz);
    let (s, c) = theta.sin_cos();
    Ok(ATDoublet {
        theta,
        omega_plus_ghz: p.qubit_freq_ghz + (detuning_d_mhz / 2.0 + r / 2.0) * 1e-3,
        omega_minus_ghz: p.qubit_freq_ghz + (detuning_d_mhz / 2.0 - r / 2.0) * 1e-3,
        plus_coeffs: (c, s),
        minus_coeffs: (s, -c),
    })
}

/// Control amplitude Ωd placing the upper branch `target_shift_mhz` above ω_q.
pub fn required_drive_amplitude(target_shift_mhz: f64, detuning_d_mhz: f64) -> Result<f64> {
    let r = 2.0 * target_shift_mhz - detuning_d_mhz;
    let floor = detuning_d_mhz.abs();
    let tol = 1e-12 * (1.0 + floor);
    if !r.is_finite() || r < floor - tol {
        return Err(Error::NoSolution(format!(
            "upper AT branch cannot reach +{target_shift_mhz} MHz with Delta_d = {detuning_d_mhz} MHz"
        )));
    }
    Ok((r * r - floor * floor).max(0.0).sqrt())
}

/// A drive as seen by the Hamiltonian at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveDrive {
    pub channel: Channel,
    /// Instantaneous Rabi frequency (envelope × amplitude), MHz.
    pub amplitude_mhz: f64,
    pub phase_rad: f64,
    /// Carrier offset from the channel's frame frequency, MHz.
    pub carrier_detuning_mhz: f64,
}

/// Frame frequency of a drive channel: qubit_xy → ω_q, magnon_drive → ω_m,
/// at_control → ω_ef.
pub fn channel_frame_ghz(p: &PhysicalParams, channel: Channel) -> f64 {
    match channel {
        Channel::QubitXy => p.qubit_freq_ghz,
        Channel::MagnonDrive => p.magnon_idle_freq_ghz,
        Channel::AtControl => p.ef_freq_ghz(),
    }
}

/// Carrier of a raising-type drive relative to the common frame, in MHz.
pub fn drive_offset_mhz(p: &PhysicalParams, drive: &ActiveDrive) -> f64 {
    (channel_frame_ghz(p, drive.channel) - p.qubit_freq_ghz) * 1e3 + drive.carrier_detuning_mhz
}

/// State of the AT control field entering the static Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlField {
    pub amplitude_mhz: f64,
    pub phase_rad: f64,
    pub detuning_d_mhz: f64,
}

impl ControlField {
    pub fn off(p: &PhysicalParams) -> Self {
        Self { amplitude_mhz: 0.0, phase_rad: 0.0, detuning_d_mhz: p.at_drive_detuning_mhz }
    }

    pub fn from_drive(drive: &ActiveDrive) -> Self {
        Self {
            amplitude_mhz: drive.amplitude_mhz,
            phase_rad: drive.phase_rad,
            detuning_d_mhz: -drive.carrier_detuning_mhz,
        }
    }

    /// Qutrit state the magnon (and cavity) exchange addresses.
    pub fn coupled_state(&self, model: ExchangeModel) -> [C64; 3] {
        if model == ExchangeModel::Dipole || self.amplitude_mhz <= 0.0 {
            return [ZERO, ONE, ZERO];
        }
        let theta = at_mixing_angle(self.amplitude_mhz, self.detuning_d_mhz)
            .expect("amplitude > 0 makes the doublet well defined");
        let (s, c) = theta.sin_cos();
        [ZERO, C64::new(c, 0.0), C64::from_polar(s, self.phase_rad)]
    }
}

/// Operators reused across Hamiltonian builds on a fixed layout.
#[derive(Debug, Clone)]
pub struct ModelOperators {
    pub layout: HilbertLayout,
    /// b (magnon lowering), embedded.
    pub magnon_lower: ComplexMatrix,
    /// a (cavity lowering), embedded; `None` for the two-body layout.
    pub cavity_lower: Option<ComplexMatrix>,
    /// Excitation number of each basis state.
    pub excitations: Vec<f64>,
    /// |f⟩⟨e|, embedded.
    at_fe: ComplexMatrix,
    /// m†|g⟩⟨e| and m†|g⟩⟨f| with m the mode the qutrit exchanges with
    /// (magnon in the two-body model, cavity otherwise).
    exch_e: ComplexMatrix,
    exch_f: ComplexMatrix,
    /// a†b (three-body model).
    cavity_magnon: Option<ComplexMatrix>,
}

impl ModelOperators {
    pub fn new(layout: HilbertLayout) -> Result<Self> {
        let magnon_lower = layout.embed_magnon(&fock_annihilation(layout.magnon_dim)?);
        let cavity_lower =
            if layout.has_cavity() { Some(layout.embed_cavity(&fock_annihilation(layout.cavity_dim)?)?) } else { None };
        let excitations = (0..layout.dim()).map(|i| layout.excitation_number(i) as f64).collect();
        let q = qutrit_operators();
        let at_fe = layout.embed_qutrit(&q.lower_ef.adjoint());
        let ge = layout.embed_qutrit(&q.lower_ge);
        let gf = layout.embed_qutrit(&(&q.lower_ge * &q.lower_ef));
        let partner = cavity_lower.as_ref().unwrap_or(&magnon_lower).adjoint();
        let exch_e = &partner * &ge;
        let exch_f = &partner * &gf;
        let cavity_magnon = cavity_lower.as_ref().map(|a| a.adjoint() * &magnon_lower);
        Ok(Self { layout, magnon_lower, cavity_lower, excitations, at_fe, exch_e, exch_f, cavity_magnon })
    }

    /// Raising operator driven by a channel (|e⟩⟨g| for XY, b† for the magnon).
    pub fn drive_raising(&self, channel: Channel) -> Option<ComplexMatrix> {
        match channel {
            Channel::QubitXy => Some(self.layout.embed_qutrit(&qutrit_operators().lower_ge.adjoint())),
            Channel::MagnonDrive => Some(self.magnon_lower.adjoint()),
            Channel::AtControl => None,
        }
    }

    /// |g⟩⟨q| for the coupled qutrit state q, embedded.
    pub fn qubit_lowering(&self, q: &[C64; 3]) -> ComplexMatrix {
        let mut op = ComplexMatrix::zeros(3, 3);
        op[(0, 1)] = q[1].conj();
        op[(0, 2)] = q[2].conj();
        self.layout.embed_qutrit(&op)
    }
}

fn add_hermitian_pair(h: &mut ComplexMatrix, x: &ComplexMatrix, coef: C64) {
    if coef == ZERO {
        return;
    }
    let n = h.nrows();
    for j in 0..n {
        for i in 0..n {
            let v = x[(i, j)];
            if v != ZERO {
                let t = v * coef;
                h[(i, j)] += t;
                h[(j, i)] += t.conj();
            }
        }
    }
}

/// Drive-free Hamiltonian in the common frame for a given AT control field.
pub fn static_hamiltonian(p: &PhysicalParams, ops: &ModelOperators, field: &ControlField) -> Result<ComplexMatrix> {
    let layout = ops.layout;
    let dim = layout.dim();
    let mut h = ComplexMatrix::zeros(dim, dim);

    let f_det = field.detuning_d_mhz * MHZ;
    let m_det = (p.magnon_idle_freq_ghz - p.qubit_freq_ghz) * GHZ;
    let c_det = (p.cavity_freq_ghz - p.qubit_freq_ghz) * GHZ;
    for i in 0..dim {
        let (q, n, c) = layout.decompose(i);
        let level = if q == 2 { f_det } else { 0.0 };
        h[(i, i)] = C64::new(level + m_det * n as f64 + c_det * c as f64, 0.0);
    }

    if field.amplitude_mhz != 0.0 {
        let half = field.amplitude_mhz / 2.0 * MHZ;
        add_hermitian_pair(&mut h, &ops.at_fe, C64::from_polar(half, field.phase_rad));
    }

    let q = field.coupled_state(p.exchange_model);
    let g = match ops.cavity_magnon {
        None => effective_coupling(p)? * MHZ,
        Some(_) => p.qubit_cavity_coupling_mhz * MHZ,
    };
    add_hermitian_pair(&mut h, &ops.exch_e, q[1].conj() * g);
    add_hermitian_pair(&mut h, &ops.exch_f, q[2].conj() * g);
    if let Some(am) = &ops.cavity_magnon {
        add_hermitian_pair(&mut h, am, C64::new(p.magnon_cavity_coupling_mhz * MHZ, 0.0));
    }
    Ok(h)
}

/// Rotating-frame Hamiltonian at time `t_ns` with the given active drives.
///
/// Raising-type drives (qubit XY, magnon) carry their carrier phase
/// e^{−i·2π·δ·t} relative to the common frame; the AT drive is static.
pub fn build_hamiltonian(
    p: &PhysicalParams,
    layout: &HilbertLayout,
    drives: &[ActiveDrive],
    t_ns: f64,
) -> Result<ComplexMatrix> {
    let ops = ModelOperators::new(*layout)?;
    build_hamiltonian_with(p, &ops, drives, t_ns)
}

pub fn build_hamiltonian_with(
    p: &PhysicalParams,
    ops: &ModelOperators,
    drives: &[ActiveDrive],
    t_ns: f64,
) -> Result<ComplexMatrix> {
    let mut field = ControlField::off(p);
    let mut seen_at = false;
    for d in drives.iter().filter(|d| d.channel == Channel::AtControl) {
        if seen_at {
            return Err(Error::Assembly("more than one active at_control drive".into()));
        }
        field = ControlField::from_drive(d);
        seen_at = true;
    }
    let mut h = static_hamiltonian(p, ops, &field)?;
    for d in drives {
        let Some(raise) = ops.drive_raising(d.channel) else { continue };
        let phase = d.phase_rad - 2.0 * PI * drive_offset_mhz(p, d) * 1e-3 * t_ns;
        let coef = C64::from_polar(d.amplitude_mhz / 2.0 * MHZ, phase);
        let x = raise * coef;
        h += &x + x.adjoint();
    }
    let res = hermiticity_residual(&h);
    if res > 1e-12 * (1.0 + h.norm()) {
        return Err(Error::Assembly(format!("Hamiltonian not Hermitian (residual {res:e})")));
    }
    Ok(h)
}

/// Eigenfrequencies (GHz, absolute) of the single-excitation manifold of the
/// drive-free Hamiltonian, ascending.
pub fn single_excitation_frequencies(
    p: &PhysicalParams,
    layout: &HilbertLayout,
    field: &ControlField,
) -> Result<Vec<(f64, Vec<C64>)>> {
    let ops = ModelOperators::new(*layout)?;
    let h = static_hamiltonian(p, &ops, field)?;
    // without the control field |f⟩ is decoupled and its frame energy is not a physical line
    let keep_f = field.amplitude_mhz > 0.0;
    let idx: Vec<usize> = (0..layout.dim())
        .filter(|&i| layout.excitation_number(i) == 1 && (keep_f || layout.decompose(i).0 != 2))
        .collect();
    let block = ComplexMatrix::from_fn(idx.len(), idx.len(), |a, b| h[(idx[a], idx[b])]);
    let ground = h[(0, 0)].re;
    let eig = nalgebra::SymmetricEigen::new(block);
    let mut out: Vec<(f64, Vec<C64>)> = (0..idx.len())
        .map(|k| {
            let f = p.qubit_freq_ghz + (eig.eigenvalues[k] - ground) / GHZ;
            let mut v = vec![ZERO; layout.dim()];
            for (a, &i) in idx.iter().enumerate() {
                v[i] = eig.eigenvectors[(a, k)];
            }
            (f, v)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

/// Minimum qubit-magnon splitting of the three-body (cavity-explicit) model,
/// found by scanning the magnon frequency. Returns (magnon GHz, gap MHz).
pub fn three_body_anticrossing(p: &PhysicalParams) -> Result<(f64, f64)> {
    let layout = HilbertLayout::new(2, 2)?;
    let field = ControlField::off(p);
    let gap = |fm: f64| -> Result<f64> {
        let q = PhysicalParams { magnon_idle_freq_ghz: fm, ..p.clone() };
        let lines = single_excitation_frequencies(&q, &layout, &field)?;
        // the two lowest lines are the qubit/magnon polaritons
        Ok((lines[1].0 - lines[0].0) * 1e3)
    };
    let (mut a, mut b) = (p.qubit_freq_ghz - 0.03, p.qubit_freq_ghz + 0.03);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (gap(c)?, gap(d)?);
    while (b - a) > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = gap(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = gap(d)?;
        }
    }
    let fm = 0.5 * (a + b);
    Ok((fm, gap(fm)?))
}
