//! Multi-channel pulse programs and the sequence builders for swap
//! spectroscopy, state preparation and Wigner-point measurements.
//!
//! Timeline of every builder: the AT control holds the qutrit at the work
//! point while the qubit rotation plays, then steps to the swap point, where
//! the dressed upper state |+⟩ is resonant with the magnon. All times in ns,
//! amplitudes as Rabi frequencies in MHz.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{required_drive_amplitude, ActiveDrive, ControlField, PhysicalParams, MHZ};
use crate::numeric::{golden_min, scan_min};
use crate::operators::{matrix_exp, ComplexMatrix, C64, I, ZERO};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    QubitXy,
    AtControl,
    MagnonDrive,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::QubitXy => "qubit_xy",
            Channel::AtControl => "at_control",
            Channel::MagnonDrive => "magnon_drive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Envelope {
    #[default]
    Rectangular,
    /// Centered Gaussian; the amplitude is the peak value.
    Gaussian { sigma_ns: f64 },
    /// Linear interpolation from `start` to `end` (fractions of the amplitude).
    Linear { start: f64, end: f64 },
}

impl Envelope {
    /// Envelope value at `t_rel` ∈ [0, duration].
    pub fn value(&self, t_rel: f64, duration: f64) -> f64 {
        match *self {
            Envelope::Rectangular => 1.0,
            Envelope::Gaussian { sigma_ns } => {
                let x = (t_rel - duration / 2.0) / sigma_ns;
                (-0.5 * x * x).exp()
            }
            Envelope::Linear { start, end } => start + (end - start) * (t_rel / duration),
        }
    }

    pub fn is_constant(&self) -> bool {
        match *self {
            Envelope::Rectangular => true,
            Envelope::Gaussian { .. } => false,
            Envelope::Linear { start, end } => start == end,
        }
    }

    /// ∫ value dt over the segment, divided by the duration.
    pub fn mean(&self, duration: f64) -> f64 {
        match *self {
            Envelope::Rectangular => 1.0,
            Envelope::Linear { start, end } => 0.5 * (start + end),
            Envelope::Gaussian { .. } => {
                // Simpson on a fine grid; the erf is not in std
                let n = 2000;
                let h = duration / n as f64;
                let mut acc = self.value(0.0, duration) + self.value(duration, duration);
                for k in 1..n {
                    let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * self.value(k as f64 * h, duration);
                }
                acc * h / 3.0 / duration
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Envelope::Gaussian { sigma_ns } if !(sigma_ns > 0.0 && sigma_ns.is_finite()) => {
                Err(Error::Schedule(format!("gaussian sigma must be > 0, got {sigma_ns}")))
            }
            Envelope::Linear { start, end }
                if !(start.is_finite() && end.is_finite() && start >= 0.0 && end >= 0.0) =>
            {
                Err(Error::Schedule("linear envelope endpoints must be finite and >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSegment {
    pub channel: Channel,
    pub start_ns: f64,
    pub duration_ns: f64,
    #[serde(default)]
    pub envelope: Envelope,
    pub amplitude_mhz: f64,
    #[serde(default)]
    pub phase_rad: f64,
    /// Carrier offset from the channel's frame frequency.
    #[serde(default)]
    pub carrier_detuning_mhz: f64,
    /// Intended qubit rotation angle, used when rotations are idealized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_angle_rad: Option<f64>,
}

impl PulseSegment {
    pub fn new(channel: Channel, start_ns: f64, duration_ns: f64, amplitude_mhz: f64) -> Self {
        Self {
            channel,
            start_ns,
            duration_ns,
            envelope: Envelope::Rectangular,
            amplitude_mhz,
            phase_rad: 0.0,
            carrier_detuning_mhz: 0.0,
            nominal_angle_rad: None,
        }
    }

    pub fn with_phase(mut self, phase_rad: f64) -> Self {
        self.phase_rad = phase_rad;
        self
    }

    pub fn with_carrier(mut self, detuning_mhz: f64) -> Self {
        self.carrier_detuning_mhz = detuning_mhz;
        self
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn end_ns(&self) -> f64 {
        self.start_ns + self.duration_ns
    }

    /// Half-open membership [start, end).
    pub fn is_active(&self, t: f64) -> bool {
        t >= self.start_ns - TIME_EPS && t < self.end_ns() - TIME_EPS
    }

    pub fn drive_at(&self, t: f64) -> ActiveDrive {
        let rel = (t - self.start_ns).clamp(0.0, self.duration_ns);
        ActiveDrive {
            channel: self.channel,
            amplitude_mhz: self.amplitude_mhz * self.envelope.value(rel, self.duration_ns),
            phase_rad: self.phase_rad,
            carrier_detuning_mhz: self.carrier_detuning_mhz,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.start_ns, self.duration_ns, self.amplitude_mhz, self.phase_rad, self.carrier_detuning_mhz]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Schedule(format!("{} segment has non-finite fields", self.channel.name())));
        }
        if self.duration_ns <= 0.0 {
            return Err(Error::Schedule(format!(
                "{} segment at {} ns has duration {} <= 0",
                self.channel.name(),
                self.start_ns,
                self.duration_ns
            )));
        }
        if self.amplitude_mhz < 0.0 {
            return Err(Error::Schedule(format!("{} segment has negative amplitude", self.channel.name())));
        }
        if self.start_ns < -TIME_EPS {
            return Err(Error::Schedule("segments cannot start before t = 0".into()));
        }
        self.envelope.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSchedule {
    pub segments: Vec<PulseSegment>,
    pub total_duration_ns: f64,
    pub readout_at_ns: f64,
}

impl PulseSchedule {
    /// Validated schedule with segments sorted by (start, channel).
    pub fn new(mut segments: Vec<PulseSegment>, readout_at_ns: f64, total_duration_ns: f64) -> Result<Self> {
        segments.sort_by(|a, b| a.start_ns.total_cmp(&b.start_ns).then(a.channel.cmp(&b.channel)));
        let s = Self { segments, total_duration_ns, readout_at_ns };
        s.validate()?;
        Ok(s)
    }

    /// Schedule ending in readout right after its last segment.
    pub fn ending_at_last_segment(segments: Vec<PulseSegment>) -> Result<Self> {
        let end = segments.iter().map(|s| s.end_ns()).fold(0.0, f64::max);
        Self::new(segments, end, end)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.segments {
            s.validate()?;
        }
        for (i, a) in self.segments.iter().enumerate() {
            for b in &self.segments[i + 1..] {
                if a.channel == b.channel && a.start_ns < b.end_ns() - TIME_EPS && b.start_ns < a.end_ns() - TIME_EPS {
                    return Err(Error::Schedule(format!(
                        "overlapping {} segments at {} ns and {} ns",
                        a.channel.name(),
                        a.start_ns,
                        b.start_ns
                    )));
                }
            }
        }
        let last = self.last_segment_end();
        if self.readout_at_ns < last - TIME_EPS {
            return Err(Error::Schedule(format!(
                "readout at {} ns precedes the last segment end {} ns",
                self.readout_at_ns, last
            )));
        }
        if self.total_duration_ns < self.readout_at_ns - TIME_EPS {
            return Err(Error::Schedule("total duration shorter than the readout time".into()));
        }
        Ok(())
    }

    pub fn last_segment_end(&self) -> f64 {
        self.segments.iter().map(|s| s.end_ns()).fold(0.0, f64::max)
    }

    pub fn active_segments(&self, t: f64) -> impl Iterator<Item = &PulseSegment> {
        self.segments.iter().filter(move |s| s.is_active(t))
    }

    pub fn active_drives(&self, t: f64) -> Vec<ActiveDrive> {
        self.active_segments(t).map(|s| s.drive_at(t)).collect()
    }

    /// Sorted, de-duplicated times at which the set of active segments changes.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts = vec![0.0, self.readout_at_ns, self.total_duration_ns];
        for s in &self.segments {
            ts.push(s.start_ns);
            ts.push(s.end_ns());
        }
        ts.retain(|t| *t <= self.total_duration_ns + TIME_EPS);
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() <= TIME_EPS);
        ts
    }

    /// Copy of `self` followed by `segments` shifted to start at the current
    /// readout time.
    pub fn extended(&self, segments: &[PulseSegment]) -> Result<Self> {
        let t0 = self.readout_at_ns;
        let mut all = self.segments.clone();
        all.extend(segments.iter().map(|s| PulseSegment { start_ns: s.start_ns + t0, ..*s }));
        let end = all.iter().map(|s| s.end_ns()).fold(t0, f64::max);
        Self::new(all, end, end)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sched: Self = serde_json::from_str(s)?;
        sched.validate()?;
        Ok(sched)
    }
}

/// Timing and calibration choices of the measurement protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    /// ω₊ − ω_q at the work point (5.870 − 5.846 GHz).
    pub work_point_shift_mhz: f64,
    /// Drive amplitudes quoted for the experiment; recorded, not used.
    pub reported_work_amp_mhz: f64,
    pub reported_swap_amp_mhz: f64,
    pub pi_duration_ns: f64,
    pub pi_envelope: Envelope,
    /// Skips the π-pulse search when set.
    pub pi_amplitude_mhz: Option<f64>,
    pub pi_leakage_tolerance: f64,
    /// Interaction time used to transfer the qubit state into the magnon.
    pub prep_swap_ns: f64,
    pub displacement_duration_ns: f64,
    /// Multiplies the nominal displacement amplitude |α|/(πT).
    pub displacement_gain: f64,
    /// Linear AT ramp into the swap point (0 = instantaneous step).
    pub at_ramp_ns: f64,
    /// |c| scaling of the superposition rotation compensating decay during
    /// the transfer; `None` asks the experiment layer to calibrate it.
    pub superposition_gain: Option<f64>,
    pub superposition_phase_offset_rad: Option<f64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            work_point_shift_mhz: 24.0,
            reported_work_amp_mhz: 40.0,
            reported_swap_amp_mhz: 131.0,
            pi_duration_ns: 48.0,
            pi_envelope: Envelope::Gaussian { sigma_ns: 12.0 },
            pi_amplitude_mhz: None,
            pi_leakage_tolerance: 1e-3,
            prep_swap_ns: 45.0,
            displacement_duration_ns: 10.0,
            displacement_gain: 1.0,
            at_ramp_ns: 0.0,
            superposition_gain: None,
            superposition_phase_offset_rad: None,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pi_duration_ns", self.pi_duration_ns),
            ("prep_swap_ns", self.prep_swap_ns),
            ("displacement_duration_ns", self.displacement_duration_ns),
            ("displacement_gain", self.displacement_gain),
            ("pi_leakage_tolerance", self.pi_leakage_tolerance),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter { key, reason: format!("must be > 0, got {v}") });
            }
        }
        if !(self.at_ramp_ns >= 0.0 && self.at_ramp_ns.is_finite()) {
            return Err(Error::InvalidParameter { key: "at_ramp_ns", reason: "must be >= 0".into() });
        }
        if let Some(a) = self.pi_amplitude_mhz {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::InvalidParameter { key: "pi_amplitude_mhz", reason: "must be > 0".into() });
            }
        }
        if let Some(g) = self.superposition_gain {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::InvalidParameter { key: "superposition_gain", reason: "must be > 0".into() });
            }
        }
        self.pi_envelope.validate().map_err(|e| Error::InvalidParameter { key: "pi_envelope", reason: e.to_string() })
    }
}

/// Magnon state targeted by the preparation sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateTarget {
    Vacuum,
    SingleMagnon,
    /// (|0⟩ + c|1⟩)/√(1+|c|²).
    Superposition {
        re: f64,
        im: f64,
    },
}

impl StateTarget {
    pub fn superposition(c: C64) -> Self {
        StateTarget::Superposition { re: c.re, im: c.im }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StateTarget::Vacuum => "vacuum",
            StateTarget::SingleMagnon => "single_magnon",
            StateTarget::Superposition { .. } => "superposition",
        }
    }

    /// Ideal magnon state vector in a space of dimension `dim`.
    pub fn ideal_state(&self, dim: usize) -> Result<Vec<C64>> {
        if dim < 2 {
            return Err(Error::InvalidDimension("magnon dimension must be >= 2".into()));
        }
        let mut v = vec![ZERO; dim];
        match *self {
            StateTarget::Vacuum => v[0] = C64::new(1.0, 0.0),
            StateTarget::SingleMagnon => v[1] = C64::new(1.0, 0.0),
            StateTarget::Superposition { re, im } => {
                let c = C64::new(re, im);
                if !c.norm().is_finite() {
                    return Err(Error::InvalidParameter { key: "c", reason: "must be finite".into() });
                }
                let n = (1.0 + c.norm_sqr()).sqrt();
                v[0] = C64::new(1.0 / n, 0.0);
                v[1] = c / n;
            }
        }
        Ok(v)
    }
}

/// Calibrated qubit π pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiPulse {
    pub amplitude_mhz: f64,
    pub duration_ns: f64,
    pub envelope: Envelope,
    /// Carrier relative to the bare qubit frequency.
    pub carrier_detuning_mhz: f64,
    /// 1 − |⟨target|U|g⟩|² in the qutrit-only unitary model.
    pub infidelity: f64,
}

/// Qutrit propagator for an XY pulse of amplitude `amp` (phase 0) under the
/// given control field, in the frame rotating at the XY carrier.
fn qutrit_pulse_unitary(
    field: &ControlField,
    carrier_mhz: f64,
    amp_mhz: f64,
    duration_ns: f64,
    envelope: Envelope,
) -> Result<ComplexMatrix> {
    let build = |scale: f64| {
        let mut h = ComplexMatrix::zeros(3, 3);
        h[(1, 1)] = C64::new(-carrier_mhz * MHZ, 0.0);
        h[(2, 2)] = C64::new((field.detuning_d_mhz - carrier_mhz) * MHZ, 0.0);
        let at = C64::from_polar(field.amplitude_mhz / 2.0 * MHZ, field.phase_rad);
        h[(2, 1)] = at;
        h[(1, 2)] = at.conj();
        let xy = C64::new(amp_mhz * scale / 2.0 * MHZ, 0.0);
        h[(1, 0)] = xy;
        h[(0, 1)] = xy;
        h
    };
    if envelope.is_constant() {
        let scale = envelope.value(0.0, duration_ns);
        return matrix_exp(&(build(scale) * (-I * duration_ns)));
    }
    let steps = (duration_ns / 0.1).ceil().max(1.0) as usize;
    let dt = duration_ns / steps as f64;
    let mut u = ComplexMatrix::identity(3, 3);
    for k in 0..steps {
        let scale = envelope.value((k as f64 + 0.5) * dt, duration_ns);
        u = matrix_exp(&(build(scale) * (-I * dt)))? * u;
    }
    Ok(u)
}

fn transfer_infidelity(
    field: &ControlField,
    carrier_mhz: f64,
    target: &[C64; 3],
    amp: f64,
    duration: f64,
    envelope: Envelope,
) -> Result<f64> {
    let u = qutrit_pulse_unitary(field, carrier_mhz, amp, duration, envelope)?;
    let overlap: C64 = (0..3).map(|k| target[k].conj() * u[(k, 0)]).sum();
    Ok(1.0 - overlap.norm_sqr())
}

/// Best (amplitude, carrier) for a fixed duration by coordinate descent. The
/// carrier correction absorbs the AC Stark shift from the other dressed level.
fn search_pulse(
    field: &ControlField,
    nominal_carrier_mhz: f64,
    target: &[C64; 3],
    duration: f64,
    envelope: Envelope,
) -> Result<(f64, f64, f64)> {
    let coupling = target[1].norm().max(1e-3);
    let guess = 1e3 / (2.0 * duration * envelope.mean(duration) * coupling);
    let mut carrier = nominal_carrier_mhz;
    let (mut amp, mut infid) = scan_min(
        |a| transfer_infidelity(field, carrier, target, a, duration, envelope),
        0.6 * guess,
        1.6 * guess,
        60,
        1e-9 * guess,
    )?;
    for _ in 0..6 {
        if infid < 1e-12 {
            break;
        }
        let (c, _) = scan_min(
            |c| transfer_infidelity(field, c, target, amp, duration, envelope),
            nominal_carrier_mhz - 10.0,
            nominal_carrier_mhz + 10.0,
            40,
            1e-9,
        )?;
        carrier = c;
        let (a, v) = golden_min(
            |a| transfer_infidelity(field, carrier, target, a, duration, envelope),
            0.9 * amp,
            1.1 * amp,
            1e-9 * guess,
        )?;
        amp = a;
        let improved = v < infid * 0.999;
        infid = v;
        if !improved {
            break;
        }
    }
    Ok((amp, carrier, infid))
}

/// Calibrates a qubit pulse transferring |g⟩ to the operational state of the
/// given control field (|e⟩ without it, |+⟩ with it) at fixed duration and
/// envelope.
///
/// A result above `tolerance` is returned with a warning: with the AT doublet
/// split by only a few tens of MHz, short rectangular pulses have an
/// irreducible leakage floor into |−⟩.
pub fn calibrate_pi_pulse_for(
    field: &ControlField,
    carrier_mhz: f64,
    duration_ns: f64,
    envelope: Envelope,
    tolerance: f64,
) -> Result<PiPulse> {
    let target = field.coupled_state(crate::model::ExchangeModel::DressedQubit);
    let (amp, carrier, infid) = search_pulse(field, carrier_mhz, &target, duration_ns, envelope)?;
    if !(infid < 0.5) {
        return Err(Error::Calibration(format!(
            "pi-pulse search did not converge (infidelity {infid:.3} at {duration_ns} ns)"
        )));
    }
    if infid > tolerance {
        log::warn!("pi pulse infidelity {infid:.2e} exceeds {tolerance:.0e} at {duration_ns} ns");
    }
    Ok(PiPulse { amplitude_mhz: amp, duration_ns, envelope, carrier_detuning_mhz: carrier, infidelity: infid })
}

/// π pulse for the work point of `protocol`.
pub fn calibrate_pi_pulse(p: &PhysicalParams, protocol: &Protocol) -> Result<PiPulse> {
    let work_amp = required_drive_amplitude(protocol.work_point_shift_mhz, p.at_drive_detuning_mhz)?;
    let field = ControlField { amplitude_mhz: work_amp, phase_rad: 0.0, detuning_d_mhz: p.at_drive_detuning_mhz };
    if let Some(amp) = protocol.pi_amplitude_mhz {
        let target = field.coupled_state(crate::model::ExchangeModel::DressedQubit);
        let infid = transfer_infidelity(
            &field,
            protocol.work_point_shift_mhz,
            &target,
            amp,
            protocol.pi_duration_ns,
            protocol.pi_envelope,
        )?;
        return Ok(PiPulse {
            amplitude_mhz: amp,
            duration_ns: protocol.pi_duration_ns,
            envelope: protocol.pi_envelope,
            carrier_detuning_mhz: protocol.work_point_shift_mhz,
            infidelity: infid,
        });
    }
    calibrate_pi_pulse_for(
        &field,
        protocol.work_point_shift_mhz,
        protocol.pi_duration_ns,
        protocol.pi_envelope,
        protocol.pi_leakage_tolerance,
    )
}

/// Builds the pulse programs of the experiment for one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBuilder {
    pub params: PhysicalParams,
    pub protocol: Protocol,
    pub pi: PiPulse,
    /// Model-consistent AT amplitudes.
    pub work_amp_mhz: f64,
    pub swap_amp_mhz: f64,
    pub superposition_gain: f64,
    pub superposition_phase_offset_rad: f64,
}

impl SequenceBuilder {
    pub fn new(p: &PhysicalParams, protocol: &Protocol) -> Result<Self> {
        p.validate()?;
        protocol.validate()?;
        let work_amp = required_drive_amplitude(protocol.work_point_shift_mhz, p.at_drive_detuning_mhz)?;
        let swap_amp = required_drive_amplitude(Self::swap_shift(p, 0.0), p.at_drive_detuning_mhz)?;
        let pi = calibrate_pi_pulse(p, protocol)?;
        Ok(Self {
            params: p.clone(),
            protocol: protocol.clone(),
            pi,
            work_amp_mhz: work_amp,
            swap_amp_mhz: swap_amp,
            superposition_gain: protocol.superposition_gain.unwrap_or(1.0),
            superposition_phase_offset_rad: protocol.superposition_phase_offset_rad.unwrap_or(0.0),
        })
    }

    /// ω₊ − ω_q placing the upper branch `magnon_detuning_mhz` above the magnon.
    fn swap_shift(p: &PhysicalParams, magnon_detuning_mhz: f64) -> f64 {
        (p.magnon_idle_freq_ghz - p.qubit_freq_ghz) * 1e3 + magnon_detuning_mhz
    }

    pub fn swap_amplitude(&self, magnon_detuning_mhz: f64) -> Result<f64> {
        if magnon_detuning_mhz == 0.0 {
            return Ok(self.swap_amp_mhz);
        }
        required_drive_amplitude(Self::swap_shift(&self.params, magnon_detuning_mhz), self.params.at_drive_detuning_mhz)
    }

    fn at_segment(&self, start: f64, duration: f64, amp: f64) -> PulseSegment {
        PulseSegment::new(Channel::AtControl, start, duration, amp).with_carrier(-self.params.at_drive_detuning_mhz)
    }

    /// AT segments of an interaction window at the swap point, with the
    /// optional ramp from `from_amp` occupying its first part.
    fn swap_window(&self, start: f64, tau: f64, from_amp: f64, swap_amp: f64) -> Vec<PulseSegment> {
        let mut out = Vec::new();
        if tau <= 0.0 {
            return out;
        }
        let ramp = self.protocol.at_ramp_ns.min(tau);
        if ramp > 0.0 && swap_amp > 0.0 {
            out.push(
                self.at_segment(start, ramp, swap_amp)
                    .with_envelope(Envelope::Linear { start: from_amp / swap_amp, end: 1.0 }),
            );
        }
        if tau - ramp > TIME_EPS {
            out.push(self.at_segment(start + ramp, tau - ramp, swap_amp));
        }
        out
    }

    fn rotation_segment(&self, angle: f64, phase: f64) -> PulseSegment {
        let mut s = PulseSegment::new(Channel::QubitXy, 0.0, self.pi.duration_ns, self.pi.amplitude_mhz * angle / PI)
            .with_phase(phase)
            .with_carrier(self.pi.carrier_detuning_mhz)
            .with_envelope(self.pi.envelope);
        s.nominal_angle_rad = Some(angle);
        s
    }

    /// π pulse at the work point, then `tau` ns at the swap point, then readout.
    pub fn seq_swap(&self, tau_ns: f64, magnon_detuning_mhz: f64) -> Result<PulseSchedule> {
        if !(tau_ns >= 0.0) {
            return Err(Error::Schedule(format!("tau must be >= 0, got {tau_ns}")));
        }
        let t_pi = self.pi.duration_ns;
        let swap_amp = self.swap_amplitude(magnon_detuning_mhz)?;
        let mut segs = vec![self.at_segment(0.0, t_pi, self.work_amp_mhz), self.rotation_segment(PI, PI / 2.0)];
        segs.extend(self.swap_window(t_pi, tau_ns, self.work_amp_mhz, swap_amp));
        PulseSchedule::new(segs, t_pi + tau_ns, t_pi + tau_ns)
    }

    /// Qubit rotation at the work point followed by the transfer swap.
    pub fn seq_state_prep(&self, target: StateTarget) -> Result<PulseSchedule> {
        let t_pi = self.pi.duration_ns;
        let mut segs = vec![self.at_segment(0.0, t_pi, self.work_amp_mhz)];
        match target {
            StateTarget::Vacuum => {}
            StateTarget::SingleMagnon => segs.push(self.rotation_segment(PI, PI / 2.0)),
            StateTarget::Superposition { re, im } => {
                let c = C64::new(re, im);
                if !c.norm().is_finite() {
                    return Err(Error::InvalidParameter { key: "c", reason: "must be finite".into() });
                }
                let angle = 2.0 * (self.superposition_gain * c.norm()).atan();
                let phase = c.arg() + PI / 2.0 + self.superposition_phase_offset_rad;
                if angle > 0.0 {
                    segs.push(self.rotation_segment(angle, phase));
                }
            }
        }
        segs.extend(self.swap_window(t_pi, self.protocol.prep_swap_ns, self.work_amp_mhz, self.swap_amp_mhz));
        let end = t_pi + self.protocol.prep_swap_ns;
        PulseSchedule::new(segs, end, end)
    }

    /// Magnon drive segment realizing D(−α) in the magnon frame, so that the
    /// subsequent parity measurement samples W(α).
    pub fn displacement_segment(&self, alpha: C64) -> PulseSegment {
        let t = self.protocol.displacement_duration_ns;
        let amp = self.protocol.displacement_gain * alpha.norm() / (PI * t * 1e-3);
        let phase = if alpha.norm() > 0.0 { alpha.arg() - PI / 2.0 } else { 0.0 };
        PulseSegment::new(Channel::MagnonDrive, 0.0, t, amp).with_phase(phase)
    }

    /// `prep`, then the displacement, then `tau` ns at the swap point.
    pub fn seq_wigner_point(&self, prep: &PulseSchedule, alpha: C64, tau_ns: f64) -> Result<PulseSchedule> {
        if !(tau_ns >= 0.0) {
            return Err(Error::Schedule(format!("tau must be >= 0, got {tau_ns}")));
        }
        let disp = self.displacement_segment(alpha);
        let mut tail = vec![disp];
        tail.extend(self.swap_window(disp.duration_ns, tau_ns, 0.0, self.swap_amp_mhz));
        let mut sched = prep.extended(&tail)?;
        let end = prep.readout_at_ns + disp.duration_ns + tau_ns;
        sched.readout_at_ns = end;
        sched.total_duration_ns = end;
        sched.validate()?;
        Ok(sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn builder() -> SequenceBuilder {
        static B: std::sync::OnceLock<SequenceBuilder> = std::sync::OnceLock::new();
        B.get_or_init(|| SequenceBuilder::new(&PhysicalParams::default(), &Protocol::default()).unwrap()).clone()
    }

    #[test]
    fn bare_pi_pulse_area_theorem() {
        let p = PhysicalParams::default();
        let field = ControlField::off(&p);
        let pi = calibrate_pi_pulse_for(&field, 0.0, 20.0, Envelope::Rectangular, 1e-3).unwrap();
        assert_abs_diff_eq!(pi.amplitude_mhz, 25.0, epsilon = 1e-6);
        assert_eq!(pi.duration_ns, 20.0);
        assert!(pi.infidelity < 1e-12);
        let long = calibrate_pi_pulse_for(&field, 0.0, 40.0, Envelope::Rectangular, 1e-3).unwrap();
        assert!((long.amplitude_mhz / pi.amplitude_mhz - 0.5).abs() <= 0.05 * 0.5);
    }

    #[test]
    fn work_point_pi_pulse_meets_tolerance() {
        let b = builder();
        assert!(b.pi.infidelity <= 1e-3, "{:?}", b.pi);
        // doubling the duration (and width) roughly halves the amplitude
        let p = PhysicalParams::default();
        let proto = Protocol {
            pi_duration_ns: 96.0,
            pi_envelope: Envelope::Gaussian { sigma_ns: 24.0 },
            ..Protocol::default()
        };
        let long = calibrate_pi_pulse(&p, &proto).unwrap();
        let ratio = long.amplitude_mhz / b.pi.amplitude_mhz;
        assert!((ratio - 0.5).abs() <= 0.05 * 0.5, "amplitude ratio {ratio}");
    }

    #[test]
    fn short_rectangular_pulse_hits_leakage_floor() {
        let p = PhysicalParams::default();
        let proto = Protocol { pi_duration_ns: 20.0, pi_envelope: Envelope::Rectangular, ..Protocol::default() };
        let pi = calibrate_pi_pulse(&p, &proto).unwrap();
        assert!(pi.infidelity > 1e-2, "{:?}", pi);
    }

    #[test]
    fn double_pi_pulse_returns_to_ground() {
        let b = builder();
        let field = ControlField {
            amplitude_mhz: b.work_amp_mhz,
            phase_rad: 0.0,
            detuning_d_mhz: PhysicalParams::default().at_drive_detuning_mhz,
        };
        let u = qutrit_pulse_unitary(
            &field,
            b.pi.carrier_detuning_mhz,
            b.pi.amplitude_mhz,
            b.pi.duration_ns,
            b.pi.envelope,
        )
        .unwrap();
        let u2 = &u * &u;
        let target = field.coupled_state(crate::model::ExchangeModel::DressedQubit);
        let p_plus: f64 = (0..3).map(|k| target[k].conj() * u2[(k, 0)]).sum::<C64>().norm_sqr();
        assert!(p_plus <= 0.01, "P+ after two pi pulses: {p_plus}");
    }

    #[test]
    fn gaussian_pi_pulse() {
        let p = PhysicalParams::default();
        let field = ControlField::off(&p);
        let env = Envelope::Gaussian { sigma_ns: 5.0 };
        let pi = calibrate_pi_pulse_for(&field, 0.0, 30.0, env, 1e-3).unwrap();
        // area theorem: A · ∫env = 0.5 cycle
        let area = pi.amplitude_mhz * 1e-3 * env.mean(30.0) * 30.0;
        assert_abs_diff_eq!(area, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn swap_schedule_layout() {
        let b = builder();
        let s = b.seq_swap(45.0, 0.0).unwrap();
        let t_pi = b.pi.duration_ns;
        assert_abs_diff_eq!(s.readout_at_ns, t_pi + 45.0);
        let at: Vec<_> = s.segments.iter().filter(|x| x.channel == Channel::AtControl).collect();
        assert_eq!(at.len(), 2);
        assert_abs_diff_eq!(at[1].amplitude_mhz, 160.97, epsilon = 5e-3);
        assert_eq!(at[1].carrier_detuning_mhz, -3.0);
        let zero = b.seq_swap(0.0, 0.0).unwrap();
        assert_abs_diff_eq!(zero.readout_at_ns, t_pi);
        assert!(b.seq_swap(-1.0, 0.0).is_err());
    }

    #[test]
    fn prep_schedules() {
        let b = builder();
        let vac = b.seq_state_prep(StateTarget::Vacuum).unwrap();
        assert!(vac.segments.iter().all(|s| s.channel != Channel::QubitXy));
        let one = b.seq_state_prep(StateTarget::SingleMagnon).unwrap();
        let xy: Vec<_> = one.segments.iter().filter(|s| s.channel == Channel::QubitXy).collect();
        assert_eq!(xy.len(), 1);
        assert_abs_diff_eq!(xy[0].nominal_angle_rad.unwrap(), PI);
        let sup = b.seq_state_prep(StateTarget::superposition(C64::new(1.0, 0.0))).unwrap();
        let xy: Vec<_> = sup.segments.iter().filter(|s| s.channel == Channel::QubitXy).collect();
        assert_abs_diff_eq!(xy[0].nominal_angle_rad.unwrap(), PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xy[0].amplitude_mhz, b.pi.amplitude_mhz / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vac.readout_at_ns, b.pi.duration_ns + 45.0);
    }

    #[test]
    fn large_superposition_approaches_single_magnon() {
        let b = builder();
        let sup = b.seq_state_prep(StateTarget::superposition(C64::new(1e9, 0.0))).unwrap();
        let one = b.seq_state_prep(StateTarget::SingleMagnon).unwrap();
        let a = sup.segments.iter().find(|s| s.channel == Channel::QubitXy).unwrap();
        let c = one.segments.iter().find(|s| s.channel == Channel::QubitXy).unwrap();
        assert_abs_diff_eq!(a.amplitude_mhz, c.amplitude_mhz, epsilon = 1e-6);
        assert_abs_diff_eq!(a.phase_rad, c.phase_rad, epsilon = 1e-12);
    }

    #[test]
    fn wigner_point_schedule() {
        let b = builder();
        let prep = b.seq_state_prep(StateTarget::Vacuum).unwrap();
        let s = b.seq_wigner_point(&prep, C64::new(0.5, 0.0), 30.0).unwrap();
        let d = s.segments.iter().find(|x| x.channel == Channel::MagnonDrive).unwrap();
        assert_abs_diff_eq!(d.start_ns, prep.readout_at_ns);
        // 2π · (A/2) · T = |α| with A in cycles/ns
        assert_abs_diff_eq!(PI * d.amplitude_mhz * 1e-3 * d.duration_ns, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.readout_at_ns, prep.readout_at_ns + d.duration_ns + 30.0);
        let z = b.seq_wigner_point(&prep, ZERO, 0.0).unwrap();
        assert_eq!(z.segments.iter().find(|x| x.channel == Channel::MagnonDrive).unwrap().amplitude_mhz, 0.0);
    }

    #[test]
    fn ramp_inserts_linear_segment() {
        let proto = Protocol { at_ramp_ns: 4.0, ..Protocol::default() };
        let b = SequenceBuilder::new(&PhysicalParams::default(), &proto).unwrap();
        let s = b.seq_swap(30.0, 0.0).unwrap();
        let at: Vec<_> = s.segments.iter().filter(|x| x.channel == Channel::AtControl).collect();
        assert_eq!(at.len(), 3);
        assert!(matches!(at[1].envelope, Envelope::Linear { .. }));
        assert_abs_diff_eq!(at[1].drive_at(at[1].start_ns).amplitude_mhz, b.work_amp_mhz, epsilon = 1e-9);
    }

    #[test]
    fn overlap_rejected() {
        let segs = vec![
            PulseSegment::new(Channel::QubitXy, 0.0, 10.0, 1.0),
            PulseSegment::new(Channel::QubitXy, 5.0, 10.0, 1.0),
        ];
        assert!(matches!(PulseSchedule::ending_at_last_segment(segs), Err(Error::Schedule(_))));
        let ok = vec![
            PulseSegment::new(Channel::QubitXy, 0.0, 10.0, 1.0),
            PulseSegment::new(Channel::QubitXy, 10.0, 10.0, 1.0),
            PulseSegment::new(Channel::AtControl, 5.0, 10.0, 1.0),
        ];
        let s = PulseSchedule::ending_at_last_segment(ok).unwrap();
        assert_eq!(s.breakpoints(), vec![0.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(s.active_drives(10.0).len(), 2);
        assert!(PulseSchedule::new(vec![PulseSegment::new(Channel::QubitXy, 0.0, 0.0, 1.0)], 0.0, 0.0).is_err());
        assert!(PulseSchedule::new(vec![PulseSegment::new(Channel::QubitXy, 0.0, 5.0, 1.0)], 4.0, 5.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let b = builder();
        let s = b
            .seq_wigner_point(&b.seq_state_prep(StateTarget::SingleMagnon).unwrap(), C64::new(0.3, -0.2), 12.0)
            .unwrap();
        let text = s.to_json().unwrap();
        assert!(text.contains("\"magnon_drive\""));
        assert_eq!(PulseSchedule::from_json(&text).unwrap(), s);
    }

    proptest! {
        #[test]
        fn builders_never_overlap(tau in 0.0f64..200.0, det in -15.0f64..15.0, re in -2.0f64..2.0, im in -2.0f64..2.0) {
            let b = builder();
            b.seq_swap(tau, det).unwrap().validate().unwrap();
            let prep = b.seq_state_prep(StateTarget::superposition(C64::new(re, im))).unwrap();
            b.seq_wigner_point(&prep, C64::new(im, re), tau).unwrap().validate().unwrap();
        }
    }
}
