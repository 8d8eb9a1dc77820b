//! A virtual coin cell: executes cycling protocols (constant-current
//! charge, constant-voltage hold, constant-current discharge, rest,
//! impedance triggers) against a simple empirical model.
//!
//! The model state is a state of charge on a piecewise-linear OCV curve.
//! Terminal voltage is `ocv(soc) ± I·r_internal`. The one-hour capacity
//! at rate C on cycle n is
//!
//! ```text
//! q_step(C, n) = q_nominal · (1 − fade)^n · C^(−rate_exponent)
//! ```
//!
//! and current is normalized to that capacity, so a full sweep of the
//! state of charge at rate C takes exactly 3600/C seconds while the
//! charge moved scales with the rate-dependent capacity. Integration
//! uses a fixed time step with trapezoidal charge accounting; state-of-
//! charge updates are defined by the same trapezoid, which makes charge
//! conservation exact up to rounding.

pub mod protocols;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

use crate::eis::CircuitParams;

#[derive(Debug, Error, PartialEq)]
pub enum CellError {
    #[error("state of charge {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("step exceeded the maximum duration after {elapsed_s} s")]
    Nonconvergent { elapsed_s: f64 },
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("invalid cell parameters: {0}")]
    InvalidParameters(String),
}

/// Monotone open-circuit-voltage table over state of charge in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcvTable {
    knots: Vec<(f64, f64)>,
}

impl OcvTable {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, CellError> {
        if knots.len() < 2 {
            return Err(CellError::InvalidParameters(
                "ocv table needs at least 2 knots".into(),
            ));
        }
        if knots[0].0 != 0.0 || knots[knots.len() - 1].0 != 1.0 {
            return Err(CellError::InvalidParameters(
                "ocv table must span soc 0..1".into(),
            ));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                return Err(CellError::InvalidParameters(
                    "ocv table must be strictly increasing".into(),
                ));
            }
        }
        Ok(OcvTable { knots })
    }

    /// Five-knot default spanning 3.0 V to 4.3 V.
    pub fn default_table() -> Self {
        OcvTable::new(vec![
            (0.0, 3.0),
            (0.25, 3.5),
            (0.5, 3.75),
            (0.75, 3.95),
            (1.0, 4.3),
        ])
        .expect("valid default table")
    }

    pub fn min_v(&self) -> f64 {
        self.knots[0].1
    }

    pub fn max_v(&self) -> f64 {
        self.knots[self.knots.len() - 1].1
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    /// Piecewise-linear interpolation; errors outside [0, 1].
    pub fn interp(&self, soc: f64) -> Result<f64, CellError> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(CellError::OutOfRange(soc));
        }
        let (lo, hi) = self.segment(soc);
        let (s0, v0) = self.knots[lo];
        let (s1, v1) = self.knots[hi];
        Ok(v0 + (v1 - v0) * (soc - s0) / (s1 - s0))
    }

    /// Indices of the segment containing `soc` (clamped to the table).
    fn segment(&self, soc: f64) -> (usize, usize) {
        let n = self.knots.len();
        let mut hi = self.knots.partition_point(|&(s, _)| s < soc);
        if hi == 0 {
            hi = 1;
        }
        if hi > n - 1 {
            hi = n - 1;
        }
        (hi - 1, hi)
    }

    /// Slope and intercept of the segment to integrate upward through:
    /// v = a + b·soc plus the segment's upper soc bound. A soc sitting
    /// exactly on a knot resolves to the segment above it.
    fn segment_line(&self, soc: f64) -> (f64, f64, f64) {
        let n = self.knots.len();
        let hi = self
            .knots
            .partition_point(|&(s, _)| s <= soc)
            .clamp(1, n - 1);
        let (s0, v0) = self.knots[hi - 1];
        let (s1, v1) = self.knots[hi];
        let b = (v1 - v0) / (s1 - s0);
        (v0 - b * s0, b, s1)
    }
}

/// Per-cell model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParameters {
    pub q_nominal_mah: f64,
    pub r_internal_ohm: f64,
    pub fade_per_cycle: f64,
    /// Peukert-like exponent of the empirical rate law C^(−exponent).
    pub rate_exponent: f64,
    pub ocv: OcvTable,
    pub circuit: CircuitParams,
    /// Per-cycle multiplicative drift applied to circuit resistances.
    pub eis_drift_per_cycle: f64,
}

impl Default for CellParameters {
    fn default() -> Self {
        use crate::eis::RcArc;
        use std::f64::consts::TAU;
        CellParameters {
            q_nominal_mah: 3.5,
            r_internal_ohm: 0.05,
            fade_per_cycle: 0.0005,
            rate_exponent: 0.05,
            ocv: OcvTable::default_table(),
            circuit: CircuitParams::new(
                4.0,
                [
                    RcArc::new(5.0, 1.0 / (TAU * 5.0 * 5000.0)),
                    RcArc::new(10.0, 1.0 / (TAU * 10.0 * 120.0)),
                    RcArc::new(25.0, 1.0 / (TAU * 25.0 * 2.5)),
                ],
            )
            .expect("valid default circuit"),
            eis_drift_per_cycle: 0.002,
        }
    }
}

impl CellParameters {
    pub fn validate(&self) -> Result<(), CellError> {
        if !(self.q_nominal_mah > 0.0) {
            return Err(CellError::InvalidParameters("q_nominal must be > 0".into()));
        }
        if self.r_internal_ohm < 0.0 {
            return Err(CellError::InvalidParameters(
                "r_internal must be >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.fade_per_cycle) {
            return Err(CellError::InvalidParameters(
                "fade_per_cycle must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Effective one-hour capacity at `c_rate` on cycle `cycles`.
    pub fn q_step_mah(&self, c_rate: f64, cycles: u32) -> f64 {
        self.q_nominal_mah
            * (1.0 - self.fade_per_cycle).powi(cycles as i32)
            * c_rate.powf(-self.rate_exponent)
    }

    /// Equivalent circuit after `cycles` completed cycles, resistances
    /// drifted multiplicatively.
    pub fn circuit_at(&self, cycles: u32) -> CircuitParams {
        self.circuit
            .with_scaled_resistances((1.0 + self.eis_drift_per_cycle).powi(cycles as i32))
    }
}

/// Population-level spread applied when sampling cells from a base
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationNoise {
    /// Relative standard deviation on nominal capacity.
    pub capacity_rsd: f64,
    /// Absolute standard deviation on each circuit resistance, Ω.
    pub resistance_sigma_ohm: f64,
}

impl Default for PopulationNoise {
    fn default() -> Self {
        PopulationNoise {
            capacity_rsd: 0.0104,
            resistance_sigma_ohm: 2.5,
        }
    }
}

/// Draws `n` cells around `base`: capacity with relative sigma, circuit
/// resistances with absolute sigma, all draws clamped positive.
pub fn sample_population<R: Rng>(
    base: &CellParameters,
    noise: &PopulationNoise,
    n: usize,
    rng: &mut R,
) -> Vec<CellParameters> {
    assert!(n >= 1, "population size must be >= 1");
    assert!(noise.capacity_rsd >= 0.0 && noise.resistance_sigma_ohm >= 0.0);
    let q_dist = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cell = base.clone();
        if noise.capacity_rsd > 0.0 {
            let z = q_dist.sample(rng);
            cell.q_nominal_mah =
                (base.q_nominal_mah * (1.0 + noise.capacity_rsd * z)).max(1e-3);
        }
        if noise.resistance_sigma_ohm > 0.0 {
            let sigma = noise.resistance_sigma_ohm;
            cell.circuit.r1 = (base.circuit.r1 + sigma * q_dist.sample(rng)).max(1e-3);
            for (arc, base_arc) in cell.circuit.arcs.iter_mut().zip(&base.circuit.arcs) {
                arc.r = (base_arc.r + sigma * q_dist.sample(rng)).max(1e-3);
            }
            cell.circuit.canonicalize();
        }
        out.push(cell);
    }
    out
}

/// One step of a cycling protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolStep {
    CcCharge { c_rate: f64, v_limit: f64 },
    CvHold { c_rate: f64, v_limit: f64, cutoff_c_rate: f64 },
    CcDischarge { c_rate: f64, v_limit: f64 },
    Rest { duration_s: f64 },
    EisTrigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub steps: Vec<ProtocolStep>,
}

impl Protocol {
    pub fn new(name: &str, steps: Vec<ProtocolStep>) -> Result<Self, CellError> {
        let p = Protocol {
            name: name.to_string(),
            steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if self.steps.is_empty() {
            return Err(CellError::InvalidProtocol("no steps".into()));
        }
        let mut last_charge_limit: Option<f64> = None;
        for step in &self.steps {
            match *step {
                ProtocolStep::CcCharge { c_rate, v_limit }
                | ProtocolStep::CvHold {
                    c_rate, v_limit, ..
                } => {
                    if c_rate <= 0.0 {
                        return Err(CellError::InvalidProtocol("c_rate must be > 0".into()));
                    }
                    last_charge_limit = Some(v_limit);
                    if let ProtocolStep::CvHold { cutoff_c_rate, .. } = *step {
                        if cutoff_c_rate <= 0.0 {
                            return Err(CellError::InvalidProtocol(
                                "cutoff_c_rate must be > 0".into(),
                            ));
                        }
                    }
                }
                ProtocolStep::CcDischarge { c_rate, v_limit } => {
                    if c_rate <= 0.0 {
                        return Err(CellError::InvalidProtocol("c_rate must be > 0".into()));
                    }
                    if let Some(v_max) = last_charge_limit {
                        if v_limit >= v_max {
                            return Err(CellError::InvalidProtocol(format!(
                                "voltage window inverted: v_min {v_limit} >= v_max {v_max}"
                            )));
                        }
                    }
                }
                ProtocolStep::Rest { duration_s } => {
                    if duration_s < 0.0 {
                        return Err(CellError::InvalidProtocol(
                            "rest duration must be >= 0".into(),
                        ));
                    }
                }
                ProtocolStep::EisTrigger => {}
            }
        }
        Ok(())
    }

    /// Appends `repeat` copies of a step sequence.
    pub fn push_repeated(&mut self, block: &[ProtocolStep], repeat: u32) {
        assert!(repeat >= 1, "repeat must be >= 1");
        for _ in 0..repeat {
            self.steps.extend_from_slice(block);
        }
    }
}

/// Instantaneous cell state between steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub soc: f64,
    pub completed_cycles: u32,
}

impl CellState {
    pub fn new(soc: f64) -> Self {
        CellState {
            soc,
            completed_cycles: 0,
        }
    }
}

/// A logged (time, terminal voltage, current, soc) point. Time is
/// relative to the step start; current is positive while charging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_s: f64,
    pub v: f64,
    pub i_ma: f64,
    pub soc: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: CellState,
    pub elapsed_s: f64,
    /// Unsigned charge moved during the step, mAh.
    pub transferred_mah: f64,
    pub samples: Vec<Sample>,
}

trait SampleSink {
    fn push(&mut self, s: Sample);
}

struct Collect(Vec<Sample>);

impl SampleSink for Collect {
    fn push(&mut self, s: Sample) {
        self.0.push(s);
    }
}

struct Discard;

impl SampleSink for Discard {
    fn push(&mut self, _: Sample) {}
}

/// Keeps every `stride`-th sample.
struct Decimate {
    stride: usize,
    seen: usize,
    out: Vec<Sample>,
}

impl SampleSink for Decimate {
    fn push(&mut self, s: Sample) {
        if self.seen % self.stride == 0 {
            self.out.push(s);
        }
        self.seen += 1;
    }
}

/// Integration configuration.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub dt_s: f64,
    /// A single step exceeding this duration is reported as nonconvergent.
    pub max_step_s: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt_s: 1.0,
            max_step_s: 36_000.0,
        }
    }
}

/// Runs one protocol step to completion at fixed `dt`, collecting every
/// integration node.
pub fn simulate_step(
    params: &CellParameters,
    state: CellState,
    step: &ProtocolStep,
    dt_s: f64,
) -> Result<StepOutcome, CellError> {
    assert!(dt_s > 0.0, "dt must be > 0");
    params.validate()?;
    if !(0.0..=1.0).contains(&state.soc) {
        return Err(CellError::OutOfRange(state.soc));
    }
    let opts = SimOptions {
        dt_s,
        ..SimOptions::default()
    };
    let mut sink = Collect(Vec::new());
    let (state, elapsed, mah) = run_step(params, state, step, &opts, &mut sink)?;
    Ok(StepOutcome {
        state,
        elapsed_s: elapsed,
        transferred_mah: mah,
        samples: sink.0,
    })
}

fn run_step<S: SampleSink>(
    params: &CellParameters,
    state: CellState,
    step: &ProtocolStep,
    opts: &SimOptions,
    sink: &mut S,
) -> Result<(CellState, f64, f64), CellError> {
    match *step {
        ProtocolStep::CcCharge { c_rate, v_limit } => {
            integrate_cc(params, state, c_rate, v_limit, 1.0, opts, sink)
        }
        ProtocolStep::CcDischarge { c_rate, v_limit } => {
            integrate_cc(params, state, c_rate, v_limit, -1.0, opts, sink)
        }
        ProtocolStep::CvHold {
            c_rate,
            v_limit,
            cutoff_c_rate,
        } => integrate_cv(params, state, c_rate, v_limit, cutoff_c_rate, opts, sink),
        ProtocolStep::Rest { duration_s } => {
            let v = params.ocv.interp(state.soc)?;
            sink.push(Sample {
                t_s: 0.0,
                v,
                i_ma: 0.0,
                soc: state.soc,
            });
            if duration_s > 0.0 {
                sink.push(Sample {
                    t_s: duration_s,
                    v,
                    i_ma: 0.0,
                    soc: state.soc,
                });
            }
            Ok((state, duration_s, 0.0))
        }
        ProtocolStep::EisTrigger => Ok((state, 0.0, 0.0)),
    }
}

/// Constant-current phase. `sign` is +1 charging, −1 discharging; the
/// phase ends when the terminal voltage crosses `v_limit` (localized by
/// bisection within the crossing time step) or the state of charge hits
/// its boundary.
fn integrate_cc<S: SampleSink>(
    params: &CellParameters,
    state: CellState,
    c_rate: f64,
    v_limit: f64,
    sign: f64,
    opts: &SimOptions,
    sink: &mut S,
) -> Result<(CellState, f64, f64), CellError> {
    let q_step = params.q_step_mah(c_rate, state.completed_cycles);
    let i_ma = c_rate * q_step;
    let drop_v = i_ma / 1000.0 * params.r_internal_ohm;
    let terminal = |soc: f64| -> f64 {
        let ocv = params.ocv.interp(soc).expect("soc clamped in range");
        ocv + sign * drop_v
    };
    let crossed = |v: f64| -> bool {
        if sign > 0.0 {
            v >= v_limit
        } else {
            v <= v_limit
        }
    };

    let mut soc = state.soc;
    let mut t = 0.0;
    let mut mah = 0.0;
    sink.push(Sample {
        t_s: 0.0,
        v: terminal(soc),
        i_ma: sign * i_ma,
        soc,
    });
    if crossed(terminal(soc)) {
        return Ok((CellState { soc, ..state }, 0.0, 0.0));
    }

    let dsoc_per_s = c_rate / 3600.0;
    loop {
        if t > opts.max_step_s {
            return Err(CellError::Nonconvergent { elapsed_s: t });
        }
        // Time step, shortened at the soc boundary.
        let bound = if sign > 0.0 { 1.0 } else { 0.0 };
        let dt_to_bound = (bound - soc).abs() / dsoc_per_s;
        let dt = opts.dt_s.min(dt_to_bound);
        if dt <= 1e-12 {
            // Boundary reached without hitting the voltage limit.
            return Ok((CellState { soc, ..state }, t, mah));
        }
        let soc_next = soc + sign * dsoc_per_s * dt;
        let v_next = terminal(soc_next.clamp(0.0, 1.0));
        if crossed(v_next) {
            // Bisect for the crossing time within (0, dt].
            let mut lo = 0.0;
            let mut hi = dt;
            for _ in 0..80 {
                if hi - lo < 1e-9 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let s_mid = (soc + sign * dsoc_per_s * mid).clamp(0.0, 1.0);
                if crossed(terminal(s_mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let s_end = (soc + sign * dsoc_per_s * hi).clamp(0.0, 1.0);
            mah += i_ma * hi / 3600.0;
            t += hi;
            sink.push(Sample {
                t_s: t,
                v: terminal(s_end),
                i_ma: sign * i_ma,
                soc: s_end,
            });
            return Ok((CellState { soc: s_end, ..state }, t, mah));
        }
        soc = soc_next.clamp(0.0, 1.0);
        mah += i_ma * dt / 3600.0;
        t += dt;
        sink.push(Sample {
            t_s: t,
            v: v_next,
            i_ma: sign * i_ma,
            soc,
        });
    }
}

/// Constant-voltage hold at `v_limit`. The current decays as the state of
/// charge rises, solving `ocv(soc) + I·r = v_limit`; the update is the
/// implicit trapezoid rule, solved in closed form on each linear OCV
/// segment with sub-steps at knot crossings so that the trapezoidal
/// integral of the logged samples reproduces the soc change exactly.
fn integrate_cv<S: SampleSink>(
    params: &CellParameters,
    state: CellState,
    c_rate: f64,
    v_limit: f64,
    cutoff_c_rate: f64,
    opts: &SimOptions,
    sink: &mut S,
) -> Result<(CellState, f64, f64), CellError> {
    let q_step = params.q_step_mah(c_rate, state.completed_cycles);
    let i_cut_ma = cutoff_c_rate * q_step;
    let r = params.r_internal_ohm;

    let mut soc = state.soc;
    let current_ma = |s: f64, table: &OcvTable| -> f64 {
        1000.0 * (v_limit - table.interp(s).expect("in range")) / r
    };

    if r == 0.0 {
        // No overpotential: the hold terminates immediately.
        sink.push(Sample {
            t_s: 0.0,
            v: v_limit,
            i_ma: 0.0,
            soc,
        });
        return Ok((state, 0.0, 0.0));
    }

    let mut i_now = current_ma(soc, &params.ocv);
    sink.push(Sample {
        t_s: 0.0,
        v: v_limit,
        i_ma: i_now,
        soc,
    });
    if i_now <= i_cut_ma {
        return Ok((state, 0.0, 0.0));
    }

    let mut t = 0.0;
    let mut mah = 0.0;
    loop {
        if t > opts.max_step_s {
            return Err(CellError::Nonconvergent { elapsed_s: t });
        }
        if soc >= 1.0 {
            return Ok((CellState { soc, ..state }, t, mah));
        }
        let (a, b, seg_top) = params.ocv.segment_line(soc);
        // Trapezoid update within the linear segment v_ocv = a + b·soc.
        let k = 1000.0 * opts.dt_s / (7200.0 * q_step * r);
        let s_full = (soc + k * (2.0 * (v_limit - a) - b * soc)) / (1.0 + k * b);
        // Stop targets: cutoff current and segment top.
        let s_cut = (v_limit - a - i_cut_ma * r / 1000.0) / b;
        let bound = s_cut.min(seg_top).min(1.0);
        let (s_next, done) = if s_full >= bound {
            (bound, bound == s_cut || bound >= 1.0)
        } else {
            (s_full, false)
        };
        let i_next = current_ma(s_next, &params.ocv);
        // Advance time consistently with the trapezoid relation.
        let dt = if s_full >= bound {
            (s_next - soc) * 7200.0 * q_step / (i_now + i_next)
        } else {
            opts.dt_s
        };
        mah += (i_now + i_next) * 0.5 * dt / 3600.0;
        t += dt;
        soc = s_next;
        i_now = i_next;
        sink.push(Sample {
            t_s: t,
            v: v_limit,
            i_ma: i_now,
            soc,
        });
        if done {
            return Ok((CellState { soc, ..state }, t, mah));
        }
    }
}

/// Per-cycle summary row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleRow {
    pub cycle: u32,
    pub c_rate: f64,
    pub charge_mah: f64,
    pub discharge_mah: f64,
    pub coulombic_efficiency: f64,
}

/// Full cycling outcome of one cell.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CyclingRecord {
    pub rows: Vec<CycleRow>,
    /// Decimated voltage trace, when requested.
    pub trace: Option<Vec<Sample>>,
}

impl CyclingRecord {
    /// Writes `cycle,c_rate,charge_mAh,discharge_mAh,ce` rows with fixed
    /// 6-decimal formatting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "cycle,c_rate,charge_mAh,discharge_mAh,ce")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6}",
                row.cycle, row.c_rate, row.charge_mah, row.discharge_mah, row.coulombic_efficiency
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, CellError> {
        let mut rows = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line.map_err(|e| CellError::InvalidParameters(e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with("cycle") {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 5 {
                return Err(CellError::InvalidParameters(format!(
                    "cycling csv line {}: expected 5 fields",
                    idx + 1
                )));
            }
            let parse = |s: &str| -> Result<f64, CellError> {
                s.trim()
                    .parse()
                    .map_err(|_| CellError::InvalidParameters(format!("bad number at line {}", idx + 1)))
            };
            rows.push(CycleRow {
                cycle: parse(fields[0])? as u32,
                c_rate: parse(fields[1])?,
                charge_mah: parse(fields[2])?,
                discharge_mah: parse(fields[3])?,
                coulombic_efficiency: parse(fields[4])?,
            });
        }
        Ok(CyclingRecord { rows, trace: None })
    }
}

/// An impedance measurement request raised by a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct EisTriggerPoint {
    /// 1-based trigger index within the protocol.
    pub index: u32,
    /// Protocol-relative time of the trigger, seconds.
    pub t_s: f64,
    pub cycle: u32,
    /// Rate context: the C-rate of the block preceding the trigger.
    pub c_rate: f64,
    /// Drifted equivalent circuit at the trigger.
    pub circuit: CircuitParams,
}

/// Either an impedance trigger or protocol completion.
#[derive(Debug, Clone, PartialEq)]
pub enum SegmentEnd {
    Trigger(EisTriggerPoint),
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentResult {
    pub elapsed_s: f64,
    pub end: SegmentEnd,
}

/// Incremental protocol executor; segments run until the next impedance
/// trigger so a scheduler can interleave measurements.
pub struct ProtocolRunner {
    params: CellParameters,
    protocol: Protocol,
    state: CellState,
    opts: SimOptions,
    step_idx: usize,
    clock_s: f64,
    rows: Vec<CycleRow>,
    pending_charge_mah: f64,
    last_rate: f64,
    trigger_count: u32,
    trace: Option<Decimate>,
}

impl ProtocolRunner {
    pub fn new(
        params: CellParameters,
        protocol: Protocol,
        initial_soc: f64,
        opts: SimOptions,
    ) -> Result<Self, CellError> {
        params.validate()?;
        protocol.validate()?;
        if !(0.0..=1.0).contains(&initial_soc) {
            return Err(CellError::OutOfRange(initial_soc));
        }
        Ok(ProtocolRunner {
            params,
            protocol,
            state: CellState::new(initial_soc),
            opts,
            step_idx: 0,
            clock_s: 0.0,
            rows: Vec::new(),
            pending_charge_mah: 0.0,
            last_rate: 0.0,
            trigger_count: 0,
            trace: None,
        })
    }

    /// Keep every `stride`-th integration sample in the record trace.
    pub fn with_trace(mut self, stride: usize) -> Self {
        self.trace = Some(Decimate {
            stride: stride.max(1),
            seen: 0,
            out: Vec::new(),
        });
        self
    }

    pub fn is_done(&self) -> bool {
        self.step_idx >= self.protocol.steps.len()
    }

    pub fn cycles(&self) -> u32 {
        self.state.completed_cycles
    }

    pub fn clock_s(&self) -> f64 {
        self.clock_s
    }

    /// Drifted circuit at the current cycle count.
    pub fn circuit_now(&self) -> CircuitParams {
        self.params.circuit_at(self.state.completed_cycles)
    }

    /// Advances until the next impedance trigger or protocol completion.
    pub fn run_next_segment(&mut self) -> Result<SegmentResult, CellError> {
        let start = self.clock_s;
        while self.step_idx < self.protocol.steps.len() {
            let step = self.protocol.steps[self.step_idx];
            self.step_idx += 1;
            if let ProtocolStep::EisTrigger = step {
                self.trigger_count += 1;
                let point = EisTriggerPoint {
                    index: self.trigger_count,
                    t_s: self.clock_s,
                    cycle: self.state.completed_cycles,
                    c_rate: self.last_rate,
                    circuit: self.circuit_now(),
                };
                return Ok(SegmentResult {
                    elapsed_s: self.clock_s - start,
                    end: SegmentEnd::Trigger(point),
                });
            }
            let (state, elapsed, mah) = match &mut self.trace {
                Some(sink) => run_step(&self.params, self.state, &step, &self.opts, sink)?,
                None => run_step(&self.params, self.state, &step, &self.opts, &mut Discard)?,
            };
            self.clock_s += elapsed;
            match step {
                ProtocolStep::CcCharge { c_rate, .. } | ProtocolStep::CvHold { c_rate, .. } => {
                    self.pending_charge_mah += mah;
                    self.last_rate = c_rate;
                    self.state = state;
                }
                ProtocolStep::CcDischarge { c_rate, .. } => {
                    let charge = self.pending_charge_mah;
                    let ce = if charge > 0.0 { mah / charge } else { 0.0 };
                    self.rows.push(CycleRow {
                        cycle: self.rows.len() as u32 + 1,
                        c_rate,
                        charge_mah: charge,
                        discharge_mah: mah,
                        coulombic_efficiency: ce,
                    });
                    self.pending_charge_mah = 0.0;
                    self.last_rate = c_rate;
                    self.state = CellState {
                        soc: state.soc,
                        completed_cycles: state.completed_cycles + 1,
                    };
                }
                ProtocolStep::Rest { .. } | ProtocolStep::EisTrigger => {
                    self.state = state;
                }
            }
        }
        Ok(SegmentResult {
            elapsed_s: self.clock_s - start,
            end: SegmentEnd::Done,
        })
    }

    pub fn into_record(self) -> CyclingRecord {
        CyclingRecord {
            rows: self.rows,
            trace: self.trace.map(|d| d.out),
        }
    }

    pub fn rows(&self) -> &[CycleRow] {
        &self.rows
    }
}

/// Runs a whole protocol, returning the cycling record and every
/// impedance trigger point.
pub fn run_protocol(
    params: &CellParameters,
    protocol: &Protocol,
    initial_soc: f64,
    opts: SimOptions,
) -> Result<(CyclingRecord, Vec<EisTriggerPoint>), CellError> {
    let mut runner = ProtocolRunner::new(params.clone(), protocol.clone(), initial_soc, opts)?;
    let mut triggers = Vec::new();
    loop {
        match runner.run_next_segment()?.end {
            SegmentEnd::Trigger(t) => triggers.push(t),
            SegmentEnd::Done => break,
        }
    }
    Ok((runner.into_record(), triggers))
}

#[cfg(test)]
mod tests;
