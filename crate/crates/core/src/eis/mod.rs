//! Equivalent-circuit impedance: spectrum synthesis from a series
//! resistance plus three parallel RC arcs, and complex nonlinear
//! least-squares recovery of the circuit parameters.
//!
//! The circuit is R1 in series with three (R, C) arcs attributed, in
//! descending characteristic frequency, to contact, interphase, and
//! charge-transfer processes:
//!
//! ```text
//! Z(f) = R1 + Σk Rk / (1 + (i·2πf·Rk·Ck)^αk)
//! ```
//!
//! with αk = 1 for ideal capacitors (the default; constant-phase
//! exponents are carried in the data model but not fitted).

mod fit;

pub use fit::{fit, jacobian, FitResult, JACOBIAN_COLUMNS};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Instrument sweep bounds in Hz.
pub const FREQ_MAX_HZ: f64 = 2.0e5;
pub const FREQ_MIN_HZ: f64 = 0.1;
/// Default grid density.
pub const POINTS_PER_DECADE: usize = 10;

#[derive(Debug, Error)]
pub enum EisError {
    #[error("frequency must be positive, got {0}")]
    NonPositiveFrequency(f64),
    #[error("circuit parameters invalid: {0}")]
    InvalidCircuit(String),
    #[error("grid outside instrument bounds [{FREQ_MIN_HZ}, {FREQ_MAX_HZ}] Hz: {0} Hz")]
    GridOutOfBounds(f64),
    #[error("insufficient data: {points} points over {decades:.2} decades (need >= 10 over >= 3)")]
    InsufficientData { points: usize, decades: f64 },
    #[error("degenerate spectrum: all points identical")]
    DegenerateSpectrum,
    #[error("spectrum parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One parallel RC arc. `alpha` is a constant-phase exponent kept at 1.0
/// for ideal capacitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcArc {
    pub r: f64,
    pub c: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl RcArc {
    pub fn new(r: f64, c: f64) -> Self {
        RcArc { r, c, alpha: 1.0 }
    }

    /// Characteristic (apex) frequency 1/(2π·R·C) in Hz.
    pub fn char_freq_hz(&self) -> f64 {
        1.0 / (TAU * self.r * self.c)
    }
}

/// Series resistance plus exactly three RC arcs in canonical order
/// (descending characteristic frequency).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    pub r1: f64,
    pub arcs: [RcArc; 3],
}

impl CircuitParams {
    pub fn new(r1: f64, arcs: [RcArc; 3]) -> Result<Self, EisError> {
        if !(r1 > 0.0) || !r1.is_finite() {
            return Err(EisError::InvalidCircuit(format!("r1 = {r1}")));
        }
        for arc in &arcs {
            if !(arc.r > 0.0 && arc.c > 0.0 && arc.alpha > 0.0 && arc.alpha <= 1.0) {
                return Err(EisError::InvalidCircuit(format!(
                    "arc r = {}, c = {}, alpha = {}",
                    arc.r, arc.c, arc.alpha
                )));
            }
        }
        let mut p = CircuitParams { r1, arcs };
        p.canonicalize();
        Ok(p)
    }

    /// Sort arcs into descending characteristic frequency.
    pub fn canonicalize(&mut self) {
        self.arcs
            .sort_by(|a, b| b.char_freq_hz().total_cmp(&a.char_freq_hz()));
    }

    pub fn impedance(&self, f_hz: f64) -> Result<Complex64, EisError> {
        impedance(self.r1, &self.arcs, f_hz)
    }

    /// Sum of all resistances (the DC limit of the impedance).
    pub fn total_resistance(&self) -> f64 {
        self.r1 + self.arcs.iter().map(|a| a.r).sum::<f64>()
    }

    /// Resistances scaled by a common factor, capacitances untouched.
    pub fn with_scaled_resistances(&self, factor: f64) -> CircuitParams {
        let mut p = *self;
        p.r1 *= factor;
        for arc in &mut p.arcs {
            arc.r *= factor;
        }
        p
    }
}

/// Complex impedance of a series resistance plus arbitrary RC arcs.
pub fn impedance(r1: f64, arcs: &[RcArc], f_hz: f64) -> Result<Complex64, EisError> {
    if !(f_hz > 0.0) {
        return Err(EisError::NonPositiveFrequency(f_hz));
    }
    let omega = TAU * f_hz;
    let mut z = Complex64::new(r1, 0.0);
    for arc in arcs {
        let jwt = Complex64::new(0.0, omega * arc.r * arc.c);
        let denom = 1.0
            + if arc.alpha == 1.0 {
                jwt
            } else {
                jwt.powf(arc.alpha)
            };
        z += arc.r / denom;
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub freq_hz: f64,
    pub re_z_ohm: f64,
    pub im_z_ohm: f64,
}

impl SpectrumPoint {
    pub fn z(&self) -> Complex64 {
        Complex64::new(self.re_z_ohm, self.im_z_ohm)
    }
}

/// Measurement context carried alongside a spectrum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMeta {
    pub cell_id: Option<u32>,
    pub trigger: Option<u32>,
    pub cycle: Option<u32>,
    pub c_rate: Option<f64>,
}

/// An impedance sweep, frequencies strictly descending within the
/// instrument band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub points: Vec<SpectrumPoint>,
    pub meta: SpectrumMeta,
}

impl Spectrum {
    /// Builds a spectrum, normalizing point order to descending frequency.
    pub fn new(mut points: Vec<SpectrumPoint>, meta: SpectrumMeta) -> Result<Self, EisError> {
        if points.is_empty() {
            return Err(EisError::InsufficientData {
                points: 0,
                decades: 0.0,
            });
        }
        for p in &points {
            if !(p.freq_hz > 0.0) {
                return Err(EisError::NonPositiveFrequency(p.freq_hz));
            }
            if !p.freq_hz.is_finite() || !p.re_z_ohm.is_finite() || !p.im_z_ohm.is_finite() {
                return Err(EisError::Parse {
                    line: 0,
                    msg: "non-finite value".into(),
                });
            }
            let tol = 1.0 + 1e-9;
            if p.freq_hz > FREQ_MAX_HZ * tol || p.freq_hz < FREQ_MIN_HZ / tol {
                return Err(EisError::GridOutOfBounds(p.freq_hz));
            }
        }
        points.sort_by(|a, b| b.freq_hz.total_cmp(&a.freq_hz));
        points.dedup_by(|a, b| a.freq_hz == b.freq_hz);
        Ok(Spectrum { points, meta })
    }

    pub fn decades(&self) -> f64 {
        let hi = self.points.first().map(|p| p.freq_hz).unwrap_or(1.0);
        let lo = self.points.last().map(|p| p.freq_hz).unwrap_or(1.0);
        (hi / lo).log10()
    }

    /// Writes `freq_hz,re_z_ohm,im_z_ohm` CSV rows with 6 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EisError> {
        writeln!(w, "freq_hz,re_z_ohm,im_z_ohm")?;
        for p in &self.points {
            writeln!(w, "{:.5e},{:.5e},{:.5e}", p.freq_hz, p.re_z_ohm, p.im_z_ohm)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, meta: SpectrumMeta) -> Result<Self, EisError> {
        let mut points = Vec::new();
        let mut saw_header = false;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            if !saw_header && trimmed.starts_with("freq_hz") {
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 3 {
                return Err(EisError::Parse {
                    line: idx + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64, EisError> {
                s.trim().parse::<f64>().map_err(|e| EisError::Parse {
                    line: idx + 1,
                    msg: e.to_string(),
                })
            };
            points.push(SpectrumPoint {
                freq_hz: parse(fields[0])?,
                re_z_ohm: parse(fields[1])?,
                im_z_ohm: parse(fields[2])?,
            });
        }
        Spectrum::new(points, meta)
    }
}

/// Log-spaced descending frequency grid, endpoints exact.
///
/// The point count is `round(decades × points_per_decade) + 1`, which for
/// the default 200 kHz → 0.1 Hz band at 10 points/decade gives 64 points.
pub fn log_grid(f_max_hz: f64, f_min_hz: f64, points_per_decade: usize) -> Vec<f64> {
    assert!(f_max_hz > f_min_hz && f_min_hz > 0.0);
    let decades = (f_max_hz / f_min_hz).log10();
    let n = (decades * points_per_decade as f64).round() as usize + 1;
    let ln_hi = f_max_hz.ln();
    let ln_lo = f_min_hz.ln();
    (0..n)
        .map(|i| {
            if i == 0 {
                f_max_hz
            } else if i == n - 1 {
                f_min_hz
            } else {
                (ln_hi + (ln_lo - ln_hi) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// The default instrument grid: 200 kHz → 0.1 Hz at 10 points/decade.
pub fn default_grid() -> Vec<f64> {
    log_grid(FREQ_MAX_HZ, FREQ_MIN_HZ, POINTS_PER_DECADE)
}

/// Evaluates the circuit over `grid` and perturbs each point by complex
/// noise of magnitude `noise_rel·|Z|` at uniform random phase.
pub fn synthesize_spectrum<R: Rng>(
    params: &CircuitParams,
    grid: &[f64],
    noise_rel: f64,
    rng: &mut R,
    meta: SpectrumMeta,
) -> Result<Spectrum, EisError> {
    assert!(noise_rel >= 0.0);
    let tol = 1.0 + 1e-9;
    let mut points = Vec::with_capacity(grid.len());
    for &f in grid {
        if f > FREQ_MAX_HZ * tol || f < FREQ_MIN_HZ / tol {
            return Err(EisError::GridOutOfBounds(f));
        }
        let z = params.impedance(f)?;
        let z = if noise_rel > 0.0 {
            let theta = rng.gen::<f64>() * TAU;
            z + noise_rel * z.norm() * Complex64::new(theta.cos(), theta.sin())
        } else {
            z
        };
        points.push(SpectrumPoint {
            freq_hz: f,
            re_z_ohm: z.re,
            im_z_ohm: z.im,
        });
    }
    Spectrum::new(points, meta)
}

/// Heuristic starting circuit for a fit: the high-frequency real intercept
/// seeds R1, the low-frequency span is split equally across the three arcs,
/// and arc apex frequencies are placed log-equidistant across the band.
pub fn initial_guess(spectrum: &Spectrum) -> Result<CircuitParams, EisError> {
    let n = spectrum.points.len();
    let decades = spectrum.decades();
    if n < 10 || decades < 3.0 {
        return Err(EisError::InsufficientData { points: n, decades });
    }
    let hi = &spectrum.points[0];
    let lo = &spectrum.points[n - 1];
    let r1 = hi.re_z_ohm.max(1e-6);
    let span = (lo.re_z_ohm - hi.re_z_ohm).max(3e-6);
    let r_arc = span / 3.0;
    let log_hi = hi.freq_hz.log10();
    let log_lo = lo.freq_hz.log10();
    let arcs = [1, 2, 3].map(|k| {
        let f_char = 10f64.powf(log_hi + (log_lo - log_hi) * k as f64 / 4.0);
        RcArc::new(r_arc, 1.0 / (TAU * r_arc * f_char))
    });
    CircuitParams::new(r1, arcs)
}
