//! Complex nonlinear least-squares circuit fitting.
//!
//! The objective is Σj wj·|Z_meas(fj) − Z_model(fj)|² with modulus
//! weighting wj = 1/|Z_meas(fj)|², minimized by Levenberg–Marquardt over
//! the logarithms of the seven parameters (r1, then r and c of each arc),
//! which keeps every parameter positive without box constraints.

use super::{initial_guess, CircuitParams, EisError, RcArc, Spectrum};
use num_complex::Complex64;
use std::f64::consts::TAU;

pub const N_PARAMS: usize = 7;

/// Column order of the log-parameter Jacobian.
pub const JACOBIAN_COLUMNS: [&str; N_PARAMS] =
    ["ln_r1", "ln_r2", "ln_c2", "ln_r3", "ln_c3", "ln_r4", "ln_c4"];

const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-8;
const GRAD_TOL: f64 = 1e-10;
/// Log-parameter clamp bounds, pure overflow protection.
const LN_LO: f64 = -27.631021115928547; // ln(1e-12)
const LN_HI: f64 = 27.631021115928547; // ln(1e12)

/// Outcome of a circuit fit. `converged == false` marks a best-effort
/// result that ran out of iterations or stalled.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: CircuitParams,
    /// Unweighted RMS of |Z_meas − Z_model| over the grid, in Ω.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Linearized standard errors in the order r1, r2, c2, r3, c3, r4, c4
    /// (Ω for resistances, F for capacitances).
    pub std_errors: [f64; N_PARAMS],
    /// Set when two fitted arc time constants land within a factor of 2 of
    /// each other, which makes arc attribution ambiguous.
    pub ill_conditioned: bool,
    pub gradient_norm: f64,
}

fn params_to_log(p: &CircuitParams) -> [f64; N_PARAMS] {
    [
        p.r1.ln(),
        p.arcs[0].r.ln(),
        p.arcs[0].c.ln(),
        p.arcs[1].r.ln(),
        p.arcs[1].c.ln(),
        p.arcs[2].r.ln(),
        p.arcs[2].c.ln(),
    ]
}

fn log_to_params(x: &[f64; N_PARAMS], alphas: &[f64; 3]) -> CircuitParams {
    let arc = |i: usize| RcArc {
        r: x[1 + 2 * i].exp(),
        c: x[2 + 2 * i].exp(),
        alpha: alphas[i],
    };
    CircuitParams {
        r1: x[0].exp(),
        arcs: [arc(0), arc(1), arc(2)],
    }
}

fn model_z(p: &CircuitParams, f_hz: f64) -> Complex64 {
    // Frequencies come from validated spectra, so this cannot fail.
    p.impedance(f_hz).expect("positive frequency")
}

/// Analytic partial derivatives of Z with respect to the log-parameters.
///
/// Returns 2·grid.len() rows: row 2j holds ∂re Z(fj)/∂θ, row 2j+1 holds
/// ∂im Z(fj)/∂θ, with θ ordered per [`JACOBIAN_COLUMNS`].
pub fn jacobian(params: &CircuitParams, grid: &[f64]) -> Vec<[f64; N_PARAMS]> {
    let mut rows = Vec::with_capacity(2 * grid.len());
    for &f in grid {
        let omega = TAU * f;
        let mut dre = [0.0; N_PARAMS];
        let mut dim = [0.0; N_PARAMS];
        // Series term: ∂Z/∂ln r1 = r1.
        dre[0] = params.r1;
        dim[0] = 0.0;
        for (k, arc) in params.arcs.iter().enumerate() {
            let jwt = Complex64::new(0.0, omega * arc.r * arc.c);
            let a = if arc.alpha == 1.0 {
                jwt
            } else {
                jwt.powf(arc.alpha)
            };
            let denom = (1.0 + a) * (1.0 + a);
            // ∂Z/∂ln r = r·(1 + (1−α)·A)/(1+A)²; ∂Z/∂ln c = −r·α·A/(1+A)².
            let d_ln_r = arc.r * (1.0 + (1.0 - arc.alpha) * a) / denom;
            let d_ln_c = -arc.r * arc.alpha * a / denom;
            dre[1 + 2 * k] = d_ln_r.re;
            dim[1 + 2 * k] = d_ln_r.im;
            dre[2 + 2 * k] = d_ln_c.re;
            dim[2 + 2 * k] = d_ln_c.im;
        }
        rows.push(dre);
        rows.push(dim);
    }
    rows
}

/// In-place Cholesky factorization; returns false if the matrix is not
/// positive definite.
fn cholesky(a: &mut [[f64; N_PARAMS]; N_PARAMS]) -> bool {
    for i in 0..N_PARAMS {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                a[i][i] = sum.sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
    }
    true
}

fn cholesky_solve(l: &[[f64; N_PARAMS]; N_PARAMS], b: &[f64; N_PARAMS]) -> [f64; N_PARAMS] {
    let mut y = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i][k] * y[k];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; N_PARAMS];
    for i in (0..N_PARAMS).rev() {
        let mut sum = y[i];
        for k in i + 1..N_PARAMS {
            sum -= l[k][i] * x[k];
        }
        x[i] = sum / l[i][i];
    }
    x
}

struct Problem<'a> {
    freqs: Vec<f64>,
    z_meas: Vec<Complex64>,
    /// sqrt of the modulus weights, 1/|Z_meas|.
    w_sqrt: Vec<f64>,
    alphas: [f64; 3],
    _spectrum: &'a Spectrum,
}

impl Problem<'_> {
    /// Weighted residual vector and its squared norm.
    fn residuals(&self, p: &CircuitParams) -> (Vec<f64>, f64) {
        let mut r = Vec::with_capacity(2 * self.freqs.len());
        let mut cost = 0.0;
        for ((&f, &zm), &w) in self.freqs.iter().zip(&self.z_meas).zip(&self.w_sqrt) {
            let z = model_z(p, f);
            let re = w * (zm.re - z.re);
            let im = w * (zm.im - z.im);
            cost += re * re + im * im;
            r.push(re);
            r.push(im);
        }
        (r, cost)
    }

    /// Gradient and Gauss–Newton normal matrix of the weighted objective.
    fn grad_and_normal(
        &self,
        p: &CircuitParams,
        residual: &[f64],
    ) -> ([f64; N_PARAMS], [[f64; N_PARAMS]; N_PARAMS]) {
        let jac = jacobian(p, &self.freqs);
        let mut g = [0.0; N_PARAMS];
        let mut jtj = [[0.0; N_PARAMS]; N_PARAMS];
        for (row_idx, row) in jac.iter().enumerate() {
            // Residual rows are −w·J rows; weights apply per frequency.
            let w = self.w_sqrt[row_idx / 2];
            for i in 0..N_PARAMS {
                let ji = -w * row[i];
                g[i] += ji * residual[row_idx];
                for j in 0..=i {
                    jtj[i][j] += ji * (-w * row[j]);
                }
            }
        }
        for i in 0..N_PARAMS {
            for j in i + 1..N_PARAMS {
                jtj[i][j] = jtj[j][i];
            }
        }
        (g, jtj)
    }
}

/// Fits the equivalent circuit to `spectrum`, starting from `init` or the
/// built-in heuristic guess.
pub fn fit(spectrum: &Spectrum, init: Option<CircuitParams>) -> Result<FitResult, EisError> {
    let first = spectrum
        .points
        .first()
        .ok_or(EisError::DegenerateSpectrum)?;
    let scale = first.z().norm().max(1e-12);
    if spectrum
        .points
        .iter()
        .all(|p| (p.z() - first.z()).norm() <= 1e-14 * scale)
    {
        return Err(EisError::DegenerateSpectrum);
    }

    let init = match init {
        Some(p) => p,
        None => initial_guess(spectrum)?,
    };
    let problem = Problem {
        freqs: spectrum.points.iter().map(|p| p.freq_hz).collect(),
        z_meas: spectrum.points.iter().map(|p| p.z()).collect(),
        w_sqrt: spectrum
            .points
            .iter()
            .map(|p| 1.0 / p.z().norm().max(1e-12))
            .collect(),
        alphas: [init.arcs[0].alpha, init.arcs[1].alpha, init.arcs[2].alpha],
        _spectrum: spectrum,
    };

    let mut x = params_to_log(&init);
    let (mut residual, mut cost) = problem.residuals(&log_to_params(&x, &problem.alphas));
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    let mut gradient_norm = f64::INFINITY;

    for iter in 0..MAX_ITERATIONS {
        iterations = iter + 1;
        let p = log_to_params(&x, &problem.alphas);
        let (g, jtj) = problem.grad_and_normal(&p, &residual);
        gradient_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gradient_norm < GRAD_TOL {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..24 {
            let mut damped = jtj;
            for i in 0..N_PARAMS {
                damped[i][i] += lambda * jtj[i][i].max(1e-14);
            }
            let neg_g = {
                let mut n = g;
                for v in &mut n {
                    *v = -*v;
                }
                n
            };
            let step = if cholesky(&mut damped) {
                cholesky_solve(&damped, &neg_g)
            } else {
                lambda = (lambda * 10.0).min(1e10);
                continue;
            };
            let mut x_trial = x;
            for i in 0..N_PARAMS {
                x_trial[i] = (x[i] + step[i]).clamp(LN_LO, LN_HI);
            }
            let (r_trial, cost_trial) =
                problem.residuals(&log_to_params(&x_trial, &problem.alphas));
            if cost_trial < cost {
                let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
                x = x_trial;
                residual = r_trial;
                cost = cost_trial;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if max_step < STEP_TOL {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 4.0).min(1e10);
            if lambda >= 1e10 {
                break;
            }
        }
        if converged || !accepted {
            break;
        }
    }

    let p = log_to_params(&x, &problem.alphas);
    let (_, jtj) = problem.grad_and_normal(&p, &residual);
    let std_errors_log = standard_errors(&jtj, cost, 2 * problem.freqs.len());

    // Map log-space standard errors onto the linear parameters, then apply
    // the canonical arc ordering to params and errors together.
    let lin = [
        p.r1,
        p.arcs[0].r,
        p.arcs[0].c,
        p.arcs[1].r,
        p.arcs[1].c,
        p.arcs[2].r,
        p.arcs[2].c,
    ];
    let mut se = [0.0; N_PARAMS];
    for i in 0..N_PARAMS {
        se[i] = lin[i] * std_errors_log[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        p.arcs[b]
            .char_freq_hz()
            .total_cmp(&p.arcs[a].char_freq_hz())
    });
    let params = CircuitParams {
        r1: p.r1,
        arcs: [p.arcs[order[0]], p.arcs[order[1]], p.arcs[order[2]]],
    };
    let mut std_errors = [0.0; N_PARAMS];
    std_errors[0] = se[0];
    for (slot, &src) in order.iter().enumerate() {
        std_errors[1 + 2 * slot] = se[1 + 2 * src];
        std_errors[2 + 2 * slot] = se[2 + 2 * src];
    }

    let mut taus: Vec<f64> = params.arcs.iter().map(|a| a.r * a.c).collect();
    taus.sort_by(f64::total_cmp);
    let ill_conditioned = taus.windows(2).any(|w| w[1] / w[0] < 2.0);

    let mut sq = 0.0;
    for (&f, &zm) in problem.freqs.iter().zip(&problem.z_meas) {
        sq += (zm - model_z(&params, f)).norm_sqr();
    }
    let residual_norm = (sq / problem.freqs.len() as f64).sqrt();

    Ok(FitResult {
        params,
        residual_norm,
        iterations,
        converged,
        std_errors,
        ill_conditioned,
        gradient_norm,
    })
}

/// Log-space standard errors from the unscaled normal matrix.
fn standard_errors(
    jtj: &[[f64; N_PARAMS]; N_PARAMS],
    cost: f64,
    n_residuals: usize,
) -> [f64; N_PARAMS] {
    let mut out = [0.0; N_PARAMS];
    if n_residuals <= N_PARAMS {
        return out;
    }
    let mut l = *jtj;
    for i in 0..N_PARAMS {
        l[i][i] += 1e-300; // keep exact zeros factorizable
    }
    if !cholesky(&mut l) {
        return out;
    }
    let s2 = cost / (n_residuals - N_PARAMS) as f64;
    for i in 0..N_PARAMS {
        let mut e = [0.0; N_PARAMS];
        e[i] = 1.0;
        let col = cholesky_solve(&l, &e);
        out[i] = (s2 * col[i]).max(0.0).sqrt();
    }
    out
}
