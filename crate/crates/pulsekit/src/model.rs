//! Model parameters, background state, bump heterogeneity and the nonlocal
//! right-hand side with the inhibitor `w` eliminated.

use std::path::Path;

use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ModelParams {
    pub kappa1_base: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub tau: f64,
    #[serde(default)]
    pub theta: f64,
    pub Du: f64,
    #[serde(default)]
    pub Dv: f64,
    pub Dw: f64,
    pub domain_length: f64,
    pub n_modes: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            kappa1_base: -0.1,
            kappa2: 1.17,
            kappa3: 0.3,
            kappa4: 1.0,
            tau: 3.35,
            theta: 0.0,
            Du: 1.1e-4,
            Dv: 0.0,
            Dw: 9.8e-4,
            domain_length: 1.0,
            n_modes: 256,
        }
    }
}

impl ModelParams {
    pub fn with_domain(mut self, length: f64, n_modes: usize) -> Self {
        self.domain_length = length;
        self.n_modes = n_modes;
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    /// Checks the invariants. `allow_nonzero` permits θ ≠ 0 or Dv ≠ 0,
    /// which the two-field reduction ignores.
    pub fn validate(&self, allow_nonzero: bool) -> Result<()> {
        let bad = |field: &str, why: &str| {
            Err(Error::ConfigInvalid { field: field.into(), reason: why.into() })
        };
        if self.kappa2 - self.kappa3 - self.kappa4 >= 0.0 {
            return bad("kappa2", "kappa2 - kappa3 - kappa4 must be negative");
        }
        if !(self.Du > 0.0) {
            return bad("Du", "must be positive");
        }
        if !(self.Dw > 0.0) {
            return bad("Dw", "must be positive");
        }
        if !(self.tau > 0.0) {
            return bad("tau", "must be positive");
        }
        if !(self.domain_length > 0.0) {
            return bad("domain_length", "must be positive");
        }
        if self.n_modes < 16 || self.n_modes % 2 != 0 {
            return bad("n_modes", "must be even and at least 16");
        }
        if !allow_nonzero && self.theta != 0.0 {
            return bad("theta", "nonzero theta needs the override flag");
        }
        if !allow_nonzero && self.Dv != 0.0 {
            return bad("Dv", "nonzero Dv needs the override flag");
        }
        Ok(())
    }

    pub fn tau_c(&self) -> f64 {
        1.0 / self.kappa3
    }

    pub fn dx(&self) -> f64 {
        self.domain_length / self.n_modes as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_modes).map(|j| j as f64 * dx).collect()
    }

    /// Angular wavenumbers in FFT order, Nyquist included as +N/2.
    pub fn wavenumbers(&self) -> Vec<f64> {
        wavenumbers(self.n_modes, self.domain_length)
    }
}

pub fn wavenumbers(n: usize, length: f64) -> Vec<f64> {
    let base = 2.0 * std::f64::consts::PI / length;
    (0..n)
        .map(|l| {
            let m = if l <= n / 2 { l as i64 } else { l as i64 - n as i64 };
            base * m as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityBump {
    pub epsilon: f64,
    pub d: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Defaults to the domain midpoint when absent.
    #[serde(default)]
    pub center: Option<f64>,
}

fn default_gamma() -> f64 {
    100.0
}

impl HeterogeneityBump {
    pub fn new(epsilon: f64, d: f64) -> Self {
        Self { epsilon, d, gamma: 100.0, center: None }
    }

    pub fn center_in(&self, domain_length: f64) -> f64 {
        self.center.unwrap_or(0.5 * domain_length)
    }

    /// Bump value at `x` on a circle of length `domain_length`.
    pub fn evaluate(&self, x: f64, domain_length: f64) -> f64 {
        let c = self.center_in(domain_length);
        let mut s = (x - c).rem_euclid(domain_length);
        if s > 0.5 * domain_length {
            s -= domain_length;
        }
        // nearest images on both sides keep the profile smooth across the seam
        let mut v = 0.0;
        for k in -1..=1 {
            let xt = s + k as f64 * domain_length;
            v += logistic(self.gamma * (xt + 0.5 * self.d)) + logistic(-self.gamma * (xt - 0.5 * self.d))
                - 1.0;
        }
        self.epsilon * v
    }

    pub fn field(&self, params: &ModelParams) -> Vec<f64> {
        params.grid().iter().map(|&x| self.evaluate(x, params.domain_length)).collect()
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// κ₁(x) = κ₁_base + bump(x), or a constant when no bump is given.
pub fn kappa1_field(params: &ModelParams, kappa1: f64, bump: Option<&HeterogeneityBump>) -> Vec<f64> {
    match bump {
        Some(b) => b.field(params).into_iter().map(|v| kappa1 + v).collect(),
        None => vec![kappa1; params.n_modes],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundState {
    pub u_bar: f64,
}

/// Unique real root of −u³ + (κ₂−κ₃−κ₄)u + κ₁ = 0.
pub fn solve_background(params: &ModelParams, kappa1: f64) -> Result<BackgroundState> {
    let c = params.kappa2 - params.kappa3 - params.kappa4;
    if c >= 0.0 {
        return Err(Error::SignConditionViolated(c));
    }
    // g is strictly decreasing, so the bracket always holds a single root
    let g = |u: f64| -u * u * u + c * u + kappa1;
    let dg = |u: f64| -3.0 * u * u + c;
    let r = 1.0 + kappa1.abs() + params.kappa2.abs();
    let (mut lo, mut hi) = (-r, r);
    let mut u = 0.0;
    for _ in 0..200 {
        let gu = g(u);
        if gu == 0.0 {
            break;
        }
        if gu > 0.0 {
            lo = u;
        } else {
            hi = u;
        }
        let mut next = u - gu / dg(u);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - u).abs() <= 1e-16 * (1.0 + u.abs()) {
            u = next;
            break;
        }
        u = next;
    }
    Ok(BackgroundState { u_bar: u })
}

/// Loads parameters and an optional bump from the JSON config layout.
pub fn load_config(path: &Path) -> Result<(ModelParams, Option<HeterogeneityBump>)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<(ModelParams, Option<HeterogeneityBump>)> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(flatten)]
        params: ModelParams,
        #[serde(default)]
        bump: Option<HeterogeneityBump>,
        #[serde(default)]
        allow_nonzero_theta_dv: bool,
    }
    let raw: Raw = serde_json::from_str(text).map_err(|e| Error::ConfigInvalid {
        field: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    raw.params.validate(raw.allow_nonzero_theta_dv)?;
    Ok((raw.params, raw.bump))
}

/// Applies (1 − Dw Δ)⁻¹ to a real periodic field.
pub fn helmholtz_inverse(params: &ModelParams, field: &[f64]) -> Vec<f64> {
    let k = params.wavenumbers();
    spectral_filter(field, |l| 1.0 / (1.0 + params.Dw * k[l] * k[l]))
}

/// Applies a real Fourier multiplier (indexed by FFT slot) to a real field.
pub(crate) fn spectral_filter(field: &[f64], mult: impl Fn(usize) -> f64) -> Vec<f64> {
    let n = field.len();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut input = field.to_vec();
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut input, &mut spec).expect("fft length");
    for (l, c) in spec.iter_mut().enumerate() {
        *c *= mult(l) / n as f64;
    }
    spec[0].im = 0.0;
    spec[n / 2].im = 0.0;
    let mut out = vec![0.0; n];
    inv.process(&mut spec, &mut out).expect("fft length");
    out
}

/// Right-hand side of the two-field nonlocal system on the grid.
pub fn rhs_nonlocal(params: &ModelParams, u: &[f64], v: &[f64], kappa1: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = params.wavenumbers();
    let lin = spectral_filter(u, |l| {
        let k2 = k[l] * k[l];
        -params.Du * k2 + params.kappa2 - params.kappa4 / (1.0 + params.Dw * k2)
    });
    let ut = (0..u.len())
        .map(|j| lin[j] - params.kappa3 * v[j] - u[j] * u[j] * u[j] + kappa1[j])
        .collect();
    let vt = (0..u.len()).map(|j| (u[j] - v[j]) / params.tau).collect();
    (ut, vt)
}
