//! One-peak stationary and traveling pulses built from scratch: a Gaussian
//! kick relaxed by direct simulation, then polished by Newton.

use crate::error::Result;
use crate::model::{solve_background, ModelParams};
use crate::shooting::{solve, ConvergedSolution, Forcing, ShootingTarget};
use crate::spectral::{pulse_position, unwrap_delta, Etdrk4, SpectralState};

/// Stationary one-peak pulse centered in a homogeneous domain. Relaxation runs
/// below the drift point, where the stationary pulse attracts; the steady
/// state itself does not depend on τ.
pub fn stationary_pulse(params: &ModelParams, kappa1: f64) -> Result<ConvergedSolution> {
    let relax = ModelParams { tau: 0.9 * params.tau_c(), ..*params };
    let ub = solve_background(params, kappa1)?.u_bar;
    let l = params.domain_length;
    let u: Vec<f64> = params.grid().iter().map(|&x| ub + 1.2 * (-((x - 0.5 * l) / 0.02).powi(2)).exp()).collect();
    let mut s = SpectralState::from_grid(&u, &u);
    let k1 = vec![kappa1; params.n_modes];
    Etdrk4::new(&relax, &k1, 0.01, 0.0).advance(&mut s, 400.0)?;
    let c = pulse_position(&s, params, ub)?;
    let mut s = s.shifted(0.5 * l - c, l);
    s.time = 0.0;
    solve(&s, &ShootingTarget::steady(), params, &Forcing::homogeneous(kappa1))
}

/// Traveling one-peak pulse (τ above the drift point), moving toward +x.
pub fn traveling_pulse(params: &ModelParams, kappa1: f64) -> Result<ConvergedSolution> {
    let st = stationary_pulse(params, kappa1)?;
    let l = params.domain_length;
    let ub = solve_background(params, kappa1)?.u_bar;
    // lag the inhibitor behind the peak to pick the direction
    let mut s = st.state.clone();
    s.v = st.state.shifted(-0.003, l).v;
    let k1 = vec![kappa1; params.n_modes];
    let mut et = Etdrk4::new(params, &k1, 0.01, 0.0);
    et.advance(&mut s, 4000.0)?;
    let p = pulse_position(&s, params, ub)?;
    let mut s = s.shifted(0.5 * l - p, l);
    s.time = 0.0;
    let mut probe = s.clone();
    et.advance(&mut probe, 10.0)?;
    let u_est = unwrap_delta(pulse_position(&probe, params, ub)? - 0.5 * l, l) / 10.0;
    solve(&s, &ShootingTarget::traveling(u_est), params, &Forcing::homogeneous(kappa1))
}
