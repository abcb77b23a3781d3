//! Newton-Krylov shooting for steady, traveling, time-periodic and
//! periodic-traveling solutions, Arnoldi stability of the time-T map, and
//! closed-form facts about the trivial state.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{arnoldi, dot, gmres, norm, ArnoldiConfig, GmresConfig};
use crate::model::{kappa1_field, solve_background, HeterogeneityBump, ModelParams};
use crate::spectral::{rhs_spectral, Etdrk4, SpectralState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolutionClass {
    Steady,
    SteadyTraveling,
    TimePeriodic,
    PeriodicTraveling,
}

impl SolutionClass {
    pub fn traveling(self) -> bool {
        matches!(self, Self::SteadyTraveling | Self::PeriodicTraveling)
    }

    pub fn periodic(self) -> bool {
        matches!(self, Self::TimePeriodic | Self::PeriodicTraveling)
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "steady" => Some(Self::Steady),
            "traveling" => Some(Self::SteadyTraveling),
            "periodic" => Some(Self::TimePeriodic),
            "ptrav" => Some(Self::PeriodicTraveling),
            _ => None,
        }
    }
}

/// Constant κ₁ plus an optional bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub kappa1: f64,
    pub bump: Option<HeterogeneityBump>,
}

impl Forcing {
    pub fn homogeneous(kappa1: f64) -> Self {
        Self { kappa1, bump: None }
    }

    pub fn with_bump(kappa1: f64, bump: HeterogeneityBump) -> Self {
        Self { kappa1, bump: Some(bump) }
    }

    pub fn field(&self, params: &ModelParams) -> Vec<f64> {
        kappa1_field(params, self.kappa1, self.bump.as_ref())
    }

    pub fn epsilon(&self) -> f64 {
        self.bump.map(|b| b.epsilon).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Kappa1,
    Epsilon,
}

impl Forcing {
    pub fn get(&self, kind: ParamKind) -> f64 {
        match kind {
            ParamKind::Kappa1 => self.kappa1,
            ParamKind::Epsilon => self.epsilon(),
        }
    }

    pub fn set(&mut self, kind: ParamKind, value: f64) {
        match kind {
            ParamKind::Kappa1 => self.kappa1 = value,
            ParamKind::Epsilon => {
                if let Some(b) = self.bump.as_mut() {
                    b.epsilon = value;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ShootingTarget {
    pub class: SolutionClass,
    pub U: f64,
    pub beta: f64,
    pub t_probe: f64,
    pub eta: f64,
    /// Largest time step; the horizon is split into equal steps not exceeding it.
    pub dt_max: f64,
    pub max_newton: usize,
    #[serde(skip, default)]
    pub gmres: GmresCfg,
}

/// Serde-free wrapper so the target stays serializable.
#[derive(Debug, Clone, Copy)]
pub struct GmresCfg(pub GmresConfig);

impl Default for GmresCfg {
    fn default() -> Self {
        Self(GmresConfig::default())
    }
}

impl ShootingTarget {
    pub fn new(class: SolutionClass) -> Self {
        Self {
            class,
            U: 0.0,
            beta: 0.0,
            t_probe: 0.1,
            eta: 1e-10,
            dt_max: 1e-2,
            max_newton: 30,
            gmres: GmresCfg::default(),
        }
    }

    pub fn steady() -> Self {
        Self::new(SolutionClass::Steady)
    }

    #[allow(non_snake_case)]
    pub fn traveling(U: f64) -> Self {
        Self { U, ..Self::new(SolutionClass::SteadyTraveling) }
    }

    pub fn periodic(beta: f64) -> Self {
        Self { beta, ..Self::new(SolutionClass::TimePeriodic) }
    }

    fn horizon(&self, beta: f64) -> f64 {
        if self.class.periodic() {
            beta
        } else {
            self.t_probe
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ConvergedSolution {
    pub state: SpectralState,
    pub class: SolutionClass,
    pub U: f64,
    pub beta: f64,
    pub residual: f64,
    pub params: ModelParams,
    pub forcing: Forcing,
    pub iterations: usize,
}

impl ConvergedSolution {
    pub fn parameter_tag(&self, kind: ParamKind) -> f64 {
        self.forcing.get(kind)
    }

    /// Horizon used by the shooting residual.
    pub fn horizon(&self, t_probe: f64) -> f64 {
        if self.class.periodic() {
            self.beta
        } else {
            t_probe
        }
    }
}

/// Flow map over `t` in the frame moving at `speed`, with equal steps ≤ dt_max.
pub fn flow(params: &ModelParams, kappa1: &[f64], z: &SpectralState, t: f64, speed: f64, dt_max: f64) -> Result<SpectralState> {
    let n = (t / dt_max).ceil().max(1.0) as usize;
    let mut st = Etdrk4::new(params, kappa1, t / n as f64, speed);
    let mut s = z.clone();
    for _ in 0..n {
        st.step(&mut s)?;
    }
    Ok(s)
}

/// Linearized flow (exact derivative of the discrete map) applied to `dz`.
pub fn flow_tangent(
    params: &ModelParams,
    kappa1: &[f64],
    z: &SpectralState,
    dz: &SpectralState,
    t: f64,
    speed: f64,
    dt_max: f64,
) -> Result<(SpectralState, SpectralState)> {
    let n = (t / dt_max).ceil().max(1.0) as usize;
    let mut st = Etdrk4::new(params, kappa1, t / n as f64, speed);
    let (mut s, mut d) = (z.clone(), dz.clone());
    for _ in 0..n {
        st.step_tangent(&mut s, &mut d)?;
    }
    Ok((s, d))
}

/// Extra unknown for continuation: the parameter joins the unknowns and is
/// closed either by a norm condition or by holding the period fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    None,
    /// ‖u‖ (coefficient norm) pinned to `value`.
    Norm { kind: ParamKind, value: f64 },
    /// Period held at `target.beta`; the parameter takes its place.
    FixedPeriod { kind: ParamKind },
}

impl Augment {
    fn kind(self) -> Option<ParamKind> {
        match self {
            Self::None => None,
            Self::Norm { kind, .. } | Self::FixedPeriod { kind } => Some(kind),
        }
    }
}

struct Problem<'a> {
    params: &'a ModelParams,
    forcing: Forcing,
    kappa1: Vec<f64>,
    target: ShootingTarget,
    aug: Augment,
    seed: SpectralState,
    seed_dx_u: Vec<f64>,
    seed_f: Vec<f64>,
    n: usize,
}

struct Unknowns {
    z: SpectralState,
    u: f64,
    beta: f64,
    param: Option<f64>,
}

impl<'a> Problem<'a> {
    fn free_beta(&self) -> bool {
        self.target.class.periodic() && !matches!(self.aug, Augment::FixedPeriod { .. })
    }

    fn split(&self, x: &[f64]) -> Unknowns {
        let m = SpectralState::packed_len(self.n);
        let z = SpectralState::unpack(&x[..m], self.n);
        let mut k = m;
        let mut out = Unknowns { z, u: self.target.U, beta: self.target.beta, param: None };
        if self.target.class.traveling() {
            out.u = x[k];
            k += 1;
        }
        if self.free_beta() {
            out.beta = x[k];
            k += 1;
        }
        if self.aug.kind().is_some() {
            out.param = Some(x[k]);
        }
        out
    }

    fn join(&self, z: &SpectralState, u: f64, beta: f64, param: f64) -> Vec<f64> {
        let mut x = z.pack();
        if self.target.class.traveling() {
            x.push(u);
        }
        if self.free_beta() {
            x.push(beta);
        }
        if self.aug.kind().is_some() {
            x.push(param);
        }
        x
    }

    fn forcing_at(&self, param: Option<f64>) -> Forcing {
        let mut f = self.forcing;
        if let (Some(kind), Some(v)) = (self.aug.kind(), param) {
            f.set(kind, v);
        }
        f
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.split(x);
        let t = self.target.horizon(w.beta);
        let field;
        let kappa1 = if w.param.is_some() {
            field = self.forcing_at(w.param).field(self.params);
            &field
        } else {
            &self.kappa1
        };
        let fz = flow(self.params, kappa1, &w.z, t, w.u, self.target.dt_max)?;
        let mut r = fz.pack();
        let zp = w.z.pack();
        for (ri, zi) in r.iter_mut().zip(&zp) {
            *ri -= zi;
        }
        let sp = self.seed.pack();
        let diff: Vec<f64> = zp.iter().zip(&sp).map(|(a, b)| a - b).collect();
        if self.target.class.traveling() {
            r.push(dot(&self.seed_dx_u, &diff));
        }
        if self.target.class.periodic() {
            r.push(dot(&self.seed_f, &diff));
        }
        if let Augment::Norm { value, .. } = self.aug {
            r.push(w.z.u_norm() - value);
        }
        Ok(r)
    }
}

fn pack_u_only(s: &SpectralState) -> Vec<f64> {
    let mut p = s.pack();
    let m = p.len() / 2;
    for x in p[m..].iter_mut() {
        *x = 0.0;
    }
    p
}

/// Newton-Krylov solve of the shooting residual for the given class.
pub fn solve(seed: &SpectralState, target: &ShootingTarget, params: &ModelParams, forcing: &Forcing) -> Result<ConvergedSolution> {
    solve_with(seed, target, params, forcing, Augment::None)
}

/// Like [`solve`], optionally with the forcing parameter as an extra unknown.
pub fn solve_with(
    seed: &SpectralState,
    target: &ShootingTarget,
    params: &ModelParams,
    forcing: &Forcing,
    aug: Augment,
) -> Result<ConvergedSolution> {
    let n = params.n_modes;
    let kappa1 = forcing.field(params);
    let seed_dx_u = pack_u_only(&seed.dx(params.domain_length));
    let seed_f = {
        let mut f = rhs_spectral(params, &kappa1, seed);
        if target.class.traveling() {
            f.axpy(target.U, &seed.dx(params.domain_length));
        }
        f.pack()
    };
    if target.class.traveling() && norm(&seed_dx_u) == 0.0 {
        return Err(Error::SingularPhaseCondition);
    }
    if target.class.periodic() && norm(&seed_f) == 0.0 {
        return Err(Error::SingularPhaseCondition);
    }
    if let Some(kind) = aug.kind() {
        if kind == ParamKind::Epsilon && forcing.bump.is_none() {
            return Err(Error::ConfigInvalid { field: "bump".into(), reason: "epsilon continuation needs a bump".into() });
        }
    }
    let p0 = aug.kind().map_or(0.0, |k| forcing.get(k));
    let prob = Problem { params, forcing: *forcing, kappa1, target: *target, aug, seed: seed.clone(), seed_dx_u, seed_f, n };
    let mut x = prob.join(seed, target.U, target.beta, p0);
    let mut r = prob.residual(&x)?;
    let mut rn = norm(&r);
    let mut it = 0;
    let mut gtol = target.gmres.0.tol;
    while rn >= target.eta {
        if it >= target.max_newton {
            return Err(Error::NoConvergence { iterations: it, residual: rn });
        }
        it += 1;
        let base = r.clone();
        let xn = norm(&x);
        let jv = |v: &[f64]| -> Result<Vec<f64>> {
            let vn = norm(v);
            if vn == 0.0 {
                return Ok(vec![0.0; v.len()]);
            }
            let h = 1e-7 * xn.max(1e-3) / vn;
            let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let rp = prob.residual(&xp)?;
            Ok(rp.iter().zip(&base).map(|(a, b)| (a - b) / h).collect())
        };
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let sol = gmres(jv, &rhs, GmresConfig { tol: gtol, ..target.gmres.0 })?;
        // backtracking keeps the iteration from wandering off the basin
        let mut lam = 1.0;
        let mut accepted = false;
        for _ in 0..6 {
            let xt: Vec<f64> = x.iter().zip(&sol.x).map(|(a, b)| a + lam * b).collect();
            if let Ok(rt) = prob.residual(&xt) {
                let rtn = norm(&rt);
                if rtn < rn || rtn < target.eta {
                    // poor contraction means the inexact linear solve limits
                    // progress on slow modes: tighten it
                    if rtn > 0.3 * rn || lam < 1.0 {
                        gtol = (gtol * 0.1).max(1e-8);
                    }
                    x = xt;
                    r = rt;
                    rn = rtn;
                    accepted = true;
                    break;
                }
            }
            lam *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations: it, residual: rn });
        }
    }
    let w = prob.split(&x);
    let (mut z, u_speed, beta) = (w.z, w.u, w.beta);
    z.time = 0.0;
    if target.class.periodic() && !(beta > 0.0) {
        return Err(Error::NoConvergence { iterations: it, residual: rn });
    }
    let mut sol = ConvergedSolution {
        state: z,
        class: target.class,
        U: u_speed,
        beta,
        residual: rn,
        params: *params,
        forcing: prob.forcing_at(w.param),
        iterations: it,
    };
    sol.residual = verify_residual(&sol, target.t_probe, target.dt_max)?;
    Ok(sol)
}

/// Shooting residual re-evaluated from scratch: lab-frame flow followed by a
/// phase shift of −U·t, at t_probe and t_probe/2 for steady classes.
pub fn verify_residual(sol: &ConvergedSolution, t_probe: f64, dt_max: f64) -> Result<f64> {
    let kappa1 = sol.forcing.field(&sol.params);
    let times: Vec<f64> = if sol.class.periodic() { vec![sol.beta] } else { vec![t_probe, 0.5 * t_probe] };
    let mut worst = 0.0f64;
    for t in times {
        let mut fz = flow(&sol.params, &kappa1, &sol.state, t, 0.0, dt_max)?;
        if sol.class.traveling() {
            fz.shift_in_place(-sol.U * t, sol.params.domain_length);
        }
        let a = fz.pack();
        let b = sol.state.pack();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        worst = worst.max(norm(&d));
    }
    Ok(worst)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilitySpectrum {
    /// Generator exponents log(μ)/T sorted by decreasing real part.
    pub eigenvalues: Vec<Complex64>,
    pub multipliers: Vec<Complex64>,
    #[serde(skip)]
    pub eigenmodes: Vec<(Vec<f64>, Vec<f64>)>,
    pub residuals: Vec<f64>,
    pub horizon: f64,
    pub n_requested: usize,
}

impl StabilitySpectrum {
    pub fn n_unstable(&self, thresh: f64) -> usize {
        self.eigenvalues.iter().filter(|l| l.re > thresh).count()
    }

    pub fn leading(&self) -> Complex64 {
        self.eigenvalues.first().copied().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StabilityOptions {
    /// Horizon of the linearized map for non-periodic classes.
    pub horizon: f64,
    pub dt_max: f64,
    pub arnoldi: ArnoldiConfig,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self { horizon: 10.0, dt_max: 1e-2, arnoldi: ArnoldiConfig::default() }
    }
}

/// Leading eigenvalues of the linearized time-T map (comoving for traveling
/// classes), conjugate pairs listed twice.
pub fn stability(sol: &ConvergedSolution, n_requested: usize, opts: StabilityOptions) -> Result<StabilitySpectrum> {
    let params = &sol.params;
    let kappa1 = sol.forcing.field(params);
    let t = if sol.class.periodic() { sol.beta } else { opts.horizon };
    let n = params.n_modes;
    let speed = if sol.class.traveling() { sol.U } else { 0.0 };
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let dz = SpectralState::unpack(x, n);
        let (_, d) = flow_tangent(params, &kappa1, &sol.state, &dz, t, speed, opts.dt_max)?;
        Ok(d.pack())
    };
    let pairs = arnoldi(apply, SpectralState::packed_len(n), n_requested, opts.arnoldi)?;
    let mut out = StabilitySpectrum {
        eigenvalues: vec![],
        multipliers: vec![],
        eigenmodes: vec![],
        residuals: vec![],
        horizon: t,
        n_requested,
    };
    let mut rows: Vec<(Complex64, Complex64, (Vec<f64>, Vec<f64>), f64)> = Vec::new();
    for p in pairs {
        let lam = p.value.ln() / t;
        let rel = p.residual / p.value.norm().max(1e-300);
        rows.push((lam, p.value, (p.re.clone(), p.im.clone()), rel));
        if p.value.im.abs() > 0.0 {
            let neg: Vec<f64> = p.im.iter().map(|x| -x).collect();
            rows.push((lam.conj(), p.value.conj(), (p.re, neg), rel));
        }
    }
    rows.sort_by(|a, b| b.0.re.partial_cmp(&a.0.re).unwrap().then(b.0.im.partial_cmp(&a.0.im).unwrap()));
    for (lam, mu, mode, rel) in rows {
        out.eigenvalues.push(lam);
        out.multipliers.push(mu);
        out.eigenmodes.push(mode);
        out.residuals.push(rel);
    }
    Ok(out)
}

/// Generator A = D_z f applied exactly on the grid (lab frame plus optional
/// comoving advection).
pub fn apply_generator(params: &ModelParams, base: &SpectralState, speed: f64, dz: &SpectralState) -> SpectralState {
    let (u, _) = base.to_grid();
    let (du, dv) = dz.to_grid();
    let lin = crate::model::spectral_filter(&du, {
        let k = params.wavenumbers();
        move |l| {
            let k2 = k[l] * k[l];
            -params.Du * k2 + params.kappa2 - params.kappa4 / (1.0 + params.Dw * k2)
        }
    });
    let ut: Vec<f64> = (0..u.len()).map(|j| lin[j] - 3.0 * u[j] * u[j] * du[j] - params.kappa3 * dv[j]).collect();
    let vt: Vec<f64> = (0..u.len()).map(|j| (du[j] - dv[j]) / params.tau).collect();
    let mut out = SpectralState::from_grid(&ut, &vt);
    if speed != 0.0 {
        out.axpy(speed, &dz.dx(params.domain_length));
    }
    out
}

/// a(κ₁, ω) of the trivial-state dispersion relation.
pub fn dispersion_a(params: &ModelParams, kappa1: f64, omega: f64) -> Result<f64> {
    let ub = solve_background(params, kappa1)?.u_bar;
    let w2 = omega * omega;
    Ok(-params.Du * w2 + params.kappa2 - 3.0 * ub * ub - params.kappa4 / (1.0 + params.Dw * w2))
}

pub fn linearized_trivial_spectrum(params: &ModelParams, kappa1: f64, omega: f64) -> Result<(Complex64, Complex64)> {
    let a = dispersion_a(params, kappa1, omega)?;
    let it = 1.0 / params.tau;
    let b = a - it;
    let disc = Complex64::new(b * b - 4.0 * (params.kappa3 - a) * it, 0.0).sqrt();
    Ok(((b + disc) * 0.5, (b - disc) * 0.5))
}

pub fn critical_wavenumber(params: &ModelParams) -> Result<f64> {
    let s = (params.kappa4 * params.Du * params.Dw).sqrt();
    let rad = (s - params.Du) / (params.Du * params.Dw);
    if !(params.kappa4 * params.Du * params.Dw > 0.0) || !(rad > 0.0) {
        return Err(Error::NoFiniteWavenumber);
    }
    Ok(rad.sqrt())
}

/// κ₁ where a(κ₁, ω_c) hits `level`; a decreases as |ū| grows, so the root
/// is bracketed between the far-negative side and κ₁ = 0.
pub fn onset_kappa1(params: &ModelParams, level: f64) -> Result<f64> {
    let wc = critical_wavenumber(params)?;
    let g = |k1: f64| dispersion_a(params, k1, wc).map(|a| a - level);
    let (mut lo, mut hi) = (-1.0, 0.0);
    let (glo, ghi) = (g(lo)?, g(hi)?);
    if glo.signum() == ghi.signum() {
        return Err(Error::NoConvergence { iterations: 0, residual: glo });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid)?.signum() == glo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// (Hopf, pitchfork) onsets at ω_c.
pub fn trivial_onsets(params: &ModelParams) -> Result<(f64, f64)> {
    Ok((onset_kappa1(params, 1.0 / params.tau)?, onset_kappa1(params, params.kappa3)?))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GoldstoneReport {
    pub dg_rel: f64,
    pub dp_minus_g_rel: f64,
    pub adjoint_rel: f64,
}

/// Checks the Goldstone/propagator chain of the linearization at τ_c.
pub fn goldstone_check(sol: &ConvergedSolution) -> GoldstoneReport {
    let mut params = sol.params;
    params.tau = params.tau_c();
    let ux = sol.state.dx(params.domain_length);
    let g = SpectralState { u: ux.u.clone(), v: ux.u.clone(), time: 0.0 };
    let mut p = SpectralState { u: vec![Complex64::new(0.0, 0.0); ux.u.len()], v: ux.u.clone(), time: 0.0 };
    for c in p.v.iter_mut() {
        *c /= -params.kappa3;
    }
    let dg = apply_generator(&params, &sol.state, 0.0, &g);
    let mut dp = apply_generator(&params, &sol.state, 0.0, &p);
    dp.axpy(-1.0, &g);
    let gn = g.norm();
    // adjoint mode (ū_x, −κ₃τ ū_x)
    let mut gs = g.clone();
    for c in gs.v.iter_mut() {
        *c *= -params.kappa3 * params.tau;
    }
    GoldstoneReport { dg_rel: dg.norm() / gn, dp_minus_g_rel: dp.norm() / gn, adjoint_rel: gs.dot(&g).abs() / (gn * gn) }
}

/// The two eigenvalues nearest zero of a stationary pulse and their sum, the
/// drift exponent (robust near the Jordan block at τ_c).
pub fn drift_eigenvalue(sol: &ConvergedSolution, tau: f64, opts: StabilityOptions) -> Result<(f64, [Complex64; 2])> {
    let mut s = sol.clone();
    s.params.tau = tau;
    // steady pulses have v = u, so the state itself is τ-independent
    let spec = stability(&s, 6, opts)?;
    let mut ev = spec.eigenvalues.clone();
    ev.sort_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap());
    if ev.len() < 2 {
        return Err(Error::ArnoldiBreakdown);
    }
    Ok(((ev[0] + ev[1]).re, [ev[0], ev[1]]))
}
