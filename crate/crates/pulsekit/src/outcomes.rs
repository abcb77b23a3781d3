//! PEN / REB / OSC / STA labels for PDE collision runs and reduced-ODE
//! orbits, (d, ε) phase diagrams, and the check that every pinned PDE state
//! belongs to the heterogeneity-induced solution set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuation::{fmt17, Branch};
use crate::error::{Error, Result};
use crate::model::{kappa1_field, solve_background, HeterogeneityBump, ModelParams};
use crate::reduced::{pulse_orbit, Limit, OdeTrajectory, ReducedSystem};
pub use crate::reduced::OutcomeKind;
use crate::shooting::{solve, stability, ConvergedSolution, Forcing, ShootingTarget, StabilityOptions};
use crate::spectral::{
    local_background, pulse_position, pulse_position_over, run_collision_until, unwrap_delta, RunOptions, SpectralState, Trajectory};

/// Edges of the admissible interval in ε (κ₁ = −0.1 base).
pub const ADMISSIBLE: (f64, f64) = (-0.035866, 0.012);

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    /// Half-width of the observation window, as a fraction of the domain.
    pub window_fraction: f64,
    pub t_settle: f64,
    /// PEN needs the exit speed within this fraction of the free speed.
    pub speed_tol: f64,
    /// Velocity floor relative to the free speed.
    pub velocity_floor: f64,
    /// Periods an oscillation must persist.
    pub periods: usize,
    /// Allowed period-to-period change of the swing amplitude.
    pub amplitude_tol: f64,
    /// Smallest swing that counts as an extremum, as a fraction of the domain.
    pub min_swing: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { window_fraction: 0.25, t_settle: 200.0, speed_tol: 0.05, velocity_floor: 1e-6, periods: 5, amplitude_tol: 0.01, min_swing: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Evidence {
    Crossing { t: f64 },
    Reversal { t: f64 },
    Cycle { period: f64, center: f64, amplitude: f64 },
    FixedPoint { position: f64 },
    Inconclusive { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub kind: OutcomeKind,
    pub evidence: Evidence,
    pub pin_location: Option<f64>,
}

impl Outcome {
    fn unresolved(reason: &str) -> Self {
        Self { kind: OutcomeKind::Unresolved, evidence: Evidence::Inconclusive { reason: reason.into() }, pin_location: None }
    }

    pub fn period(&self) -> Option<f64> {
        match self.evidence {
            Evidence::Cycle { period, .. } => Some(period),
            _ => None,
        }
    }
}

/// Position relative to the bump center, continuous in time.
#[derive(Debug, Clone, Copy)]
pub struct Track {
    pub t: f64,
    pub x: f64,
    pub v: f64,
}

pub fn relative_track(traj: &Trajectory, center: f64, length: f64) -> Vec<Track> {
    let Some(first) = traj.samples.first() else { return vec![] };
    let x0 = unwrap_delta(first.position - center, length);
    traj.samples.iter().map(|s| Track { t: s.t, x: x0 + s.position - first.position, v: s.velocity }).collect()
}

/// Swing statistics of a settled oscillation.
#[derive(Debug, Clone)]
pub struct Envelope {
    /// Times of successive maxima.
    pub peak_times: Vec<f64>,
    /// Max-to-min swing per period.
    pub amplitudes: Vec<f64>,
    pub period: f64,
    pub center: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Envelope {
    /// Amplitude ratios of consecutive periods.
    pub fn ratios(&self) -> Vec<f64> {
        self.amplitudes.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Alternating extrema of x(t), each at least `min_swing` away from the
/// previous one; None with fewer than three full swings.
pub fn envelope(track: &[Track], min_swing: f64) -> Option<Envelope> {
    let mut ext: Vec<(f64, f64, bool)> = Vec::new();
    let first = track.first()?;
    let (mut hi, mut lo) = ((first.t, first.x), (first.t, first.x));
    // None until the first swing fixes the direction
    let mut rising: Option<bool> = None;
    for s in track {
        if s.x > hi.1 {
            hi = (s.t, s.x);
        }
        if s.x < lo.1 {
            lo = (s.t, s.x);
        }
        if rising != Some(false) && hi.1 - s.x > min_swing {
            ext.push((hi.0, hi.1, true));
            rising = Some(false);
            lo = (s.t, s.x);
        } else if rising != Some(true) && s.x - lo.1 > min_swing {
            ext.push((lo.0, lo.1, false));
            rising = Some(true);
            hi = (s.t, s.x);
        }
    }
    let mut amplitudes = Vec::new();
    let mut peak_times = Vec::new();
    for w in ext.windows(2) {
        if w[0].2 && !w[1].2 {
            amplitudes.push(w[0].1 - w[1].1);
            peak_times.push(w[0].0);
        }
    }
    if peak_times.len() < 3 {
        return None;
    }
    let n = peak_times.len();
    let period = (peak_times[n - 1] - peak_times[0]) / (n - 1) as f64;
    let (t0, t1) = (peak_times[n - 2], peak_times[n - 1]);
    let last: Vec<&Track> = track.iter().filter(|s| s.t >= t0 && s.t < t1).collect();
    let center = last.iter().map(|s| s.x).sum::<f64>() / last.len() as f64;
    let x_min = last.iter().map(|s| s.x).fold(f64::INFINITY, f64::min);
    let x_max = last.iter().map(|s| s.x).fold(f64::NEG_INFINITY, f64::max);
    Some(Envelope { peak_times, amplitudes, period, center, x_min, x_max })
}

/// Labels a PDE run from its position record alone.
pub fn classify_track(track: &[Track], free_speed: f64, length: f64, th: &Thresholds) -> Outcome {
    let w = th.window_fraction * length;
    let c = free_speed.abs();
    let Some(entered) = track.iter().position(|s| s.x.abs() < w) else {
        return Outcome::unresolved("never reached the window");
    };
    for s in &track[entered..] {
        if s.x > w && (s.v - c).abs() <= th.speed_tol * c {
            return Outcome { kind: OutcomeKind::PEN, evidence: Evidence::Crossing { t: s.t }, pin_location: None };
        }
        if s.x < -w && s.v < 0.0 {
            return Outcome { kind: OutcomeKind::REB, evidence: Evidence::Reversal { t: s.t }, pin_location: None };
        }
    }
    let t_in = track[entered].t;
    let t_end = track.last().unwrap().t;
    if t_end - t_in < th.t_settle || track.last().unwrap().x.abs() >= w {
        return Outcome::unresolved("still in transit");
    }
    let settled: Vec<Track> = track.iter().filter(|s| s.t >= t_in + th.t_settle).copied().collect();
    let floor = th.velocity_floor * c;
    let recent: Vec<&Track> = settled.iter().filter(|s| s.t >= t_end - th.t_settle).collect();
    if recent.len() > 1 && recent.iter().all(|s| s.v.abs() < floor) {
        let x = recent.last().unwrap().x;
        return Outcome { kind: OutcomeKind::STA, evidence: Evidence::FixedPoint { position: x }, pin_location: Some(x) };
    }
    if let Some(env) = envelope(&settled, th.min_swing * length) {
        let r = env.ratios();
        let k = th.periods;
        let steady = r.len() >= k && r[r.len() - k..].iter().all(|q| (q - 1.0).abs() <= th.amplitude_tol);
        let t_last = env.peak_times[env.peak_times.len() - 2];
        let vmax = settled.iter().filter(|s| s.t >= t_last).map(|s| s.v.abs()).fold(0.0, f64::max);
        if steady && vmax > floor {
            let amplitude = *env.amplitudes.last().unwrap();
            return Outcome {
                kind: OutcomeKind::OSC,
                evidence: Evidence::Cycle { period: env.period, center: env.center, amplitude },
                pin_location: Some(env.center),
            };
        }
    }
    Outcome::unresolved("no settled state yet")
}

pub fn classify_ode(traj: &OdeTrajectory) -> Outcome {
    let (kind, evidence, pin) = match traj.limit {
        Limit::Escape { plus: true } => (OutcomeKind::PEN, Evidence::Crossing { t: last_t(traj) }, None),
        Limit::Escape { plus: false } => (OutcomeKind::REB, Evidence::Reversal { t: last_t(traj) }, None),
        Limit::Cycle { period, p_min, p_max } => {
            let center = 0.5 * (p_min + p_max);
            (OutcomeKind::OSC, Evidence::Cycle { period, center, amplitude: p_max - p_min }, Some(center))
        }
        Limit::Point { p, .. } => (OutcomeKind::STA, Evidence::FixedPoint { position: p }, Some(p)),
        _ => return Outcome::unresolved("ODE limit not identified"),
    };
    Outcome { kind, evidence, pin_location: pin }
}

fn last_t(traj: &OdeTrajectory) -> f64 {
    traj.samples.last().map_or(0.0, |s| s.0)
}

/// A free traveling pulse ready to be launched at the bump from the left.
#[derive(Debug, Clone)]
pub struct Launch {
    pub pulse: ConvergedSolution,
    /// Start offset from the bump center (negative: left of it).
    pub offset: f64,
}

impl Launch {
    /// Mirrors the pulse if needed so that it moves toward +x.
    pub fn new(pulse: &ConvergedSolution, offset: f64) -> Result<Self> {
        if !pulse.class.traveling() || pulse.U == 0.0 {
            return Err(Error::MissingInput("traveling pulse with nonzero speed".into()));
        }
        let mut p = pulse.clone();
        if p.U < 0.0 {
            let l = p.params.domain_length;
            p.state = p.state.mirrored(0.5 * l, l);
            p.U = -p.U;
        }
        Ok(Self { pulse: p, offset })
    }

    pub fn free_speed(&self) -> f64 {
        self.pulse.U
    }

    pub fn initial_state(&self, center: f64) -> Result<SpectralState> {
        let params = &self.pulse.params;
        let l = params.domain_length;
        let u_bg = solve_background(params, params.kappa1_base)?.u_bar;
        let x = pulse_position(&self.pulse.state, params, u_bg)?;
        let mut s = self.pulse.state.shifted(center + self.offset - x, l);
        s.time = 0.0;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PdeRunOptions {
    pub thresholds: Thresholds,
    pub t_max: f64,
    /// Length of one integration chunk between classification attempts.
    pub chunk: f64,
    pub run: RunOptions,
    /// Newton-polish decaying spirals into the pinned steady state.
    pub polish: bool,
}

impl Default for PdeRunOptions {
    fn default() -> Self {
        Self { thresholds: Thresholds::default(), t_max: 60_000.0, chunk: 2_000.0, run: RunOptions::default(), polish: true }
    }
}

#[derive(Debug, Clone)]
pub struct PdeRun {
    pub epsilon: f64,
    pub d: f64,
    pub outcome: Outcome,
    pub trajectory: Trajectory,
    /// Steady pinned state (STA) reached by polishing.
    pub pinned: Option<ConvergedSolution>,
}

fn append(traj: &mut Trajectory, more: Trajectory) {
    let Some(last) = traj.samples.last().cloned() else {
        *traj = more;
        return;
    };
    let shift = last.position - more.samples[0].position;
    traj.samples.extend(more.samples.into_iter().skip(1).map(|mut s| {
        s.position += shift;
        s
    }));
    traj.final_state = more.final_state;
}

/// Launches the pulse at a bump and runs until the outcome is decided or
/// `t_max` passes.
pub fn run_pde_outcome(launch: &Launch, bump: HeterogeneityBump, opts: &PdeRunOptions) -> Result<PdeRun> {
    let params = launch.pulse.params;
    let l = params.domain_length;
    let center = bump.center_in(l);
    let field = kappa1_field(&params, params.kappa1_base, Some(&bump));
    let forcing = Forcing::with_bump(params.kappa1_base, bump);
    let th = &opts.thresholds;
    let w = th.window_fraction * l;
    let c = launch.free_speed();
    let mut state = launch.initial_state(center)?;
    let mut traj = Trajectory::default();
    let mut last_polish_amp = f64::INFINITY;
    while state.time < opts.t_max {
        let t_end = (state.time + opts.chunk).min(opts.t_max);
        let x0 = traj.samples.first().map(|s| unwrap_delta(s.position - center, l) - s.position);
        let piece = run_collision_until(&state, &params, &field, t_end, opts.run, |t| {
            // leave the chunk as soon as the pulse is clearly out of the window
            let p = t.last().unwrap().position;
            let x = x0.map_or_else(|| unwrap_delta(p - center, l), |o| p + o);
            x > w + 0.05 * l || x < -w - 0.05 * l
        });
        let piece = match piece {
            // a second structure (e.g. a pulse nucleated at a strong bump)
            // makes the single-pulse track meaningless
            Err(Error::NoPulse { .. }) => {
                let outcome = Outcome::unresolved("pulse count changed");
                return Ok(PdeRun { epsilon: bump.epsilon, d: bump.d, outcome, trajectory: traj, pinned: None });
            }
            r => r?,
        };
        state = piece.final_state.clone().expect("final state recorded");
        append(&mut traj, piece);
        traj.refresh_velocities();
        let track = relative_track(&traj, center, l);
        let outcome = classify_track(&track, c, l, th);
        if outcome.kind != OutcomeKind::Unresolved {
            if outcome.kind == OutcomeKind::OSC && opts.polish {
                // a slowly decaying spiral can pass the amplitude test; a
                // stable steady state at its center settles it
                if let Some(p) = try_polish(&state, &params, &forcing, center, w)? {
                    return Ok(finish_sta(launch, bump, traj, p, center));
                }
            }
            return Ok(PdeRun { epsilon: bump.epsilon, d: bump.d, outcome, trajectory: traj, pinned: None });
        }
        if opts.polish {
            let t_in = track.iter().find(|s| s.x.abs() < w).map_or(f64::INFINITY, |s| s.t);
            let settled: Vec<Track> = track.iter().filter(|s| s.t >= t_in + th.t_settle).copied().collect();
            let env = envelope(&settled, th.min_swing * l);
            let decaying = env.as_ref().is_some_and(|e| e.ratios().last().is_some_and(|&r| r < 1.0));
            let quiet = settled.len() > 10 && settled[settled.len() - 10..].iter().all(|s| s.v.abs() < 1e-3 * c);
            let amp = env.as_ref().map_or(0.0, |e| *e.amplitudes.last().unwrap());
            if (decaying && amp < 0.5 * last_polish_amp) || (quiet && last_polish_amp.is_infinite()) {
                last_polish_amp = amp;
                if let Some(p) = try_polish(&state, &params, &forcing, center, w)? {
                    return Ok(finish_sta(launch, bump, traj, p, center));
                }
            }
        }
    }
    let track = relative_track(&traj, center, l);
    let outcome = classify_track(&track, c, l, th);
    Ok(PdeRun { epsilon: bump.epsilon, d: bump.d, outcome, trajectory: traj, pinned: None })
}

fn finish_sta(launch: &Launch, bump: HeterogeneityBump, traj: Trajectory, p: ConvergedSolution, center: f64) -> PdeRun {
    let params = &launch.pulse.params;
    let l = params.domain_length;
    let x = local_background(params, &p.forcing.field(params))
        .and_then(|b| pulse_position_over(&p.state, params, &b))
        .map_or(f64::NAN, |x| unwrap_delta(x - center, l));
    let outcome = Outcome { kind: OutcomeKind::STA, evidence: Evidence::FixedPoint { position: x }, pin_location: Some(x) };
    PdeRun { epsilon: bump.epsilon, d: bump.d, outcome, trajectory: traj, pinned: Some(p) }
}

/// Newton from the current state to a steady state; accepted only if it is
/// linearly stable and sits inside the window.
fn try_polish(
    state: &SpectralState,
    params: &ModelParams,
    forcing: &Forcing,
    center: f64,
    w: f64,
) -> Result<Option<ConvergedSolution>> {
    let Ok(sol) = solve(state, &ShootingTarget::steady(), params, forcing) else { return Ok(None) };
    let bg = local_background(params, &forcing.field(params))?;
    let Ok(x) = pulse_position_over(&sol.state, params, &bg) else { return Ok(None) };
    if unwrap_delta(x - center, params.domain_length).abs() >= w {
        return Ok(None);
    }
    let sp = stability(&sol, 4, StabilityOptions::default())?;
    Ok(sp.eigenvalues.iter().all(|l| l.re < 0.0).then_some(sol))
}

// ---------------------------------------------------------------- diagrams

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dynamics {
    Ode,
    Pde,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseCell {
    pub d: f64,
    pub epsilon: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseBoundary {
    pub d: f64,
    /// Bracket [lo, hi] in ε after refinement.
    pub epsilon: (f64, f64),
    pub from: OutcomeKind,
    pub to: OutcomeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub dynamics: Dynamics,
    pub cells: Vec<PhaseCell>,
    pub boundaries: Vec<PhaseBoundary>,
    pub admissible: (f64, f64),
}

impl PhaseDiagram {
    /// `d,epsilon,outcome,pin_location,period`, empty fields where absent.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["d", "epsilon", "outcome", "pin_location", "period"])?;
        for c in &self.cells {
            w.write_record([
                fmt17(c.d),
                fmt17(c.epsilon),
                c.outcome.kind.label().to_string(),
                c.outcome.pin_location.map(fmt17).unwrap_or_default(),
                c.outcome.period().map(fmt17).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf8"))
    }

    /// Boundary table plus the admissible-interval annotation.
    pub fn boundaries_json(&self) -> serde_json::Value {
        serde_json::json!({
            "dynamics": self.dynamics,
            "admissible": [self.admissible.0, self.admissible.1],
            "boundaries": self.boundaries.iter().map(|b| serde_json::json!({
                "d": b.d, "epsilon_lo": b.epsilon.0, "epsilon_hi": b.epsilon.1,
                "from": b.from.label(), "to": b.to.label(),
            })).collect::<Vec<_>>(),
        })
    }

    /// Outcome kinds met walking away from ε = 0 on one side at fixed d,
    /// with repeats collapsed.
    pub fn sequence(&self, d: f64, positive: bool) -> Vec<OutcomeKind> {
        let mut cells: Vec<&PhaseCell> =
            self.cells.iter().filter(|c| c.d == d && (c.epsilon > 0.0) == positive && c.epsilon != 0.0).collect();
        cells.sort_by(|a, b| a.epsilon.abs().partial_cmp(&b.epsilon.abs()).unwrap());
        let mut out: Vec<OutcomeKind> = Vec::new();
        for c in cells {
            if out.last() != Some(&c.outcome.kind) {
                out.push(c.outcome.kind);
            }
        }
        out
    }
}

/// Number of complete REB → OSC → STA cycles in a collapsed sequence.
pub fn full_cycles(seq: &[OutcomeKind]) -> usize {
    use OutcomeKind::*;
    let want = [REB, OSC, STA];
    let mut k = 0;
    let mut n = 0;
    for s in seq {
        if *s == want[k] {
            k += 1;
            if k == 3 {
                n += 1;
                k = 0;
            }
        } else if *s == REB {
            k = 1;
        }
    }
    n
}

/// Evaluates every (d, ε) cell, then bisects between neighbours with
/// different labels until the bracket is narrower than `refine_tol`
/// (0 turns refinement off).
pub fn phase_diagram(
    dynamics: Dynamics,
    d_grid: &[f64],
    eps_grid: &[f64],
    refine_tol: f64,
    eval: impl Fn(f64, f64) -> Result<Outcome> + Sync,
) -> Result<PhaseDiagram> {
    let mut eps: Vec<f64> = eps_grid.to_vec();
    eps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let jobs: Vec<(f64, f64)> = d_grid.iter().flat_map(|&d| eps.iter().map(move |&e| (d, e))).collect();
    let outcomes: Vec<Result<Outcome>> = jobs.par_iter().map(|&(d, e)| eval(d, e)).collect();
    let mut cells = Vec::with_capacity(jobs.len());
    for (&(d, e), o) in jobs.iter().zip(outcomes) {
        cells.push(PhaseCell { d, epsilon: e, outcome: o? });
    }
    let mut boundaries = Vec::new();
    for &d in d_grid {
        let row: Vec<&PhaseCell> = cells.iter().filter(|c| c.d == d).collect();
        for w in row.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.outcome.kind == b.outcome.kind {
                continue;
            }
            let (mut lo, mut hi) = (a.epsilon, b.epsilon);
            let (kl, mut kh) = (a.outcome.kind, b.outcome.kind);
            while refine_tol > 0.0 && hi - lo > refine_tol {
                let m = 0.5 * (lo + hi);
                let km = eval(d, m)?.kind;
                if km == kl {
                    lo = m;
                } else {
                    // a third label inside splits the bracket; keep the low side
                    hi = m;
                    kh = km;
                }
            }
            boundaries.push(PhaseBoundary { d, epsilon: (lo, hi), from: kl, to: kh });
        }
    }
    Ok(PhaseDiagram { dynamics, cells, boundaries, admissible: ADMISSIBLE })
}

/// Reduced-ODE diagram; `build` supplies the reduced system for each d.
pub fn ode_phase_diagram(
    systems: &[(f64, ReducedSystem)],
    eps_grid: &[f64],
    refine_tol: f64,
) -> Result<PhaseDiagram> {
    let d_grid: Vec<f64> = systems.iter().map(|s| s.0).collect();
    phase_diagram(Dynamics::Ode, &d_grid, eps_grid, refine_tol, |d, e| {
        let sys = &systems.iter().find(|s| s.0 == d).expect("system for every d").1;
        Ok(classify_ode(&pulse_orbit(sys, e, 5e6)))
    })
}

pub fn pde_phase_diagram(
    launch: &Launch,
    d_grid: &[f64],
    eps_grid: &[f64],
    refine_tol: f64,
    opts: &PdeRunOptions,
) -> Result<PhaseDiagram> {
    phase_diagram(Dynamics::Pde, d_grid, eps_grid, refine_tol, |d, e| {
        Ok(run_pde_outcome(launch, HeterogeneityBump::new(e, d), opts)?.outcome)
    })
}

// ---------------------------------------------------------------- matching

#[derive(Debug, Clone, Serialize)]
pub struct HiopMatch {
    pub branch: usize,
    pub point: usize,
    /// Relative L² distance (STA) or distance of the encircled point from
    /// the cycle center (OSC).
    pub distance: f64,
    pub position: f64,
}

/// Atlas points bracketing ε on every branch, Newton-corrected to ε exactly.
fn candidates_at(atlas: &[Branch], epsilon: f64) -> Vec<(usize, usize, ConvergedSolution)> {
    let mut out = Vec::new();
    for (bi, b) in atlas.iter().enumerate() {
        for k in 1..b.points.len() {
            let (p, q) = (b.points[k - 1].param, b.points[k].param);
            if (p - epsilon) * (q - epsilon) > 0.0 {
                continue;
            }
            let j = if (p - epsilon).abs() <= (q - epsilon).abs() { k - 1 } else { k };
            let base = &b.points[j].solution;
            let mut f = base.forcing;
            f.set(crate::shooting::ParamKind::Epsilon, epsilon);
            if let Ok(s) = solve(&base.state, &ShootingTarget::steady(), &base.params, &f) {
                out.push((bi, j, s));
            }
        }
    }
    out
}

/// Finds the HIOP state a pinned PDE run converged to (STA), or the one its
/// oscillation winds around (OSC).
pub fn match_asymptote_to_hiop(run: &PdeRun, atlas: &[Branch]) -> Result<HiopMatch> {
    let no = || Error::NoMatch { epsilon: run.epsilon };
    let cands = candidates_at(atlas, run.epsilon);
    match (&run.outcome.kind, &run.outcome.evidence) {
        (OutcomeKind::STA, _) => {
            let pinned = run.pinned.as_ref().ok_or_else(no)?;
            let scale = pinned.state.u_norm();
            let mut best: Option<(f64, usize, usize, &ConvergedSolution)> = None;
            for (b, j, s) in &cands {
                let mut d = s.state.clone();
                d.axpy(-1.0, &pinned.state);
                let rel = d.u_norm() / scale;
                if best.is_none_or(|x| rel < x.0) {
                    best = Some((rel, *b, *j, s));
                }
            }
            let (rel, b, j, s) = best.ok_or_else(no)?;
            let sp = stability(s, 4, StabilityOptions::default())?;
            if rel < 1e-3 && sp.eigenvalues.iter().all(|l| l.re < 0.0) {
                Ok(HiopMatch { branch: b, point: j, distance: rel, position: run.outcome.pin_location.unwrap_or(f64::NAN) })
            } else {
                Err(no())
            }
        }
        (OutcomeKind::OSC, Evidence::Cycle { center, .. }) => {
            let l = run.trajectory.final_state.as_ref().map_or(1.0, |_| atlas_length(atlas));
            let track = relative_track(&run.trajectory, 0.5 * l, l);
            let tail: Vec<Track> = track.iter().rev().take_while(|s| s.t > track.last().unwrap().t - 2.0 * run.outcome.period().unwrap_or(0.0)).copied().collect();
            let lo = tail.iter().map(|s| s.x).fold(f64::INFINITY, f64::min);
            let hi = tail.iter().map(|s| s.x).fold(f64::NEG_INFINITY, f64::max);
            let mut best: Option<(f64, usize, usize, f64)> = None;
            for (b, j, s) in &cands {
                let params = &s.params;
                let Ok(bg) = local_background(params, &s.forcing.field(params)) else { continue };
                let Ok(x) = pulse_position_over(&s.state, params, &bg) else { continue };
                let x = unwrap_delta(x - s.forcing.bump.map_or(0.5 * l, |bb| bb.center_in(l)), l);
                if x < lo || x > hi {
                    continue;
                }
                let sp = stability(s, 4, StabilityOptions::default())?;
                let oscillatory = sp.eigenvalues.iter().any(|e| e.re > 0.0 && e.im.abs() > 1e-8);
                let dist = (x - center).abs();
                if oscillatory && best.is_none_or(|q| dist < q.0) {
                    best = Some((dist, *b, *j, x));
                }
            }
            let (dist, b, j, x) = best.ok_or_else(no)?;
            Ok(HiopMatch { branch: b, point: j, distance: dist, position: x })
        }
        _ => Err(no()),
    }
}

fn atlas_length(atlas: &[Branch]) -> f64 {
    atlas.iter().find_map(|b| b.points.first()).map_or(1.0, |p| p.solution.params.domain_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use OutcomeKind::*;

    fn track(f: impl Fn(f64) -> f64, t_end: f64) -> Vec<Track> {
        let h = 1.0;
        (0..=(t_end / h) as usize)
            .map(|i| {
                let t = i as f64 * h;
                Track { t, x: f(t), v: (f(t + 1e-3) - f(t - 1e-3)) / 2e-3 }
            })
            .collect()
    }

    const C: f64 = 4e-4;

    #[test]
    fn straight_run_is_pen() {
        let o = classify_track(&track(|t| -0.3 + C * t, 2000.0), C, 1.0, &Thresholds::default());
        assert_eq!(o.kind, PEN);
        // crosses +W = 0.25 at t = 1375
        assert!(matches!(o.evidence, Evidence::Crossing { t } if (t - 1376.0).abs() <= 1.0));
    }

    #[test]
    fn slowed_exit_is_not_pen() {
        let o = classify_track(&track(|t| -0.3 + 0.5 * C * t, 2000.0), C, 1.0, &Thresholds::default());
        assert_eq!(o.kind, Unresolved);
    }

    #[test]
    fn turnaround_is_reb() {
        let x = |t: f64| if t < 500.0 { -0.3 + C * t } else { -0.1 - C * (t - 500.0) };
        assert_eq!(classify_track(&track(x, 2000.0), C, 1.0, &Thresholds::default()).kind, REB);
    }

    #[test]
    fn steady_swing_is_osc() {
        let x = |t: f64| if t < 600.0 { -0.3 + C * t } else { -0.06 + 0.03 * (2.0 * std::f64::consts::PI * (t - 600.0) / 400.0).sin() };
        let o = classify_track(&track(x, 6000.0), C, 1.0, &Thresholds::default());
        assert_eq!(o.kind, OSC);
        let Evidence::Cycle { period, center, amplitude } = o.evidence else { panic!() };
        assert!((period - 400.0).abs() < 2.0);
        assert!((center + 0.06).abs() < 2e-3);
        assert!((amplitude - 0.06).abs() < 1e-3);
    }

    #[test]
    fn decaying_swing_is_not_osc() {
        let x = |t: f64| {
            if t < 600.0 {
                -0.3 + C * t
            } else {
                -0.06 + 0.03 * (-(t - 600.0) / 800.0).exp() * (2.0 * std::f64::consts::PI * (t - 600.0) / 400.0).sin()
            }
        };
        assert_ne!(classify_track(&track(x, 6000.0), C, 1.0, &Thresholds::default()).kind, OSC);
    }

    #[test]
    fn parked_pulse_is_sta() {
        let x = |t: f64| if t < 600.0 { -0.3 + C * t } else { -0.06 };
        let o = classify_track(&track(x, 2000.0), C, 1.0, &Thresholds::default());
        assert_eq!(o.kind, STA);
        assert_eq!(o.pin_location, Some(-0.06));
    }

    #[test]
    fn envelope_ignores_jitter() {
        let x = |t: f64| 0.01 * (t / 50.0).sin() + 1e-5 * (t * 7.0).sin();
        let e = envelope(&track(x, 3000.0), 1e-3).unwrap();
        assert!((e.period - 100.0 * std::f64::consts::PI).abs() < 1.0);
        assert!(e.ratios().iter().all(|r| (r - 1.0).abs() < 0.01));
    }

    #[test]
    fn cycles_counted_in_order() {
        assert_eq!(full_cycles(&[PEN, REB, OSC, STA, REB, OSC, STA, REB]), 2);
        assert_eq!(full_cycles(&[PEN, REB, STA, OSC]), 0);
        assert_eq!(full_cycles(&[PEN, REB, OSC, REB, OSC, STA]), 1);
    }

    #[test]
    fn ode_limits_map_to_labels() {
        let t = |limit| OdeTrajectory { samples: vec![(3.0, 0.0, 0.0)], limit, terminal_classification: Unresolved, alpha_flagged: false };
        assert_eq!(classify_ode(&t(Limit::Escape { plus: true })).kind, PEN);
        assert_eq!(classify_ode(&t(Limit::Escape { plus: false })).kind, REB);
        let o = classify_ode(&t(Limit::Cycle { period: 5.0, p_min: -0.2, p_max: 0.0 }));
        assert_eq!((o.kind, o.period(), o.pin_location), (OSC, Some(5.0), Some(-0.1)));
        let o = classify_ode(&t(Limit::Point { index: -1, p: -0.07, spiral: true, turns: 3.0 }));
        assert_eq!((o.kind, o.pin_location), (STA, Some(-0.07)));
        assert_eq!(classify_ode(&t(Limit::Unresolved)).kind, Unresolved);
    }

    #[test]
    fn diagram_refines_and_serializes() {
        // label switches at ε = -0.3 and 0.2
        let eval = |_d: f64, e: f64| {
            let kind = if e < -0.3 { REB } else if e > 0.2 { OSC } else { PEN };
            let evidence = if kind == OSC { Evidence::Cycle { period: 2.0, center: 0.0, amplitude: 0.1 } } else { Evidence::Crossing { t: 1.0 } };
            Ok(Outcome { kind, evidence, pin_location: None })
        };
        let eps: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let d = phase_diagram(Dynamics::Ode, &[0.05], &eps, 1e-6, eval).unwrap();
        assert_eq!(d.boundaries.len(), 2);
        assert!((d.boundaries[0].epsilon.0 + 0.3).abs() < 1e-6 && d.boundaries[0].from == REB);
        assert!((d.boundaries[1].epsilon.1 - 0.2).abs() < 1e-6 && d.boundaries[1].to == OSC);
        assert_eq!(d.sequence(0.05, false), vec![PEN, REB]);
        let csv = d.to_csv().unwrap();
        assert!(csv.starts_with("d,epsilon,outcome,pin_location,period\n"));
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.lines().last().unwrap().ends_with(",OSC,,2.0000000000000000e0"));
    }
}
