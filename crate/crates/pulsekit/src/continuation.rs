//! Natural-parameter continuation in κ₁ or ε with norm-parameterized fold
//! rounding, event detection, branch switching, fixed-period continuation of
//! time-periodic branches, HIOP atlas assembly and barcode labels.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::solve_background;
use crate::shooting::{
    solve_with, stability, Augment, ConvergedSolution, Forcing, ParamKind, ShootingTarget, SolutionClass, StabilityOptions,
};
use crate::spectral::{eval_half, pulse_position, rhs_spectral, SpectralState};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BranchPoint {
    pub param: f64,
    /// L² norm of u over the domain.
    pub norm: f64,
    pub U: f64,
    pub beta: f64,
    pub eigenvalues: Vec<Complex64>,
    pub n_unstable: usize,
    pub stable: bool,
    pub barcode: Option<String>,
    pub solution: ConvergedSolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SaddleNode,
    Pitchfork,
    Hopf,
    HomoclinicAsymptote,
    /// The branch came back to its first point.
    Closed,
}

impl EventKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::SaddleNode => "saddle-node",
            Self::Pitchfork => "pitchfork",
            Self::Hopf => "hopf",
            Self::HomoclinicAsymptote => "homoclinic",
            Self::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchEvent {
    pub kind: EventKind,
    pub param: f64,
    /// Index of the branch point closest to the event.
    pub index: usize,
    pub eigenvalue: Option<Complex64>,
    /// Refined solution and the critical eigenmode (packed), when computed.
    #[serde(skip)]
    pub critical: Option<(ConvergedSolution, Vec<f64>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Branch {
    pub kind: ParamKind,
    pub class: SolutionClass,
    pub points: Vec<BranchPoint>,
    pub events: Vec<BranchEvent>,
    pub barcode: String,
    /// Why continuation stopped early, if it did.
    pub dead_end: Option<String>,
}

impl Branch {
    pub fn params(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.param).collect()
    }

    pub fn events_of(&self, kind: EventKind) -> Vec<&BranchEvent> {
        self.events.iter().filter(|e| e.kind == kind).collect()
    }

    /// CSV rows `param,norm,U,beta,n_unstable,barcode,event`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["param", "norm", "U", "beta", "n_unstable", "barcode", "event"])?;
        for (i, p) in self.points.iter().enumerate() {
            let ev: Vec<&str> = self.events.iter().filter(|e| e.index == i).map(|e| e.kind.label()).collect();
            w.write_record([
                fmt17(p.param),
                fmt17(p.norm),
                fmt17(p.U),
                fmt17(p.beta),
                p.n_unstable.to_string(),
                p.barcode.clone().unwrap_or_default(),
                ev.join(";"),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf8"))
    }
}

/// 17 significant digits, enough for a bit-exact round trip.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy)]
pub struct StepControl {
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub grow: f64,
    /// Newton iteration count at or below which a step counts as easy.
    pub easy_iterations: usize,
    /// Largest allowed change of the L² norm between neighbours.
    pub dnorm_max: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self { ds: 1e-4, ds_min: 1e-7, ds_max: 1e-3, grow: 1.3, easy_iterations: 4, dnorm_max: 0.05 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StopRules {
    pub param_min: f64,
    pub param_max: f64,
    pub max_points: usize,
    /// Stop when the branch returns to its first point (isolas).
    pub close_loop: bool,
    /// Stop after this many saddle-nodes (0 = no limit).
    pub max_folds: usize,
    /// Stop once the profile is mirror-symmetric to this relative level
    /// (0 = off); used to end asymmetric branches where they rejoin.
    pub symmetric_tol: f64,
}

impl Default for StopRules {
    fn default() -> Self {
        Self { param_min: f64::NEG_INFINITY, param_max: f64::INFINITY, max_points: 400, close_loop: false, max_folds: 0, symmetric_tol: 0.0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContinuationOptions {
    pub kind: ParamKind,
    /// +1 or −1: initial direction in the parameter.
    pub direction: f64,
    pub step: StepControl,
    pub stop: StopRules,
    /// Number of eigenvalues per point; 0 skips stability.
    pub n_eigs: usize,
    pub stability: StabilityOptions,
    /// Re λ threshold for counting an eigenvalue as unstable.
    pub unstable_tol: f64,
    /// Bisect Hopf/pitchfork locations down to this parameter width (0 = off).
    pub refine_to: f64,
    pub target: ShootingTarget,
    /// Tail half-wavelength for barcode shift indices; None skips labels.
    pub label_scale: Option<f64>,
}

impl ContinuationOptions {
    pub fn new(kind: ParamKind, direction: f64, target: ShootingTarget) -> Self {
        Self {
            kind,
            direction: direction.signum(),
            step: StepControl::default(),
            stop: StopRules::default(),
            n_eigs: 6,
            stability: StabilityOptions::default(),
            unstable_tol: 1e-5,
            refine_to: 1e-4,
            target,
            label_scale: None,
        }
    }
}

fn l2_norm(sol: &ConvergedSolution) -> f64 {
    sol.state.u_norm() * sol.params.domain_length.sqrt()
}

fn target_for(base: &ShootingTarget, sol: &ConvergedSolution) -> ShootingTarget {
    ShootingTarget { class: sol.class, U: sol.U, beta: sol.beta, ..*base }
}

fn make_point(sol: ConvergedSolution, kind: ParamKind, opts: &ContinuationOptions) -> Result<(BranchPoint, Option<Vec<(Complex64, Vec<f64>)>>)> {
    let (eigs, modes) = if opts.n_eigs > 0 {
        let sp = stability(&sol, opts.n_eigs, opts.stability)?;
        let modes = sp.eigenvalues.iter().cloned().zip(sp.eigenmodes.iter().map(|m| m.0.clone())).collect();
        (sp.eigenvalues, Some(modes))
    } else {
        (vec![], None)
    };
    let n_unstable = count_unstable(&eigs, opts.unstable_tol).0 + count_unstable(&eigs, opts.unstable_tol).1;
    let barcode = opts.label_scale.and_then(|h| label_barcode(&sol, h).ok().map(|b| b.to_string()));
    let pt = BranchPoint {
        param: sol.forcing.get(kind),
        norm: l2_norm(&sol),
        U: sol.U,
        beta: sol.beta,
        stable: opts.n_eigs > 0 && n_unstable == 0,
        n_unstable,
        eigenvalues: eigs,
        barcode,
        solution: sol,
    };
    Ok((pt, modes))
}

/// (real unstable, complex unstable) counts.
fn count_unstable(eigs: &[Complex64], tol: f64) -> (usize, usize) {
    let mut r = 0;
    let mut c = 0;
    for l in eigs {
        if l.re > tol {
            if l.im.abs() > 1e-8 {
                c += 1;
            } else {
                r += 1;
            }
        }
    }
    (r, c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Natural,
    /// Norm-parameterized; `dn` is the signed step in ‖u‖ (coefficient norm).
    Norm { dn: f64, steps: usize, reversed_at: Option<usize> },
}

fn secant(a: &SpectralState, b: &SpectralState, w: f64) -> SpectralState {
    // b + w (b − a)
    let mut out = b.clone();
    out.axpy(w, b);
    out.axpy(-w, a);
    out
}

/// Natural-parameter continuation from `start`, rounding folds by switching
/// to norm-parameterized steps.
pub fn continue_branch(start: &ConvergedSolution, opts: &ContinuationOptions) -> Result<Branch> {
    let kind = opts.kind;
    if kind == ParamKind::Epsilon && start.forcing.bump.is_none() {
        return Err(Error::ConfigInvalid { field: "bump".into(), reason: "epsilon continuation needs a bump".into() });
    }
    let (p0, modes0) = make_point(start.clone(), kind, opts)?;
    let mut points = vec![p0];
    let mut modes: Vec<Option<Vec<(Complex64, Vec<f64>)>>> = vec![modes0];
    let mut dir = opts.direction;
    let mut ds = opts.step.ds.clamp(opts.step.ds_min, opts.step.ds_max);
    let mut mode = Mode::Natural;
    let mut dead_end = None;
    let mut folds = 0;
    let mut events = Vec::new();
    while points.len() < opts.stop.max_points {
        let k = points.len() - 1;
        let cur = &points[k].solution;
        let prev = if k > 0 { Some(&points[k - 1].solution) } else { None };
        let pc = cur.forcing.get(kind);
        let attempt = match mode {
            Mode::Natural => {
                let pn = pc + dir * ds;
                let mut forcing = cur.forcing;
                forcing.set(kind, pn);
                let mut seed = cur.state.clone();
                let mut tgt = target_for(&opts.target, cur);
                if let Some(pv) = prev {
                    let dp = pc - pv.forcing.get(kind);
                    if dp.abs() > 0.0 && dp * dir > 0.0 {
                        let w = (pn - pc) / dp;
                        seed = secant(&pv.state, &cur.state, w);
                        tgt.U = cur.U + w * (cur.U - pv.U);
                        tgt.beta = cur.beta + w * (cur.beta - pv.beta);
                    }
                }
                solve_with(&seed, &tgt, &cur.params, &forcing, Augment::None)
            }
            Mode::Norm { dn, .. } => {
                let nc = cur.state.u_norm();
                let mut seed = cur.state.clone();
                let mut forcing = cur.forcing;
                let mut tgt = target_for(&opts.target, cur);
                if let Some(pv) = prev {
                    let dnp = nc - pv.state.u_norm();
                    if dnp.abs() > 0.0 {
                        let w = dn / dnp;
                        seed = secant(&pv.state, &cur.state, w);
                        forcing.set(kind, pc + w * (pc - pv.forcing.get(kind)));
                        tgt.U = cur.U + w * (cur.U - pv.U);
                        tgt.beta = cur.beta + w * (cur.beta - pv.beta);
                    }
                }
                solve_with(&seed, &tgt, &cur.params, &forcing, Augment::Norm { kind, value: nc + dn })
            }
        };
        let accepted = match attempt {
            Ok(sol) => {
                let jump = (l2_norm(&sol) - points[k].norm).abs();
                let bad_speed = cur.class.traveling() && sol.U * cur.U < 0.0;
                if jump > opts.step.dnorm_max || bad_speed || !sol.residual.is_finite() {
                    None
                } else {
                    Some(sol)
                }
            }
            Err(Error::BlowUp { .. }) | Err(Error::NoConvergence { .. }) | Err(Error::SingularPhaseCondition) => None,
            Err(e) => return Err(e),
        };
        match (accepted, mode) {
            (None, Mode::Natural) => {
                ds *= 0.5;
                if ds < opts.step.ds_min {
                    // suspected fold: round it in the norm, with a step sized
                    // from the recent norm changes rather than the last tiny one
                    let nk = cur.state.u_norm();
                    let lo = k.saturating_sub(5);
                    let recent = (lo..k)
                        .map(|i| points[i + 1].solution.state.u_norm() - points[i].solution.state.u_norm())
                        .fold(0.0f64, |a, d| if d.abs() > a.abs() { d } else { a });
                    let mag = recent.abs().max(1e-5 * nk);
                    let dn = if recent == 0.0 { mag } else { recent.signum() * mag };
                    mode = Mode::Norm { dn, steps: 0, reversed_at: None };
                }
            }
            (None, Mode::Norm { dn, steps, reversed_at }) => {
                let dn = 0.5 * dn;
                if dn.abs() < 1e-9 * cur.state.u_norm().max(1e-12) {
                    dead_end = Some(format!("DeadEnd at {} = {pc}", param_name(kind)));
                    break;
                }
                mode = Mode::Norm { dn, steps, reversed_at };
            }
            (Some(sol), m) => {
                let iters = sol.iterations;
                let (pt, md) = make_point(sol, kind, opts)?;
                points.push(pt);
                modes.push(md);
                let k = points.len() - 1;
                detect_events(&points, &modes, k, opts, &mut events);
                if events.iter().any(|e: &BranchEvent| e.kind == EventKind::SaddleNode && e.index + 1 == k) {
                    folds += 1;
                }
                let pn = points[k].param;
                let dp = pn - points[k - 1].param;
                match m {
                    Mode::Natural => {
                        if iters <= opts.step.easy_iterations {
                            ds = (ds * opts.step.grow).min(opts.step.ds_max);
                        } else if iters > 2 * opts.step.easy_iterations {
                            ds = (ds * 0.7).max(opts.step.ds_min);
                        }
                    }
                    Mode::Norm { dn, steps, reversed_at } => {
                        let steps = steps + 1;
                        let reversed_at = reversed_at.or(if dp * dir < 0.0 { Some(steps) } else { None });
                        let dn = if iters <= opts.step.easy_iterations {
                            dn * opts.step.grow
                        } else if iters > 2 * opts.step.easy_iterations {
                            dn * 0.7
                        } else {
                            dn
                        };
                        let back = match reversed_at {
                            Some(r) => steps >= r + 3,
                            None => steps >= 20,
                        };
                        if back && dp.abs() > 0.0 {
                            dir = dp.signum();
                            ds = dp.abs().clamp(opts.step.ds_min, opts.step.ds_max);
                            mode = Mode::Natural;
                        } else {
                            mode = Mode::Norm { dn, steps, reversed_at };
                        }
                    }
                }
                if pn < opts.stop.param_min || pn > opts.stop.param_max {
                    break;
                }
                if opts.stop.max_folds > 0 && folds >= opts.stop.max_folds {
                    break;
                }
                if opts.stop.symmetric_tol > 0.0 && k >= 3 {
                    let l = points[k].solution.params.domain_length;
                    if points[k].solution.state.asymmetry(l).0 < opts.stop.symmetric_tol {
                        break;
                    }
                }
                if opts.stop.close_loop && folds >= 2 && loop_closed(&points) {
                    events.push(BranchEvent { kind: EventKind::Closed, param: pn, index: k, eigenvalue: None, critical: None });
                    break;
                }
            }
        }
    }
    if opts.refine_to > 0.0 {
        for ev in events.iter_mut() {
            if matches!(ev.kind, EventKind::Hopf | EventKind::Pitchfork) && ev.index > 0 {
                refine_event(&points, ev, opts)?;
            }
        }
    }
    let barcode = points[0].barcode.clone().unwrap_or_default();
    Ok(Branch { kind, class: start.class, points, events, barcode, dead_end })
}

fn param_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Kappa1 => "kappa1",
        ParamKind::Epsilon => "epsilon",
    }
}

fn loop_closed(points: &[BranchPoint]) -> bool {
    let a = &points[0];
    let b = points.last().unwrap();
    let scale = a.norm.max(1e-12);
    (b.param - a.param).abs() < 2e-3 && (b.norm - a.norm).abs() < 2e-3 * scale
}

/// Checks the step k−1 → k for a turning point or a change in the unstable count.
fn detect_events(
    points: &[BranchPoint],
    modes: &[Option<Vec<(Complex64, Vec<f64>)>>],
    k: usize,
    opts: &ContinuationOptions,
    events: &mut Vec<BranchEvent>,
) {
    if k >= 2 {
        let d1 = points[k - 1].param - points[k - 2].param;
        let d2 = points[k].param - points[k - 1].param;
        if d1 * d2 < 0.0 {
            let p = parabola_extreme(&points[k - 2..=k]);
            let ev = nearest_to_zero(&points[k - 1].eigenvalues, true);
            let mode = modes[k - 1].as_ref().and_then(|m| ev.and_then(|e| m.iter().find(|x| x.0 == e).map(|x| x.1.clone())));
            events.push(BranchEvent {
                kind: EventKind::SaddleNode,
                param: p,
                index: k - 1,
                eigenvalue: ev,
                critical: mode.map(|m| (points[k - 1].solution.clone(), m)),
            });
        }
    }
    if opts.n_eigs == 0 {
        return;
    }
    let (r0, c0) = count_unstable(&points[k - 1].eigenvalues, opts.unstable_tol);
    let (r1, c1) = count_unstable(&points[k].eigenvalues, opts.unstable_tol);
    if r0 + c0 == r1 + c1 {
        return;
    }
    // a real crossing next to a turning point belongs to the saddle-node
    let near_turn = events.iter().any(|e| e.kind == EventKind::SaddleNode && e.index + 2 >= k);
    let kind = if c0 != c1 {
        EventKind::Hopf
    } else if near_turn {
        return;
    } else {
        EventKind::Pitchfork
    };
    let real_only = kind == EventKind::Pitchfork;
    let ev = nearest_to_zero(&points[k].eigenvalues, real_only);
    let w0 = crossing_value(&points[k - 1].eigenvalues, real_only);
    let w1 = crossing_value(&points[k].eigenvalues, real_only);
    let t = if (w1 - w0).abs() > 0.0 { (-w0 / (w1 - w0)).clamp(0.0, 1.0) } else { 0.5 };
    let p = points[k - 1].param + t * (points[k].param - points[k - 1].param);
    let mode = modes[k].as_ref().and_then(|m| ev.and_then(|e| m.iter().find(|x| x.0 == e).map(|x| x.1.clone())));
    events.push(BranchEvent {
        kind,
        param: p,
        index: if t < 0.5 { k - 1 } else { k },
        eigenvalue: ev,
        critical: mode.map(|m| (points[k].solution.clone(), m)),
    });
}

/// Real part of the eigenvalue closest to the imaginary axis, skipping the
/// neutral translation/phase mode.
fn crossing_value(eigs: &[Complex64], real_only: bool) -> f64 {
    nearest_to_zero(eigs, real_only).map_or(0.0, |l| l.re)
}

fn nearest_to_zero(eigs: &[Complex64], real_only: bool) -> Option<Complex64> {
    eigs.iter()
        .filter(|l| if real_only { l.im.abs() <= 1e-8 } else { l.im.abs() > 1e-8 })
        .filter(|l| l.norm() > 1e-7)
        .min_by(|a, b| a.re.abs().partial_cmp(&b.re.abs()).unwrap())
        .copied()
}

fn parabola_extreme(pts: &[BranchPoint]) -> f64 {
    parabola_vertex([pts[0].norm, pts[1].norm, pts[2].norm], [pts[0].param, pts[1].param, pts[2].param])
}

/// Extreme value of the parabola y(x) through three points; falls back to
/// the middle value when the vertex lies outside their x-range.
pub fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> f64 {
    let (x0, x1, x2) = (x[0], x[1], x[2]);
    let (y0, y1, y2) = (y[0], y[1], y[2]);
    let d = (x0 - x1) * (x0 - x2) * (x1 - x2);
    if d.abs() < 1e-300 {
        return y1;
    }
    let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / d;
    let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / d;
    let c = (x1 * x2 * (x1 - x2) * y0 + x2 * x0 * (x2 - x0) * y1 + x0 * x1 * (x0 - x1) * y2) / d;
    if a.abs() < 1e-300 {
        return y1;
    }
    let xm = -b / (2.0 * a);
    if xm < x0.min(x1).min(x2) || xm > x0.max(x1).max(x2) {
        return y1;
    }
    let v = a * xm * xm + b * xm + c;
    // an extreme far outside the sampled values signals round-off, not a fold
    let span = (y0 - y1).abs().max((y2 - y1).abs());
    if (v - y1).abs() > 2.0 * span {
        return y1;
    }
    v
}

/// Bisection on the parameter between the two points around the event.
fn refine_event(points: &[BranchPoint], ev: &mut BranchEvent, opts: &ContinuationOptions) -> Result<()> {
    let i = ev.index.min(points.len() - 2);
    let real_only = ev.kind == EventKind::Pitchfork;
    let (mut sa, mut sb) = (points[i].solution.clone(), points[i + 1].solution.clone());
    let mut wa = crossing_value(&points[i].eigenvalues, real_only);
    let mut best: Option<(ConvergedSolution, Complex64, Vec<f64>)> = None;
    for _ in 0..20 {
        let (pa, pb) = (sa.forcing.get(opts.kind), sb.forcing.get(opts.kind));
        if (pb - pa).abs() <= opts.refine_to {
            break;
        }
        let pm = 0.5 * (pa + pb);
        let mut forcing = sa.forcing;
        forcing.set(opts.kind, pm);
        let mut seed = sa.state.clone();
        seed.axpy(0.5, &sb.state);
        seed.axpy(-0.5, &sa.state);
        let tgt = ShootingTarget { U: 0.5 * (sa.U + sb.U), beta: 0.5 * (sa.beta + sb.beta), ..target_for(&opts.target, &sa) };
        let sm = match solve_with(&seed, &tgt, &sa.params, &forcing, Augment::None) {
            Ok(s) => s,
            Err(_) => break,
        };
        let sp = stability(&sm, opts.n_eigs.max(2), opts.stability)?;
        let wm = crossing_value(&sp.eigenvalues, real_only);
        let lam = nearest_to_zero(&sp.eigenvalues, real_only).unwrap_or_default();
        let mode = sp.eigenvalues.iter().position(|&l| l == lam).map(|j| sp.eigenmodes[j].0.clone()).unwrap_or_default();
        best = Some((sm.clone(), lam, mode));
        if (wm > 0.0) == (wa > 0.0) {
            sa = sm;
            wa = wm;
        } else {
            sb = sm;
        }
    }
    ev.param = 0.5 * (sa.forcing.get(opts.kind) + sb.forcing.get(opts.kind));
    if let Some((s, lam, mode)) = best {
        ev.eigenvalue = Some(lam);
        ev.critical = Some((s, mode));
    }
    Ok(())
}

/// Seeds a new branch at a bifurcation by adding the critical eigenmode with
/// relative weight `weight` (tried up to 0.10).
pub fn branch_switch(event: &BranchEvent, weight: f64, target: &ShootingTarget) -> Result<ConvergedSolution> {
    let (base, mode) = event.critical.as_ref().ok_or(Error::MissingInput("critical eigenmode".into()))?;
    let n = base.params.n_modes;
    let zn = base.state.norm();
    let mn = crate::linalg::norm(mode);
    if mn == 0.0 {
        return Err(Error::MissingInput("critical eigenmode".into()));
    }
    let dir = SpectralState::unpack(mode, n);
    let parent = base.state.pack();
    let mut w = weight;
    loop {
        let mut seed = base.state.clone();
        seed.axpy(w * zn / mn, &dir);
        let tgt = target_for(target, base);
        let sol = solve_with(&seed, &tgt, &base.params, &base.forcing, Augment::None)?;
        let d: Vec<f64> = sol.state.pack().iter().zip(&parent).map(|(a, b)| a - b).collect();
        // converged back onto the parent (allowing a pure translation for
        // homogeneous problems would need a phase fit; the parent norm is a
        // conservative stand-in)
        if crate::linalg::norm(&d) > 1e-3 * zn {
            return Ok(sol);
        }
        if w >= 0.10 {
            return Err(Error::FellBack);
        }
        w = (w * 2.0).min(0.10);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PeriodicOptions {
    pub kind: ParamKind,
    /// Signed initial step in the period.
    pub dbeta: f64,
    pub dbeta_max: f64,
    /// Homoclinic declaration: β above this multiple of the starting period.
    pub beta_factor: f64,
    /// ... while the parameter moves by less than this per step.
    pub dparam_tol: f64,
    pub max_points: usize,
    pub target: ShootingTarget,
    pub n_eigs: usize,
    pub stability: StabilityOptions,
}

impl PeriodicOptions {
    pub fn new(kind: ParamKind, dbeta: f64, target: ShootingTarget) -> Self {
        Self {
            kind,
            dbeta,
            dbeta_max: f64::INFINITY,
            beta_factor: 50.0,
            dparam_tol: 1e-8,
            max_points: 200,
            target,
            n_eigs: 0,
            stability: StabilityOptions::default(),
        }
    }
}

/// Steps the period β and solves for the parameter (ε or κ₁) at fixed β.
pub fn continue_periodic_fixed_period(start: &ConvergedSolution, opts: &PeriodicOptions) -> Result<Branch> {
    if !start.class.periodic() {
        return Err(Error::ConfigInvalid { field: "class".into(), reason: "fixed-period continuation needs a periodic solution".into() });
    }
    let copts = ContinuationOptions {
        n_eigs: opts.n_eigs,
        stability: opts.stability,
        ..ContinuationOptions::new(opts.kind, 1.0, opts.target)
    };
    let beta0 = start.beta;
    let (p0, _) = make_point(start.clone(), opts.kind, &copts)?;
    let mut points = vec![p0];
    let mut events = Vec::new();
    let mut db = opts.dbeta;
    let mut dead_end = None;
    while points.len() < opts.max_points {
        let k = points.len() - 1;
        let cur = points[k].solution.clone();
        let beta = cur.beta + db;
        let mut seed = cur.state.clone();
        let mut forcing = cur.forcing;
        if k > 0 {
            let pv = &points[k - 1].solution;
            let w = db / (cur.beta - pv.beta);
            if w.is_finite() {
                seed = secant(&pv.state, &cur.state, w);
                forcing.set(opts.kind, cur.forcing.get(opts.kind) + w * (cur.forcing.get(opts.kind) - pv.forcing.get(opts.kind)));
            }
        }
        let tgt = ShootingTarget { beta, ..target_for(&opts.target, &cur) };
        match solve_with(&seed, &tgt, &cur.params, &forcing, Augment::FixedPeriod { kind: opts.kind }) {
            Ok(sol) => {
                let iters = sol.iterations;
                let (pt, _) = make_point(sol, opts.kind, &copts)?;
                let dp = (pt.param - points[k].param).abs();
                points.push(pt);
                if iters <= 4 {
                    db = (db * 1.3).clamp(-opts.dbeta_max, opts.dbeta_max);
                }
                let last = points.last().unwrap();
                if last.beta > opts.beta_factor * beta0 && dp < opts.dparam_tol {
                    events.push(BranchEvent {
                        kind: EventKind::HomoclinicAsymptote,
                        param: last.param,
                        index: points.len() - 1,
                        eigenvalue: None,
                        critical: None,
                    });
                    break;
                }
            }
            Err(Error::NoConvergence { .. }) | Err(Error::BlowUp { .. }) => {
                db *= 0.5;
                if db.abs() < 1e-6 * beta0 {
                    dead_end = Some(format!("DeadEnd at beta = {}", cur.beta));
                    break;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Branch { kind: opts.kind, class: start.class, points, events, barcode: String::new(), dead_end })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Barcode {
    /// Peaks left to right: 'I' large, 'i' small.
    pub pattern: String,
    /// Shift index in units of half the tail wavelength (may be a half-integer).
    pub shift_index: f64,
    /// 'S' stationary or 'T' traveling.
    pub kind: char,
    pub ambiguous: bool,
    /// Peak positions relative to the bump center (domain midpoint by default).
    pub peaks: Vec<f64>,
}

impl std::fmt::Display for Barcode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut body = String::new();
        let chars: Vec<char> = self.pattern.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let mut j = i;
            while j < chars.len() && chars[j] == chars[i] {
                j += 1;
            }
            body.push(chars[i]);
            if j - i > 1 {
                body.push_str(&format!("^{}", j - i));
            }
            i = j;
        }
        let n = self.shift_index;
        let idx = if n.fract() == 0.0 { format!("{}", n as i64) } else { format!("{}/2", (2.0 * n).round() as i64) };
        write!(f, "[{body}]{}_{{{idx}}}", self.kind)
    }
}

/// Peak structure of u − ū_bg. `half_wavelength` is π/b from the tail fit.
pub fn label_barcode(sol: &ConvergedSolution, half_wavelength: f64) -> Result<Barcode> {
    let params = &sol.params;
    let l = params.domain_length;
    let u_bg = solve_background(params, sol.forcing.kappa1)?.u_bar;
    let center = sol.forcing.bump.map_or(0.5 * l, |b| b.center_in(l));
    let m = 16 * params.n_modes;
    let xs: Vec<f64> = (0..m).map(|i| center - 0.5 * l + l * i as f64 / m as f64).collect();
    let dev: Vec<f64> = xs.iter().map(|&x| eval_half(&sol.state.u, x, l).0 - u_bg).collect();
    let dmax = dev.iter().cloned().fold(0.0, f64::max);
    if !(dmax > 0.0) {
        return Err(Error::NoPulse { peak: dmax });
    }
    let mut peaks = Vec::new();
    let mut pattern = String::new();
    let mut ambiguous = false;
    for i in 0..m {
        let (a, b, c) = (dev[(i + m - 1) % m], dev[i], dev[(i + 1) % m]);
        if b > a && b >= c {
            let r = b / dmax;
            if r < 0.05 {
                continue;
            }
            if (r - 0.25).abs() <= 0.05 * 0.25 || (r - 0.05).abs() <= 0.05 * 0.05 {
                ambiguous = true;
            }
            pattern.push(if r > 0.25 { 'I' } else { 'i' });
            peaks.push(xs[i] - center);
        }
    }
    let h = half_wavelength;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all = mean(&peaks) / h;
    let large: Vec<f64> = peaks.iter().zip(pattern.chars()).filter(|(_, c)| *c == 'I').map(|(p, _)| *p).collect();
    let shift_index = if pattern.contains('I') && pattern.contains('i') && pattern.ends_with('i') {
        0.5 * ((mean(&large) / h).round() + all.round())
    } else {
        all.round()
    };
    let kind = if sol.class.traveling() { 'T' } else { 'S' };
    Ok(Barcode { pattern, shift_index, kind, ambiguous, peaks })
}

/// Seeds [I]ˢₙ: the one-peak stationary solution translated so its peak sits
/// at `p_n` relative to the bump center.
pub fn shifted_seed(one_peak: &ConvergedSolution, p_n: f64) -> Result<SpectralState> {
    let params = &one_peak.params;
    let l = params.domain_length;
    let u_bg = solve_background(params, one_peak.forcing.kappa1)?.u_bar;
    let c = pulse_position(&one_peak.state, params, u_bg)?;
    let center = one_peak.forcing.bump.map_or(0.5 * l, |b| b.center_in(l));
    Ok(one_peak.state.shifted(center + p_n - c, l))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub name: String,
    pub shift_index: Option<f64>,
    pub branch: Option<Branch>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atlas {
    pub entries: Vec<AtlasEntry>,
}

impl Atlas {
    pub fn branches(&self) -> impl Iterator<Item = &Branch> {
        self.entries.iter().filter_map(|e| e.branch.as_ref())
    }

    /// Manifest JSON: branch names, shift-index colors and the event table.
    pub fn manifest(&self) -> serde_json::Value {
        let branches: Vec<serde_json::Value> = self
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "shift_index": e.shift_index,
                    "color": e.shift_index.map(shift_color),
                    "points": e.branch.as_ref().map_or(0, |b| b.points.len()),
                    "error": e.error,
                })
            })
            .collect();
        let events: Vec<serde_json::Value> = self
            .entries
            .iter()
            .filter_map(|e| e.branch.as_ref().map(|b| (e, b)))
            .flat_map(|(e, b)| {
                b.events.iter().map(move |ev| serde_json::json!({"branch": e.name, "kind": ev.kind.label(), "param": ev.param}))
            })
            .collect();
        serde_json::json!({"branches": branches, "events": events})
    }
}

/// Color convention for shifted one-peak families.
pub fn shift_color(n: f64) -> &'static str {
    match n.round() as i64 {
        0 => "red",
        -1 => "black",
        -2 => "yellow",
        -3 => "green",
        -4 => "blue",
        _ => "gray",
    }
}

/// Refines a translation `p_guess` of the one-peak state to where the
/// instantaneous drift along the translation mode vanishes under `forcing`.
/// Newton on weakly pinned states only converges from about a thousandth of
/// a domain away, and the reduced zeros are not that accurate.
pub fn balance_position(one_peak: &ConvergedSolution, forcing: &Forcing, p_guess: f64, radius: f64) -> Result<f64> {
    let params = &one_peak.params;
    let field = forcing.field(params);
    let g = |p: f64| -> Result<f64> {
        let z = shifted_seed(one_peak, p)?;
        Ok(rhs_spectral(params, &field, &z).dot(&z.dx(params.domain_length)))
    };
    let steps = 40;
    let h = radius / steps as f64;
    let g0 = g(p_guess)?;
    if g0 == 0.0 {
        return Ok(p_guess);
    }
    // walk outward on both sides, take the nearest sign change
    let (mut gl, mut gr) = (g0, g0);
    for k in 1..=steps {
        let (pl, pr) = (p_guess - k as f64 * h, p_guess + k as f64 * h);
        let (nl, nr) = (g(pl)?, g(pr)?);
        let bracket = if nr.signum() != gr.signum() {
            Some((pr - h, pr, gr))
        } else if nl.signum() != gl.signum() {
            Some((pl, pl + h, nl))
        } else {
            None
        };
        if let Some((mut a, mut b, mut ga)) = bracket {
            while b - a > 1e-6 {
                let m = 0.5 * (a + b);
                let gm = g(m)?;
                if gm.signum() == ga.signum() {
                    a = m;
                    ga = gm;
                } else {
                    b = m;
                }
            }
            return Ok(0.5 * (a + b));
        }
        gl = nl;
        gr = nr;
    }
    Ok(p_guess)
}

/// One seed for the atlas: a converged solution at small ε plus a name.
#[derive(Debug, Clone)]
pub struct AtlasSeed {
    pub name: String,
    pub shift_index: Option<f64>,
    pub solution: ConvergedSolution,
}

/// Builds [I]ˢₙ seeds by translating `one_peak` to the zeros `p_n` of f and
/// Newton-correcting at `epsilon`.
pub fn shifted_seeds(
    one_peak: &ConvergedSolution,
    zeros: &[(i64, f64)],
    epsilon: f64,
    target: &ShootingTarget,
) -> Vec<std::result::Result<AtlasSeed, (String, Error)>> {
    zeros
        .iter()
        .map(|&(n, p)| {
            let name = format!("[I]S_{{{n}}}");
            let run = || -> Result<AtlasSeed> {
                let mut forcing = one_peak.forcing;
                forcing.set(ParamKind::Epsilon, epsilon);
                let p = balance_position(one_peak, &forcing, p, 0.02)?;
                let seed = shifted_seed(one_peak, p)?;
                let sol = solve_with(&seed, target, &one_peak.params, &forcing, Augment::None)?;
                Ok(AtlasSeed { name: name.clone(), shift_index: Some(n as f64), solution: sol })
            };
            run().map_err(|e| (name.clone(), e))
        })
        .collect()
}

/// Continues every seed in ε in both directions within `range`; failures are
/// collected per entry.
pub fn hiop_atlas(seeds: &[AtlasSeed], range: (f64, f64), opts: &ContinuationOptions) -> Atlas {
    let entries = seeds
        .par_iter()
        .flat_map_iter(|s| {
            [-1.0, 1.0].into_iter().map(move |dir| {
                let mut o = *opts;
                o.kind = ParamKind::Epsilon;
                o.direction = dir;
                o.stop.param_min = range.0;
                o.stop.param_max = range.1;
                let name = format!("{}{}", s.name, if dir > 0.0 { "+" } else { "-" });
                match continue_branch(&s.solution, &o) {
                    Ok(b) => AtlasEntry { name, shift_index: s.shift_index, branch: Some(b), error: None },
                    Err(e) => AtlasEntry { name, shift_index: s.shift_index, branch: None, error: Some(e.to_string()) },
                }
            })
        })
        .collect();
    Atlas { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barcode_display() {
        let b = Barcode { pattern: "IIi".into(), shift_index: -0.5, kind: 'S', ambiguous: false, peaks: vec![] };
        assert_eq!(b.to_string(), "[I^2i]S_{-1/2}");
        let b = Barcode { pattern: "I".into(), shift_index: -2.0, kind: 'S', ambiguous: false, peaks: vec![] };
        assert_eq!(b.to_string(), "[I]S_{-2}");
    }

    #[test]
    fn parabola_recovers_vertex() {
        let y = |n: f64| -0.1 - 3.0 * (n - 1.0) * (n - 1.0);
        let v = parabola_vertex([0.8, 1.05, 1.3], [y(0.8), y(1.05), y(1.3)]);
        assert!((v + 0.1).abs() < 1e-12);
        // vertex outside the sampled range falls back to the middle value
        let v = parabola_vertex([2.0, 2.1, 2.2], [y(2.0), y(2.1), y(2.2)]);
        assert_eq!(v, y(2.1));
    }
}
