//! Acceptance run: one PASS/FAIL line per criterion, regenerating all data.
//!
//! `PULSEKIT_ACCEPT=1,5,7` restricts the run to the listed criteria. Known
//! conflicts with published values print "FAIL (known, see notes)" and do
//! not fail the run.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;

use pulsekit::continuation::{continue_branch, ContinuationOptions, EventKind};
use pulsekit::io::{build_atlas, collision_pulse, reduced_pulse};
use pulsekit::model::{solve_background, HeterogeneityBump, ModelParams};
use pulsekit::outcomes::{
    full_cycles, match_asymptote_to_hiop, ode_phase_diagram, phase_diagram, run_pde_outcome, Dynamics, Launch,
    PdeRun, PdeRunOptions, ADMISSIBLE,
};
use pulsekit::reduced::{
    basin_boundary, bisect_label, bisect_outcome, bisect_sign, build_reduced, critical_points, destination, follow,
    homoclinic_gap, limit_index, nonsaddle_thresholds, off_axis_equilibria, point_by_index, Branch, FollowOptions,
    OutcomeKind, PointKind, ReducedSystem,
};
use pulsekit::seeds::{stationary_pulse, traveling_pulse};
use pulsekit::shooting::{
    critical_wavenumber, drift_eigenvalue, goldstone_check, linearized_trivial_spectrum, solve, verify_residual,
    trivial_onsets, ConvergedSolution, Forcing, ParamKind, ShootingTarget, StabilityOptions,
};
use pulsekit::snaking::{snaking_study, SnakingOptions};
use pulsekit::spectral::{pulse_position, Etdrk4};

type Res = Result<Verdict, String>;

struct Verdict {
    pass: bool,
    /// Failure explained by a documented conflict with the published value.
    known: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Res {
    Ok(Verdict { pass, known: false, detail })
}

fn e<E: std::fmt::Display>(x: E) -> String {
    x.to_string()
}

fn rel(x: f64, reference: f64) -> f64 {
    ((x - reference) / reference).abs()
}

const D: f64 = 0.05;

fn params() -> ModelParams {
    ModelParams::default()
}

fn reduced() -> &'static ReducedSystem {
    static SYS: OnceLock<ReducedSystem> = OnceLock::new();
    SYS.get_or_init(|| {
        let pulse = reduced_pulse(&params()).expect("wide stationary pulse");
        build_reduced(&pulse, D).expect("reduced system")
    })
}

fn traveling() -> &'static ConvergedSolution {
    static P: OnceLock<ConvergedSolution> = OnceLock::new();
    P.get_or_init(|| collision_pulse(&params()).expect("traveling pulse"))
}

const NEG: [f64; 8] = [-0.0002, -0.00042, -0.00087, -0.0018, -0.0038, -0.0079, -0.0166, -0.03];
const POS: [f64; 8] = [0.0002, 0.0005, 0.0008, 0.002, 0.003, 0.0065, 0.0085, 0.0101];
const EXTRA: [f64; 4] = [-0.0025, -0.0055, 0.004, 0.008];

/// Every PDE collision of the sweep, shared by the diagram and matching checks.
fn pde_runs() -> &'static Vec<(f64, Result<PdeRun, String>)> {
    static RUNS: OnceLock<Vec<(f64, Result<PdeRun, String>)>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let launch = Launch::new(traveling(), -0.3).expect("launch");
        let eps: Vec<f64> = NEG.iter().chain(&POS).chain(&EXTRA).copied().collect();
        eps.par_iter()
            .map(|&x| (x, run_pde_outcome(&launch, HeterogeneityBump::new(x, D), &PdeRunOptions::default()).map_err(e)))
            .collect()
    })
}

// ------------------------------------------------------------ criteria

fn c1() -> Res {
    let oracle = 1.0 / params().kappa3;
    let mut pass = true;
    let mut parts = Vec::new();
    for (l, n) in [(0.56, 144), (1.0, 256)] {
        let p = params().with_domain(l, n);
        let st = stationary_pulse(&p, p.kappa1_base).map_err(e)?;
        let g = |tau: f64| drift_eigenvalue(&st, tau, StabilityOptions::default()).map(|r| r.0).map_err(e);
        let (mut a, mut b) = (3.0, 3.7);
        let (ga, gb) = (g(a)?, g(b)?);
        if !(ga < 0.0 && gb > 0.0) {
            return verdict(false, format!("L={l}: no sign change of the drift exponent on [3.0, 3.7] ({ga:.2e}, {gb:.2e})"));
        }
        while b - a > 1e-5 {
            let m = 0.5 * (a + b);
            if g(m)? < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        let tc = 0.5 * (a + b);
        pass &= rel(tc, oracle) < 0.005;
        parts.push(format!("L={l}: tau_c={tc:.5} ({:.3}%)", 100.0 * rel(tc, oracle)));
    }
    verdict(pass, format!("{} vs 1/kappa3={oracle:.5}, tol 0.5%", parts.join(", ")))
}

fn c2() -> Res {
    let p = params();
    let (hopf, pitch) = trivial_onsets(&p).map_err(e)?;
    let wc = critical_wavenumber(&p).map_err(e)?;
    // at the onsets the leading trivial-state growth rate crosses zero
    let growth = |k1: f64| linearized_trivial_spectrum(&p, k1, wc).map(|(a, b)| a.re.max(b.re)).map_err(e);
    let gh = growth(hopf)?;
    // a real eigenvalue through zero at the pitchfork (the other is κ₃ − 1/τ)
    let gp = linearized_trivial_spectrum(&p, pitch, wc).map(|(a, b)| a.norm().min(b.norm())).map_err(e)?;
    let period = 8.0 * PI / wc;
    let pass = (hopf + 0.0758).abs() <= 5e-4
        && (pitch + 0.0755).abs() <= 5e-4
        && (period - 0.56).abs() <= 0.005
        && gh.abs() < 1e-9
        && gp.abs() < 1e-9;
    verdict(
        pass,
        format!("hopf {hopf:.5}, pitchfork {pitch:.5} (tol 5e-4); 8pi/w_c = {period:.5}; Re at Hopf {gh:.1e}, |lambda| at pitchfork {gp:.1e}"),
    )
}

fn isola_folds(sol: &ConvergedSolution) -> Result<(f64, f64), String> {
    let mut folds = Vec::new();
    for dir in [-1.0, 1.0] {
        let mut o = ContinuationOptions::new(ParamKind::Kappa1, dir, ShootingTarget::traveling(sol.U));
        o.n_eigs = 0;
        o.stop.max_folds = 1;
        o.stop.max_points = 120;
        let b = continue_branch(sol, &o).map_err(e)?;
        let f = b.events_of(EventKind::SaddleNode).first().map(|ev| ev.param);
        folds.push(f.ok_or_else(|| format!("no fold in direction {dir}"))?);
    }
    folds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((folds[0], folds[1]))
}

fn c3() -> Res {
    let small = params().with_domain(0.56, 144);
    let t = traveling_pulse(&small, small.kappa1_base).map_err(e)?;
    let (lo_s, hi_s) = isola_folds(&t)?;
    // the same pulse placed in a three times wider domain
    let wide = params().with_domain(1.68, 432);
    let ub = solve_background(&wide, wide.kappa1_base).map_err(e)?.u_bar;
    let c = pulse_position(&t.state, &small, ub).map_err(e)?;
    let seed = t.state.resample(0.56, c, 1.68, 432, (ub, ub));
    let tw = solve(&seed, &ShootingTarget::traveling(t.U), &wide, &Forcing::homogeneous(wide.kappa1_base)).map_err(e)?;
    let (lo_w, hi_w) = isola_folds(&tw)?;
    let pass = rel(lo_s, -0.135866) < 0.02
        && rel(hi_s, -0.088) < 0.02
        && rel(lo_w, lo_s) < 0.003
        && rel(hi_w, hi_s) < 0.003;
    verdict(
        pass,
        format!(
            "L=0.56 folds {lo_s:.7}, {hi_s:.7}; L=1.68 folds {lo_w:.7}, {hi_w:.7}; drift {:.3}%, {:.3}%",
            100.0 * rel(lo_w, lo_s),
            100.0 * rel(hi_w, hi_s)
        ),
    )
}

fn c4() -> Res {
    let p = params().with_domain(0.56, 144);
    let st = stationary_pulse(&p, p.kappa1_base).map_err(e)?;
    let rep = snaking_study(&st, &SnakingOptions::default()).map_err(e)?;
    let two = rep.right_folds_adding_two();
    let ladder = rep.ladder_joins_odd_to_even();
    let filled = rep.terminates_on_filled();
    let ends: Vec<&str> = rep.terminals.iter().map(|t| t.0.as_str()).collect();
    verdict(
        two >= 2 && ladder && filled,
        format!(
            "right folds adding 2 peaks: {two}; ladder ends {:?} (odd/even {ladder}); terminals {ends:?}",
            rep.ladder_ends
        ),
    )
}

fn c5() -> Res {
    let sys = reduced();
    let mut fails = Vec::new();
    // <u_x, u_xx> by summation by parts on a fine grid: telescopes to zero
    let n = 8192;
    let h = sys.domain_length / n as f64;
    let ux: Vec<f64> = (0..n).map(|j| sys.u_bar(j as f64 * h - 0.5 * sys.domain_length).1).collect();
    let uxx: Vec<f64> = (0..n).map(|j| (ux[(j + 1) % n] - ux[(j + n - 1) % n]) / (2.0 * h)).collect();
    let dot: f64 = ux.iter().zip(&uxx).map(|(a, b)| a * b).sum::<f64>() * h;
    let scale = (ux.iter().map(|a| a * a).sum::<f64>() * uxx.iter().map(|a| a * a).sum::<f64>()).sqrt() * h;
    let orth = dot.abs() / scale;
    if orth >= 1e-10 {
        fails.push(format!("<u_x,u_xx> {orth:.1e}"));
    }
    if !(sys.c1 > 0.0 && sys.c2 > 0.0) {
        fails.push(format!("C1={} C2={}", sys.c1, sys.c2));
    }
    let pmax = sys.l_far;
    let odd = (1..2000)
        .map(|i| {
            let p = pmax * i as f64 / 2000.0;
            (sys.f(p) + sys.f(-p)).abs()
        })
        .fold(0.0, f64::max)
        / sys.f_max;
    if odd >= 1e-8 {
        fails.push(format!("f oddness {odd:.1e}"));
    }
    let fmax = sys.f_table.f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if fmax >= 2.0 * sys.m0 {
        fails.push(format!("max|f| {fmax:.3e} >= 2 M0 {:.3e}", 2.0 * sys.m0));
    }
    // saddle quantities and Jacobian cross-check over an ε grid
    let (ps, as_) = sys.scales();
    let mut saddles = 0;
    let mut mismatches = 0;
    let mut sigma_bad = 0;
    for i in 0..100 {
        let eps = ADMISSIBLE.0 + (ADMISSIBLE.1 - ADMISSIBLE.0) * (i as f64 + 0.5) / 100.0;
        for cp in critical_points(sys, eps, (-pmax, pmax)).map_err(e)? {
            if let Some(s) = cp.saddle_quantity {
                saddles += 1;
                if !(s > 0.0) {
                    sigma_bad += 1;
                }
            }
            let y = [cp.p, 0.0];
            let col = |k: usize, d: f64| {
                let (mut a, mut b) = (y, y);
                a[k] += d;
                b[k] -= d;
                let (fa, fb) = (sys.rhs(eps, &a), sys.rhs(eps, &b));
                [(fa[0] - fb[0]) / (2.0 * d), (fa[1] - fb[1]) / (2.0 * d)]
            };
            let (jp, ja) = (col(0, 1e-6 * ps), col(1, 1e-6 * as_));
            let tr = jp[0] + ja[1];
            let det = jp[0] * ja[1] - ja[0] * jp[1];
            let disc = tr * tr - 4.0 * det;
            let kind = if det < 0.0 {
                PointKind::Saddle
            } else if tr > 0.0 {
                if disc >= 0.0 { PointKind::UnstableNode } else { PointKind::UnstableSpiral }
            } else if disc < 0.0 {
                PointKind::StableSpiral
            } else {
                PointKind::StableNode
            };
            // classification on a knife edge is not a disagreement
            let edge = det.abs() < 1e-9 * tr * tr || disc.abs() < 1e-6 * tr * tr;
            if kind != cp.kind && !edge {
                mismatches += 1;
            }
        }
    }
    if sigma_bad > 0 {
        fails.push(format!("{sigma_bad} saddles with sigma <= 0"));
    }
    if mismatches > 0 {
        fails.push(format!("{mismatches} Jacobian classification mismatches"));
    }
    let tc = 1.0 / sys.kappa3;
    let mut off = 0;
    for k in 1..=6 {
        let s = sys.with_tau(tc * (1.0 + k as f64 / 7.0));
        for eps in [-0.01, -0.001, 0.001, 0.01] {
            off += off_axis_equilibria(&s, eps, 300, 1e-4).len();
        }
    }
    if off > 0 {
        fails.push(format!("{off} off-axis equilibria"));
    }
    verdict(
        fails.is_empty(),
        if fails.is_empty() {
            format!("orthogonality {orth:.1e}, oddness {odd:.1e}, max|f|/M0 {:.3}, {saddles} saddles checked", fmax / sys.m0)
        } else {
            fails.join("; ")
        },
    )
}

fn c6() -> Res {
    let sys = reduced();
    let (c1, k3) = (sys.c1, sys.kappa3);
    // τ̂ = 0
    let (_, _, e_hi) = nonsaddle_thresholds(&sys.with_tau(1.0 / k3));
    let oracle = 4.0 * c1 * k3;
    let r0 = rel(e_hi, oracle);
    // just below the tangency the two Δ=0 roots close in on b̂ = 0
    let s = sys.with_tau(1.0 / k3 + (1.0 - 1e-8) / k3);
    let (lo, b0, hi) = nonsaddle_thresholds(&s);
    let t_ref = c1 * k3;
    let r1 = rel(lo, t_ref).max(rel(hi, t_ref)).max(rel(b0, t_ref));
    verdict(
        r0 < 1e-6 && r1 < 1e-3,
        format!("Delta=0 at tau_hat=0: {e_hi:.9e} vs 4C1k3 {oracle:.9e} (rel {r0:.1e}); tangency eps_hat {b0:.6e} vs C1k3 {t_ref:.6e} (rel {r1:.1e})"),
    )
}

fn c7() -> Res {
    let sys = reduced();
    let tol = 1e-9;
    let pen_reb = bisect_outcome(sys, -0.0002, -0.0004, tol);
    let reb_osc = bisect_outcome(sys, -0.002, -0.003, tol);
    let basin = bisect_label(|x| destination(sys, x, 0, Branch::LeftStable).as_ref().and_then(limit_index), -0.00002, -0.00032, tol);
    // the P1-P-5 connection separates destinations P-4 and P-6
    let dest1 = |x: f64| destination(sys, x, 1, Branch::LeftStable).as_ref().and_then(limit_index);
    let scan: Vec<(f64, Option<i64>)> = (0..=50).map(|i| 0.0003 + 1e-5 * i as f64).map(|x| (x, dest1(x))).collect();
    let (ra, rb) = scan
        .windows(2)
        .find(|w| matches!((w[0].1, w[1].1), (Some(a), Some(b)) if a > -5 && b < -5))
        .map(|w| (w[0].0, w[1].0))
        .ok_or("destination of P1 never passes P-5")?;
    let recon = bisect_label(dest1, ra, rb, tol);
    let homo = bisect_sign(|x| homoclinic_gap(sys, x, -2), -0.0008, -0.0023, tol).ok_or("no homoclinic sign change")?;
    let mid = |a: f64, b: f64| 0.5 * (a + b);
    let rows = [
        ("PEN->REB", mid(pen_reb.0, pen_reb.1), -0.000369, false),
        ("basin switch", mid(basin.0, basin.1), -0.000112978, false),
        ("reconnection", mid(recon.0, recon.1), 0.000557127, false),
        ("homoclinic P-2", mid(homo.0, homo.1), -0.00166, false),
        ("REB->OSC", mid(reb_osc.0, reb_osc.1), -0.00313, true),
    ];
    let mut pass = true;
    let mut known_only = true;
    let mut parts = Vec::new();
    for (name, v, reference, conflict) in rows {
        let ok = rel(v, reference) <= 0.15;
        if !ok {
            pass = false;
            known_only &= conflict;
        }
        parts.push(format!("{name} {v:.6e} ({:+.1}%)", 100.0 * (v - reference) / reference.abs()));
    }
    let pen_labels = pen_reb.2 == OutcomeKind::PEN && pen_reb.3 == OutcomeKind::REB;
    let osc_labels = reb_osc.2 == OutcomeKind::REB && reb_osc.3 == OutcomeKind::OSC;
    if !(pen_labels && osc_labels) {
        return verdict(false, format!("unexpected labels {pen_reb:?} {reb_osc:?}"));
    }
    Ok(Verdict { pass, known: !pass && known_only, detail: parts.join("; ") })
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

fn c8() -> Res {
    let sys = reduced();
    let mag = log_grid(1e-5, 0.6, 80);
    let eps: Vec<f64> = mag.iter().map(|m| -m).chain(mag.iter().copied()).collect();
    let ode = ode_phase_diagram(&[(D, sys.clone())], &eps, 0.0).map_err(e)?;
    let (on, op) = (ode.sequence(D, false), ode.sequence(D, true));
    let ode_ok = on.first() == Some(&OutcomeKind::PEN)
        && op.first() == Some(&OutcomeKind::PEN)
        && full_cycles(&on) >= 2
        && full_cycles(&op) >= 2;

    let runs = pde_runs();
    let grid: Vec<f64> = NEG.iter().chain(&POS).copied().collect();
    let pde = phase_diagram(Dynamics::Pde, &[D], &grid, 0.0, |_, x| {
        let r = runs.iter().find(|r| r.0 == x).expect("run for every grid value");
        r.1.as_ref().map(|run| run.outcome.clone()).map_err(|m| pulsekit::Error::MissingInput(m.clone()))
    })
    .map_err(e)?;
    let (pn, pp) = (pde.sequence(D, false), pde.sequence(D, true));
    use OutcomeKind::*;
    let pde_ok = pn.starts_with(&[PEN, REB, OSC, STA]) && full_cycles(&pn) >= 1;
    let names = |s: &[OutcomeKind]| s.iter().map(|k| k.label()).collect::<Vec<_>>().join(" ");
    verdict(
        ode_ok && pde_ok,
        format!(
            "ODE eps<0: {} ({} cycles), eps>0: {} ({} cycles); PDE eps<0: {}, eps>0: {}",
            names(&on),
            full_cycles(&on),
            names(&op),
            full_cycles(&op),
            names(&pn),
            names(&pp)
        ),
    )
}

fn c9() -> Res {
    let p = params();
    let atlas = build_atlas(&p, D, ADMISSIBLE, None, None).map_err(e)?;
    let branches: Vec<_> = atlas.branches().cloned().collect();
    let mut terminal = 0;
    let mut misses = Vec::new();
    for (x, r) in pde_runs() {
        let run = r.as_ref().map_err(|m| format!("eps {x}: {m}"))?;
        if !matches!(run.outcome.kind, OutcomeKind::STA | OutcomeKind::OSC) {
            continue;
        }
        terminal += 1;
        if match_asymptote_to_hiop(run, &branches).is_err() {
            misses.push(*x);
        }
    }
    verdict(
        terminal > 0 && misses.is_empty(),
        format!("{} runs, {terminal} STA/OSC terminal states, NoMatch at {misses:?}; atlas {} branches", pde_runs().len(), branches.len()),
    )
}

fn c10() -> Res {
    let sys = reduced();
    let eps = -0.00005;
    let spiral = point_by_index(sys, eps, -1).ok_or("no P-1")?;
    let saddle = point_by_index(sys, eps, 0).ok_or("no P0")?;
    let ap = sys.alpha_plus();
    let opts = FollowOptions { keep_samples: false, ..Default::default() };
    let label = |a: f64| follow(sys, eps, [spiral.p, a], false, opts).terminal_classification;
    // walk up from the spiral until PEN and REB meet
    let mut bracket = None;
    let mut prev = (1e-6 * ap, label(1e-6 * ap));
    for i in 1..=200 {
        let a = 0.5 * ap * i as f64 / 200.0;
        let k = label(a);
        if k != prev.1 && matches!((prev.1, k), (OutcomeKind::PEN, OutcomeKind::REB) | (OutcomeKind::REB, OutcomeKind::PEN)) {
            bracket = Some((prev.0, a));
            break;
        }
        prev = (a, k);
    }
    let (a, b) = bracket.ok_or("no PEN/REB boundary above the spiral")?;
    let (a, b) = bisect_label(label, a, b, 1e-9);
    let m = 0.5 * (a + b);
    let (k1, k2) = (label(m - 5e-9), label(m + 5e-9));
    let split = matches!((k1, k2), (OutcomeKind::PEN, OutcomeKind::REB) | (OutcomeKind::REB, OutcomeKind::PEN));
    let rep = basin_boundary(sys, eps, 0, ((spiral.p - 0.02, saddle.p + 0.02), (-ap, ap)), 4).map_err(e)?;
    let around = limit_index(&rep.destination) == Some(-1);
    verdict(
        split && rep.turns >= 3.0 && around,
        format!(
            "ICs (p={:.6}, alpha={m:.6e} -+ 5e-9) -> {}/{}; boundary winds {:.2} turns around P{}",
            spiral.p,
            k1.label(),
            k2.label(),
            rep.turns,
            limit_index(&rep.destination).map_or("?".to_string(), |i| i.to_string())
        ),
    )
}

fn c11() -> Res {
    let sol = traveling();
    let p = sol.params;
    // transient: inhibitor displaced from the activator
    let mut z0 = sol.state.clone();
    z0.v = sol.state.shifted(0.004, p.domain_length).v;
    let k1 = vec![p.kappa1_base; p.n_modes];
    let run = |dt: f64| -> Result<_, String> {
        let mut s = z0.clone();
        Etdrk4::new(&p, &k1, dt, 0.0).advance(&mut s, 2.0).map_err(e)?;
        Ok(s)
    };
    let reference = run(0.002)?;
    let mut errs = Vec::new();
    for dt in [0.2, 0.1, 0.05, 0.025] {
        let mut d = run(dt)?;
        d.axpy(-1.0, &reference);
        errs.push(d.norm());
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let order_ok = orders.iter().all(|o| (3.5..=4.5).contains(o));

    let st = stationary_pulse(&p, p.kappa1_base).map_err(e)?;
    let r_t = verify_residual(sol, 0.1, 0.01).map_err(e)?;
    let r_s = verify_residual(&st, 0.1, 0.01).map_err(e)?;
    let g = goldstone_check(&st);
    let gold = g.dg_rel.max(g.dp_minus_g_rel).max(g.adjoint_rel);
    verdict(
        order_ok && r_t < 1e-10 && r_s < 1e-10 && gold < 1e-6,
        format!(
            "orders {:?}; re-verified residuals traveling {r_t:.1e}, steady {r_s:.1e}; Goldstone/propagator {gold:.1e}",
            orders.iter().map(|o| (o * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("PULSEKIT_ACCEPT").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Res); 11] = [
        (1, "drift point", c1),
        (2, "trivial-state onsets", c2),
        (3, "admissible interval", c3),
        (4, "snaking morphology", c4),
        (5, "reduced-system identities", c5),
        (6, "non-saddle thresholds", c6),
        (7, "ODE transition values", c7),
        (8, "cyclic phase structure", c8),
        (9, "PDE asymptotes on the atlas", c9),
        (10, "basin sensitivity", c10),
        (11, "integrator and solver hygiene", c11),
    ];
    let mut hard_fail = false;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panic: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        let (status, detail) = match result {
            Ok(v) if v.pass => ("PASS".to_string(), v.detail),
            Ok(v) if v.known => ("FAIL (known, see notes)".to_string(), v.detail),
            Ok(v) => {
                hard_fail = true;
                ("FAIL".to_string(), v.detail)
            }
            Err(m) => {
                hard_fail = true;
                ("FAIL".to_string(), format!("error: {m}"))
            }
        };
        println!("criterion {n:>2} {name}: {status} [{secs:.0}s] {detail}");
    }
    if hard_fail {
        std::process::exit(1);
    }
}
