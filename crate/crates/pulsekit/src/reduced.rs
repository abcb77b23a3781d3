//! Reduced pulse-position ODE near the drift point:
//!
//!   ṗ = κ₃α − (ε/C₁) f(p,d)
//!   α̇ = κ₃²τ̂α − κ₃α³C₂/C₁ − (ε/C₁) f(p,d),   τ̂ = τ − 1/κ₃
//!
//! with f(p,d) = ū(d/2−p) − ū(−d/2−p) tabulated from a PDE pulse.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dopri::{integrate, Control, DopriOptions, StepInfo, Termination};
use crate::error::{Error, Result};
use crate::model::solve_background;
use crate::shooting::ConvergedSolution;
use crate::spectral::{eval_half, pulse_position};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TailAsymptotics {
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    /// √(A²+B²) with A = 2cosh(ad/2)sin(bd/2), B = 2sinh(ad/2)cos(bd/2).
    pub amplitude: f64,
    /// Tail constant K of ū − ū_bg ≈ K e^{a|x|} cos(b|x| + ψ).
    pub scale: f64,
    pub psi: f64,
    pub oscillations: usize,
}

impl TailAsymptotics {
    /// Asymptotic f for large |p| (odd extension).
    pub fn f(&self, p: f64) -> f64 {
        let q = p.abs();
        let v = -self.scale * (self.a * q).exp() * self.amplitude * (self.b * q - self.phi).cos();
        v * p.signum()
    }

    /// Zeros of the asymptotic formula on p > 0 in [lo, hi].
    pub fn zeros(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let pi = std::f64::consts::PI;
        let n0 = ((self.b * lo - self.phi - 0.5 * pi) / pi).floor() as i64;
        for n in n0..n0 + 10_000 {
            let p = (0.5 * pi + n as f64 * pi + self.phi) / self.b;
            if p > hi {
                break;
            }
            if p >= lo {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FSource {
    Tabulated,
    /// Tail formula beyond the core, blended over one half-wavelength
    /// starting three tail wavelengths out.
    TailSurrogate,
}

/// Uniform table of f and f' with cubic Hermite interpolation; zero outside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FTable {
    pub p0: f64,
    pub h: f64,
    pub f: Vec<f64>,
    pub df: Vec<f64>,
}

impl FTable {
    pub fn p_max(&self) -> f64 {
        self.p0 + self.h * (self.f.len() - 1) as f64
    }

    pub fn eval(&self, p: f64) -> (f64, f64) {
        let s = (p - self.p0) / self.h;
        let n = self.f.len();
        if !(s >= 0.0) || s > (n - 1) as f64 {
            return (0.0, 0.0);
        }
        let i = (s.floor() as usize).min(n - 2);
        let t = s - i as f64;
        let h = self.h;
        let (y0, y1, d0, d1) = (self.f[i], self.f[i + 1], self.df[i], self.df[i + 1]);
        let h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
        let h10 = t * (1.0 - t) * (1.0 - t);
        let h01 = t * t * (3.0 - 2.0 * t);
        let h11 = t * t * (t - 1.0);
        let v = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
        let dh00 = 6.0 * t * t - 6.0 * t;
        let dh10 = 3.0 * t * t - 4.0 * t + 1.0;
        let dh01 = -6.0 * t * t + 6.0 * t;
        let dh11 = 3.0 * t * t - 2.0 * t;
        let dv = (dh00 * y0 + dh01 * y1) / h + dh10 * d0 + dh11 * d1;
        (v, dv)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedSystem {
    /// Half spectrum of ū centered at x = 0.
    pub u_profile: Vec<Complex64>,
    pub domain_length: f64,
    pub u_bg: f64,
    pub c1: f64,
    pub c2: f64,
    pub kappa3: f64,
    pub tau: f64,
    pub d: f64,
    pub f_table: FTable,
    pub tail: TailAsymptotics,
    pub m0: f64,
    pub source: FSource,
    /// |p| beyond which |f| < 1e-10·max|f|.
    pub l_far: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub table_points: usize,
    pub source: FSource,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { table_points: 1 << 15, source: FSource::Tabulated }
    }
}

pub fn build_reduced(pulse: &ConvergedSolution, d: f64) -> Result<ReducedSystem> {
    build_reduced_with(pulse, d, BuildOptions::default())
}

pub fn build_reduced_with(pulse: &ConvergedSolution, d: f64, opts: BuildOptions) -> Result<ReducedSystem> {
    let params = pulse.params;
    let l = params.domain_length;
    let u_bg = solve_background(&params, pulse.forcing.kappa1)?.u_bar;
    let c = pulse_position(&pulse.state, &params, u_bg)?;
    let centered = pulse.state.shifted(-c, l);
    let h = centered.u.clone();
    let n = params.n_modes;
    let base = 2.0 * std::f64::consts::PI / l;
    let (mut c1, mut c2) = (0.0, 0.0);
    for (j, z) in h.iter().enumerate().take(n / 2).skip(1) {
        let k2 = (base * j as f64).powi(2);
        c1 += 2.0 * k2 * z.norm_sqr();
        c2 += 2.0 * k2 * k2 * z.norm_sqr();
    }
    c1 *= l;
    c2 *= l;
    let ubar = |x: f64| eval_half(&h, x, l);
    // sup |ū| on a fine sample
    let mut m0 = 0.0f64;
    for i in 0..8 * n {
        m0 = m0.max(ubar(-0.5 * l + l * i as f64 / (8 * n) as f64).0.abs());
    }
    let tail = fit_tail(&h, l, u_bg, d)?;
    let m = opts.table_points | 1;
    let p0 = -0.5 * l;
    let hp = l / (m - 1) as f64;
    let mut f = Vec::with_capacity(m);
    let mut df = Vec::with_capacity(m);
    for i in 0..m {
        let p = p0 + hp * i as f64;
        let (a, da) = ubar(0.5 * d - p);
        let (b, db) = ubar(-0.5 * d - p);
        f.push(a - b);
        df.push(-da + db);
    }
    let mut table = FTable { p0, h: hp, f, df };
    if opts.source == FSource::TailSurrogate {
        let start = 3.0 * 2.0 * std::f64::consts::PI / tail.b;
        let width = std::f64::consts::PI / tail.b;
        for i in 0..m {
            let p = p0 + hp * i as f64;
            let q = p.abs();
            if q > start {
                let w = ((q - start) / width).min(1.0);
                let s = w * w * (3.0 - 2.0 * w);
                let dq = 1e-7;
                let ft = tail.f(p);
                let dft = (tail.f(p + dq) - tail.f(p - dq)) / (2.0 * dq);
                table.f[i] = (1.0 - s) * table.f[i] + s * ft;
                table.df[i] = (1.0 - s) * table.df[i] + s * dft;
            }
        }
    }
    let f_max = table.f.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    let mut l_far = table.p_max();
    for i in (0..m).rev() {
        let p = p0 + hp * i as f64;
        if p <= 0.0 {
            break;
        }
        if table.f[i].abs() >= 1e-10 * f_max || table.f[m - 1 - i].abs() >= 1e-10 * f_max {
            l_far = p;
            break;
        }
    }
    Ok(ReducedSystem {
        u_profile: h,
        domain_length: l,
        u_bg,
        c1,
        c2,
        kappa3: params.kappa3,
        tau: params.tau,
        d,
        f_table: table,
        tail,
        m0,
        source: opts.source,
        l_far: l_far.min(0.5 * l - 2.0 * hp),
        f_max,
    })
}

fn fit_tail(h: &[Complex64], l: f64, u_bg: f64, d: f64) -> Result<TailAsymptotics> {
    let samples = 8192;
    let x_end = 0.4 * l;
    let dx = x_end / samples as f64;
    let dev: Vec<(f64, f64)> = (0..=samples).map(|i| {
        let x = i as f64 * dx;
        (x, eval_half(h, x, l).0 - u_bg)
    }).collect();
    let mut zeros = Vec::new();
    for w in dev.windows(2) {
        if w[0].1 == 0.0 || (w[0].1 > 0.0) != (w[1].1 > 0.0) {
            let t = w[0].1 / (w[0].1 - w[1].1);
            zeros.push(w[0].0 + t * (w[1].0 - w[0].0));
        }
    }
    // extrema between consecutive zeros
    let mut ext = Vec::new();
    for z in zeros.windows(2) {
        let (mut best, mut bx) = (0.0f64, 0.0);
        for &(x, v) in dev.iter() {
            if x > z[0] && x < z[1] && v.abs() > best {
                best = v.abs();
                bx = x;
            }
        }
        ext.push((bx, best));
    }
    // skip the core (first three zeros), keep oscillations above the noise floor
    let tail_ext: Vec<(f64, f64)> = ext.iter().skip(3).cloned().take_while(|e| e.1 > 1e-12).collect();
    let tail_zeros: Vec<f64> = zeros.iter().skip(3).cloned().take(tail_ext.len() + 1).collect();
    let oscillations = tail_ext.len() / 2;
    if oscillations < 6 || tail_zeros.len() < 4 {
        return Err(Error::TailTooShort { found: oscillations });
    }
    let (_, slope_a) = linear_fit(&tail_ext.iter().map(|e| (e.0, e.1.ln())).collect::<Vec<_>>());
    let (_, spacing) = linear_fit(&tail_zeros.iter().enumerate().map(|(i, &z)| (i as f64, z)).collect::<Vec<_>>());
    let a = slope_a;
    let b = std::f64::consts::PI / spacing;
    // weighted least squares for K, ψ on the tail samples
    let (x0, x1) = (tail_zeros[0], *tail_zeros.last().unwrap());
    let (mut s11, mut s12, mut s22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, v) in dev.iter().filter(|e| e.0 >= x0 && e.0 <= x1) {
        let e = (a * x).exp();
        let (g1, g2) = ((b * x).cos(), (b * x).sin());
        // relative weighting so every oscillation counts
        let w = 1.0 / (e * e);
        s11 += w * e * e * g1 * g1;
        s12 += w * e * e * g1 * g2;
        s22 += w * e * e * g2 * g2;
        r1 += w * e * g1 * v;
        r2 += w * e * g2 * v;
    }
    let det = s11 * s22 - s12 * s12;
    let c1 = (r1 * s22 - r2 * s12) / det;
    let c2 = (s11 * r2 - s12 * r1) / det;
    let scale = c1.hypot(c2);
    let psi = (-c2).atan2(c1);
    let big_a = 2.0 * (0.5 * a * d).cosh() * (0.5 * b * d).sin();
    let big_b = 2.0 * (0.5 * a * d).sinh() * (0.5 * b * d).cos();
    let theta = big_a.atan2(big_b);
    Ok(TailAsymptotics {
        a,
        b,
        phi: -(psi + theta),
        amplitude: big_a.hypot(big_b),
        scale,
        psi,
        oscillations,
    })
}

/// Least squares y = c + m x, returns (c, m).
fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let m = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    ((sy - m * sx) / n, m)
}

impl ReducedSystem {
    pub fn tau_hat(&self) -> f64 {
        self.tau - 1.0 / self.kappa3
    }

    pub fn with_tau(&self, tau: f64) -> Self {
        let mut s = self.clone();
        s.tau = tau;
        s
    }

    /// Traveling speed parameter ᾱ₊ (NaN below the drift point).
    pub fn alpha_plus(&self) -> f64 {
        ((self.kappa3 * self.tau - 1.0) * self.c1 / self.c2).sqrt()
    }

    pub fn free_speed(&self) -> f64 {
        self.kappa3 * self.alpha_plus()
    }

    pub fn f(&self, p: f64) -> f64 {
        self.f_table.eval(p).0
    }

    pub fn df(&self, p: f64) -> f64 {
        self.f_table.eval(p).1
    }

    /// ū(x) with the pulse centered at 0.
    pub fn u_bar(&self, x: f64) -> (f64, f64) {
        eval_half(&self.u_profile, x, self.domain_length)
    }

    pub fn rhs(&self, eps: f64, y: &[f64; 2]) -> [f64; 2] {
        let g = eps / self.c1 * self.f(y[0]);
        let a = y[1];
        [
            self.kappa3 * a - g,
            self.kappa3 * self.kappa3 * self.tau_hat() * a - self.kappa3 * a * a * a * self.c2 / self.c1 - g,
        ]
    }

    /// Scales for a dimensionless phase-plane metric: half tail wavelength and ᾱ₊.
    pub fn scales(&self) -> (f64, f64) {
        (std::f64::consts::PI / self.tail.b, self.alpha_plus())
    }

    pub fn scaled_dist(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let (ps, as_) = self.scales();
        ((a[0] - b[0]) / ps).hypot((a[1] - b[1]) / as_)
    }

    /// Bound on |ε| guaranteeing penetration, with δ = ᾱ₊/2.
    pub fn pen_bound(&self) -> f64 {
        let ap = self.alpha_plus();
        self.kappa3 * self.c1 * (ap - 0.5 * ap) / (2.0 * self.m0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointKind {
    Saddle,
    UnstableNode,
    UnstableSpiral,
    StableSpiral,
    StableNode,
}

impl PointKind {
    pub fn stable(self) -> bool {
        matches!(self, Self::StableNode | Self::StableSpiral)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct CriticalPoint {
    pub index: i64,
    pub p: f64,
    pub D: f64,
    pub eps_hat: f64,
    pub kind: PointKind,
    pub eigenvalues: [Complex64; 2],
    pub saddle_quantity: Option<f64>,
}

/// Trace b̂, determinant ĉ and discriminant Δ at a point with ε̂.
pub fn trace_det(sys: &ReducedSystem, eps_hat: f64) -> (f64, f64, f64) {
    let k3 = sys.kappa3;
    let th = sys.tau_hat();
    let b = k3 * k3 * th - eps_hat / sys.c1;
    let c = k3 * eps_hat / sys.c1 * (1.0 - k3 * th);
    (b, c, b * b - 4.0 * c)
}

pub fn classify_point(sys: &ReducedSystem, eps_hat: f64) -> (PointKind, [Complex64; 2]) {
    let (b, c, disc) = trace_det(sys, eps_hat);
    let sq = Complex64::new(disc, 0.0).sqrt();
    let ev = [(Complex64::new(b, 0.0) + sq) * 0.5, (Complex64::new(b, 0.0) - sq) * 0.5];
    let kind = if c < 0.0 {
        PointKind::Saddle
    } else if b > 0.0 {
        if disc >= 0.0 {
            PointKind::UnstableNode
        } else {
            PointKind::UnstableSpiral
        }
    } else if disc < 0.0 {
        PointKind::StableSpiral
    } else {
        PointKind::StableNode
    };
    (kind, ev)
}

fn check_tau(sys: &ReducedSystem) -> Result<()> {
    let tc = 1.0 / sys.kappa3;
    if !(sys.tau > tc && sys.tau < 2.0 * tc) {
        return Err(Error::TauOutOfRange { tau: sys.tau });
    }
    Ok(())
}

/// Zeros of f on the table (independent of ε), sorted and indexed with P₀
/// nearest the bump center.
pub fn zeros_of_f(sys: &ReducedSystem, p_range: (f64, f64)) -> Vec<(i64, f64)> {
    let t = &sys.f_table;
    let noise = 1e-13 * sys.f_max.max(1e-300);
    let mut roots = Vec::new();
    let n = t.f.len();
    for i in 0..n - 1 {
        let (pa, pb) = (t.p0 + t.h * i as f64, t.p0 + t.h * (i + 1) as f64);
        if pb < p_range.0 || pa > p_range.1 {
            continue;
        }
        let (fa, fb) = (t.f[i], t.f[i + 1]);
        if fa == 0.0 || (fa > 0.0) != (fb > 0.0) {
            if fa.abs().max(fb.abs()) < noise {
                continue;
            }
            let (mut a, mut b, mut ga) = (pa, pb, fa);
            if fa == 0.0 {
                roots.push(pa);
                continue;
            }
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                let gm = sys.f(m);
                if (gm > 0.0) == (ga > 0.0) {
                    a = m;
                    ga = gm;
                } else {
                    b = m;
                }
            }
            roots.push(0.5 * (a + b));
        }
    }
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-3 * t.h);
    if roots.is_empty() {
        return vec![];
    }
    let i0 = roots
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .map(|x| x.0)
        .unwrap();
    roots.iter().enumerate().map(|(i, &p)| (i as i64 - i0 as i64, p)).collect()
}

pub fn critical_points(sys: &ReducedSystem, eps: f64, p_range: (f64, f64)) -> Result<Vec<CriticalPoint>> {
    check_tau(sys)?;
    Ok(zeros_of_f(sys, p_range)
        .into_iter()
        .map(|(index, p)| point_at(sys, eps, index, p))
        .collect())
}

#[allow(non_snake_case)]
pub fn point_at(sys: &ReducedSystem, eps: f64, index: i64, p: f64) -> CriticalPoint {
    let D = sys.df(p);
    let eps_hat = eps * D;
    let (kind, eigenvalues) = classify_point(sys, eps_hat);
    let saddle_quantity = if kind == PointKind::Saddle { Some((eigenvalues[0] + eigenvalues[1]).re) } else { None };
    CriticalPoint { index, p, D, eps_hat, kind, eigenvalues, saddle_quantity }
}

/// Critical point with the given index (P₀ nearest the center).
pub fn point_by_index(sys: &ReducedSystem, eps: f64, index: i64) -> Option<CriticalPoint> {
    let r = 0.5 * sys.domain_length;
    zeros_of_f(sys, (-r, r)).into_iter().find(|z| z.0 == index).map(|(i, p)| point_at(sys, eps, i, p))
}

/// ε̂ thresholds at the current τ̂: (Δ=0 lower, b̂=0, Δ=0 upper), found by
/// bisection on the sign of Δ and b̂.
pub fn nonsaddle_thresholds(sys: &ReducedSystem) -> (f64, f64, f64) {
    let disc = |e: f64| trace_det(sys, e).2;
    let trace = |e: f64| trace_det(sys, e).0;
    let k3 = sys.kappa3;
    let hi = 8.0 * sys.c1 * k3;
    let bis = |g: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64| {
        let ga = g(a);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (g(m) > 0.0) == (ga > 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    // b̂ is linear in ε̂; Δ = -4ĉ ≤ 0 at its root, so it brackets both Δ roots
    let e_b = bis(&trace, 2.0 * sys.c1 * k3 * k3 * sys.tau_hat().min(0.0) - 1.0, hi);
    // Δ > 0 at ε̂ = 0 and at large ε̂, negative between (for 0 < κ₃τ̂ < 1)
    let e_lo = if sys.tau_hat() <= 0.0 { 0.0 } else { bis(&disc, 0.0, e_b) };
    let e_hi = bis(&disc, e_b.max(0.0), hi);
    (e_lo, e_b, e_hi)
}

/// Kind sequence of one non-saddle point as ε sweeps the given range.
pub fn classify_nonsaddle_sweep(sys: &ReducedSystem, point_index: i64, eps: &[f64]) -> Vec<(f64, PointKind)> {
    let r = 0.5 * sys.domain_length;
    let p = match zeros_of_f(sys, (-r, r)).into_iter().find(|z| z.0 == point_index) {
        Some(z) => z.1,
        None => return vec![],
    };
    let d = sys.df(p);
    eps.iter().map(|&e| (e, classify_point(sys, e * d).0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Limit {
    /// Converged onto (or spiraled into) a critical point.
    Point { index: i64, p: f64, spiral: bool, turns: f64 },
    /// Escaped toward p → ±∞.
    Escape { plus: bool },
    /// α left the bounded band in reverse time (comes from infinity).
    Unbounded,
    Cycle { period: f64, p_min: f64, p_max: f64 },
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    PEN,
    REB,
    OSC,
    STA,
    Unresolved,
}

impl OutcomeKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::PEN => "PEN",
            Self::REB => "REB",
            Self::OSC => "OSC",
            Self::STA => "STA",
            Self::Unresolved => "Unresolved",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdeTrajectory {
    pub samples: Vec<(f64, f64, f64)>,
    pub limit: Limit,
    pub terminal_classification: OutcomeKind,
    pub alpha_flagged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FollowOptions {
    pub t_max: f64,
    /// Arclength cap in scaled units (half wavelength, ᾱ₊).
    pub arclength_budget: f64,
    pub keep_samples: bool,
    pub point_tol: f64,
    pub cycle_tol: f64,
}

impl Default for FollowOptions {
    fn default() -> Self {
        Self { t_max: 5e6, arclength_budget: 1e3, keep_samples: true, point_tol: 1e-7, cycle_tol: 1e-8 }
    }
}

/// Integrates from y0 (reverse time when `backward`) and identifies the limit.
pub fn follow(sys: &ReducedSystem, eps: f64, y0: [f64; 2], backward: bool, opts: FollowOptions) -> OdeTrajectory {
    let r = 0.5 * sys.domain_length;
    let pts: Vec<CriticalPoint> = zeros_of_f(sys, (-r, r)).into_iter().map(|(i, p)| point_at(sys, eps, i, p)).collect();
    let (ps, as_) = sys.scales();
    let ap = sys.alpha_plus();
    let far = sys.l_far;
    let sign = if backward { -1.0 } else { 1.0 };
    let f = |y: &[f64; 2]| {
        let v = sys.rhs(eps, y);
        [sign * v[0], sign * v[1]]
    };
    let mut samples = vec![(0.0, y0[0], y0[1])];
    let mut limit = Limit::Unresolved;
    let mut arclen = 0.0;
    let mut flagged = false;
    let mut ups: Vec<(f64, f64)> = Vec::new();
    let mut cyc_pmin = f64::INFINITY;
    let mut cyc_pmax = f64::NEG_INFINITY;
    let mut last_cycle: Option<(f64, f64)> = None;
    let mut last_down: Option<f64> = None;
    let mut widths: Vec<f64> = Vec::new();
    // winding about each non-saddle
    let mut wind: Vec<(f64, f64)> = pts.iter().map(|c| (((y0[1] - 0.0) / as_).atan2((y0[0] - c.p) / ps), 0.0)).collect();
    let dopts = DopriOptions { h0: 1.0, ..Default::default() };
    let obs = |s: &StepInfo<2>| {
        let y = s.y1;
        arclen += ((y[0] - s.y0[0]) / ps).hypot((y[1] - s.y0[1]) / as_);
        if opts.keep_samples {
            samples.push((sign * s.t1, y[0], y[1]));
        }
        if y[1].abs() > 2.0 * ap {
            flagged = true;
        }
        if backward && y[1].abs() > 3.0 * ap {
            limit = Limit::Unbounded;
            return Control::Stop;
        }
        if y[0] > far && y[1] > 0.0 {
            limit = Limit::Escape { plus: true };
            return Control::Stop;
        }
        if y[0] < -far && y[1] < 0.0 {
            limit = Limit::Escape { plus: false };
            return Control::Stop;
        }
        if backward && y[0].abs() > far {
            // reverse-time drift past the forcing range: α decays, p freezes
            if y[1].abs() < 1e-9 * ap {
                limit = Limit::Escape { plus: y[0] > 0.0 };
                return Control::Stop;
            }
        }
        // winding and proximity
        for (k, c) in pts.iter().enumerate() {
            let ang = (y[1] / as_).atan2((y[0] - c.p) / ps);
            let mut da = ang - wind[k].0;
            if da > std::f64::consts::PI {
                da -= 2.0 * std::f64::consts::PI;
            } else if da < -std::f64::consts::PI {
                da += 2.0 * std::f64::consts::PI;
            }
            wind[k] = (ang, wind[k].1 + da);
            let attracting = if backward {
                matches!(c.kind, PointKind::UnstableNode | PointKind::UnstableSpiral)
            } else {
                c.kind.stable()
            };
            let dist = ((y[0] - c.p) / ps).hypot(y[1] / as_);
            if attracting && dist < opts.point_tol {
                let turns = wind[k].1.abs() / (2.0 * std::f64::consts::PI);
                limit = Limit::Point { index: c.index, p: c.p, spiral: turns >= 3.0, turns };
                return Control::Stop;
            }
        }
        // Poincaré section α = 0, upward in forward time
        cyc_pmin = cyc_pmin.min(y[0]);
        cyc_pmax = cyc_pmax.max(y[0]);
        let up = if backward { s.y0[1] > 0.0 && y[1] <= 0.0 } else { s.y0[1] < 0.0 && y[1] >= 0.0 };
        let down = if backward { s.y0[1] < 0.0 && y[1] >= 0.0 } else { s.y0[1] > 0.0 && y[1] <= 0.0 };
        if down {
            last_down = Some(s.interpolate(s.locate(1, 0.0))[0]);
        }
        if up {
            let tc = s.locate(1, 0.0);
            let pc = s.interpolate(tc)[0];
            ups.push((sign * tc, pc));
            // width between consecutive crossings: steady on a cycle,
            // shrinking geometrically on a spiral into a point
            widths.push(last_down.map_or(0.0, |pd| (pc - pd).abs()));
            last_cycle = Some((cyc_pmin, cyc_pmax));
            cyc_pmin = f64::INFINITY;
            cyc_pmax = f64::NEG_INFINITY;
            let k = ups.len();
            if k >= 5 {
                let steady = (1..4).all(|j| {
                    (ups[k - j].1 - ups[k - j - 1].1).abs() < opts.cycle_tol
                        && (widths[k - j] - widths[k - j - 1]).abs() < 1e-6 * widths[k - j]
                });
                if steady && widths[k - 1] > 1e-6 * ps {
                    let (pmin, pmax) = last_cycle.unwrap();
                    limit = Limit::Cycle { period: (ups[k - 1].0 - ups[k - 2].0).abs(), p_min: pmin, p_max: pmax };
                    return Control::Stop;
                }
            }
        }
        if arclen > opts.arclength_budget {
            return Control::Stop;
        }
        Control::Continue
    };
    let (_, yend, term) = integrate(f, 0.0, y0, opts.t_max, dopts, obs);
    if limit == Limit::Unresolved && term != Termination::StepUnderflow {
        // nearest stable point reached within a looser tolerance counts
        for c in pts.iter().filter(|c| c.kind != PointKind::Saddle) {
            if ((yend[0] - c.p) / ps).hypot(yend[1] / as_) < 1e3 * opts.point_tol {
                limit = Limit::Point { index: c.index, p: c.p, spiral: false, turns: 0.0 };
            }
        }
    }
    let terminal = match &limit {
        Limit::Escape { plus: true } if !backward => OutcomeKind::PEN,
        Limit::Escape { plus: false } if !backward => OutcomeKind::REB,
        Limit::Point { .. } if !backward => OutcomeKind::STA,
        Limit::Cycle { .. } if !backward => OutcomeKind::OSC,
        _ => OutcomeKind::Unresolved,
    };
    OdeTrajectory { samples, limit, terminal_classification: terminal, alpha_flagged: flagged }
}

pub fn integrate_reduced(sys: &ReducedSystem, eps: f64, initial: [f64; 2], t_end: f64) -> OdeTrajectory {
    let opts = FollowOptions { t_max: t_end, arclength_budget: f64::INFINITY, ..Default::default() };
    follow(sys, eps, initial, false, opts)
}

/// Starting point of the orbit arriving from p = −∞ at speed ᾱ₊.
pub fn pulse_orbit_start(sys: &ReducedSystem) -> [f64; 2] {
    [-sys.l_far, sys.alpha_plus()]
}

pub fn pulse_orbit(sys: &ReducedSystem, eps: f64, t_end: f64) -> OdeTrajectory {
    let opts = FollowOptions { t_max: t_end, arclength_budget: f64::INFINITY, ..Default::default() };
    follow(sys, eps, pulse_orbit_start(sys), false, opts)
}

pub fn classify_eps(sys: &ReducedSystem, eps: f64) -> OutcomeKind {
    let opts = FollowOptions { keep_samples: false, arclength_budget: f64::INFINITY, ..Default::default() };
    follow(sys, eps, pulse_orbit_start(sys), false, opts).terminal_classification
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    LeftStable,
    RightStable,
    LeftUnstable,
    RightUnstable,
}

impl Branch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l,s" | "ls" => Some(Self::LeftStable),
            "r,s" | "rs" => Some(Self::RightStable),
            "l,u" | "lu" => Some(Self::LeftUnstable),
            "r,u" | "ru" => Some(Self::RightUnstable),
            _ => None,
        }
    }

    fn stable(self) -> bool {
        matches!(self, Self::LeftStable | Self::RightStable)
    }

    fn left(self) -> bool {
        matches!(self, Self::LeftStable | Self::LeftUnstable)
    }
}

/// First point of a saddle's invariant-manifold branch.
pub fn manifold_start(sys: &ReducedSystem, point: &CriticalPoint, which: Branch) -> Result<[f64; 2]> {
    if point.kind != PointKind::Saddle {
        return Err(Error::MissingInput(format!("P{} is not a saddle", point.index)));
    }
    let lam = if which.stable() { point.eigenvalues[1].re } else { point.eigenvalues[0].re };
    let (ps, as_) = sys.scales();
    // eigenvector (κ₃, λ + ε̂/C₁) normalized in scaled units
    let (vp, va) = (sys.kappa3 / ps, (lam + point.eps_hat / sys.c1) / as_);
    let nrm = vp.hypot(va);
    let s = if which.left() { -1.0 } else { 1.0 };
    let delta = 1e-8;
    Ok([point.p + s * delta * vp / nrm * ps, s * delta * va / nrm * as_])
}

pub fn manifold(sys: &ReducedSystem, eps: f64, point: &CriticalPoint, which: Branch, budget: f64) -> Result<OdeTrajectory> {
    let y0 = manifold_start(sys, point, which)?;
    let opts = FollowOptions { arclength_budget: budget, ..Default::default() };
    Ok(follow(sys, eps, y0, which.stable(), opts))
}

/// Reverse-time destination index of a stable branch (None if not a point).
pub fn destination(sys: &ReducedSystem, eps: f64, saddle_index: i64, which: Branch) -> Option<Limit> {
    let pt = point_by_index(sys, eps, saddle_index)?;
    manifold(sys, eps, &pt, which, 1e3).ok().map(|t| t.limit)
}

/// α where a trajectory first crosses p = p_sec (moving in its integration
/// direction), searching from the given start.
pub fn alpha_at_section(sys: &ReducedSystem, eps: f64, y0: [f64; 2], backward: bool, p_sec: f64, t_max: f64) -> Option<f64> {
    let sign = if backward { -1.0 } else { 1.0 };
    let f = |y: &[f64; 2]| {
        let v = sys.rhs(eps, y);
        [sign * v[0], sign * v[1]]
    };
    let mut out = None;
    let start_side = y0[0] > p_sec;
    let ap = sys.alpha_plus();
    let far = sys.l_far;
    let obs = |s: &StepInfo<2>| {
        if (s.y1[0] > p_sec) != start_side {
            let t = s.locate(0, p_sec);
            out = Some(s.interpolate(t)[1]);
            return Control::Stop;
        }
        if s.y1[1].abs() > 3.0 * ap || s.y1[0].abs() > far * 1.5 {
            return Control::Stop;
        }
        Control::Continue
    };
    integrate(f, 0.0, y0, t_max, DopriOptions { h0: 1.0, ..Default::default() }, obs);
    out
}

/// p where a trajectory first crosses α = 0 to the right of `p_min`.
pub fn p_at_axis(sys: &ReducedSystem, eps: f64, y0: [f64; 2], backward: bool, p_min: f64, t_max: f64) -> Option<f64> {
    let sign = if backward { -1.0 } else { 1.0 };
    let f = |y: &[f64; 2]| {
        let v = sys.rhs(eps, y);
        [sign * v[0], sign * v[1]]
    };
    let mut out = None;
    let ap = sys.alpha_plus();
    let far = sys.l_far;
    let mut moved = false;
    let obs = |s: &StepInfo<2>| {
        if s.y1[1].abs() > 1e-3 * ap {
            moved = true;
        }
        if moved && (s.y0[1] > 0.0) != (s.y1[1] > 0.0) {
            let t = s.locate(1, 0.0);
            let p = s.interpolate(t)[0];
            if p > p_min {
                out = Some(p);
                return Control::Stop;
            }
        }
        if s.y1[1].abs() > 3.0 * ap || s.y1[0].abs() > far * 1.5 {
            return Control::Stop;
        }
        Control::Continue
    };
    integrate(f, 0.0, y0, t_max, DopriOptions { h0: 1.0, ..Default::default() }, obs);
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub kind: String,
    pub epsilon: f64,
    pub bracket: (f64, f64),
    /// Signed gap on both ends of the bracket, when a gap functional applies.
    pub gap: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRow {
    pub epsilon: f64,
    pub outcome: OutcomeKind,
}

/// Bisection on a classification change between `a` and `b` to |Δε| < tol.
pub fn bisect_outcome(sys: &ReducedSystem, mut a: f64, mut b: f64, tol: f64) -> (f64, f64, OutcomeKind, OutcomeKind) {
    let ka = classify_eps(sys, a);
    let kb = classify_eps(sys, b);
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        let km = classify_eps(sys, m);
        if km == ka {
            a = m;
        } else {
            b = m;
            if km != kb {
                // a third kind inside the bracket: keep the side nearest a
            }
        }
    }
    (a, b, ka, kb)
}

/// Classifies every grid value and refines each change of outcome.
pub fn transition_scan(sys: &ReducedSystem, eps_grid: &[f64], tol: f64) -> (Vec<ScanRow>, Vec<TransitionEvent>) {
    use rayon::prelude::*;
    let rows: Vec<ScanRow> = eps_grid.par_iter().map(|&e| ScanRow { epsilon: e, outcome: classify_eps(sys, e) }).collect();
    let events: Vec<TransitionEvent> = rows
        .windows(2)
        .filter(|w| w[0].outcome != w[1].outcome)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|w| {
            let (a, b, ka, kb) = bisect_outcome(sys, w[0].epsilon, w[1].epsilon, tol);
            let gap = transition_gap(sys, ka, kb, a).zip(transition_gap(sys, ka, kb, b));
            TransitionEvent { kind: format!("{}-{}", ka.label(), kb.label()), epsilon: 0.5 * (a + b), bracket: (a, b), gap }
        })
        .collect();
    (rows, events)
}

/// Signed gap (α of the relevant stable manifold minus α of the pulse orbit)
/// at the p of the non-saddle point adjacent to the relevant saddle.
pub fn transition_gap(sys: &ReducedSystem, ka: OutcomeKind, kb: OutcomeKind, eps: f64) -> Option<f64> {
    use OutcomeKind::*;
    let saddle = match (ka, kb) {
        (PEN, REB) | (REB, PEN) => 0,
        (PEN, OSC) | (OSC, PEN) => 1,
        _ => return None,
    };
    let pt = point_by_index(sys, eps, saddle)?;
    if pt.kind != PointKind::Saddle {
        return None;
    }
    let sec = point_by_index(sys, eps, saddle - 1)?.p;
    let start = manifold_start(sys, &pt, Branch::LeftStable).ok()?;
    let am = alpha_at_section(sys, eps, start, true, sec, 1e7)?;
    let ao = alpha_at_section(sys, eps, pulse_orbit_start(sys), false, sec, 1e7)?;
    Some(am - ao)
}

/// Bisection on a scalar functional's sign change.
pub fn bisect_sign(mut g: impl FnMut(f64) -> Option<f64>, mut a: f64, mut b: f64, tol: f64) -> Option<(f64, f64)> {
    let mut ga = g(a)?;
    let gb = g(b)?;
    if (ga > 0.0) == (gb > 0.0) {
        return None;
    }
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        let gm = g(m)?;
        if (gm > 0.0) == (ga > 0.0) {
            a = m;
            ga = gm;
        } else {
            b = m;
        }
    }
    Some((a, b))
}

/// Bisection on a change of a discrete label.
pub fn bisect_label<T: PartialEq>(mut g: impl FnMut(f64) -> T, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let la = g(a);
    while (b - a).abs() > tol {
        let m = 0.5 * (a + b);
        if g(m) == la {
            a = m;
        } else {
            b = m;
        }
    }
    (a, b)
}

/// Index of the limit point, if the limit is a point.
pub fn limit_index(l: &Limit) -> Option<i64> {
    match l {
        Limit::Point { index, .. } => Some(*index),
        _ => None,
    }
}

/// Gap for the homoclinic loop at P_k: p where the right unstable branch
/// recrosses α = 0 minus p where the right stable branch (reverse time) does.
pub fn homoclinic_gap(sys: &ReducedSystem, eps: f64, k: i64) -> Option<f64> {
    let pt = point_by_index(sys, eps, k)?;
    if pt.kind != PointKind::Saddle {
        return None;
    }
    let next = point_by_index(sys, eps, k + 1)?.p;
    let su = manifold_start(sys, &pt, Branch::RightUnstable).ok()?;
    let ss = manifold_start(sys, &pt, Branch::RightStable).ok()?;
    let pu = p_at_axis(sys, eps, su, false, next, 1e7)?;
    let ps = p_at_axis(sys, eps, ss, true, next, 1e7)?;
    Some(pu - ps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasinReport {
    pub epsilon: f64,
    pub saddle_index: i64,
    pub boundary: Vec<(f64, f64)>,
    pub destination: Limit,
    /// Turns of the boundary around its reverse-time destination.
    pub turns: f64,
    pub p_axis: Vec<f64>,
    pub alpha_axis: Vec<f64>,
    /// Row-major labels, rows over α.
    pub labels: Vec<OutcomeKind>,
}

/// Stable manifold W^{l,s} of the given saddle as basin boundary, plus an
/// outcome-labeled grid over `region` = ((p0,p1),(a0,a1)) with n×n cells.
pub fn basin_boundary(
    sys: &ReducedSystem,
    eps: f64,
    saddle_index: i64,
    region: ((f64, f64), (f64, f64)),
    n: usize,
) -> Result<BasinReport> {
    use rayon::prelude::*;
    let pt = point_by_index(sys, eps, saddle_index).ok_or_else(|| Error::MissingInput("saddle".into()))?;
    let w = manifold(sys, eps, &pt, Branch::LeftStable, 1e3)?;
    let turns = match &w.limit {
        Limit::Point { turns, .. } => *turns,
        _ => 0.0,
    };
    let p_axis: Vec<f64> = (0..n).map(|i| region.0 .0 + (region.0 .1 - region.0 .0) * (i as f64 + 0.5) / n as f64).collect();
    let alpha_axis: Vec<f64> = (0..n).map(|i| region.1 .0 + (region.1 .1 - region.1 .0) * (i as f64 + 0.5) / n as f64).collect();
    let cells: Vec<(f64, f64)> = alpha_axis.iter().flat_map(|&a| p_axis.iter().map(move |&p| (p, a))).collect();
    let opts = FollowOptions { keep_samples: false, arclength_budget: f64::INFINITY, ..Default::default() };
    let labels = cells.par_iter().map(|&(p, a)| follow(sys, eps, [p, a], false, opts).terminal_classification).collect();
    Ok(BasinReport {
        epsilon: eps,
        saddle_index,
        boundary: w.samples.iter().map(|s| (s.1, s.2)).collect(),
        destination: w.limit,
        turns,
        p_axis,
        alpha_axis,
        labels,
    })
}

/// Grid search for equilibria off the α = 0 axis; returns points whose
/// scaled vector-field residual falls below `floor`.
pub fn off_axis_equilibria(sys: &ReducedSystem, eps: f64, n: usize, floor: f64) -> Vec<[f64; 2]> {
    let ap = sys.alpha_plus();
    let r = sys.l_far;
    let scale = sys.kappa3 * ap;
    let mut found = Vec::new();
    for i in 0..n {
        let p = -r + 2.0 * r * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let a = -2.0 * ap + 4.0 * ap * j as f64 / (n - 1) as f64;
            if a.abs() < 0.05 * ap {
                continue;
            }
            let v = sys.rhs(eps, &[p, a]);
            if v[0].hypot(v[1]) / scale < floor {
                found.push([p, a]);
            }
        }
    }
    found
}
