//! Pseudo-spectral ETDRK4 integration of the two-field system on a circle.
//!
//! States are stored as half spectra (modes 0..=N/2) of the normalized
//! coefficients z_l = (1/N) Σ_j u_j e^{-i k_l x_j}; the Nyquist slot is
//! kept at zero so real-field symmetry holds exactly.

use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{solve_background, ModelParams};

type C = Complex64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<C>,
    pub v: Vec<C>,
    pub time: f64,
}

impl SpectralState {
    pub fn n_modes(&self) -> usize {
        2 * (self.u.len() - 1)
    }

    pub fn constant(n: usize, u: f64, v: f64) -> Self {
        let mut s = Self { u: vec![C::new(0.0, 0.0); n / 2 + 1], v: vec![C::new(0.0, 0.0); n / 2 + 1], time: 0.0 };
        s.u[0] = C::new(u, 0.0);
        s.v[0] = C::new(v, 0.0);
        s
    }

    pub fn from_grid(u: &[f64], v: &[f64]) -> Self {
        let mut t = Transform::new(u.len());
        Self { u: t.forward(u), v: t.forward(v), time: 0.0 }
    }

    pub fn to_grid(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = Transform::new(self.n_modes());
        (t.inverse(&self.u), t.inverse(&self.v))
    }

    /// Full N-length spectrum of one component, negative modes by conjugation.
    pub fn full_coeffs(half: &[C]) -> Vec<C> {
        let n = 2 * (half.len() - 1);
        (0..n).map(|l| if l <= n / 2 { half[l] } else { half[n - l].conj() }).collect()
    }

    /// Translates both fields by `dx` (profile moves toward +x).
    pub fn shifted(&self, dx: f64, length: f64) -> Self {
        let mut s = self.clone();
        s.shift_in_place(dx, length);
        s
    }

    pub fn shift_in_place(&mut self, dx: f64, length: f64) {
        let base = 2.0 * std::f64::consts::PI / length;
        for l in 0..self.u.len() {
            let ph = C::from_polar(1.0, -base * l as f64 * dx);
            self.u[l] *= ph;
            self.v[l] *= ph;
        }
    }

    /// Norm over all complex coefficients of both fields (Parseval: grid RMS).
    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn u_norm(&self) -> f64 {
        half_dot(&self.u, &self.u).sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        half_dot(&self.u, &other.u) + half_dot(&self.v, &other.v)
    }

    /// Real packing with Euclidean norm equal to `norm()`; Nyquist dropped.
    pub fn pack(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * (self.n_modes() - 1));
        pack_half(&self.u, &mut out);
        pack_half(&self.v, &mut out);
        out
    }

    pub fn unpack(x: &[f64], n: usize) -> Self {
        let m = n - 1;
        Self { u: unpack_half(&x[..m], n), v: unpack_half(&x[m..2 * m], n), time: 0.0 }
    }

    pub fn packed_len(n: usize) -> usize {
        2 * (n - 1)
    }

    pub fn axpy(&mut self, a: f64, x: &Self) {
        for l in 0..self.u.len() {
            self.u[l] += x.u[l] * a;
            self.v[l] += x.v[l] * a;
        }
    }

    /// Spectral x-derivative.
    pub fn dx(&self, length: f64) -> Self {
        let base = 2.0 * std::f64::consts::PI / length;
        let n = self.n_modes();
        let d = |h: &[C]| {
            h.iter()
                .enumerate()
                .map(|(l, &c)| if l == n / 2 { C::new(0.0, 0.0) } else { c * C::new(0.0, base * l as f64) })
                .collect()
        };
        Self { u: d(&self.u), v: d(&self.v), time: self.time }
    }

    pub fn max_coeff(&self) -> f64 {
        self.u.iter().chain(self.v.iter()).map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Evaluates the trigonometric interpolant of `u` at x (and its derivative).
    pub fn eval_u(&self, x: f64, length: f64) -> (f64, f64) {
        eval_half(&self.u, x, length)
    }

    /// Distance of `u` from its nearest mirror image, relative to the size
    /// of its non-constant part, together with the best reflection center.
    /// Zero for a profile symmetric about some point.
    pub fn asymmetry(&self, length: f64) -> (f64, f64) {
        let base = 2.0 * std::f64::consts::PI / length;
        let scale = self.u.iter().skip(1).map(|z| 2.0 * z.norm_sqr()).sum::<f64>().sqrt();
        if scale == 0.0 {
            return (0.0, 0.0);
        }
        let miss = |c: f64| -> f64 {
            let mut s = 0.0;
            for (l, &z) in self.u.iter().enumerate().skip(1) {
                s += 2.0 * (z - mirror_coeff(z, base * l as f64, c)).norm_sqr();
            }
            s
        };
        // mirrors about c and c + L/2 coincide
        let m = 8 * self.u.len();
        let h = 0.5 * length / m as f64;
        let k0 = (0..m).min_by(|&a, &b| miss(a as f64 * h).partial_cmp(&miss(b as f64 * h)).unwrap()).unwrap_or(0);
        let (mut a, mut b) = ((k0 as f64 - 1.0) * h, (k0 as f64 + 1.0) * h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let (x1, x2) = (b - g * (b - a), a + g * (b - a));
            if miss(x1) < miss(x2) {
                b = x2;
            } else {
                a = x1;
            }
        }
        let c = 0.5 * (a + b);
        (miss(c).sqrt() / scale, c.rem_euclid(0.5 * length))
    }

    /// Mirror image x -> 2c - x of both fields.
    pub fn mirrored(&self, c: f64, length: f64) -> Self {
        let base = 2.0 * std::f64::consts::PI / length;
        let m = |h: &[C]| h.iter().enumerate().map(|(l, &z)| mirror_coeff(z, base * l as f64, c)).collect();
        Self { u: m(&self.u), v: m(&self.v), time: self.time }
    }

    /// Transfers the state to another domain and resolution. The point
    /// `center` of the old domain lands at the middle of the new one; where
    /// the new domain is wider, the missing part is filled with `fill`.
    pub fn resample(&self, length: f64, center: f64, new_length: f64, new_n: usize, fill: (f64, f64)) -> Self {
        let dx = new_length / new_n as f64;
        let mut u = vec![fill.0; new_n];
        let mut v = vec![fill.1; new_n];
        for j in 0..new_n {
            let s = j as f64 * dx - 0.5 * new_length;
            if s.abs() <= 0.5 * length {
                u[j] = eval_half(&self.u, center + s, length).0;
                v[j] = eval_half(&self.v, center + s, length).0;
            }
        }
        Self::from_grid(&u, &v)
    }
}

fn mirror_coeff(z: C, k: f64, c: f64) -> C {
    z.conj() * C::from_polar(1.0, -2.0 * k * c)
}

pub fn eval_half(h: &[C], x: f64, length: f64) -> (f64, f64) {
    let base = 2.0 * std::f64::consts::PI / length;
    let n = 2 * (h.len() - 1);
    let mut val = h[0].re;
    let mut der = 0.0;
    let step = C::from_polar(1.0, base * x);
    let mut e = step;
    for (l, c) in h.iter().enumerate().take(n / 2).skip(1) {
        let z = c * e;
        val += 2.0 * z.re;
        der += -2.0 * base * l as f64 * z.im;
        e *= step;
    }
    (val, der)
}

fn half_dot(a: &[C], b: &[C]) -> f64 {
    let n = 2 * (a.len() - 1);
    let mut s = a[0].re * b[0].re;
    for l in 1..n / 2 {
        s += 2.0 * (a[l].re * b[l].re + a[l].im * b[l].im);
    }
    s
}

fn pack_half(h: &[C], out: &mut Vec<f64>) {
    let n = 2 * (h.len() - 1);
    let r2 = std::f64::consts::SQRT_2;
    out.push(h[0].re);
    for c in h.iter().take(n / 2).skip(1) {
        out.push(r2 * c.re);
        out.push(r2 * c.im);
    }
}

fn unpack_half(x: &[f64], n: usize) -> Vec<C> {
    let r2 = std::f64::consts::SQRT_2;
    let mut h = vec![C::new(0.0, 0.0); n / 2 + 1];
    h[0] = C::new(x[0], 0.0);
    for l in 1..n / 2 {
        h[l] = C::new(x[2 * l - 1] / r2, x[2 * l] / r2);
    }
    h
}

/// Real FFT pair of fixed length with normalized forward transform.
pub struct Transform {
    n: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
    rbuf: Vec<f64>,
    cbuf: Vec<C>,
}

impl Transform {
    pub fn new(n: usize) -> Self {
        let mut planner = RealFftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        Self { n, rbuf: fwd.make_input_vec(), cbuf: fwd.make_output_vec(), fwd, inv }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Half spectrum of `x` (length n/2+1), Nyquist zeroed.
    pub fn forward(&mut self, x: &[f64]) -> Vec<C> {
        let mut out = vec![C::new(0.0, 0.0); self.n / 2 + 1];
        self.forward_into(x, &mut out);
        out
    }

    /// Writes the first `out.len()` normalized modes; a Nyquist slot of the
    /// output (index n_out/2 for the truncated spectrum) is zeroed.
    pub fn forward_into(&mut self, x: &[f64], out: &mut [C]) {
        self.rbuf.copy_from_slice(x);
        self.fwd.process(&mut self.rbuf, &mut self.cbuf).expect("fft length");
        let scale = 1.0 / self.n as f64;
        let m = out.len();
        for l in 0..m {
            out[l] = self.cbuf[l] * scale;
        }
        out[m - 1] = C::new(0.0, 0.0);
    }

    /// Grid values of a half spectrum, zero-padded when shorter than n/2+1.
    pub fn inverse(&mut self, h: &[C]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.inverse_into(h, &mut out);
        out
    }

    pub fn inverse_into(&mut self, h: &[C], out: &mut [f64]) {
        for c in self.cbuf.iter_mut() {
            *c = C::new(0.0, 0.0);
        }
        let m = h.len().min(self.cbuf.len());
        self.cbuf[..m].copy_from_slice(&h[..m]);
        // keep the last input mode only if it is interior to this transform
        if h.len() == self.cbuf.len() {
            let last = self.cbuf.len() - 1;
            self.cbuf[last] = C::new(0.0, 0.0);
        }
        self.cbuf[0].im = 0.0;
        self.inv.process(&mut self.cbuf, out).expect("fft length");
    }
}

/// Padded grid size for the cubic term.
pub fn padded_len(n: usize) -> usize {
    if n > 1024 {
        3 * n / 2
    } else {
        2 * n
    }
}

/// Precomputed ETDRK4 stepper for a fixed (params, κ₁ field, dt, frame speed).
pub struct Etdrk4 {
    pub params: ModelParams,
    pub dt: f64,
    pub speed: f64,
    n: usize,
    e: [Vec<C>; 2],
    e2: [Vec<C>; 2],
    q: [Vec<C>; 2],
    f1: [Vec<C>; 2],
    f2: [Vec<C>; 2],
    f3: [Vec<C>; 2],
    kappa1_hat: Vec<C>,
    fine: Transform,
    grid_u: Vec<f64>,
    grid_w: Vec<f64>,
}

impl Etdrk4 {
    /// `speed` adds the comoving term +U ∂x so that waves moving at U are fixed.
    pub fn new(params: &ModelParams, kappa1: &[f64], dt: f64, speed: f64) -> Self {
        let n = params.n_modes;
        let half = n / 2 + 1;
        let base = 2.0 * std::f64::consts::PI / params.domain_length;
        let mut lin = [Vec::with_capacity(half), Vec::with_capacity(half)];
        for l in 0..half {
            let k = base * l as f64;
            let adv = C::new(0.0, k * speed);
            let lu = -params.Du * k * k + params.kappa2 - params.kappa4 / (1.0 + params.Dw * k * k);
            lin[0].push(C::new(lu, 0.0) + adv);
            lin[1].push(C::new(-1.0 / params.tau, 0.0) + adv);
        }
        let coeffs = |lv: &Vec<C>| {
            let mut out: [Vec<C>; 6] = Default::default();
            for &l in lv {
                let c = etd_coefficients(l, dt);
                for (o, v) in out.iter_mut().zip(c) {
                    o.push(v);
                }
            }
            out
        };
        let [eu, e2u, qu, f1u, f2u, f3u] = coeffs(&lin[0]);
        let [ev, e2v, qv, f1v, f2v, f3v] = coeffs(&lin[1]);
        let mut tr = Transform::new(n);
        let kappa1_hat = tr.forward(kappa1);
        let m = padded_len(n);
        Self {
            params: *params,
            dt,
            speed,
            n,
            e: [eu, ev],
            e2: [e2u, e2v],
            q: [qu, qv],
            f1: [f1u, f1v],
            f2: [f2u, f2v],
            f3: [f3u, f3v],
            kappa1_hat,
            fine: Transform::new(m),
            grid_u: vec![0.0; m],
            grid_w: vec![0.0; m],
        }
    }

    pub fn n_modes(&self) -> usize {
        self.n
    }

    /// Explicit part: (−u³ − κ₃v + κ₁, u/τ).
    fn nonlinear(&mut self, u: &[C], v: &[C], nu: &mut [C], nv: &mut [C]) {
        let (fine, gu, gw) = (&mut self.fine, &mut self.grid_u, &mut self.grid_w);
        fine.inverse_into(u, gu);
        for (w, &x) in gw.iter_mut().zip(gu.iter()) {
            *w = -x * x * x;
        }
        fine.forward_into(gw, nu);
        let (k3, itau) = (self.params.kappa3, 1.0 / self.params.tau);
        for l in 0..nu.len() {
            nu[l] += self.kappa1_hat[l] - v[l] * k3;
            nv[l] = u[l] * itau;
        }
        nu[self.n / 2] = C::new(0.0, 0.0);
        nv[self.n / 2] = C::new(0.0, 0.0);
    }

    /// Linearized explicit part about base (bu, ·) acting on (du, dv).
    fn nonlinear_tangent(&mut self, bu: &[C], du: &[C], dv: &[C], nu: &mut [C], nv: &mut [C]) {
        let (fine, gu, gw) = (&mut self.fine, &mut self.grid_u, &mut self.grid_w);
        fine.inverse_into(bu, gu);
        fine.inverse_into(du, gw);
        for (w, &x) in gw.iter_mut().zip(gu.iter()) {
            *w *= -3.0 * x * x;
        }
        fine.forward_into(gw, nu);
        let (k3, itau) = (self.params.kappa3, 1.0 / self.params.tau);
        for l in 0..nu.len() {
            nu[l] -= dv[l] * k3;
            nv[l] = du[l] * itau;
        }
        nu[self.n / 2] = C::new(0.0, 0.0);
        nv[self.n / 2] = C::new(0.0, 0.0);
    }

    pub fn step(&mut self, s: &mut SpectralState) -> Result<()> {
        let h = s.u.len();
        let z = || vec![C::new(0.0, 0.0); h];
        let (mut nu0, mut nv0, mut nua, mut nva, mut nub, mut nvb, mut nuc, mut nvc) =
            (z(), z(), z(), z(), z(), z(), z(), z());
        let (mut au, mut av, mut bu, mut bv, mut cu, mut cv) = (z(), z(), z(), z(), z(), z());
        self.nonlinear(&s.u, &s.v, &mut nu0, &mut nv0);
        for l in 0..h {
            au[l] = self.e2[0][l] * s.u[l] + self.q[0][l] * nu0[l];
            av[l] = self.e2[1][l] * s.v[l] + self.q[1][l] * nv0[l];
        }
        self.nonlinear(&au, &av, &mut nua, &mut nva);
        for l in 0..h {
            bu[l] = self.e2[0][l] * s.u[l] + self.q[0][l] * nua[l];
            bv[l] = self.e2[1][l] * s.v[l] + self.q[1][l] * nva[l];
        }
        self.nonlinear(&bu, &bv, &mut nub, &mut nvb);
        for l in 0..h {
            cu[l] = self.e2[0][l] * au[l] + self.q[0][l] * (nub[l] * 2.0 - nu0[l]);
            cv[l] = self.e2[1][l] * av[l] + self.q[1][l] * (nvb[l] * 2.0 - nv0[l]);
        }
        self.nonlinear(&cu, &cv, &mut nuc, &mut nvc);
        let mut big = 0.0f64;
        for l in 0..h {
            s.u[l] = self.e[0][l] * s.u[l]
                + self.f1[0][l] * nu0[l]
                + self.f2[0][l] * (nua[l] + nub[l]) * 2.0
                + self.f3[0][l] * nuc[l];
            s.v[l] = self.e[1][l] * s.v[l]
                + self.f1[1][l] * nv0[l]
                + self.f2[1][l] * (nva[l] + nvb[l]) * 2.0
                + self.f3[1][l] * nvc[l];
            big = big.max(s.u[l].norm()).max(s.v[l].norm());
        }
        s.u[h - 1] = C::new(0.0, 0.0);
        s.v[h - 1] = C::new(0.0, 0.0);
        s.u[0].im = 0.0;
        s.v[0].im = 0.0;
        s.time += self.dt;
        if !(big < 1e10) {
            return Err(Error::BlowUp { time: s.time });
        }
        Ok(())
    }

    /// One step of the base state together with the exact derivative of the
    /// discrete step applied to `t`.
    pub fn step_tangent(&mut self, s: &mut SpectralState, t: &mut SpectralState) -> Result<()> {
        let h = s.u.len();
        let z = || vec![C::new(0.0, 0.0); h];
        // base stages
        let (mut nu0, mut nv0, mut nua, mut nva, mut nub, mut nvb) = (z(), z(), z(), z(), z(), z());
        let (mut au, mut av, mut bu, mut bv, mut cu, mut cv) = (z(), z(), z(), z(), z(), z());
        // tangent stages
        let (mut mu0, mut mv0, mut mua, mut mva, mut mub, mut mvb, mut muc, mut mvc) =
            (z(), z(), z(), z(), z(), z(), z(), z());
        let (mut tau_, mut tav, mut tbu, mut tbv, mut tcu, mut tcv) = (z(), z(), z(), z(), z(), z());

        self.nonlinear(&s.u, &s.v, &mut nu0, &mut nv0);
        self.nonlinear_tangent(&s.u, &t.u, &t.v, &mut mu0, &mut mv0);
        for l in 0..h {
            au[l] = self.e2[0][l] * s.u[l] + self.q[0][l] * nu0[l];
            av[l] = self.e2[1][l] * s.v[l] + self.q[1][l] * nv0[l];
            tau_[l] = self.e2[0][l] * t.u[l] + self.q[0][l] * mu0[l];
            tav[l] = self.e2[1][l] * t.v[l] + self.q[1][l] * mv0[l];
        }
        self.nonlinear(&au, &av, &mut nua, &mut nva);
        self.nonlinear_tangent(&au, &tau_, &tav, &mut mua, &mut mva);
        for l in 0..h {
            bu[l] = self.e2[0][l] * s.u[l] + self.q[0][l] * nua[l];
            bv[l] = self.e2[1][l] * s.v[l] + self.q[1][l] * nva[l];
            tbu[l] = self.e2[0][l] * t.u[l] + self.q[0][l] * mua[l];
            tbv[l] = self.e2[1][l] * t.v[l] + self.q[1][l] * mva[l];
        }
        self.nonlinear(&bu, &bv, &mut nub, &mut nvb);
        self.nonlinear_tangent(&bu, &tbu, &tbv, &mut mub, &mut mvb);
        for l in 0..h {
            cu[l] = self.e2[0][l] * au[l] + self.q[0][l] * (nub[l] * 2.0 - nu0[l]);
            cv[l] = self.e2[1][l] * av[l] + self.q[1][l] * (nvb[l] * 2.0 - nv0[l]);
            tcu[l] = self.e2[0][l] * tau_[l] + self.q[0][l] * (mub[l] * 2.0 - mu0[l]);
            tcv[l] = self.e2[1][l] * tav[l] + self.q[1][l] * (mvb[l] * 2.0 - mv0[l]);
        }
        let (mut nuc, mut nvc) = (z(), z());
        self.nonlinear(&cu, &cv, &mut nuc, &mut nvc);
        self.nonlinear_tangent(&cu, &tcu, &tcv, &mut muc, &mut mvc);
        for l in 0..h {
            s.u[l] = self.e[0][l] * s.u[l]
                + self.f1[0][l] * nu0[l]
                + self.f2[0][l] * (nua[l] + nub[l]) * 2.0
                + self.f3[0][l] * nuc[l];
            s.v[l] = self.e[1][l] * s.v[l]
                + self.f1[1][l] * nv0[l]
                + self.f2[1][l] * (nva[l] + nvb[l]) * 2.0
                + self.f3[1][l] * nvc[l];
            t.u[l] = self.e[0][l] * t.u[l]
                + self.f1[0][l] * mu0[l]
                + self.f2[0][l] * (mua[l] + mub[l]) * 2.0
                + self.f3[0][l] * muc[l];
            t.v[l] = self.e[1][l] * t.v[l]
                + self.f1[1][l] * mv0[l]
                + self.f2[1][l] * (mva[l] + mvb[l]) * 2.0
                + self.f3[1][l] * mvc[l];
        }
        for x in [&mut s.u, &mut s.v, &mut t.u, &mut t.v] {
            x[h - 1] = C::new(0.0, 0.0);
            x[0].im = 0.0;
        }
        s.time += self.dt;
        if !(s.max_coeff() < 1e10) {
            return Err(Error::BlowUp { time: s.time });
        }
        Ok(())
    }

    /// Advances by `t` using whole steps of the configured dt plus one
    /// shorter closing step when `t` is not a multiple of dt.
    pub fn advance(&mut self, s: &mut SpectralState, t: f64) -> Result<()> {
        let (steps, rem) = split_time(t, self.dt);
        for _ in 0..steps {
            self.step(s)?;
        }
        if rem > 0.0 {
            let mut short = Etdrk4::new_like(self, rem);
            short.step(s)?;
        }
        Ok(())
    }

    pub fn advance_tangent(&mut self, s: &mut SpectralState, t: &mut SpectralState, time: f64) -> Result<()> {
        let (steps, rem) = split_time(time, self.dt);
        for _ in 0..steps {
            self.step_tangent(s, t)?;
        }
        if rem > 0.0 {
            let mut short = Etdrk4::new_like(self, rem);
            short.step_tangent(s, t)?;
        }
        Ok(())
    }

    fn new_like(other: &Etdrk4, dt: f64) -> Self {
        let mut tr = Transform::new(other.n);
        let k1 = tr.inverse(&other.kappa1_hat);
        // inverse of a Nyquist-free spectrum loses nothing, so this round-trips
        Etdrk4::new(&other.params, &k1, dt, other.speed)
    }
}

fn split_time(t: f64, dt: f64) -> (usize, f64) {
    let ratio = t / dt;
    let steps = (ratio + 1e-9).floor() as usize;
    let rem = t - steps as f64 * dt;
    (steps, if rem > 1e-12 * dt { rem } else { 0.0 })
}

/// ETDRK4 scalars (e^{z}, e^{z/2}, Q, f1, f2, f3) for z = L·dt, using the
/// contour-integral average so small |z| carries no cancellation.
pub fn etd_coefficients(l: C, dt: f64) -> [C; 6] {
    const M: usize = 32;
    let z = l * dt;
    let (mut q, mut f1, mut f2, mut f3) = (C::new(0.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0));
    for j in 0..M {
        let th = std::f64::consts::PI * (j as f64 + 0.5) / M as f64 * 2.0;
        let r = z + C::from_polar(1.0, th);
        let er = r.exp();
        let er2 = (r * 0.5).exp();
        let r3 = r * r * r;
        q += (er2 - 1.0) / r;
        f1 += (-4.0 - r + er * (4.0 - 3.0 * r + r * r)) / r3;
        f2 += (2.0 + r + er * (r - 2.0)) / r3;
        f3 += (-4.0 - 3.0 * r - r * r + er * (4.0 - r)) / r3;
    }
    let s = dt / M as f64;
    [z.exp(), (z * 0.5).exp(), q * s, f1 * s, f2 * s, f3 * s]
}

/// Time derivative f(z) of the spectral state (no comoving term).
pub fn rhs_spectral(params: &ModelParams, kappa1: &[f64], s: &SpectralState) -> SpectralState {
    let (u, v) = s.to_grid();
    let (ut, vt) = crate::model::rhs_nonlocal(params, &u, &v, kappa1);
    let mut out = SpectralState::from_grid(&ut, &vt);
    out.time = s.time;
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub position: f64,
    pub velocity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    pub sample_dt: f64,
    /// Final full state, kept so terminal snapshots can be compared.
    #[serde(skip)]
    pub final_state: Option<SpectralState>,
}

impl Trajectory {
    pub fn last(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Recomputes velocities by centered differences of the unwrapped position.
    pub fn refresh_velocities(&mut self) {
        let n = self.samples.len();
        if n < 2 {
            return;
        }
        let p: Vec<f64> = self.samples.iter().map(|s| s.position).collect();
        let t: Vec<f64> = self.samples.iter().map(|s| s.t).collect();
        for i in 0..n {
            let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
            self.samples[i].velocity = (p[b] - p[a]) / (t[b] - t[a]);
        }
    }
}

/// Peak position of the u-field, unwrapped later by the caller.
pub fn pulse_position(s: &SpectralState, params: &ModelParams, u_bar: f64) -> Result<f64> {
    pulse_position_over(s, params, &vec![u_bar; s.n_modes()])
}

/// Pointwise background for a spatially varying κ₁: the homogeneous rest
/// state at each local value. Good when the bump is wide against the
/// diffusion lengths; keeps strong bumps from passing for a pulse.
pub fn local_background(params: &ModelParams, kappa1: &[f64]) -> Result<Vec<f64>> {
    let mut cache: Vec<(f64, f64)> = Vec::new();
    kappa1
        .iter()
        .map(|&k| {
            if let Some(&(_, u)) = cache.iter().find(|c| c.0 == k) {
                return Ok(u);
            }
            let u = solve_background(params, k)?.u_bar;
            cache.push((k, u));
            Ok(u)
        })
        .collect()
}

/// As [`pulse_position`], with deviations taken from a background profile.
pub fn pulse_position_over(s: &SpectralState, params: &ModelParams, background: &[f64]) -> Result<f64> {
    let mut tr = Transform::new(s.n_modes());
    let u = tr.inverse(&s.u);
    let n = u.len();
    let dev: Vec<f64> = u.iter().zip(background).map(|(x, b)| x - b).collect();
    let (jmax, peak) = dev.iter().enumerate().fold((0, f64::MIN), |acc, (j, &d)| if d > acc.1 { (j, d) } else { acc });
    let dx = params.dx();
    // tail amplitude estimate: largest deviation far from the peak
    let mut tail = 0.0f64;
    for (j, d) in dev.iter().enumerate() {
        let mut sep = (j as f64 - jmax as f64).abs();
        sep = sep.min(n as f64 - sep) * dx;
        if sep > 0.25 * params.domain_length {
            tail = tail.max(d.abs());
        }
    }
    if !(peak > 10.0 * tail) || peak <= 0.0 {
        return Err(Error::NoPulse { peak });
    }
    let w = |j: isize| dev[j.rem_euclid(n as isize) as usize].powi(2);
    let (a, b, c) = (w(jmax as isize - 1), w(jmax as isize), w(jmax as isize + 1));
    let denom = a - 2.0 * b + c;
    let off = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
    let mut x = (jmax as f64 + off.clamp(-0.5, 0.5)) * dx;
    // Newton on the interpolant's slope: translation-equivariant to round-off
    let h = 1e-6 * dx;
    for _ in 0..30 {
        let (_, d0) = s.eval_u(x, params.domain_length);
        let (_, d1) = s.eval_u(x + h, params.domain_length);
        let curv = (d1 - d0) / h;
        if curv >= 0.0 {
            break;
        }
        let step = -d0 / curv;
        x += step.clamp(-dx, dx);
        if step.abs() < 1e-14 * params.domain_length {
            break;
        }
    }
    Ok(x.rem_euclid(params.domain_length))
}

/// (position, velocity) from the last two states sampled `dt` apart.
pub fn track_pulse(
    prev: &SpectralState,
    cur: &SpectralState,
    params: &ModelParams,
    u_bar: f64,
) -> Result<(f64, f64)> {
    let a = pulse_position(prev, params, u_bar)?;
    let b = pulse_position(cur, params, u_bar)?;
    let dt = cur.time - prev.time;
    let vel = if dt > 0.0 { unwrap_delta(b - a, params.domain_length) / dt } else { 0.0 };
    Ok((b, vel))
}

pub fn unwrap_delta(d: f64, length: f64) -> f64 {
    d - length * (d / length).round()
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub dt: f64,
    pub sample_dt: f64,
    /// Keep a grid snapshot of u every this many samples (0 = never).
    pub snapshot_stride: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { dt: 1e-2, sample_dt: 1.0, snapshot_stride: 0 }
    }
}

/// Integrates with the bump and records (position, velocity) samples; the
/// run ends at `t_end` or as soon as `stop` returns true.
pub fn run_collision_until(
    initial: &SpectralState,
    params: &ModelParams,
    kappa1: &[f64],
    t_end: f64,
    opts: RunOptions,
    mut stop: impl FnMut(&Trajectory) -> bool,
) -> Result<Trajectory> {
    let bg = local_background(params, kappa1)?;
    let mut stepper = Etdrk4::new(params, kappa1, opts.dt, 0.0);
    let mut s = initial.clone();
    let mut traj = Trajectory { samples: Vec::new(), sample_dt: opts.sample_dt, final_state: None };
    let per = (opts.sample_dt / opts.dt).round().max(1.0) as usize;
    let mut unwrapped = pulse_position_over(&s, params, &bg)?;
    traj.samples.push(Sample { t: s.time, position: unwrapped, velocity: 0.0, snapshot: None });
    let mut k = 0usize;
    while s.time < t_end - 0.5 * opts.dt {
        for _ in 0..per {
            stepper.step(&mut s)?;
        }
        k += 1;
        let p = pulse_position_over(&s, params, &bg)?;
        unwrapped += unwrap_delta(p - unwrapped, params.domain_length);
        let prev = traj.samples.last().unwrap();
        let vel = (unwrapped - prev.position) / (s.time - prev.t);
        let snapshot = if opts.snapshot_stride > 0 && k % opts.snapshot_stride == 0 {
            Some(Transform::new(params.n_modes).inverse(&s.u))
        } else {
            None
        };
        traj.samples.push(Sample { t: s.time, position: unwrapped, velocity: vel, snapshot });
        if stop(&traj) {
            break;
        }
    }
    traj.refresh_velocities();
    traj.final_state = Some(s);
    Ok(traj)
}

pub fn run_collision(
    initial: &SpectralState,
    params: &ModelParams,
    kappa1: &[f64],
    t_end: f64,
    opts: RunOptions,
) -> Result<Trajectory> {
    run_collision_until(initial, params, kappa1, t_end, opts, |_| false)
}
