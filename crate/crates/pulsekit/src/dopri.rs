//! Adaptive Dormand-Prince 5(4) for small autonomous systems, with cubic
//! Hermite interpolation between accepted steps for event location.

#[derive(Debug, Clone, Copy)]
pub struct DopriOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h0: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for DopriOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-14, h0: 1e-2, h_max: f64::INFINITY, h_min: 1e-14, max_steps: 50_000_000 }
    }
}

/// One accepted step: endpoints and derivatives, enough for Hermite
/// interpolation inside [t0, t1].
#[derive(Debug, Clone, Copy)]
pub struct StepInfo<const N: usize> {
    pub t0: f64,
    pub t1: f64,
    pub y0: [f64; N],
    pub y1: [f64; N],
    pub f0: [f64; N],
    pub f1: [f64; N],
}

impl<const N: usize> StepInfo<N> {
    pub fn interpolate(&self, t: f64) -> [f64; N] {
        let h = self.t1 - self.t0;
        let s = (t - self.t0) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        let mut y = [0.0; N];
        for i in 0..N {
            y[i] = h00 * self.y0[i] + h10 * h * self.f0[i] + h01 * self.y1[i] + h11 * h * self.f1[i];
        }
        y
    }

    /// Time inside the step where component `i` of y equals `level`,
    /// assuming a sign change across the step.
    pub fn locate(&self, i: usize, level: f64) -> f64 {
        let g = |t: f64| self.interpolate(t)[i] - level;
        let (mut a, mut b) = (self.t0, self.t1);
        let ga = g(a);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if (g(m) > 0.0) == (ga > 0.0) {
                a = m;
            } else {
                b = m;
            }
            if b - a <= 1e-15 * (1.0 + b.abs()) {
                break;
            }
        }
        0.5 * (a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Reached,
    Stopped,
    StepUnderflow,
    MaxSteps,
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates y' = f(y) from t0 toward t_end (either direction). The
/// observer sees every accepted step and may stop the run.
pub fn integrate<const N: usize>(
    f: impl Fn(&[f64; N]) -> [f64; N],
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    opts: DopriOptions,
    mut observer: impl FnMut(&StepInfo<N>) -> Control,
) -> (f64, [f64; N], Termination) {
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(&y);
    let mut h = opts.h0.min(opts.h_max).min((t_end - t0).abs());
    if h <= 0.0 {
        return (t, y, Termination::Reached);
    }
    let comb = |y: &[f64; N], terms: &[(f64, &[f64; N])], h: f64| {
        let mut out = *y;
        for (c, k) in terms {
            for i in 0..N {
                out[i] += h * c * k[i];
            }
        }
        out
    };
    let mut steps = 0;
    while (t_end - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return (t, y, Termination::MaxSteps);
        }
        steps += 1;
        let last = h >= (t_end - t).abs();
        if last {
            h = (t_end - t).abs();
        }
        let hs = h * dir;
        let k2 = f(&comb(&y, &[(A21, &k1)], hs));
        let k3 = f(&comb(&y, &[(A31, &k1), (A32, &k2)], hs));
        let k4 = f(&comb(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], hs));
        let k5 = f(&comb(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], hs));
        let k6 = f(&comb(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], hs));
        let y_new = comb(&y, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], hs);
        let k7 = f(&y_new);
        let mut err = 0.0f64;
        for i in 0..N {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            h *= 0.1;
            if h < opts.h_min {
                return (t, y, Termination::StepUnderflow);
            }
            continue;
        }
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + hs };
            let info = StepInfo { t0: t, t1: t_new, y0: y, y1: y_new, f0: k1, f1: k7 };
            t = t_new;
            y = y_new;
            k1 = k7;
            if observer(&info) == Control::Stop {
                return (t, y, Termination::Stopped);
            }
            let fac = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * fac).min(opts.h_max);
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            if h < opts.h_min {
                return (t, y, Termination::StepUnderflow);
            }
        }
    }
    (t, y, Termination::Reached)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator_period() {
        let opts = DopriOptions::default();
        let tp = 2.0 * std::f64::consts::PI;
        let (_, y, term) = integrate(|y: &[f64; 2]| [y[1], -y[0]], 0.0, [1.0, 0.0], tp, opts, |_| Control::Continue);
        assert_eq!(term, Termination::Reached);
        assert!((y[0] - 1.0).abs() < 1e-8 && y[1].abs() < 1e-8);
    }

    #[test]
    fn reverse_time_decay() {
        let opts = DopriOptions::default();
        let (_, y, _) = integrate(|y: &[f64; 1]| [-y[0]], 0.0, [1.0], -1.0, opts, |_| Control::Continue);
        assert!((y[0] - std::f64::consts::E).abs() < 1e-8);
    }
}
