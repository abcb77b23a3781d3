//! Property checks on the building blocks: symmetries the discretization
//! must preserve and round trips that must be exact.

use std::sync::OnceLock;

use proptest::prelude::*;

use pulsekit::io::reduced_pulse;
use pulsekit::model::{helmholtz_inverse, kappa1_field, solve_background, HeterogeneityBump, ModelParams};
use pulsekit::reduced::{build_reduced, classify_point, trace_det, PointKind, ReducedSystem};
use pulsekit::seeds::stationary_pulse;
use pulsekit::shooting::{verify_residual, ConvergedSolution};
use pulsekit::spectral::{rhs_spectral, unwrap_delta, SpectralState, Transform};

fn small() -> ModelParams {
    ModelParams::default().with_domain(1.0, 64)
}

fn field(n: usize, amps: &[f64], phases: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let x = j as f64 / n as f64;
            amps.iter()
                .zip(phases)
                .enumerate()
                .map(|(k, (a, p))| a * (2.0 * std::f64::consts::PI * (k + 1) as f64 * x + p).cos())
                .sum()
        })
        .collect()
}

fn pulse() -> &'static ConvergedSolution {
    static P: OnceLock<ConvergedSolution> = OnceLock::new();
    P.get_or_init(|| stationary_pulse(&ModelParams::default(), -0.1).expect("pulse"))
}

fn system() -> &'static ReducedSystem {
    static S: OnceLock<ReducedSystem> = OnceLock::new();
    S.get_or_init(|| {
        build_reduced(&reduced_pulse(&ModelParams::default()).expect("pulse"), 0.05).expect("reduced")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn background_rises_with_kappa1(a in -0.3f64..-0.08, da in 1e-4f64..0.05) {
        let p = ModelParams::default();
        let lo = solve_background(&p, a).unwrap().u_bar;
        let hi = solve_background(&p, a + da).unwrap().u_bar;
        prop_assert!(hi > lo);
    }

    #[test]
    fn bump_is_even_about_its_center(eps in -0.04f64..0.04, d in 0.01f64..0.2, s in 0.0f64..0.5) {
        let b = HeterogeneityBump::new(eps, d);
        let (l, c) = (1.0, 0.5);
        prop_assert!((b.evaluate(c + s, l) - b.evaluate(c - s, l)).abs() <= 1e-14);
    }

    #[test]
    fn helmholtz_inverse_is_symmetric(
        a in prop::collection::vec(-1.0f64..1.0, 5),
        pa in prop::collection::vec(0.0f64..6.3, 5),
        b in prop::collection::vec(-1.0f64..1.0, 5),
        pb in prop::collection::vec(0.0f64..6.3, 5),
    ) {
        let p = small();
        let (fa, fb) = (field(64, &a, &pa), field(64, &b, &pb));
        let (ha, hb) = (helmholtz_inverse(&p, &fa), helmholtz_inverse(&p, &fb));
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
        prop_assert!((dot(&fa, &hb) - dot(&ha, &fb)).abs() <= 1e-12 * (1.0 + dot(&fa, &fa).sqrt() * dot(&fb, &fb).sqrt()));
        // a smoothing operator: never amplifies
        prop_assert!(dot(&ha, &ha) <= dot(&fa, &fa) + 1e-12);
    }

    #[test]
    fn real_fields_survive_the_transform(a in prop::collection::vec(-1.0f64..1.0, 64)) {
        let mut t = Transform::new(64);
        let h = t.forward(&a);
        let back = t.inverse(&h);
        // the Nyquist mode is dropped, so compare against the filtered input
        let nyq: f64 = a.iter().enumerate().map(|(j, x)| if j % 2 == 0 { *x } else { -*x }).sum::<f64>() / 64.0;
        for (j, (x, y)) in a.iter().zip(&back).enumerate() {
            let alt = if j % 2 == 0 { nyq } else { -nyq };
            prop_assert!((x - alt - y).abs() < 1e-12);
        }
    }

    #[test]
    fn vector_field_commutes_with_translation(
        a in prop::collection::vec(-0.3f64..0.3, 4),
        ph in prop::collection::vec(0.0f64..6.3, 4),
        shift in -0.5f64..0.5,
    ) {
        let p = small();
        let ub = solve_background(&p, -0.1).unwrap().u_bar;
        let u: Vec<f64> = field(64, &a, &ph).iter().map(|x| ub + x).collect();
        let z = SpectralState::from_grid(&u, &u);
        let k1 = kappa1_field(&p, -0.1, None);
        let lhs = rhs_spectral(&p, &k1, &z.shifted(shift, 1.0));
        let mut rhs = rhs_spectral(&p, &k1, &z).shifted(shift, 1.0);
        rhs.axpy(-1.0, &lhs);
        prop_assert!(rhs.norm() < 1e-10 * (1.0 + lhs.norm()));
    }

    #[test]
    fn mirrored_states_are_symmetric(c in 0.0f64..1.0, a in prop::collection::vec(-0.3f64..0.3, 4), ph in prop::collection::vec(0.0f64..6.3, 4)) {
        let f = field(64, &a, &ph);
        let z = SpectralState::from_grid(&f, &f);
        let mut sym = z.clone();
        sym.axpy(1.0, &z.mirrored(c, 1.0));
        prop_assert!(sym.asymmetry(1.0).0 < 1e-8);
    }

    #[test]
    fn unwrap_stays_within_half_a_domain(d in -10.0f64..10.0, l in 0.1f64..5.0) {
        let w = unwrap_delta(d, l);
        prop_assert!(w.abs() <= 0.5 * l + 1e-12);
        prop_assert!(((d - w) / l - ((d - w) / l).round()).abs() < 1e-9);
    }

    #[test]
    fn point_kind_follows_trace_and_determinant(eps_hat in -100.0f64..100.0) {
        let sys = system();
        let (b, c, disc) = trace_det(sys, eps_hat);
        let (kind, ev) = classify_point(sys, eps_hat);
        prop_assert!(((ev[0] + ev[1]).re - b).abs() <= 1e-9 * (1.0 + b.abs()));
        prop_assert!(((ev[0] * ev[1]).re - c).abs() <= 1e-9 * (1.0 + c.abs()));
        prop_assert_eq!(kind == PointKind::Saddle, c < 0.0);
        if c > 0.0 {
            prop_assert_eq!(kind.stable(), b < 0.0);
            prop_assert_eq!(matches!(kind, PointKind::UnstableSpiral | PointKind::StableSpiral), disc < 0.0);
        }
    }

    #[test]
    fn reduced_flow_is_odd(p in -0.4f64..0.4, a in -0.01f64..0.01, eps in -0.03f64..0.03) {
        let sys = system();
        let f = sys.rhs(eps, &[p, a]);
        let g = sys.rhs(eps, &[-p, -a]);
        let scale = 1e-9 * (f[0].abs() + f[1].abs() + sys.kappa3 * sys.alpha_plus());
        prop_assert!((f[0] + g[0]).abs() <= scale && (f[1] + g[1]).abs() <= scale);
    }
}

#[test]
fn solutions_round_trip_through_json() {
    let s = pulse();
    let text = serde_json::to_string(s).unwrap();
    let back: ConvergedSolution = serde_json::from_str(&text).unwrap();
    assert_eq!(back.state.u, s.state.u);
    assert_eq!(back.state.v, s.state.v);
    assert_eq!(back.params, s.params);
    assert_eq!(back.residual, s.residual);
}

#[test]
fn stationary_pulse_is_a_fixed_point() {
    let s = pulse();
    assert!(verify_residual(s, 0.1, 0.01).unwrap() < 1e-10);
    // steady pulses carry v = u
    let mut d = s.state.clone();
    d.v = d.u.clone();
    d.axpy(-1.0, &s.state);
    assert!(d.norm() < 1e-8 * s.state.norm());
}

#[test]
fn pulse_asymmetry_is_invariant_under_shifts() {
    let s = &pulse().state;
    let a = s.asymmetry(1.0).0;
    let b = s.shifted(0.123, 1.0).asymmetry(1.0).0;
    assert!(a < 1e-6, "stationary pulse should be symmetric, got {a}");
    assert!((a - b).abs() < 1e-8);
}
