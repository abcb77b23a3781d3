//! Snakes-and-ladders study on a small periodic domain: the odd snake grown
//! from the one-peak state, one asymmetric ladder rung leaving it near its
//! first right fold, and the even snake reached through that rung.

use rayon::prelude::*;
use serde::Serialize;

use crate::continuation::{continue_branch, label_barcode, Branch, ContinuationOptions, EventKind};
use crate::error::{Error, Result};
use crate::shooting::{solve, stability, ConvergedSolution, ParamKind, ShootingTarget, StabilityOptions};
use crate::spectral::SpectralState;

#[derive(Debug, Clone, Copy)]
pub struct SnakingOptions {
    pub kappa1_range: (f64, f64),
    pub max_points: usize,
    /// π/b of the tail, for barcodes.
    pub half_wavelength: f64,
    /// Distance past the fold at which the ladder is launched.
    pub ladder_offset: f64,
    /// Relative size of the antisymmetric kick.
    pub ladder_weight: f64,
    /// Asymmetry below which a ladder has rejoined a symmetric branch.
    pub symmetric_tol: f64,
}

impl Default for SnakingOptions {
    fn default() -> Self {
        Self {
            // stays below the trivial-state onset, where labels lose meaning
            kappa1_range: (-0.2, -0.0765),
            max_points: 500,
            half_wavelength: 0.07195,
            ladder_offset: 1.5e-3,
            ladder_weight: 0.1,
            symmetric_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldRecord {
    pub kappa1: f64,
    /// Index of the fold point on its branch.
    pub index: usize,
    /// Right-hand fold: the branch was moving toward larger κ₁.
    pub right: bool,
    pub large_before: Option<usize>,
    pub large_after: Option<usize>,
}

impl FoldRecord {
    pub fn added(&self) -> Option<i64> {
        Some(self.large_after? as i64 - self.large_before? as i64)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SnakingReport {
    pub odd: Vec<Branch>,
    pub ladder: Vec<Branch>,
    pub even: Vec<Branch>,
    pub folds: Vec<FoldRecord>,
    /// Barcodes at the two symmetric ends of the ladder.
    pub ladder_ends: Vec<String>,
    /// Terminal barcode of every snake half and whether it is spatially periodic.
    pub terminals: Vec<(String, bool)>,
    /// Peaks that fit in the domain at the tail wavelength.
    pub domain_capacity: usize,
}

impl SnakingReport {
    /// Right folds that add exactly two large peaks.
    pub fn right_folds_adding_two(&self) -> usize {
        self.folds.iter().filter(|f| f.right && f.added() == Some(2)).count()
    }

    pub fn ladder_joins_odd_to_even(&self) -> bool {
        // parity of the large peaks; flanking small peaks do not count
        let counts: Vec<Option<usize>> =
            self.ladder_ends.iter().map(|s| pattern_of(s).map(|p| p.matches('I').count())).collect();
        counts.len() == 2 && matches!((counts[0], counts[1]), (Some(a), Some(b)) if a % 2 != b % 2)
    }

    /// Every snake half ends on the filled periodic state.
    pub fn terminates_on_filled(&self) -> bool {
        let full = "I".repeat(self.domain_capacity);
        !self.terminals.is_empty()
            && self.terminals.iter().all(|(b, periodic)| *periodic && pattern_of(b).as_deref() == Some(full.as_str()))
    }
}

/// Expanded peak pattern of a displayed barcode, e.g. "[I^2i]S_{0}" -> "IIi".
pub fn pattern_of(label: &str) -> Option<String> {
    let body = label.strip_prefix('[')?.split(']').next()?;
    let mut out = String::new();
    let chars: Vec<char> = body.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c != 'I' && c != 'i' {
            return None;
        }
        i += 1;
        let mut reps = 1;
        if i < chars.len() && chars[i] == '^' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && chars[j].is_ascii_digit() {
                j += 1;
            }
            reps = body[start..j].parse().ok()?;
            i = j;
        }
        out.extend(std::iter::repeat(c).take(reps));
    }
    Some(out)
}

/// Number of large peaks when the pattern has no small ones.
pub fn large_count(label: &str) -> Option<usize> {
    let p = pattern_of(label)?;
    (!p.is_empty() && !p.contains('i')).then(|| p.len())
}

fn fold_records(b: &Branch) -> Vec<FoldRecord> {
    let folds: Vec<usize> = b.events_of(EventKind::SaddleNode).iter().map(|e| e.index).collect();
    let label = |i: usize| b.points[i].barcode.as_deref().and_then(large_count);
    folds
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let lo = if j == 0 { 0 } else { folds[j - 1] };
            let hi = folds.get(j + 1).copied().unwrap_or(b.points.len() - 1);
            let before = (lo..k).rev().find_map(label);
            let after = (k + 1..=hi).find_map(label);
            let right = k > 0 && b.points[k].param > b.points[k - 1].param;
            FoldRecord { kappa1: b.points[k].param, index: k, right, large_before: before, large_after: after }
        })
        .collect()
}

fn terminal(b: &Branch, h: f64, capacity: usize) -> Option<(String, bool)> {
    let p = b.points.iter().rev().find(|p| p.barcode.as_deref().and_then(large_count).is_some())?;
    let bc = label_barcode(&p.solution, h).ok()?;
    let l = p.solution.params.domain_length;
    let n = bc.peaks.len();
    let periodic = n == capacity && {
        let mut xs = bc.peaks.clone();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = l / n as f64;
        (0..n).all(|i| {
            let d = if i + 1 < n { xs[i + 1] - xs[i] } else { xs[0] + l - xs[i] };
            (d - gap).abs() < 0.1 * gap
        })
    };
    Some((bc.to_string(), periodic))
}

fn both_ways(start: &ConvergedSolution, base: &ContinuationOptions) -> Result<Vec<Branch>> {
    [1.0, -1.0]
        .into_par_iter()
        .map(|d| continue_branch(start, &ContinuationOptions { direction: d, ..*base }))
        .collect()
}

/// Antisymmetric kick off a symmetric solution along its leading unstable
/// odd eigenmode, Newton-corrected as a stationary state.
fn ladder_seed(sol: &ConvergedSolution, opts: &SnakingOptions) -> Result<ConvergedSolution> {
    let l = sol.params.domain_length;
    let n = sol.params.n_modes;
    let (_, c) = sol.state.asymmetry(l);
    let sp = stability(sol, 6, StabilityOptions::default())?;
    let odd = sp
        .eigenvalues
        .iter()
        .zip(&sp.eigenmodes)
        .filter(|(lam, _)| lam.im.abs() < 1e-8 && lam.re > 1e-3)
        .map(|(_, m)| SpectralState::unpack(&m.0, n))
        .find(|m| {
            let r = m.mirrored(c, l);
            let mut plus = m.clone();
            plus.axpy(1.0, &r);
            let mut minus = m.clone();
            minus.axpy(-1.0, &r);
            minus.norm() > plus.norm()
        })
        .ok_or(Error::MissingInput("unstable antisymmetric mode".into()))?;
    for w in [opts.ladder_weight, 0.5 * opts.ladder_weight, 2.0 * opts.ladder_weight] {
        let mut seed = sol.state.clone();
        seed.axpy(w * sol.state.norm() / odd.norm(), &odd);
        if let Ok(s) = solve(&seed, &ShootingTarget::steady(), &sol.params, &sol.forcing) {
            if s.state.asymmetry(l).0 > 1e-2 {
                return Ok(s);
            }
        }
    }
    Err(Error::FellBack)
}

/// Runs the full study from a stationary one-peak solution on a homogeneous
/// domain.
pub fn snaking_study(one_peak: &ConvergedSolution, opts: &SnakingOptions) -> Result<SnakingReport> {
    let mut base = ContinuationOptions::new(ParamKind::Kappa1, 1.0, ShootingTarget::steady());
    base.n_eigs = 0;
    base.stop.max_points = opts.max_points;
    base.stop.param_min = opts.kappa1_range.0;
    base.stop.param_max = opts.kappa1_range.1;
    base.label_scale = Some(opts.half_wavelength);
    let l = one_peak.params.domain_length;
    let capacity = (l / (2.0 * opts.half_wavelength)).round() as usize;

    let odd = both_ways(one_peak, &base)?;
    let mut folds: Vec<FoldRecord> = odd.iter().flat_map(fold_records).collect();

    // launch the rung just past the first right fold of the odd snake
    let (b, k) = odd
        .iter()
        .find_map(|b| {
            let f = fold_records(b).into_iter().find(|f| f.right)?;
            let k = (f.index..b.points.len()).find(|&i| (b.points[i].param - f.kappa1).abs() > opts.ladder_offset)?;
            Some((b, k))
        })
        .ok_or(Error::MissingInput("right fold on the odd snake".into()))?;
    let rung = ladder_seed(&b.points[k].solution, opts)?;
    let mut lo = base;
    lo.stop.symmetric_tol = opts.symmetric_tol;
    let ladder = both_ways(&rung, &lo)?;
    let ends: Vec<&ConvergedSolution> = ladder
        .iter()
        .map(|b| &b.points.last().unwrap().solution)
        .filter(|s| s.state.asymmetry(l).0 < opts.symmetric_tol)
        .collect();
    let ladder_ends: Vec<String> =
        ends.iter().filter_map(|s| label_barcode(s, opts.half_wavelength).ok()).map(|b| b.to_string()).collect();

    // the even snake is whichever symmetric end has an even large-peak count
    let even_end = ends
        .iter()
        .zip(&ladder_ends)
        .find(|(_, b)| pattern_of(b).is_some_and(|p| p.contains('I') && p.matches('I').count() % 2 == 0))
        .map(|(s, _)| (*s).clone());
    let mut even = Vec::new();
    if let Some(e) = even_end {
        // step away from the rung's foot first, then sweep the whole snake
        let mut probe = base;
        probe.stop.max_points = 40;
        let first = continue_branch(&e, &probe)?;
        let mid = first.points.last().unwrap().solution.clone();
        even = both_ways(&mid, &base)?;
        folds.extend(even.iter().flat_map(fold_records));
    }
    let terminals = odd.iter().chain(&even).filter_map(|b| terminal(b, opts.half_wavelength, capacity)).collect();
    Ok(SnakingReport { odd, ladder, even, folds, ladder_ends, terminals, domain_capacity: capacity })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barcode_patterns_expand() {
        assert_eq!(pattern_of("[I^2i]S_{-1/2}").as_deref(), Some("IIi"));
        assert_eq!(pattern_of("[iI^3]S_{-1}").as_deref(), Some("iIII"));
        assert_eq!(large_count("[I^4]S_{0}"), Some(4));
        assert_eq!(large_count("[iIi]S_{0}"), None);
        assert_eq!(pattern_of("garbage"), None);
    }

    #[test]
    fn fold_adds_counts() {
        let f = FoldRecord { kappa1: -0.09, index: 3, right: true, large_before: Some(1), large_after: Some(3) };
        assert_eq!(f.added(), Some(2));
    }
}
