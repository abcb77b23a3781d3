//! Matrix-free Krylov solvers: restarted GMRES and explicitly restarted
//! Arnoldi for a few leading eigenpairs.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GmresConfig {
    pub max_iter: usize,
    pub restart: usize,
    pub tol: f64,
}

impl Default for GmresConfig {
    fn default() -> Self {
        Self { max_iter: 1000, restart: 1000, tol: 1e-3 }
    }
}

#[derive(Debug, Clone)]
pub struct GmresResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Solves A x = b from x = 0. Stops at ‖b − Ax‖ ≤ tol‖b‖ or after max_iter.
pub fn gmres(mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>, b: &[f64], cfg: GmresConfig) -> Result<GmresResult> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(GmresResult { x, iterations: 0, rel_residual: 0.0 });
    }
    let mut r = b.to_vec();
    let mut total = 0;
    let mut rel = 1.0;
    while total < cfg.max_iter {
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= cfg.tol {
            break;
        }
        let m = cfg.restart.min(cfg.max_iter - total);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut w = apply(&v[k])?;
            total += 1;
            // modified Gram-Schmidt with one reorthogonalization pass
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let c = dot(&w, vi);
                    h[i][k] += c;
                    axpy(&mut w, -c, vi);
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let d = h[k][k].hypot(h[k + 1][k]);
            if d == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / d;
            sn[k] = h[k + 1][k] / d;
            h[k][k] = d;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= cfg.tol || wn == 0.0 {
                break;
            }
            v.push(w.iter().map(|x| x / wn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            axpy(&mut x, *yj, &v[j]);
        }
        let ax = apply(&x)?;
        total += 1;
        r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        rel = norm(&r) / bnorm;
        if rel <= cfg.tol || k_used == 0 {
            break;
        }
    }
    Ok(GmresResult { x, iterations: total, rel_residual: rel })
}

#[derive(Debug, Clone, Copy)]
pub struct ArnoldiConfig {
    pub krylov_dim: usize,
    pub max_restarts: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for ArnoldiConfig {
    fn default() -> Self {
        Self { krylov_dim: 40, max_restarts: 30, tol: 1e-10, seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: Complex64,
    /// Real and imaginary parts of the unit eigenvector.
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub residual: f64,
}

/// Leading `nev` eigenpairs (largest modulus) of a real linear operator.
pub fn arnoldi(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    n: usize,
    nev: usize,
    cfg: ArnoldiConfig,
) -> Result<Vec<EigenPair>> {
    let m = cfg.krylov_dim.min(n).max(nev + 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut best: Vec<EigenPair> = Vec::new();
    for _restart in 0..=cfg.max_restarts {
        let s0 = norm(&start);
        if s0 == 0.0 {
            return Err(Error::ArnoldiBreakdown);
        }
        let mut v: Vec<Vec<f64>> = vec![start.iter().map(|x| x / s0).collect()];
        let mut h = DMatrix::<f64>::zeros(m + 1, m);
        let mut dim = m;
        for k in 0..m {
            let mut w = apply(&v[k])?;
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let c = dot(&w, vi);
                    h[(i, k)] += c;
                    axpy(&mut w, -c, vi);
                }
            }
            let wn = norm(&w);
            h[(k + 1, k)] = wn;
            if wn < 1e-14 {
                dim = k + 1;
                break;
            }
            v.push(w.iter().map(|x| x / wn).collect());
        }
        let hm = h.view((0, 0), (dim, dim)).into_owned();
        let beta = h[(dim, dim - 1)];
        let mut vals: Vec<Complex64> = hm.clone().complex_eigenvalues().iter().cloned().collect();
        vals.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap());
        let mut pairs = Vec::new();
        let mut skip_conj = Vec::<Complex64>::new();
        for &lam in vals.iter() {
            if pairs.len() >= nev {
                break;
            }
            if skip_conj.iter().any(|c| (c - lam).norm() < 1e-12 * (1.0 + lam.norm())) {
                continue;
            }
            let y = hessenberg_eigvec(&hm, lam);
            let resid = beta * y[dim - 1].norm();
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            for (j, vj) in v.iter().take(dim).enumerate() {
                axpy(&mut re, y[j].re, vj);
                axpy(&mut im, y[j].im, vj);
            }
            pairs.push(EigenPair { value: lam, re, im, residual: resid });
            if lam.im.abs() > 0.0 {
                skip_conj.push(lam.conj());
            }
        }
        let wanted = pairs.len().min(nev);
        let converged = pairs.iter().take(wanted).all(|p| p.residual <= cfg.tol * p.value.norm().max(1e-300));
        best = pairs;
        if converged || dim < m {
            break;
        }
        // restart from a combination of the wanted Ritz vectors
        start = vec![0.0; n];
        for p in best.iter().take(nev) {
            axpy(&mut start, 1.0, &p.re);
            axpy(&mut start, 1.0, &p.im);
        }
    }
    Ok(best)
}

/// Unit eigenvector of a small Hessenberg matrix by inverse iteration.
fn hessenberg_eigvec(h: &DMatrix<f64>, lam: Complex64) -> DVector<Complex64> {
    let n = h.nrows();
    let scale = h.norm().max(1.0);
    let mut a = h.map(|x| Complex64::new(x, 0.0));
    for i in 0..n {
        a[(i, i)] -= lam + Complex64::new(1e-13 * scale, 0.0);
    }
    let lu = a.lu();
    let mut x = DVector::<Complex64>::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * i as f64, 0.3));
    for _ in 0..3 {
        if let Some(y) = lu.solve(&x) {
            let nrm = y.norm();
            if nrm == 0.0 || !nrm.is_finite() {
                break;
            }
            x = y / Complex64::new(nrm, 0.0);
        }
    }
    // fix the global phase so the largest entry is real
    let (imax, _) = x.iter().enumerate().fold((0, 0.0), |acc, (i, c)| if c.norm() > acc.1 { (i, c.norm()) } else { acc });
    let ph = x[imax] / x[imax].norm();
    x.map(|c| c / ph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matvec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        (a * DVector::from_column_slice(x)).iter().cloned().collect()
    }

    #[test]
    fn gmres_solves_small_system() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0]);
        let b = [1.0, 2.0, 3.0];
        let cfg = GmresConfig { tol: 1e-12, ..Default::default() };
        let r = gmres(|x| Ok(matvec(&a, x)), &b, cfg).unwrap();
        let ax = matvec(&a, &r.x);
        for i in 0..3 {
            assert!((ax[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn arnoldi_finds_dominant_complex_pair() {
        let n = 30;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = 0.5 * (i as f64 + 1.0) / n as f64;
        }
        a[(0, 0)] = 2.0;
        a[(0, 1)] = -1.0;
        a[(1, 0)] = 1.0;
        a[(1, 1)] = 2.0;
        let pairs = arnoldi(|x| Ok(matvec(&a, x)), n, 2, ArnoldiConfig::default()).unwrap();
        assert!((pairs[0].value.re - 2.0).abs() < 1e-9);
        assert!((pairs[0].value.im.abs() - 1.0).abs() < 1e-9);
    }
}
