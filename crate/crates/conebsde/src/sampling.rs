//! Random matrix helpers shared by validators, probes and tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::symcone::{GenMat, SymMat};

pub fn gaussian_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> GenMat {
    GenMat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with sign fix).
pub fn random_orthogonal<R: Rng>(rng: &mut R, d: usize) -> GenMat {
    let g = gaussian_mat(rng, d, d);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

/// `Q diag(values) Qᵀ`.
pub fn with_spectrum(q: &GenMat, values: &[f64]) -> SymMat {
    let d = values.len();
    let mut out = GenMat::zeros(d, d);
    for (k, &v) in values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let col = q.column(k);
        out += (col * col.transpose()) * v;
    }
    SymMat::new(out)
}

/// PSD matrix with eigenvalues uniform in `[lo, hi]`.
pub fn random_psd<R: Rng>(rng: &mut R, d: usize, lo: f64, hi: f64) -> SymMat {
    let q = random_orthogonal(rng, d);
    let vals: Vec<f64> = (0..d).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    with_spectrum(&q, &vals)
}

#[cfg(test)]
pub fn random_sym<R: Rng>(rng: &mut R, d: usize, scale: f64) -> SymMat {
    SymMat::new(gaussian_mat(rng, d, d) * scale)
}

/// A boundary pair `(x, u)` of PSD matrices with `x u = 0`: `x` has rank `r < d`
/// and `u` lives on the orthogonal complement of its range. Both have unit
/// Frobenius norm unless they are zero.
pub fn boundary_pair<R: Rng>(rng: &mut R, d: usize) -> (SymMat, SymMat) {
    let q = random_orthogonal(rng, d);
    let rank = if d == 1 { 0 } else { rng.random_range(1..d) };
    let mut xv = vec![0.0; d];
    let mut uv = vec![0.0; d];
    for k in 0..d {
        let v = 0.05 + rng.random::<f64>();
        if k < rank {
            xv[k] = v;
        } else {
            uv[k] = v;
        }
    }
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|a| *a /= n);
        }
    };
    normalize(&mut xv);
    normalize(&mut uv);
    (with_spectrum(&q, &xv), with_spectrum(&q, &uv))
}
