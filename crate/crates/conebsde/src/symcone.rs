//! Dense symmetric matrices and the positive semidefinite cone.
//!
//! [`SymMat`] is the working type for states, Riccati solutions and model
//! parameters. Symmetry is enforced at construction by averaging, so
//! `x[(i, j)] == x[(j, i)]` holds bit for bit.
//!
//! Eigendecompositions use a cyclic Jacobi sweep with eigenvalues returned
//! in descending order. The result depends only on the input bits, which
//! keeps simulations reproducible.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// General real matrix (Σ, σ(t), coefficient blocks, the block exponential).
pub type GenMat = DMatrix<f64>;

/// Relative tolerance for cone membership, scaled by the Frobenius norm.
pub const DEFAULT_CONE_TOL: f64 = 1e-10;

/// Dense symmetric `d x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMat(GenMat);

impl SymMat {
    /// Symmetrizes `m` by averaging it with its transpose.
    pub fn new(m: GenMat) -> Self {
        assert!(m.is_square(), "SymMat requires a square matrix");
        assert!(m.nrows() >= 1, "SymMat requires dim >= 1");
        let mut m = m;
        let d = m.nrows();
        for i in 0..d {
            for j in (i + 1)..d {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMat(m)
    }

    pub fn zeros(d: usize) -> Self {
        SymMat::new(GenMat::zeros(d, d))
    }

    pub fn identity(d: usize) -> Self {
        SymMat::new(GenMat::identity(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        SymMat::new(GenMat::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 }))
    }

    /// Builds from a row-major slice of length `d * d`.
    pub fn from_row_slice(d: usize, entries: &[f64]) -> Self {
        SymMat::new(GenMat::from_row_slice(d, d, entries))
    }

    /// Outer product `v vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        let d = v.len();
        SymMat::new(GenMat::from_fn(d, d, |i, j| v[i] * v[j]))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_mat(&self) -> &GenMat {
        &self.0
    }

    pub fn into_mat(self) -> GenMat {
        self.0
    }

    /// Frobenius norm `sqrt(Tr(x x))`.
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn scale(&self, c: f64) -> SymMat {
        SymMat(&self.0 * c)
    }

    /// `a x aᵀ`, symmetrized.
    pub fn congruence(&self, a: &GenMat) -> SymMat {
        SymMat::new(a * &self.0 * a.transpose())
    }

    /// Row-major upper triangle including the diagonal.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = Vec::with_capacity(d * (d + 1) / 2);
        for i in 0..d {
            for j in i..d {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Eigenvalues in descending order with matching eigenvector columns.
    pub fn eigen(&self) -> SymEigen {
        let d = self.dim();
        let mut a: Vec<f64> = row_major(&self.0);
        let mut v = vec![0.0; d * d];
        let mut values = vec![0.0; d];
        jacobi_eigen(&mut a, &mut v, &mut values, d);
        SymEigen {
            values,
            vectors: GenMat::from_row_slice(d, d, &v),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigen().values.last().expect("dim >= 1")
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen().values[0]
    }
}

impl Index<(usize, usize)> for SymMat {
    type Output = f64;
    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 + &rhs.0)
    }
}

impl Add for SymMat {
    type Output = SymMat;
    fn add(self, rhs: SymMat) -> SymMat {
        SymMat(self.0 + rhs.0)
    }
}

impl AddAssign<&SymMat> for SymMat {
    fn add_assign(&mut self, rhs: &SymMat) {
        self.0 += &rhs.0;
    }
}

impl Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 - &rhs.0)
    }
}

impl Sub for SymMat {
    type Output = SymMat;
    fn sub(self, rhs: SymMat) -> SymMat {
        SymMat(self.0 - rhs.0)
    }
}

impl Neg for SymMat {
    type Output = SymMat;
    fn neg(self) -> SymMat {
        SymMat(-self.0)
    }
}

impl Mul<f64> for &SymMat {
    type Output = SymMat;
    fn mul(self, c: f64) -> SymMat {
        SymMat(&self.0 * c)
    }
}

impl Mul<f64> for SymMat {
    type Output = SymMat;
    fn mul(self, c: f64) -> SymMat {
        SymMat(self.0 * c)
    }
}

impl Serialize for SymMat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        to_rows(&self.0).serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMat {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        let m = from_rows(&rows).map_err(serde::de::Error::custom)?;
        if !m.is_square() || m.nrows() == 0 {
            return Err(serde::de::Error::custom("symmetric matrix must be square and non-empty"));
        }
        Ok(SymMat::new(m))
    }
}

/// Eigendecomposition `x = V diag(values) Vᵀ`.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub vectors: GenMat,
}

impl SymEigen {
    /// Reassembles `V diag(f(λ)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMat {
        let d = self.values.len();
        let mut out = GenMat::zeros(d, d);
        for (k, &lam) in self.values.iter().enumerate() {
            let fl = f(lam);
            if fl == 0.0 {
                continue;
            }
            let col = self.vectors.column(k);
            for i in 0..d {
                let ci = fl * col[i];
                for j in 0..d {
                    out[(i, j)] += ci * col[j];
                }
            }
        }
        SymMat::new(out)
    }
}

/// Position of a matrix relative to the PSD cone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    PD,
    PSD,
    ND,
    NSD,
    Indefinite,
}

impl Cone {
    pub fn is_psd(self) -> bool {
        matches!(self, Cone::PD | Cone::PSD)
    }
}

/// `Tr(xy)` for symmetric `x`, `y`.
pub fn trace_inner(x: &SymMat, y: &SymMat) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    Ok(x.0.dot(&y.0))
}

/// `Tr(a b)` for general square matrices.
pub fn trace_prod(a: &GenMat, b: &GenMat) -> f64 {
    a.tr_dot(b)
}

/// Classifies `x` by its extreme eigenvalues with absolute tolerance `tol`.
///
/// PD if `λ_min > tol`, ND if `λ_max < -tol`, PSD if `λ_min >= -tol`,
/// NSD if `λ_max <= tol`, Indefinite otherwise. The zero matrix is PSD.
pub fn cone_classify(x: &SymMat, tol: f64) -> Cone {
    let e = x.eigen();
    let lmax = e.values[0];
    let lmin = *e.values.last().expect("dim >= 1");
    if lmin > tol {
        Cone::PD
    } else if lmax < -tol {
        Cone::ND
    } else if lmin >= -tol {
        Cone::PSD
    } else if lmax <= tol {
        Cone::NSD
    } else {
        Cone::Indefinite
    }
}

/// [`cone_classify`] with the default tolerance `1e-10 * ‖x‖_F`.
pub fn cone_classify_default(x: &SymMat) -> Cone {
    cone_classify(x, DEFAULT_CONE_TOL * x.norm())
}

/// Symmetric PSD square root; eigenvalues within tolerance of zero are clamped.
pub fn psd_sqrt(x: &SymMat) -> Result<SymMat> {
    let e = x.eigen();
    let lmin = *e.values.last().expect("dim >= 1");
    if lmin < -DEFAULT_CONE_TOL * x.norm() {
        return Err(Error::NotPsd {
            min_eigenvalue: lmin,
        });
    }
    Ok(e.map(|l| l.max(0.0).sqrt()))
}

/// Nearest PSD matrix in Frobenius norm: clamp negative eigenvalues to zero.
///
/// Returns `x` unchanged when its smallest eigenvalue is non-negative.
pub fn psd_project(x: &SymMat) -> SymMat {
    let e = x.eigen();
    if *e.values.last().expect("dim >= 1") >= 0.0 {
        return x.clone();
    }
    e.map(|l| l.max(0.0))
}

/// Symmetric part `(m + mᵀ) / 2`.
pub fn sym(m: &GenMat) -> SymMat {
    SymMat::new(m.clone())
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &GenMat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn to_rows(m: &GenMat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> std::result::Result<GenMat, String> {
    let r = rows.len();
    if r == 0 {
        return Err("matrix has no rows".into());
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err("matrix rows have unequal lengths".into());
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(GenMat::from_row_slice(r, c, &flat))
}

fn row_major(m: &GenMat) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Cyclic Jacobi eigensolver on a row-major symmetric `d x d` buffer.
///
/// On return `values` holds the eigenvalues in descending order and the
/// columns of the row-major `vecs` the matching unit eigenvectors. The
/// contents of `a` are destroyed.
pub fn jacobi_eigen(a: &mut [f64], vecs: &mut [f64], values: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..d {
            vecs[i * d + j] = if i == j { 1.0 } else { 0.0 };
        }
    }
    let scale: f64 = a.iter().map(|v| v * v).sum::<f64>();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off <= 1e-36 * scale || off == 0.0 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                a[p * d + q] = 0.0;
                a[q * d + p] = 0.0;
                for k in 0..d {
                    let vkp = vecs[k * d + p];
                    let vkq = vecs[k * d + q];
                    vecs[k * d + p] = c * vkp - s * vkq;
                    vecs[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    // Selection sort keeps ties in index order.
    for i in 0..d {
        values[i] = a[i * d + i];
    }
    for i in 0..d {
        let mut best = i;
        for j in (i + 1)..d {
            if values[j] > values[best] {
                best = j;
            }
        }
        if best != i {
            values.swap(i, best);
            for k in 0..d {
                vecs.swap(k * d + i, k * d + best);
            }
        }
    }
}

// Scaling-and-squaring thresholds θ_m for the 1-norm and Padé numerator
// coefficients (Higham 2005, double precision).
const THETA: [(usize, f64); 5] = [
    (3, 1.495_585_217_958_292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504_178_996_162_932e-1),
    (9, 2.097_847_961_257_068),
    (13, 5.371_920_351_148_152),
];

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &GenMat) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé approximant.
///
/// The degree m ∈ {3, 5, 7, 9, 13} is the smallest whose threshold θ_m bounds
/// `‖x‖_1`; above θ_13 the matrix is scaled by `2^-s` with
/// `s = ceil(log2(‖x‖_1 / θ_13))` and the result squared `s` times.
pub fn mat_exp(x: &GenMat) -> Result<GenMat> {
    if !x.is_square() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            found: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mat_exp input".into()));
    }
    let n = x.nrows();
    let norm = one_norm(x);
    let ident = GenMat::identity(n, n);
    for &(m, theta) in &THETA[..4] {
        if norm <= theta {
            let (u, v) = match m {
                3 => pade_low(x, &PADE3),
                5 => pade_low(x, &PADE5),
                7 => pade_low(x, &PADE7),
                _ => pade_low(x, &PADE9),
            };
            return pade_solve(&u, &v);
        }
    }
    let theta13 = THETA[4].1;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let xs = x * 2f64.powi(-s);
    let (u, v) = pade13(&xs, &ident);
    let mut r = pade_solve(&u, &v)?;
    for _ in 0..s {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mat_exp result".into()));
    }
    Ok(r)
}

fn pade_low(x: &GenMat, b: &[f64]) -> (GenMat, GenMat) {
    let n = x.nrows();
    let x2 = x * x;
    let mut power = GenMat::identity(n, n);
    let mut u = GenMat::zeros(n, n);
    let mut v = GenMat::zeros(n, n);
    let m = b.len() - 1;
    let mut k = 0;
    while k <= m {
        v += &power * b[k];
        if k < m {
            u += &power * b[k + 1];
        }
        power = &power * &x2;
        k += 2;
    }
    (x * u, v)
}

fn pade13(x: &GenMat, ident: &GenMat) -> (GenMat, GenMat) {
    let b = &PADE13;
    let x2 = x * x;
    let x4 = &x2 * &x2;
    let x6 = &x2 * &x4;
    let u_inner = &x6 * (&x6 * b[13] + &x4 * b[11] + &x2 * b[9])
        + &x6 * b[7]
        + &x4 * b[5]
        + &x2 * b[3]
        + ident * b[1];
    let u = x * u_inner;
    let v = &x6 * (&x6 * b[12] + &x4 * b[10] + &x2 * b[8])
        + &x6 * b[6]
        + &x4 * b[4]
        + &x2 * b[2]
        + ident * b[0];
    (u, v)
}

fn pade_solve(u: &GenMat, v: &GenMat) -> Result<GenMat> {
    let p = v + u;
    let q = v - u;
    let lu = q.lu();
    let r = lu
        .solve(&p)
        .ok_or_else(|| Error::NonFinite("singular Padé denominator".into()))?;
    Ok(r)
}
