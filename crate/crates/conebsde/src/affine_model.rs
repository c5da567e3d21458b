//! Admissible parameter sets for affine processes on the PSD cone.
//!
//! A parameter set `(α, b, B, m, μ)` describes the characteristics of an
//! affine process `X` on `S_d^+`: diffusion `α`, constant drift `b`, linear
//! drift `B`, state-independent jump measure `m` and the matrix measure `μ`
//! that generates the state-dependent jump kernel
//! `M(x, dξ) = Tr(x μ(dξ)) / (‖ξ‖² ∧ 1)`.
//!
//! Jump measures are finite lists of atoms, so every jump integral is a
//! weighted sum. The truncation function is `χ(ξ) = ξ 1{‖ξ‖ ≤ r}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling;
use crate::symcone::{cone_classify_default, psd_sqrt, trace_inner, trace_prod, GenMat, SymMat};

/// Atom `weight · δ_ξ` of the constant jump measure `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstantAtom {
    pub xi: SymMat,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpAtomsConstant {
    pub atoms: Vec<ConstantAtom>,
}

impl JumpAtomsConstant {
    pub fn new(atoms: Vec<ConstantAtom>) -> Self {
        JumpAtomsConstant { atoms }
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Total jump intensity `m(S_d^+)`.
    pub fn total_weight(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

/// Atom `U · δ_ξ` of the matrix-valued measure `μ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearAtom {
    pub xi: SymMat,
    pub u: SymMat,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JumpAtomsLinear {
    pub atoms: Vec<LinearAtom>,
}

impl JumpAtomsLinear {
    pub fn new(atoms: Vec<LinearAtom>) -> Self {
        JumpAtomsLinear { atoms }
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Linear drift `B: S_d -> S_d`.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearDrift {
    /// `B(x) = H x + x Hᵀ`.
    HForm(GenMat),
    /// `B(x) = Σ_ij β^{ij} x_ij` with `β^{ij} = β^{ji}`.
    GeneralForm(Vec<Vec<SymMat>>),
}

impl LinearDrift {
    pub fn zero(d: usize) -> Self {
        LinearDrift::HForm(GenMat::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        match self {
            LinearDrift::HForm(h) => h.nrows(),
            LinearDrift::GeneralForm(b) => b.len(),
        }
    }

    pub fn h(&self) -> Option<&GenMat> {
        match self {
            LinearDrift::HForm(h) => Some(h),
            LinearDrift::GeneralForm(_) => None,
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            LinearDrift::HForm(h) => {
                if !h.is_square() {
                    return Err(Error::InvalidParams("drift matrix H must be square".into()));
                }
            }
            LinearDrift::GeneralForm(betas) => {
                let d = betas.len();
                for (i, row) in betas.iter().enumerate() {
                    if row.len() != d {
                        return Err(Error::InvalidParams("β array must be d x d".into()));
                    }
                    for (j, beta) in row.iter().enumerate() {
                        if beta.dim() != d {
                            return Err(Error::InvalidParams(format!("β^({i},{j}) has wrong dimension")));
                        }
                        if betas[j][i] != *beta {
                            return Err(Error::InvalidParams(format!("β^({i},{j}) != β^({j},{i})")));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Matrix of the map `x ↦ B(sym(x))` acting on column-major `vec(x)`.
    pub fn vec_operator(&self) -> GenMat {
        let d = self.dim();
        let mut op = GenMat::zeros(d * d, d * d);
        for l in 0..d {
            for k in 0..d {
                let mut e = GenMat::zeros(d, d);
                e[(k, l)] += 0.5;
                e[(l, k)] += 0.5;
                let img = apply_b(self, &SymMat::new(e));
                let col = l * d + k;
                for j in 0..d {
                    for i in 0..d {
                        op[(j * d + i, col)] = img[(i, j)];
                    }
                }
            }
        }
        op
    }
}

/// `χ(ξ) = ξ` if `‖ξ‖ ≤ r` (closed ball), else `0`.
pub fn truncation(xi: &SymMat, trunc_radius: f64) -> SymMat {
    if xi.norm() <= trunc_radius {
        xi.clone()
    } else {
        SymMat::zeros(xi.dim())
    }
}

/// `B(x)`.
pub fn apply_b(drift: &LinearDrift, x: &SymMat) -> SymMat {
    match drift {
        LinearDrift::HForm(h) => {
            let hx = h * x.as_mat();
            SymMat::new(&hx + hx.transpose())
        }
        LinearDrift::GeneralForm(betas) => {
            let d = betas.len();
            let mut out = GenMat::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    out += betas[i][j].as_mat() * x[(i, j)];
                }
            }
            SymMat::new(out)
        }
    }
}

/// Adjoint `B*` with `Tr(B(x) u) = Tr(x B*(u))`.
pub fn apply_bstar(drift: &LinearDrift, u: &SymMat) -> SymMat {
    match drift {
        LinearDrift::HForm(h) => {
            let uh = u.as_mat() * h;
            SymMat::new(&uh + uh.transpose())
        }
        LinearDrift::GeneralForm(betas) => {
            let d = betas.len();
            let m = GenMat::from_fn(d, d, |i, j| trace_prod(betas[i][j].as_mat(), u.as_mat()));
            SymMat::new(m)
        }
    }
}

/// `‖ξ‖² ∧ 1`.
pub fn jump_normalizer(xi: &SymMat) -> f64 {
    let n = xi.norm();
    (n * n).min(1.0)
}

/// Weight of atom `k` under the kernel: `Tr(x U_k) / (‖ξ_k‖² ∧ 1)`.
pub fn kernel_m_weight(mu: &JumpAtomsLinear, x: &SymMat, atom_index: usize) -> f64 {
    let atom = &mu.atoms[atom_index];
    trace_prod(x.as_mat(), atom.u.as_mat()) / jump_normalizer(&atom.xi)
}

/// Admissible parameter set `(α, b, B, m, μ)` with truncation radius.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams {
    pub alpha: SymMat,
    pub b: SymMat,
    pub drift: LinearDrift,
    pub m: JumpAtomsConstant,
    pub mu: JumpAtomsLinear,
    pub trunc_radius: f64,
    sigma_factor: Option<GenMat>,
}

/// Outcome of the admissibility checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub alpha_psd: bool,
    /// Smallest eigenvalue of `b - (d-1) α`.
    pub b_margin: f64,
    pub b_condition: bool,
    /// Minimum over boundary samples of the inward-pointing functional.
    pub inward_min: f64,
    pub samples: usize,
    pub tol: f64,
    /// `Σ ‖ξ‖ (weight + ‖U‖)` over atoms outside the unit ball.
    pub integrability_sum: f64,
    pub admissible: bool,
}

pub const ADMISSIBILITY_SAMPLES: usize = 200;
pub const ADMISSIBILITY_TOL: f64 = 1e-9;

impl AffineParams {
    /// Structural validation: dimensions, symmetric β, nonzero PSD atoms,
    /// finite positive weights. Admissibility is checked separately.
    pub fn new(
        alpha: SymMat,
        b: SymMat,
        drift: LinearDrift,
        m: JumpAtomsConstant,
        mu: JumpAtomsLinear,
    ) -> Result<Self> {
        let d = alpha.dim();
        let dim_err = |what: &str| Error::InvalidParams(format!("{what} has the wrong dimension"));
        if b.dim() != d {
            return Err(dim_err("b"));
        }
        drift.check()?;
        if drift.dim() != d {
            return Err(dim_err("drift"));
        }
        for atom in &m.atoms {
            if atom.xi.dim() != d {
                return Err(dim_err("m atom"));
            }
            if !(atom.weight.is_finite() && atom.weight > 0.0) {
                return Err(Error::InvalidParams("m atom weights must be finite and positive".into()));
            }
            check_atom(&atom.xi)?;
        }
        for atom in &mu.atoms {
            if atom.xi.dim() != d || atom.u.dim() != d {
                return Err(dim_err("μ atom"));
            }
            check_atom(&atom.xi)?;
            if !cone_classify_default(&atom.u).is_psd() {
                return Err(Error::InvalidParams("μ atom matrices U must be PSD".into()));
            }
        }
        Ok(AffineParams {
            alpha,
            b,
            drift,
            m,
            mu,
            trunc_radius: 1.0,
            sigma_factor: None,
        })
    }

    /// Wishart set `(ΣᵀΣ, k ΣᵀΣ, Hx + xHᵀ, 0, 0)` with `Σ` kept as the factor.
    pub fn wishart(sigma: &GenMat, k: f64, h: GenMat) -> Result<Self> {
        let alpha = SymMat::new(sigma.transpose() * sigma);
        let b = alpha.scale(k);
        let d = alpha.dim();
        AffineParams::new(
            alpha,
            b,
            LinearDrift::HForm(h),
            JumpAtomsConstant::default(),
            JumpAtomsLinear::default(),
        )?
        .with_sigma_factor(sigma.clone())
        .inspect(|p| {
            debug_assert_eq!(p.dim(), d);
        })
    }

    pub fn with_trunc_radius(mut self, r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidParams("truncation radius must be positive".into()));
        }
        self.trunc_radius = r;
        Ok(self)
    }

    /// Uses `sigma` as the diffusion factor. Requires `ΣᵀΣ = α`.
    pub fn with_sigma_factor(mut self, sigma: GenMat) -> Result<Self> {
        let d = self.dim();
        if sigma.shape() != (d, d) {
            return Err(Error::InvalidParams("Σ must be d x d".into()));
        }
        let gap = (sigma.transpose() * &sigma - self.alpha.as_mat()).norm();
        if gap > 1e-12 * (1.0 + self.alpha.norm()) {
            return Err(Error::InvalidParams(format!("ΣᵀΣ differs from α by {gap:e}")));
        }
        self.sigma_factor = Some(sigma);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.alpha.dim()
    }

    /// Diffusion factor `Σ` with `ΣᵀΣ = α`: the user-supplied factor if any,
    /// otherwise the symmetric square root of `α`.
    pub fn sigma(&self) -> GenMat {
        match &self.sigma_factor {
            Some(s) => s.clone(),
            None => psd_sqrt(&self.alpha)
                .expect("α is PSD for admissible parameters")
                .into_mat(),
        }
    }

    pub fn has_jumps(&self) -> bool {
        !self.m.is_empty() || !self.mu.is_empty()
    }

    /// Checks `α ⪰ 0`, `b ⪰ (d-1)α` and the inward-pointing drift condition
    /// on sampled boundary pairs.
    pub fn admissibility(&self) -> AdmissibilityReport {
        let d = self.dim();
        let alpha_psd = cone_classify_default(&self.alpha).is_psd();
        let gap = &self.b - &self.alpha.scale(d as f64 - 1.0);
        let b_margin = gap.min_eigenvalue();
        let b_condition = cone_classify_default(&gap).is_psd();
        let mut rng = ChaCha8Rng::seed_from_u64(0x00AD_1551);
        let mut inward_min = f64::INFINITY;
        for _ in 0..ADMISSIBILITY_SAMPLES {
            let (x, u) = sampling::boundary_pair(&mut rng, d);
            let v = self.inward_functional(&x, &u);
            inward_min = inward_min.min(v);
        }
        let mut integrability_sum = 0.0;
        for a in &self.m.atoms {
            if a.xi.norm() > 1.0 {
                integrability_sum += a.xi.norm() * a.weight;
            }
        }
        for a in &self.mu.atoms {
            if a.xi.norm() > 1.0 {
                integrability_sum += a.xi.norm() * a.u.norm();
            }
        }
        let admissible = alpha_psd && b_condition && inward_min >= -ADMISSIBILITY_TOL;
        AdmissibilityReport {
            alpha_psd,
            b_margin,
            b_condition,
            inward_min,
            samples: ADMISSIBILITY_SAMPLES,
            tol: ADMISSIBILITY_TOL,
            integrability_sum,
            admissible,
        }
    }

    /// `Tr(B(x)u) - Σ_μ Tr(χ(ξ)u) Tr(xU) / (‖ξ‖² ∧ 1)`.
    pub fn inward_functional(&self, x: &SymMat, u: &SymMat) -> f64 {
        let mut v = trace_prod(apply_b(&self.drift, x).as_mat(), u.as_mat());
        for (k, atom) in self.mu.atoms.iter().enumerate() {
            let chi = truncation(&atom.xi, self.trunc_radius);
            v -= trace_prod(chi.as_mat(), u.as_mat()) * kernel_m_weight(&self.mu, x, k);
        }
        v
    }

    /// Admissibility as a hard requirement.
    pub fn require_admissible(&self) -> Result<()> {
        let r = self.admissibility();
        if r.admissible {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "parameter set is not admissible (α PSD: {}, b margin {:e}, inward min {:e})",
                r.alpha_psd, r.b_margin, r.inward_min
            )))
        }
    }
}

fn check_atom(xi: &SymMat) -> Result<()> {
    if !(xi.norm() > 0.0) || !xi.is_finite() {
        return Err(Error::InvalidParams("jump atoms must be finite and nonzero".into()));
    }
    if !cone_classify_default(xi).is_psd() {
        return Err(Error::InvalidParams("jump atoms must be PSD".into()));
    }
    Ok(())
}

/// `ℱ(u) = Tr(bu) - Σ_m w (e^{-Tr(uξ)} - 1)`.
pub fn transform_rhs_f(params: &AffineParams, u: &SymMat) -> f64 {
    let mut v = trace_prod(params.b.as_mat(), u.as_mat());
    for atom in &params.m.atoms {
        let k = trace_prod(u.as_mat(), atom.xi.as_mat());
        v -= atom.weight * (-k).exp_m1();
    }
    v
}

/// `ℛ(u) = -2uαu + B*(u) - Σ_μ U (e^{-Tr(uξ)} - 1 + Tr(χ(ξ)u)) / (‖ξ‖² ∧ 1)`.
pub fn transform_rhs_r(params: &AffineParams, u: &SymMat) -> SymMat {
    let um = u.as_mat();
    let mut out = (um * params.alpha.as_mat() * um) * -2.0;
    out += apply_bstar(&params.drift, u).as_mat();
    for atom in &params.mu.atoms {
        let k = trace_prod(um, atom.xi.as_mat());
        let chi = truncation(&atom.xi, params.trunc_radius);
        let integrand = (-k).exp_m1() + trace_prod(chi.as_mat(), um);
        out -= atom.u.as_mat() * (integrand / jump_normalizer(&atom.xi));
    }
    SymMat::new(out)
}

/// Solution `(φ(t,u), ψ(t,u))` of the transform ODE.
#[derive(Clone, Debug)]
pub struct TransformSolution {
    pub phi: f64,
    pub psi: SymMat,
    /// Smallest eigenvalue of ψ seen on the grid (PSD diagnostic).
    pub min_eigenvalue: f64,
}

impl TransformSolution {
    /// `E[exp(-Tr(u X_t)) | X_0 = x] = exp(-φ - Tr(ψ x))`.
    pub fn laplace(&self, x: &SymMat) -> f64 {
        (-self.phi - trace_prod(self.psi.as_mat(), x.as_mat())).exp()
    }
}

pub const TRANSFORM_BLOWUP_NORM: f64 = 1e8;

/// RK4 solution of `∂ψ/∂t = ℛ(ψ)`, `ψ(0) = u0`, `∂φ/∂t = ℱ(ψ)`, `φ(0) = 0`.
pub fn solve_transform(params: &AffineParams, u0: &SymMat, t: f64, steps: usize) -> Result<TransformSolution> {
    if !(t >= 0.0) {
        return Err(Error::InvalidParams("transform horizon must be non-negative".into()));
    }
    if u0.dim() != params.dim() {
        return Err(Error::Dimension {
            expected: params.dim(),
            found: u0.dim(),
        });
    }
    let steps = steps.max(1);
    let h = t / steps as f64;
    let mut psi = u0.clone();
    let mut phi = 0.0;
    let mut min_eig = psi.min_eigenvalue();
    if t == 0.0 {
        return Ok(TransformSolution {
            phi,
            psi,
            min_eigenvalue: min_eig,
        });
    }
    for step in 0..steps {
        let k1 = transform_rhs_r(params, &psi);
        let f1 = transform_rhs_f(params, &psi);
        let p2 = &psi + &k1.scale(0.5 * h);
        let k2 = transform_rhs_r(params, &p2);
        let f2 = transform_rhs_f(params, &p2);
        let p3 = &psi + &k2.scale(0.5 * h);
        let k3 = transform_rhs_r(params, &p3);
        let f3 = transform_rhs_f(params, &p3);
        let p4 = &psi + &k3.scale(h);
        let k4 = transform_rhs_r(params, &p4);
        let f4 = transform_rhs_f(params, &p4);
        let incr = (k1 + k2.scale(2.0) + k3.scale(2.0) + k4).scale(h / 6.0);
        psi = SymMat::new(psi.as_mat() + incr.as_mat());
        phi += h / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4);
        let norm = psi.norm();
        if !norm.is_finite() || norm > TRANSFORM_BLOWUP_NORM {
            return Err(Error::BlowUp {
                t: (step + 1) as f64 * h,
                norm,
            });
        }
        min_eig = min_eig.min(psi.min_eigenvalue());
    }
    Ok(TransformSolution {
        phi,
        psi,
        min_eigenvalue: min_eig,
    })
}

/// Checks `Tr(B(x)u) = Tr(x B*(u))` for the given pair.
pub fn adjoint_gap(drift: &LinearDrift, x: &SymMat, u: &SymMat) -> f64 {
    let lhs = trace_inner(&apply_b(drift, x), u).expect("dims agree");
    let rhs = trace_inner(x, &apply_bstar(drift, u)).expect("dims agree");
    (lhs - rhs).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_mat, random_psd, random_sym};
    use crate::symcone::mat_exp;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_general_form(r: &mut ChaCha8Rng, d: usize) -> LinearDrift {
        let mut betas = vec![vec![SymMat::zeros(d); d]; d];
        for i in 0..d {
            for j in i..d {
                let b = random_sym(r, d, 1.0);
                betas[i][j] = b.clone();
                betas[j][i] = b;
            }
        }
        LinearDrift::GeneralForm(betas)
    }

    #[test]
    fn truncation_examples() {
        let xi = SymMat::from_diagonal(&[0.5, 0.0]);
        assert_eq!(truncation(&xi, 1.0), xi);
        let big = SymMat::from_diagonal(&[2.0, 0.0]);
        assert_eq!(truncation(&big, 1.0), SymMat::zeros(2));
        let edge = SymMat::from_diagonal(&[1.0, 0.0]);
        assert_eq!(truncation(&edge, 1.0), edge);
    }

    #[test]
    fn apply_b_examples() {
        let mut r = rng(1);
        let x = random_sym(&mut r, 3, 1.0);
        let two_x = apply_b(&LinearDrift::HForm(GenMat::identity(3, 3)), &x);
        assert!((two_x.as_mat() - x.as_mat() * 2.0).norm() < 1e-15);
        assert_eq!(apply_b(&LinearDrift::zero(3), &x), SymMat::zeros(3));

        let gf = random_general_form(&mut r, 3);
        let LinearDrift::GeneralForm(betas) = &gf else { unreachable!() };
        let mut naive = GenMat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                for p in 0..3 {
                    for q in 0..3 {
                        naive[(p, q)] += betas[i][j][(p, q)] * x[(i, j)];
                    }
                }
            }
        }
        assert!((apply_b(&gf, &x).as_mat() - naive).norm() < 1e-13);
    }

    #[test]
    fn bstar_examples() {
        let u = SymMat::from_row_slice(2, &[1.0, 0.3, 0.3, 2.0]);
        assert_eq!(apply_bstar(&LinearDrift::zero(2), &u), SymMat::zeros(2));
        let mut betas = vec![vec![SymMat::zeros(2); 2]; 2];
        betas[0][0] = SymMat::identity(2);
        let out = apply_bstar(&LinearDrift::GeneralForm(betas), &u);
        assert_eq!(out, SymMat::from_diagonal(&[3.0, 0.0]));
    }

    #[test]
    fn adjoint_identity_both_forms() {
        let mut r = rng(2);
        for d in 1..4 {
            for _ in 0..100 {
                let x = random_sym(&mut r, d, 1.0);
                let u = random_sym(&mut r, d, 1.0);
                let hf = LinearDrift::HForm(gaussian_mat(&mut r, d, d));
                assert!(adjoint_gap(&hf, &x, &u) <= 1e-12);
                let gf = random_general_form(&mut r, d);
                assert!(adjoint_gap(&gf, &x, &u) <= 1e-12);
            }
        }
    }

    #[test]
    fn vec_operator_matches_apply() {
        let mut r = rng(3);
        let d = 3;
        for drift in [LinearDrift::HForm(gaussian_mat(&mut r, d, d)), random_general_form(&mut r, d)] {
            let op = drift.vec_operator();
            let x = random_sym(&mut r, d, 1.0);
            let vx = nalgebra::DVector::from_column_slice(x.as_mat().as_slice());
            let img = &op * vx;
            let direct = apply_b(&drift, &x);
            assert!((img - nalgebra::DVector::from_column_slice(direct.as_mat().as_slice())).norm() < 1e-13);
        }
    }

    #[test]
    fn kernel_weight_examples() {
        let mu = JumpAtomsLinear::new(vec![LinearAtom {
            xi: SymMat::from_diagonal(&[2.0, 0.0, 0.0]),
            u: SymMat::identity(3),
        }]);
        assert_eq!(kernel_m_weight(&mu, &SymMat::zeros(3), 0), 0.0);
        assert_eq!(kernel_m_weight(&mu, &SymMat::identity(3), 0), 3.0);

        let mut r = rng(4);
        let xi = random_psd(&mut r, 3, 0.01, 0.2);
        let u = random_psd(&mut r, 3, 0.0, 1.0);
        let x = random_psd(&mut r, 3, 0.0, 2.0);
        let mu = JumpAtomsLinear::new(vec![LinearAtom { xi: xi.clone(), u: u.clone() }]);
        let mut tr = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                tr += x[(i, j)] * u[(j, i)];
            }
        }
        let nrm2: f64 = xi.as_mat().iter().map(|v| v * v).sum();
        assert!((kernel_m_weight(&mu, &x, 0) - tr / nrm2.min(1.0)).abs() < 1e-14);
    }

    fn jump_params(r: &mut ChaCha8Rng) -> AffineParams {
        let d = 2;
        let sigma = gaussian_mat(r, d, d) * 0.3;
        let alpha = SymMat::new(sigma.transpose() * &sigma);
        let m = JumpAtomsConstant::new(vec![
            ConstantAtom { xi: random_psd(r, d, 0.1, 0.4), weight: 0.7 },
            ConstantAtom { xi: random_psd(r, d, 0.8, 1.5), weight: 0.2 },
        ]);
        let mu = JumpAtomsLinear::new(vec![
            LinearAtom { xi: random_psd(r, d, 0.1, 0.3), u: random_psd(r, d, 0.0, 0.5) },
            LinearAtom { xi: random_psd(r, d, 1.0, 2.0), u: random_psd(r, d, 0.0, 0.5) },
        ]);
        AffineParams::new(alpha.clone(), alpha.scale(3.0), LinearDrift::HForm(gaussian_mat(r, d, d) * 0.2), m, mu)
            .unwrap()
    }

    #[test]
    fn transform_rhs_at_zero_vanishes() {
        let mut r = rng(5);
        let p = jump_params(&mut r);
        assert_eq!(transform_rhs_f(&p, &SymMat::zeros(2)), 0.0);
        assert_eq!(transform_rhs_r(&p, &SymMat::zeros(2)), SymMat::zeros(2));
    }

    #[test]
    fn transform_rhs_matches_direct_sum() {
        let mut r = rng(6);
        let p = jump_params(&mut r);
        let u = random_psd(&mut r, 2, 0.0, 1.0);
        let mut f = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                f += p.b[(i, j)] * u[(i, j)];
            }
        }
        for a in &p.m.atoms {
            let k: f64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| u[(i, j)] * a.xi[(i, j)]).sum();
            f -= a.weight * ((-k).exp() - 1.0);
        }
        assert!((transform_rhs_f(&p, &u) - f).abs() < 1e-14);

        let um = u.as_mat();
        let h = p.drift.h().unwrap();
        let mut rr = -(um * p.alpha.as_mat() * um) * 2.0 + h.transpose() * um + um * h;
        for a in &p.mu.atoms {
            let k: f64 = um.component_mul(a.xi.as_mat()).sum();
            let nrm = a.xi.as_mat().norm_squared().min(1.0);
            let chi_term = if a.xi.norm() <= 1.0 { k } else { 0.0 };
            rr -= a.u.as_mat() * (((-k).exp() - 1.0 + chi_term) / nrm);
        }
        let ours = transform_rhs_r(&p, &u);
        assert!((ours.as_mat() - rr).norm() < 1e-13);
    }

    #[test]
    fn transform_rhs_r_is_symmetric_on_psd_samples() {
        let mut r = rng(7);
        let p = jump_params(&mut r);
        for _ in 0..50 {
            let u = random_psd(&mut r, 2, 0.0, 2.0);
            let out = transform_rhs_r(&p, &u);
            assert!(crate::symcone::asymmetry(out.as_mat()) <= 1e-14);
        }
    }

    #[test]
    fn solve_transform_initial_condition_and_fixed_point() {
        let mut r = rng(8);
        let p = jump_params(&mut r);
        let u0 = random_psd(&mut r, 2, 0.1, 1.0);
        let s = solve_transform(&p, &u0, 0.0, 10).unwrap();
        assert_eq!(s.phi, 0.0);
        assert_eq!(s.psi, u0);
        for t in [0.3, 1.0, 2.5] {
            let z = solve_transform(&p, &SymMat::zeros(2), t, 50).unwrap();
            assert_eq!(z.phi, 0.0);
            assert_eq!(z.psi, SymMat::zeros(2));
        }
    }

    #[test]
    fn pure_drift_transform_matches_conjugation() {
        let mut r = rng(9);
        let d = 3;
        let h = gaussian_mat(&mut r, d, d) * 0.5;
        let b = random_psd(&mut r, d, 0.0, 1.0);
        let p = AffineParams::new(
            SymMat::zeros(d),
            b.clone(),
            LinearDrift::HForm(h.clone()),
            JumpAtomsConstant::default(),
            JumpAtomsLinear::default(),
        )
        .unwrap();
        let u0 = random_psd(&mut r, d, 0.1, 1.0);
        let t = 0.8;
        let s = solve_transform(&p, &u0, t, 400).unwrap();
        let e = mat_exp(&(h.clone() * t)).unwrap();
        let psi = e.transpose() * u0.as_mat() * &e;
        assert!((s.psi.as_mat() - &psi).norm() < 1e-11);
        // φ(t) = ∫ Tr(b e^{sHᵀ} u0 e^{sH}) ds by fine Simpson.
        let n = 2000;
        let mut acc = 0.0;
        for k in 0..=n {
            let sk = t * k as f64 / n as f64;
            let ek = mat_exp(&(h.clone() * sk)).unwrap();
            let val = trace_prod(b.as_mat(), &(ek.transpose() * u0.as_mat() * &ek));
            let wgt = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += wgt * val;
        }
        acc *= t / n as f64 / 3.0;
        assert!((s.phi - acc).abs() < 1e-11);
    }

    #[test]
    fn transform_blowup_is_reported() {
        // ψ' = -2ψαψ with ψ(0) negative definite explodes at t = 1/(2|u|α).
        let p = AffineParams::new(
            SymMat::identity(1),
            SymMat::identity(1),
            LinearDrift::zero(1),
            JumpAtomsConstant::default(),
            JumpAtomsLinear::default(),
        )
        .unwrap();
        let err = solve_transform(&p, &SymMat::from_diagonal(&[-1.0]), 2.0, 2000).unwrap_err();
        match err {
            Error::BlowUp { t, .. } => assert!(t > 0.45 && t < 0.55),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wishart_admissibility() {
        let mut r = rng(10);
        for d in 1..4 {
            let sigma = gaussian_mat(&mut r, d, d);
            let h = gaussian_mat(&mut r, d, d);
            let good = AffineParams::wishart(&sigma, (d as f64 - 1.0).max(0.0), h.clone()).unwrap();
            assert!(good.admissibility().admissible, "d = {d}");
            let good2 = AffineParams::wishart(&sigma, d as f64 + 1.0, h.clone()).unwrap();
            assert!(good2.admissibility().admissible);
            if d > 1 {
                let bad = AffineParams::wishart(&sigma, d as f64 - 1.5, h).unwrap();
                let rep = bad.admissibility();
                assert!(!rep.b_condition && !rep.admissible);
            }
        }
    }

    #[test]
    fn inward_condition_detects_outward_jump_compensation() {
        // A small μ atom (χ(ξ) = ξ) with HForm drift violates the inward condition.
        let d = 2;
        let mu = JumpAtomsLinear::new(vec![LinearAtom {
            xi: SymMat::from_diagonal(&[0.3, 0.3]),
            u: SymMat::identity(d),
        }]);
        let p = AffineParams::new(
            SymMat::zeros(d),
            SymMat::identity(d),
            LinearDrift::zero(d),
            JumpAtomsConstant::default(),
            mu.clone(),
        )
        .unwrap();
        assert!(p.admissibility().inward_min < -1e-3);
        // With a large atom the truncated part vanishes and the set is admissible.
        let big = JumpAtomsLinear::new(vec![LinearAtom {
            xi: SymMat::from_diagonal(&[1.5, 1.5]),
            u: SymMat::identity(d),
        }]);
        let q = AffineParams::new(
            SymMat::zeros(d),
            SymMat::identity(d),
            LinearDrift::zero(d),
            JumpAtomsConstant::default(),
            big,
        )
        .unwrap();
        assert!(q.admissibility().admissible);
    }

    #[test]
    fn structural_validation() {
        let d = 2;
        let bad_atom = JumpAtomsConstant::new(vec![ConstantAtom { xi: SymMat::zeros(d), weight: 1.0 }]);
        assert!(AffineParams::new(
            SymMat::identity(d),
            SymMat::identity(d),
            LinearDrift::zero(d),
            bad_atom,
            JumpAtomsLinear::default()
        )
        .is_err());
        let p = AffineParams::wishart(&GenMat::identity(d, d), 3.0, GenMat::zeros(d, d)).unwrap();
        assert!(p.clone().with_sigma_factor(GenMat::identity(d, d) * 2.0).is_err());
        assert!(p.with_trunc_radius(0.0).is_err());
    }
}
