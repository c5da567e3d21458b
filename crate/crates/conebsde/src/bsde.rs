//! The explicit BSDE solution built from a Riccati solution, the generator,
//! and the checks that the pair really solves the equation.
//!
//! With `Γ`, `w` from [`crate::riccati`] the solution is
//!
//! ```text
//! Y = Tr(Γ X) + Tr(a O) + w,   Z = 2 √X Γ Σᵀ,   Ẑ = √X σᵀ a,   K(ξ) = Tr(Γ ξ).
//! ```
//!
//! [`drift_match_residual`] compares the finite-variation parts of `Y` and of
//! the BSDE with `∂Γ/∂t`, `∂w/∂t` taken by finite differences on the solver
//! grid, so it does not reuse the Riccati right-hand side.
//! [`martingale_audit`] simulates utility processes `L^π` for a list of
//! strategies on common paths.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affine_model::{apply_b, jump_normalizer, truncation, AffineParams};
use crate::error::{Error, Result};
use crate::riccati::{GeneratorCoeffs, RiccatiSolution, TimeFn};
use crate::sampling;
use crate::simulator::{run_mc, McOptions, PathEngine};
use crate::symcone::{psd_sqrt, trace_prod, GenMat, SymMat};

/// A Riccati solution together with the model and generator it solves.
#[derive(Clone, Debug)]
pub struct BsdeSolutionEval {
    pub params: AffineParams,
    pub coeffs: GeneratorCoeffs,
    pub riccati: RiccatiSolution,
    sigma: GenMat,
}

/// `(Y, Z, Ẑ)` at one point, plus `Γ(t)` for `K`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionValues {
    pub y: f64,
    pub z: GenMat,
    pub zhat: GenMat,
    pub gamma: SymMat,
}

impl SolutionValues {
    /// `K(ξ) = Tr(Γ ξ)`.
    pub fn k(&self, xi: &SymMat) -> f64 {
        trace_prod(self.gamma.as_mat(), xi.as_mat())
    }
}

impl BsdeSolutionEval {
    pub fn new(params: AffineParams, coeffs: GeneratorCoeffs, riccati: RiccatiSolution) -> Result<Self> {
        let d = params.dim();
        for found in [coeffs.dim(), riccati.dim()] {
            if found != d {
                return Err(Error::Dimension { expected: d, found });
            }
        }
        if riccati.grid.len() < 2 {
            return Err(Error::InvalidParams("solution grid needs at least two points".into()));
        }
        let sigma = params.sigma();
        Ok(BsdeSolutionEval {
            params,
            coeffs,
            riccati,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.riccati.horizon()
    }

    /// `F(x, o) = Tr(u x) + Tr(a o) + v`.
    pub fn terminal_value(&self, x: &SymMat, o: &GenMat) -> f64 {
        trace_prod(self.riccati.terminal_u.as_mat(), x.as_mat()) + trace_prod(&self.coeffs.a, o) + self.riccati.terminal_v
    }

    /// Solution processes at `(t, X_t = x, O_t = o)`. `Γ` and `w` are
    /// interpolated linearly between grid points.
    pub fn eval(&self, t: f64, x: &SymMat, o: &GenMat) -> Result<SolutionValues> {
        let d = self.dim();
        if x.dim() != d || o.shape() != (d, d) {
            return Err(Error::Dimension {
                expected: d,
                found: x.dim(),
            });
        }
        let gamma = self.riccati.gamma_at(t);
        let sx = psd_sqrt(x)?.into_mat();
        let y = trace_prod(gamma.as_mat(), x.as_mat()) + trace_prod(&self.coeffs.a, o) + self.riccati.w_at(t);
        let z = &sx * gamma.as_mat() * self.sigma.transpose() * 2.0;
        let zhat = &sx * self.coeffs.sigma.eval(t).transpose() * &self.coeffs.a;
        Ok(SolutionValues { y, z, zhat, gamma })
    }
}

/// Free-function form of [`BsdeSolutionEval::eval`].
pub fn eval_solution(sol: &BsdeSolutionEval, t: f64, x: &SymMat, o: &GenMat) -> Result<SolutionValues> {
    sol.eval(t, x, o)
}

/// The generator `f(t, x, y, z, ẑ, k)` including both jump sums.
#[allow(clippy::too_many_arguments)]
pub fn eval_generator(
    coeffs: &GeneratorCoeffs,
    params: &AffineParams,
    t: f64,
    x: &SymMat,
    y: f64,
    z: &GenMat,
    zhat: &GenMat,
    k: &dyn Fn(&SymMat) -> f64,
) -> Result<f64> {
    let d = params.dim();
    if x.dim() != d || z.shape() != (d, d) || zhat.shape() != (d, d) || coeffs.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: x.dim(),
        });
    }
    let sx = psd_sqrt(x)?.into_mat();
    let xm = x.as_mat();
    let quad = |l: &GenMat, c: &GenMat, r: &GenMat| trace_prod(&(l * c), &r.transpose());
    let mut f = quad(z, &coeffs.c_zz.eval(t), z)
        + trace_prod(&(z * coeffs.c_zsqrtx.eval(t)), &sx)
        + trace_prod(&coeffs.c_x.eval(t), xm)
        + coeffs.c_y.eval(t) * y
        + coeffs.c_t.eval(t)
        + quad(zhat, &coeffs.c_hzhz.eval(t), zhat)
        + quad(zhat, &coeffs.c_hzz.eval(t), z)
        + trace_prod(&(zhat * coeffs.c_hzsqrtx.eval(t)), &sx);
    if let Some(g) = &coeffs.g_m {
        for atom in &params.mu.atoms {
            let weight = trace_prod(xm, atom.u.as_mat()) / jump_normalizer(&atom.xi);
            f += weight * g(t, k(&atom.xi));
        }
    }
    for atom in &params.m.atoms {
        let kv = k(&atom.xi);
        let mut inner = 0.0;
        if let Some(g) = &coeffs.g_zsqrtx {
            inner += trace_prod(&(z * g(t, kv)), &sx);
        }
        if let Some(g) = &coeffs.g_x {
            inner += trace_prod(xm, &g(t, kv));
        }
        if let Some(g) = &coeffs.g_t {
            inner += g(t, kv);
        }
        if let Some(g) = &coeffs.g_y {
            inner += y * g(t, kv);
        }
        if let Some(g) = &coeffs.g_hzhz {
            inner += quad(zhat, &g(t, kv), zhat);
        }
        if let Some(g) = &coeffs.g_hzz {
            inner += quad(zhat, &g(t, kv), z);
        }
        if let Some(g) = &coeffs.g_hzsqrtx {
            inner += trace_prod(&(zhat * g(t, kv)), &sx);
        }
        f += atom.weight * inner;
    }
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("generator at t = {t}")));
    }
    Ok(f)
}

/// One evaluation of the drift-matching identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftMatchPoint {
    /// Grid time actually used.
    pub t: f64,
    /// `|r(t, x)|`.
    pub residual: f64,
    /// Generator value along the solution.
    pub generator: f64,
}

impl DriftMatchPoint {
    /// `|r| / (1 + |f|)`.
    pub fn scaled(&self) -> f64 {
        self.residual / (1.0 + self.generator.abs())
    }
}

/// Sum of the generator along the solution and the drift of `Y`; zero when
/// the tuple solves the BSDE. `t` is snapped to the nearest interior grid
/// point, where `∂Γ/∂t` and `∂w/∂t` come from the three-point
/// (possibly non-uniform) centered difference. `O = 0` is used; terms in
/// `c_y Tr(a O)` are outside the affine ansatz and are not represented.
pub fn drift_match_residual(sol: &BsdeSolutionEval, t: f64, x: &SymMat) -> Result<DriftMatchPoint> {
    let grid = &sol.riccati.grid;
    let n = grid.len();
    if n < 3 {
        return Err(Error::InvalidParams("centered differences need three grid points".into()));
    }
    if !(t > grid[0] && t < grid[n - 1]) {
        return Err(Error::InvalidParams(format!("t = {t} is not interior to the solution grid")));
    }
    let i = nearest_interior(grid, t);
    let (tm, t0, tp) = (grid[i - 1], grid[i], grid[i + 1]);
    let (h1, h2) = (t0 - tm, tp - t0);
    let (cm, c0, cp) = (-h2 / (h1 * (h1 + h2)), (h2 - h1) / (h1 * h2), h1 / (h2 * (h1 + h2)));
    let g = &sol.riccati.gamma;
    let w = &sol.riccati.w;
    let dgamma = g[i - 1].as_mat() * cm + g[i].as_mat() * c0 + g[i + 1].as_mat() * cp;
    let dw = w[i - 1] * cm + w[i] * c0 + w[i + 1] * cp;

    let d = sol.dim();
    let p = &sol.params;
    let c = &sol.coeffs;
    let vals = sol.eval(t0, x, &GenMat::zeros(d, d))?;
    let gm = vals.gamma.as_mat();
    let f = eval_generator(c, p, t0, x, vals.y, &vals.z, &vals.zhat, &|xi| vals.k(xi))?;

    let xm = x.as_mat();
    let mut r = f + trace_prod(&dgamma, xm) + dw;
    r += trace_prod(gm, p.b.as_mat()) + trace_prod(gm, apply_b(&p.drift, x).as_mat());
    // Constant measure: χ part and the large-jump remainder add up to ξ.
    for atom in &p.m.atoms {
        r += atom.weight * trace_prod(gm, atom.xi.as_mat());
    }
    for atom in &p.mu.atoms {
        let over = &atom.xi - &truncation(&atom.xi, p.trunc_radius);
        let weight = trace_prod(xm, atom.u.as_mat()) / jump_normalizer(&atom.xi);
        r += weight * trace_prod(gm, over.as_mat());
    }
    r += trace_prod(&c.a, &(c.o1.eval(t0) + c.o2.eval(t0) * xm));
    if !r.is_finite() {
        return Err(Error::NonFinite(format!("drift residual at t = {t0}")));
    }
    Ok(DriftMatchPoint {
        t: t0,
        residual: r.abs(),
        generator: f,
    })
}

fn nearest_interior(grid: &[f64], t: f64) -> usize {
    let n = grid.len();
    let j = grid.partition_point(|&s| s < t).clamp(1, n - 1);
    let i = if (grid[j] - t).abs() < (t - grid[j - 1]).abs() { j } else { j - 1 };
    i.clamp(1, n - 2)
}

/// Maximum scaled drift residual over random `(t, x)` samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftMatchReport {
    pub samples: usize,
    pub max_residual: f64,
    /// Largest `|r| / (1 + |f|)`.
    pub max_scaled: f64,
    pub worst: Option<DriftMatchPoint>,
    pub tolerance: f64,
    pub pass: bool,
}

pub const DRIFT_MATCH_TOL: f64 = 1e-6;

/// Samples grid-interior times uniformly and states `x` with eigenvalues
/// uniform in `[0, x_scale]` under a Haar rotation.
pub fn drift_match_report(sol: &BsdeSolutionEval, samples: usize, seed: u64, x_scale: f64) -> Result<DriftMatchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sol.riccati.grid.len();
    if n < 3 {
        return Err(Error::InvalidParams("centered differences need three grid points".into()));
    }
    let mut report = DriftMatchReport {
        samples,
        max_residual: 0.0,
        max_scaled: 0.0,
        worst: None,
        tolerance: DRIFT_MATCH_TOL,
        pass: true,
    };
    for _ in 0..samples {
        let i = rng.random_range(1..n - 1);
        let x = sampling::random_psd(&mut rng, sol.dim(), 0.0, x_scale);
        let pt = drift_match_residual(sol, sol.riccati.grid[i], &x)?;
        report.max_residual = report.max_residual.max(pt.residual);
        if report.worst.is_none() || pt.scaled() > report.max_scaled {
            report.max_scaled = pt.scaled();
            report.worst = Some(pt);
        }
    }
    report.pass = report.max_scaled <= report.tolerance;
    Ok(report)
}

/// How the utility process `L` is formed from wealth and `Y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum UtilityForm {
    /// `L = X^γ / γ · exp(s Y)` with `s = ±1`; the strategy is a wealth fraction.
    Power { gamma: f64, y_sign: f64 },
    /// `L = -exp(-γ (X + Y))`; the strategy is an amount of money.
    Exponential { gamma: f64 },
}

impl UtilityForm {
    pub fn value(&self, wealth: f64, y: f64) -> f64 {
        match *self {
            UtilityForm::Power { gamma, y_sign } => wealth.powf(gamma) / gamma * (y_sign * y).exp(),
            UtilityForm::Exponential { gamma } => -(-gamma * (wealth + y)).exp(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match *self {
            UtilityForm::Power { gamma, .. } | UtilityForm::Exponential { gamma } => gamma,
        }
    }
}

/// Terminal condition `F(x, o) = Tr(u x) + Tr(a o) + v`.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalCondition {
    pub u: SymMat,
    pub a: GenMat,
    pub v: f64,
}

impl TerminalCondition {
    pub fn zero(d: usize) -> Self {
        TerminalCondition {
            u: SymMat::zeros(d),
            a: GenMat::zeros(d, d),
            v: 0.0,
        }
    }

    pub fn eval(&self, x: &SymMat, o: &GenMat) -> f64 {
        trace_prod(self.u.as_mat(), x.as_mat()) + trace_prod(&self.a, o) + self.v
    }

    fn eval_flat(&self, x: &[f64], o: &[f64]) -> f64 {
        let d = self.u.dim();
        let mut s = self.v;
        for i in 0..d {
            for j in 0..d {
                s += self.u[(j, i)] * x[i * d + j] + self.a[(j, i)] * o[i * d + j];
            }
        }
        s
    }
}

/// Everything needed to simulate `L^π_T`: the path engine (its auxiliary
/// process must produce the `O` that enters `F`), the utility form, initial
/// wealth, terminal condition, and the claimed value `L_0`.
pub struct AuditSetup<'a, E: PathEngine> {
    pub engine: &'a E,
    pub form: UtilityForm,
    pub wealth0: f64,
    pub terminal: TerminalCondition,
    pub l0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuditVerdict {
    Martingale,
    SupermartingaleOk,
    Violation,
}

/// Monte Carlo estimate of the normalized drift of `L^π`.
///
/// `ratio = 1 + (E[L_T] - L_0) / |L_0|`, which is `E[L_T] / L_0` for positive
/// `L` and keeps the orientation "at most one for a supermartingale" when
/// `L` is negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AuditResult {
    pub ratio: f64,
    pub std_err: f64,
    pub mean_terminal: f64,
    pub terminal_std_err: f64,
    pub l0: f64,
    pub paths: u64,
    pub verdict: AuditVerdict,
}

fn verdict(ratio: f64, se: f64) -> AuditVerdict {
    if (ratio - 1.0).abs() <= 3.0 * se {
        AuditVerdict::Martingale
    } else if ratio <= 1.0 + 3.0 * se {
        AuditVerdict::SupermartingaleOk
    } else {
        AuditVerdict::Violation
    }
}

/// Audits every strategy on the same simulated paths. Strategies are
/// evaluated at the left end of each step.
pub fn martingale_audit<E: PathEngine>(
    setup: &AuditSetup<'_, E>,
    strategies: &[TimeFn<DVector<f64>>],
    opts: &McOptions,
) -> Result<Vec<AuditResult>> {
    let engine = setup.engine;
    let d = engine.dim();
    let grid = engine.grid();
    if setup.l0 == 0.0 || !setup.l0.is_finite() {
        return Err(Error::InvalidParams("L_0 must be finite and nonzero".into()));
    }
    if strategies.is_empty() {
        return Ok(Vec::new());
    }
    let mut table = Vec::with_capacity(strategies.len());
    for s in strategies {
        let mut rows: Vec<f64> = Vec::with_capacity(grid.steps * d);
        for k in 0..grid.steps {
            let v = s.eval(grid.time(k));
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("strategy".into()));
            }
            rows.extend(v.iter());
        }
        table.push(rows);
    }
    let power = matches!(setup.form, UtilityForm::Power { .. });
    if power && setup.wealth0 <= 0.0 {
        return Err(Error::InvalidParams("power utility needs positive initial wealth".into()));
    }
    let ns = strategies.len();
    let stats = run_mc(engine, opts, ns, |eng, ws, id, out| {
        let mut wealth = vec![if power { setup.wealth0.ln() } else { setup.wealth0 }; ns];
        eng.run_path(ws, id, &mut |s| {
            let base = s.k * d;
            for (w, tab) in wealth.iter_mut().zip(&table) {
                let pi = &tab[base..base + d];
                let mut gain = 0.0;
                for i in 0..d {
                    gain += pi[i] * s.dn[i];
                }
                if power {
                    let mut q = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            q += pi[i] * s.int_r[i * d + j] * pi[j];
                        }
                    }
                    gain -= 0.5 * q;
                }
                *w += gain;
            }
        });
        let y = setup.terminal.eval_flat(&ws.r, &ws.o);
        for (o, w) in out.iter_mut().zip(&wealth) {
            *o = setup.form.value(if power { w.exp() } else { *w }, y);
        }
    })?;
    let scale = setup.l0.abs();
    Ok(stats
        .iter()
        .map(|st| {
            let ratio = 1.0 + (st.mean - setup.l0) / scale;
            let se = st.std_err() / scale;
            AuditResult {
                ratio,
                std_err: se,
                mean_terminal: st.mean,
                terminal_std_err: st.std_err(),
                l0: setup.l0,
                paths: st.count,
                verdict: verdict(ratio, se),
            }
        })
        .collect())
}

/// Growth of `θ` along the solution is checked by the Riccati module; this
/// helper rechecks that the solution's `Γ` keeps `K` bounded by
/// `‖Γ(t)‖ ‖ξ‖` on every atom (Cauchy-Schwarz for the trace pairing).
pub fn k_bound_holds(sol: &BsdeSolutionEval) -> bool {
    let atoms = sol
        .params
        .m
        .atoms
        .iter()
        .map(|a| &a.xi)
        .chain(sol.params.mu.atoms.iter().map(|a| &a.xi));
    let xis: Vec<&SymMat> = atoms.collect();
    sol.riccati.gamma.iter().all(|g| {
        xis.iter()
            .all(|xi| trace_prod(g.as_mat(), xi.as_mat()).abs() <= g.norm() * xi.norm() * (1.0 + 1e-12) + 1e-300)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine_model::{ConstantAtom, JumpAtomsConstant, JumpAtomsLinear, LinearDrift};
    use crate::riccati::tests::{generator, random_jump_setup};
    use crate::riccati::{sample_constant_instance, solve_rk, RkOptions};
    use crate::sampling::gaussian_mat;
    use crate::simulator::{CorrelationSpec, TimeGrid, WishartEngine};

    fn jump_solution(seed: u64) -> BsdeSolutionEval {
        let (p, c) = random_jump_setup(seed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = SymMat::new(gaussian_mat(&mut rng, 2, 2) * 0.05);
        let sol = solve_rk(&p, &c, &u, 0.3, 0.5, RkOptions::fixed(2000)).unwrap();
        BsdeSolutionEval::new(p, c, sol).unwrap()
    }

    #[test]
    fn terminal_identity() {
        let sol = jump_solution(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = sol.horizon();
        for _ in 0..100 {
            let x = sampling::random_psd(&mut rng, 2, 0.0, 2.0);
            let o = gaussian_mat(&mut rng, 2, 2);
            let y = sol.eval(t, &x, &o).unwrap().y;
            let f = sol.terminal_value(&x, &o);
            assert!((y - f).abs() <= 1e-12 * (1.0 + f.abs()), "{y} vs {f}");
        }
    }

    #[test]
    fn zero_gamma_gives_trivial_processes() {
        let (p, _) = sample_constant_instance(3, 2).unwrap();
        let c = GeneratorCoeffs {
            c_t: TimeFn::Constant(0.7),
            ..GeneratorCoeffs::zero(2)
        };
        let sol = solve_rk(&p, &c, &SymMat::zeros(2), 1.0, 1.0, RkOptions::fixed(100)).unwrap();
        let ev = BsdeSolutionEval::new(p, c, sol).unwrap();
        let x = SymMat::from_row_slice(2, &[1.0, 0.2, 0.2, 0.5]);
        let v = ev.eval(0.3, &x, &GenMat::identity(2, 2)).unwrap();
        assert!((v.y - (1.0 + 0.7 * 0.7)).abs() < 1e-12);
        assert_eq!(v.z.norm(), 0.0);
        assert_eq!(v.zhat.norm(), 0.0);
        assert_eq!(v.k(&x), 0.0);
    }

    #[test]
    fn solution_formulas_match_reimplementation() {
        let sol = jump_solution(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = sampling::random_psd(&mut rng, 2, 0.1, 1.0);
        let o = gaussian_mat(&mut rng, 2, 2);
        let t = 0.123;
        let v = sol.eval(t, &x, &o).unwrap();
        // Square root via nalgebra's eigensolver rather than Jacobi.
        let e = x.as_mat().clone().symmetric_eigen();
        let sx = &e.eigenvectors * GenMat::from_diagonal(&e.eigenvalues.map(f64::sqrt)) * e.eigenvectors.transpose();
        let g = sol.riccati.gamma_at(t);
        let z = 2.0 * &sx * g.as_mat() * sol.params.sigma().transpose();
        let zh = &sx * sol.coeffs.sigma.eval(t).transpose() * &sol.coeffs.a;
        assert!((v.z - z).norm() < 1e-12);
        assert!((v.zhat - zh).norm() < 1e-12);
        let y = (g.as_mat() * x.as_mat()).trace() + (&sol.coeffs.a * &o).trace() + sol.riccati.w_at(t);
        assert!((v.y - y).abs() < 1e-12);
    }

    #[test]
    fn generator_matches_term_sum_oracle() {
        for seed in 0..5 {
            let (p, c) = random_jump_setup(seed, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x = sampling::random_psd(&mut rng, 3, 0.0, 1.0);
            let z = gaussian_mat(&mut rng, 3, 3);
            let zh = gaussian_mat(&mut rng, 3, 3);
            let kmat = gaussian_mat(&mut rng, 3, 3);
            let k = |xi: &SymMat| trace_prod(&kmat, xi.as_mat());
            let got = eval_generator(&c, &p, 0.4, &x, 0.9, &z, &zh, &k).unwrap();
            let want = generator(&p, &c, 0.4, &x, 0.9, &z, &zh, &k);
            assert!((got - want).abs() < 1e-11 * (1.0 + want.abs()));
        }
        let zero = GenMat::zeros(2, 2);
        let (p, _) = random_jump_setup(1, 2);
        let f = eval_generator(&GeneratorCoeffs::zero(2), &p, 0.3, &SymMat::identity(2), 4.0, &zero, &zero, &|_| 1.0).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn heston_exponential_generator_in_one_dimension() {
        // f(r, z) = γ(ρ² - 1) z² / 2 + η² r / (2γ) - η ρ z √r with the
        // coefficients used by the exponential-utility solver.
        let (gamma, rho, eta, r, zv) = (1.7, -0.4, 0.6, 0.09, 0.33);
        let mut c = GeneratorCoeffs::zero(1);
        c.c_zz = TimeFn::Constant(GenMat::from_element(1, 1, gamma * (rho * rho - 1.0) / 2.0));
        c.c_zsqrtx = TimeFn::Constant(GenMat::from_element(1, 1, -rho * eta));
        c.c_x = TimeFn::Constant(GenMat::from_element(1, 1, eta * eta / (2.0 * gamma)));
        let p = AffineParams::wishart(&GenMat::from_element(1, 1, 0.3), 2.0, GenMat::from_element(1, 1, -1.0)).unwrap();
        let z = GenMat::from_element(1, 1, zv);
        let f = eval_generator(&c, &p, 0.0, &SymMat::from_row_slice(1, &[r]), 0.0, &z, &GenMat::zeros(1, 1), &|_| 0.0).unwrap();
        let want = gamma * (rho * rho - 1.0) * zv * zv / 2.0 + eta * eta * r / (2.0 * gamma) - eta * rho * zv * r.sqrt();
        assert!((f - want).abs() < 1e-15);
    }

    #[test]
    fn generator_is_quadratic_in_z() {
        let (p, c) = random_jump_setup(7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = sampling::random_psd(&mut rng, 2, 0.1, 1.0);
        let dir = gaussian_mat(&mut rng, 2, 2);
        let zero = GenMat::zeros(2, 2);
        let f = |s: f64| eval_generator(&c, &p, 0.2, &x, 0.0, &(&dir * s), &zero, &|_| 0.0).unwrap();
        let f0 = f(0.0);
        let (f1, fm1, f2) = (f(1.0) - f0, f(-1.0) - f0, f(2.0) - f0);
        let a2 = 0.5 * (f1 + fm1);
        let a1 = 0.5 * (f1 - fm1);
        for s in [2.0, -3.0, 0.5, 7.0] {
            let pred = a2 * s * s + a1 * s;
            assert!((f(s) - f0 - pred).abs() < 1e-10 * (1.0 + pred.abs()));
        }
        assert!((f2 - 4.0 * a2 - 2.0 * a1).abs() < 1e-10 * (1.0 + f2.abs()));
    }

    #[test]
    fn k_is_bounded_on_atoms() {
        assert!(k_bound_holds(&jump_solution(3)));
    }

    #[test]
    fn drift_match_holds_on_jump_instance() {
        for seed in [2, 5, 9] {
            let sol = jump_solution(seed);
            let rep = drift_match_report(&sol, 50, seed, 1.0).unwrap();
            assert!(rep.pass, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn drift_match_is_exactly_zero_for_zero_coefficients() {
        let sol = solve_rk(
            &AffineParams::wishart(&GenMat::identity(2, 2), 3.0, GenMat::zeros(2, 2)).unwrap(),
            &GeneratorCoeffs::zero(2),
            &SymMat::zeros(2),
            0.0,
            1.0,
            RkOptions::fixed(10),
        )
        .unwrap();
        let (p, c) = (
            AffineParams::wishart(&GenMat::identity(2, 2), 3.0, GenMat::zeros(2, 2)).unwrap(),
            GeneratorCoeffs::zero(2),
        );
        let ev = BsdeSolutionEval::new(p, c, sol).unwrap();
        let pt = drift_match_residual(&ev, 0.5, &SymMat::identity(2)).unwrap();
        assert_eq!(pt.residual, 0.0);
    }

    #[test]
    fn drift_match_detects_perturbed_gamma() {
        let sol = jump_solution(5);
        let x = SymMat::from_row_slice(2, &[0.6, 0.1, 0.1, 0.4]);
        let base = drift_match_residual(&sol, 0.25, &x).unwrap().residual;
        let mut res = Vec::new();
        for eps in [1e-3, 1e-2] {
            let mut bad = sol.clone();
            for g in bad.riccati.gamma.iter_mut() {
                *g = &*g + &SymMat::identity(2).scale(eps);
            }
            res.push(drift_match_residual(&bad, 0.25, &x).unwrap().residual);
        }
        assert!(base < 1e-6);
        assert!(res[0] > 1e2 * base.max(1e-12));
        let ratio = res[1] / res[0];
        assert!((ratio - 10.0).abs() < 1.0, "ratio {ratio}");
    }

    #[test]
    fn drift_match_rejects_boundary_times() {
        let sol = jump_solution(2);
        assert!(drift_match_residual(&sol, 0.0, &SymMat::identity(2)).is_err());
        assert!(drift_match_residual(&sol, sol.horizon(), &SymMat::identity(2)).is_err());
    }

    #[test]
    fn audit_in_zero_market_is_exactly_one() {
        let p = AffineParams::wishart(&(GenMat::identity(2, 2) * 0.3), 3.0, GenMat::identity(2, 2) * -0.5).unwrap();
        let engine = WishartEngine::new(
            &p,
            &SymMat::identity(2).scale(0.04),
            &CorrelationSpec::zero(2),
            &[0.0, 0.0],
            TimeGrid::new(1.0, 20).unwrap(),
        )
        .unwrap();
        let form = UtilityForm::Power { gamma: 0.5, y_sign: 1.0 };
        let setup = AuditSetup {
            engine: &engine,
            form,
            wealth0: 2.0,
            terminal: TerminalCondition {
                v: 0.25,
                ..TerminalCondition::zero(2)
            },
            l0: form.value(2.0, 0.25),
        };
        let zero = TimeFn::Constant(DVector::zeros(2));
        let out = martingale_audit(&setup, &[zero], &McOptions::new(500, 1)).unwrap();
        assert_eq!(out[0].ratio, 1.0);
        assert_eq!(out[0].verdict, AuditVerdict::Martingale);
    }

    #[test]
    fn audit_of_geometric_wealth_is_martingale() {
        let p = AffineParams::wishart(&(GenMat::identity(2, 2) * 0.3), 3.0, GenMat::identity(2, 2) * -0.5).unwrap();
        let engine = WishartEngine::new(
            &p,
            &SymMat::identity(2).scale(0.04),
            &CorrelationSpec::new(vec![0.3, 0.2]).unwrap(),
            &[0.0, 0.0],
            TimeGrid::new(1.0, 50).unwrap(),
        )
        .unwrap();
        let exp_form = UtilityForm::Exponential { gamma: 1.0 };
        let setup = AuditSetup {
            engine: &engine,
            form: exp_form,
            wealth0: 0.0,
            terminal: TerminalCondition::zero(2),
            l0: exp_form.value(0.0, 0.0),
        };
        let strategies = vec![TimeFn::Constant(DVector::zeros(2)), TimeFn::Constant(DVector::from_vec(vec![3.0, -2.0]))];
        let out = martingale_audit(&setup, &strategies, &McOptions::new(20_000, 4)).unwrap();
        assert_eq!(out[0].ratio, 1.0);
        // η = 0: L = -exp(-X) is a strict supermartingale for π ≠ 0.
        assert!(out[1].ratio < 1.0 - 3.0 * out[1].std_err, "{:?}", out[1]);
        assert_eq!(out[1].verdict, AuditVerdict::SupermartingaleOk);
    }

    #[test]
    fn verdicts() {
        assert_eq!(verdict(1.0, 0.0), AuditVerdict::Martingale);
        assert_eq!(verdict(0.9, 0.01), AuditVerdict::SupermartingaleOk);
        assert_eq!(verdict(1.1, 0.01), AuditVerdict::Violation);
    }

    #[test]
    fn constant_jumps_enter_drift_match() {
        // Pure-jump linear model with g_t compensating the jump transform.
        let xi = SymMat::from_row_slice(2, &[0.3, 0.1, 0.1, 0.2]);
        let p = AffineParams::new(
            SymMat::zeros(2),
            SymMat::identity(2).scale(0.05),
            LinearDrift::HForm(GenMat::identity(2, 2) * -0.6),
            JumpAtomsConstant::new(vec![ConstantAtom { xi, weight: 0.9 }]),
            JumpAtomsLinear::default(),
        )
        .unwrap();
        let mut c = GeneratorCoeffs::zero(2);
        c.c_x = TimeFn::Constant(GenMat::from_row_slice(2, 2, &[-0.2, 0.05, 0.05, -0.1]));
        c.g_t = Some(std::sync::Arc::new(|_, k: f64| -((-k).exp_m1() + k)));
        let sol = solve_rk(&p, &c, &SymMat::zeros(2), 0.0, 1.0, RkOptions::fixed(1000)).unwrap();
        let ev = BsdeSolutionEval::new(p, c, sol).unwrap();
        assert!(drift_match_report(&ev, 50, 1, 1.0).unwrap().pass);
    }
}
