//! Utility maximization and indifference pricing in Heston-type and
//! BNS-type matrix stochastic volatility models.
//!
//! Prices follow `dN = R η dt + √R dQ` with `dQ = dW ρ + √(1 - ρᵀρ) dD`.
//! Each problem is mapped to generator coefficients, the Riccati equation is
//! solved, and the value function and optimal strategy are read off `Γ`
//! and `w`:
//!
//! | problem | value | strategy |
//! |---|---|---|
//! | Heston, power | `x^γ/γ · e^{Y₀}` | `(η + 2ΓΣᵀρ)/(1-γ)` (fraction) |
//! | Heston, exponential | `-e^{-γ(x + Y₀)}` | `η/γ - 2ΓΣᵀρ` (amount) |
//! | BNS, power | `x^γ/γ · e^{-Y₀}` | `η/(1-γ)` (fraction) |
//! | BNS, exponential | `-e^{-γ(x + Y₀)}` | `η/γ` (amount) |
//!
//! with `Y₀ = Tr(Γ(0) R₀) + w(0)`. Indifference prices of claims in the
//! exponential problems are `Y₀` differences.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::affine_model::{AffineParams, ConstantAtom, JumpAtomsConstant, LinearDrift};
use crate::bsde::{drift_match_report, martingale_audit, AuditResult, AuditSetup, BsdeSolutionEval, DriftMatchReport, TerminalCondition, UtilityForm};
use crate::error::{Error, Result};
use crate::riccati::{
    cumulative_simpson_from_end, solve_block_exp, solve_rk, GeneratorCoeffs, RiccatiSolution, RkOptions, TimeFn,
    DEFAULT_RK_STEPS,
};
use crate::simulator::{AuxProcess, BnsEngine, BnsJumpSpec, CorrelationSpec, McOptions, PathEngine, TimeGrid, WishartEngine};
use crate::symcone::{cone_classify_default, Cone, trace_prod, GenMat, SymMat};

/// Tolerance of the block-exponential vs Runge-Kutta cross-check.
pub const CROSS_CHECK_TOL: f64 = 1e-6;
/// Number of random `(t, x)` samples in each solver's drift-match report.
pub const DRIFT_MATCH_SAMPLES: usize = 50;

fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Continuous matrix affine stochastic volatility model.
#[derive(Clone, Debug, PartialEq)]
pub struct HestonModel {
    pub params: AffineParams,
    pub eta: Vec<f64>,
    pub corr: CorrelationSpec,
    pub r0: SymMat,
}

impl HestonModel {
    pub fn new(params: AffineParams, eta: Vec<f64>, corr: CorrelationSpec, r0: SymMat) -> Result<Self> {
        let d = params.dim();
        if params.has_jumps() {
            return Err(Error::InvalidParams("the Heston-type model has no jumps".into()));
        }
        if params.drift.h().is_none() {
            return Err(Error::InvalidParams("the Heston-type model needs drift of the form Hx + xHᵀ".into()));
        }
        for found in [eta.len(), corr.dim(), r0.dim()] {
            if found != d {
                return Err(Error::Dimension { expected: d, found });
            }
        }
        if !cone_classify_default(&r0).is_psd() {
            return Err(Error::NotPsd {
                min_eigenvalue: r0.min_eigenvalue(),
            });
        }
        params.require_admissible()?;
        Ok(HestonModel { params, eta, corr, r0 })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// `Σᵀ ρ`.
    fn sigma_rho(&self) -> DVector<f64> {
        self.params.sigma().transpose() * dvec(self.corr.rho())
    }

    /// Same model with `η` shifted by one half in every coordinate, for
    /// prices modelled as ordinary rather than stochastic exponentials of
    /// `N`. The shift is exact when `d = 1`; for `d > 1` it reproduces the
    /// scalar rule coordinate-wise.
    pub fn ordinary_exponential(&self) -> Self {
        HestonModel {
            eta: self.eta.iter().map(|e| e + 0.5).collect(),
            ..self.clone()
        }
    }

    pub fn engine(&self, grid: TimeGrid, endow: &EndowmentSpec) -> Result<WishartEngine> {
        WishartEngine::new(&self.params, &self.r0, &self.corr, &self.eta, grid)?.with_aux(&endow.aux())
    }
}

/// BNS-type model: Ornstein-Uhlenbeck matrix volatility driven by a
/// matrix subordinator.
#[derive(Clone, Debug, PartialEq)]
pub struct BnsModel {
    pub spec: BnsJumpSpec,
    pub eta: Vec<f64>,
    pub r0: SymMat,
}

impl BnsModel {
    pub fn new(spec: BnsJumpSpec, eta: Vec<f64>, r0: SymMat) -> Result<Self> {
        let d = spec.dim();
        spec.validate()?;
        for found in [eta.len(), r0.dim()] {
            if found != d {
                return Err(Error::Dimension { expected: d, found });
            }
        }
        if !cone_classify_default(&r0).is_psd() {
            return Err(Error::NotPsd {
                min_eigenvalue: r0.min_eigenvalue(),
            });
        }
        Ok(BnsModel { spec, eta, r0 })
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn ordinary_exponential(&self) -> Self {
        BnsModel {
            eta: self.eta.iter().map(|e| e + 0.5).collect(),
            ..self.clone()
        }
    }

    pub fn engine(&self, grid: TimeGrid, endow: &EndowmentSpec) -> Result<BnsEngine> {
        BnsEngine::new(&self.spec, &self.r0, &self.eta, grid)?.with_aux(&endow.aux())
    }
}

/// Claim `Tr(a O_T) - K` on `dO = σ √R dQ̂ + (o₁ + o₂ R) dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndowmentSpec {
    pub a: GenMat,
    pub sigma: GenMat,
    pub o1: GenMat,
    pub o2: GenMat,
    pub strike: f64,
}

impl EndowmentSpec {
    pub fn none(d: usize) -> Self {
        EndowmentSpec {
            a: GenMat::zeros(d, d),
            sigma: GenMat::zeros(d, d),
            o1: GenMat::zeros(d, d),
            o2: GenMat::identity(d, d),
            strike: 0.0,
        }
    }

    /// Variance swap on asset `index` (1-based; `0` is no claim): pays the
    /// average realized variance `∫ R_ii ds / T` against `strike`.
    pub fn variance_swap(d: usize, index: usize, horizon: f64, strike: f64) -> Result<Self> {
        if index > d {
            return Err(Error::InvalidParams(format!("swap index {index} exceeds dimension {d}")));
        }
        let mut e = EndowmentSpec::none(d);
        if index > 0 {
            e.a[(index - 1, index - 1)] = 1.0 / horizon;
            e.strike = strike;
        }
        Ok(e)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn aux(&self) -> AuxProcess {
        AuxProcess {
            sigma: self.sigma.clone(),
            o1: self.o1.clone(),
            o2: self.o2.clone(),
        }
    }

    pub fn terminal(&self) -> TerminalCondition {
        TerminalCondition {
            u: SymMat::zeros(self.dim()),
            a: self.a.clone(),
            v: -self.strike,
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        for m in [&self.a, &self.sigma, &self.o1, &self.o2] {
            if m.shape() != (d, d) {
                return Err(Error::Dimension {
                    expected: d,
                    found: m.nrows(),
                });
            }
        }
        if !self.strike.is_finite() || self.a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("endowment".into()));
        }
        Ok(())
    }

    fn apply(&self, c: &mut GeneratorCoeffs) {
        c.a = self.a.clone();
        c.sigma = TimeFn::Constant(self.sigma.clone());
        c.o1 = TimeFn::Constant(self.o1.clone());
        c.o2 = TimeFn::Constant(self.o2.clone());
    }
}

/// Diagnostics attached to every solve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveDiagnostics {
    pub drift_match: DriftMatchReport,
    /// Largest entry difference against the secondary solver, if one ran.
    pub cross_check: Option<f64>,
    /// Extreme eigenvalue of `Γ` on the grid in the direction the theory
    /// predicts (smallest for PSD solutions, largest for NSD ones).
    pub cone_margin: Option<f64>,
}

/// Value function, optimal strategy and the underlying Riccati solution.
#[derive(Clone, Debug)]
pub struct UtilitySolveResult {
    pub form: UtilityForm,
    pub riccati: RiccatiSolution,
    pub coeffs: GeneratorCoeffs,
    /// `Y₀ = Tr(Γ(0) R₀) + w(0)`.
    pub y0: f64,
    /// Optimal strategy on the Riccati grid.
    pub strategy_grid: Vec<DVector<f64>>,
    pub diagnostics: SolveDiagnostics,
}

impl UtilitySolveResult {
    pub fn value_at(&self, x: f64) -> f64 {
        self.form.value(x, self.y0)
    }

    /// Piecewise-linear interpolation of the strategy grid.
    pub fn strategy(&self) -> TimeFn<DVector<f64>> {
        TimeFn::PiecewiseLinear(self.riccati.grid.iter().copied().zip(self.strategy_grid.iter().cloned()).collect())
    }
}

/// CSV of a vector-valued time series: `t,<name>_1,...`.
pub fn vector_series_csv(name: &str, grid: &[f64], values: &[DVector<f64>]) -> String {
    let d = values.first().map_or(0, |v| v.len());
    let mut out = String::from("t");
    for i in 0..d {
        out.push_str(&format!(",{name}_{}", i + 1));
    }
    out.push('\n');
    for (t, v) in grid.iter().zip(values) {
        out.push_str(&format!("{t:.16e}"));
        for x in v.iter() {
            out.push_str(&format!(",{x:.16e}"));
        }
        out.push('\n');
    }
    out
}

fn check_gamma_power(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParams(format!("power utility needs γ in (0, 1), got {gamma}")));
    }
    Ok(())
}

fn check_gamma_exp(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParams(format!("exponential utility needs γ > 0, got {gamma}")));
    }
    Ok(())
}

fn max_entry_diff(a: &RiccatiSolution, b: &RiccatiSolution) -> f64 {
    let mut m: f64 = 0.0;
    for t in &a.grid {
        let d = a.gamma_at(*t).as_mat() - b.gamma_at(*t).as_mat();
        m = m.max(d.amax()).max((a.w_at(*t) - b.w_at(*t)).abs());
    }
    m
}

fn y0_of(sol: &RiccatiSolution, r0: &SymMat) -> f64 {
    trace_prod(sol.gamma[0].as_mat(), r0.as_mat()) + sol.w[0]
}

fn diagnostics(params: &AffineParams, coeffs: &GeneratorCoeffs, sol: &RiccatiSolution, r0: &SymMat) -> Result<DriftMatchReport> {
    let ev = BsdeSolutionEval::new(params.clone(), coeffs.clone(), sol.clone())?;
    let scale = (4.0 * r0.max_eigenvalue()).max(0.1);
    drift_match_report(&ev, DRIFT_MATCH_SAMPLES, 0x5eed, scale)
}

fn min_eig_on_grid(sol: &RiccatiSolution) -> f64 {
    sol.gamma.iter().map(|g| g.min_eigenvalue()).fold(f64::INFINITY, f64::min)
}

fn max_eig_on_grid(sol: &RiccatiSolution) -> f64 {
    sol.gamma.iter().map(|g| g.max_eigenvalue()).fold(f64::NEG_INFINITY, f64::max)
}

/// Generator of the Heston power problem.
pub fn heston_power_coeffs(model: &HestonModel, gamma: f64, endow: &EndowmentSpec) -> GeneratorCoeffs {
    let d = model.dim();
    let eta = dvec(&model.eta);
    let rho = dvec(model.corr.rho());
    let k = gamma / (1.0 - gamma);
    let mut c = GeneratorCoeffs::zero(d);
    c.c_zz = TimeFn::Constant(GenMat::identity(d, d) * 0.5 + &rho * rho.transpose() * (0.5 * k));
    c.c_zsqrtx = TimeFn::Constant(&rho * eta.transpose() * k);
    c.c_x = TimeFn::Constant(&eta * eta.transpose() * (0.5 * k));
    c.c_hzhz = TimeFn::Constant(GenMat::identity(d, d) * 0.5);
    endow.apply(&mut c);
    c
}

/// Power utility `x^γ/γ` of terminal wealth times the numeraire factor
/// `exp(Tr(a O_T)/γ)`. The block exponential is the primary route; RK4 on
/// the same grid is the cross-check.
pub fn heston_power_solve(model: &HestonModel, gamma: f64, endow: &EndowmentSpec, horizon: f64, steps: usize) -> Result<UtilitySolveResult> {
    check_gamma_power(gamma)?;
    endow.check(model.dim())?;
    if cone_classify_default(&model.params.alpha) != Cone::PD {
        return Err(Error::InvalidParams("the block exponential route needs α positive definite".into()));
    }
    let coeffs = heston_power_coeffs(model, gamma, endow);
    let v = -endow.strike;
    let sol = solve_block_exp(&model.params, &coeffs, horizon, v, steps)?;
    let rk = solve_rk(&model.params, &coeffs, &SymMat::zeros(model.dim()), v, horizon, RkOptions::fixed(steps))?;
    let diff = max_entry_diff(&sol, &rk);
    if !(diff <= CROSS_CHECK_TOL) {
        return Err(Error::CrossCheck {
            what: "block exponential vs RK4".into(),
            diff,
        });
    }
    let drift = diagnostics(&model.params, &coeffs, &sol, &model.r0)?;
    let sr = model.sigma_rho();
    let eta = dvec(&model.eta);
    let strategy_grid = sol.gamma.iter().map(|g| (&eta + g.as_mat() * &sr * 2.0) / (1.0 - gamma)).collect();
    Ok(UtilitySolveResult {
        form: UtilityForm::Power { gamma, y_sign: 1.0 },
        y0: y0_of(&sol, &model.r0),
        riccati: sol,
        coeffs,
        strategy_grid,
        diagnostics: SolveDiagnostics {
            drift_match: drift,
            cross_check: Some(diff),
            cone_margin: None,
        },
    })
}

/// Indifference price of a claim, or of a change of numeraire, from the
/// two `Y₀` values of the problems with and without it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IndifferencePrice {
    pub form: UtilityForm,
    pub y0_with: f64,
    pub y0_without: f64,
}

impl IndifferencePrice {
    /// The amount `p` with `V_with(x - p) = V_without(x)`.
    pub fn price_at(&self, x: f64) -> f64 {
        match self.form {
            UtilityForm::Power { gamma, y_sign } => -x * (y_sign * (self.y0_without - self.y0_with) / gamma).exp_m1() + 0.0,
            UtilityForm::Exponential { .. } => self.y0_with - self.y0_without,
        }
    }

    /// `|V_with(x - p) - V_without(x)| / |V_without(x)|`.
    pub fn plug_back_error(&self, x: f64) -> f64 {
        let lhs = self.form.value(x - self.price_at(x), self.y0_with);
        let rhs = self.form.value(x, self.y0_without);
        (lhs - rhs).abs() / rhs.abs()
    }
}

/// Indifference value of replacing the `without` numeraire leg by `with`.
pub fn heston_power_indifference_value(
    model: &HestonModel,
    gamma: f64,
    with: &EndowmentSpec,
    without: &EndowmentSpec,
    horizon: f64,
    steps: usize,
) -> Result<IndifferencePrice> {
    let a = heston_power_solve(model, gamma, with, horizon, steps)?;
    let b = heston_power_solve(model, gamma, without, horizon, steps)?;
    Ok(IndifferencePrice {
        form: a.form,
        y0_with: a.y0,
        y0_without: b.y0,
    })
}

/// Value of changing from a fixed rate leg (constant `o₃`) to a floating
/// leg `(o₁, o₂)`, i.e. rate `Tr(a(o₁ + o₂ R))`. Evaluate with
/// [`IndifferencePrice::price_at`].
pub fn heston_power_numeraire_value(
    model: &HestonModel,
    gamma: f64,
    a: &GenMat,
    floating: (&GenMat, &GenMat),
    fixed: &GenMat,
    horizon: f64,
    steps: usize,
) -> Result<IndifferencePrice> {
    let d = model.dim();
    let float_leg = EndowmentSpec {
        a: a.clone(),
        o1: floating.0.clone(),
        o2: floating.1.clone(),
        ..EndowmentSpec::none(d)
    };
    let fixed_leg = EndowmentSpec {
        a: a.clone(),
        o1: fixed.clone(),
        o2: GenMat::zeros(d, d),
        ..EndowmentSpec::none(d)
    };
    heston_power_indifference_value(model, gamma, &float_leg, &fixed_leg, horizon, steps)
}

/// Exchange-rate variant: the foreign leg carries the noise `σ √R dQ̂`.
pub fn heston_power_exchange_value(
    model: &HestonModel,
    gamma: f64,
    foreign: &EndowmentSpec,
    domestic: &EndowmentSpec,
    horizon: f64,
    steps: usize,
) -> Result<IndifferencePrice> {
    heston_power_indifference_value(model, gamma, foreign, domestic, horizon, steps)
}

/// Generator of the Heston exponential problem.
pub fn heston_exp_coeffs(model: &HestonModel, gamma: f64, endow: &EndowmentSpec) -> GeneratorCoeffs {
    let d = model.dim();
    let eta = dvec(&model.eta);
    let rho = dvec(model.corr.rho());
    let mut c = GeneratorCoeffs::zero(d);
    c.c_zz = TimeFn::Constant((&rho * rho.transpose() - GenMat::identity(d, d)) * (0.5 * gamma));
    c.c_zsqrtx = TimeFn::Constant(-(&rho * eta.transpose()));
    c.c_x = TimeFn::Constant(&eta * eta.transpose() * (0.5 / gamma));
    c.c_hzhz = TimeFn::Constant(GenMat::identity(d, d) * (-0.5 * gamma));
    endow.apply(&mut c);
    c
}

/// Exponential utility `-e^{-γ(x + F)}` with claim `F = Tr(a O_T) - K`;
/// RK4 on the default grid.
pub fn heston_exp_solve(model: &HestonModel, gamma: f64, endow: &EndowmentSpec, horizon: f64, steps: usize) -> Result<UtilitySolveResult> {
    check_gamma_exp(gamma)?;
    endow.check(model.dim())?;
    let coeffs = heston_exp_coeffs(model, gamma, endow);
    let sol = solve_rk(
        &model.params,
        &coeffs,
        &SymMat::zeros(model.dim()),
        -endow.strike,
        horizon,
        RkOptions::fixed(steps),
    )?;
    let drift = diagnostics(&model.params, &coeffs, &sol, &model.r0)?;
    let sr = model.sigma_rho();
    let eta = dvec(&model.eta);
    let strategy_grid = sol.gamma.iter().map(|g| &eta / gamma - g.as_mat() * &sr * 2.0).collect();
    let margin = min_eig_on_grid(&sol);
    Ok(UtilitySolveResult {
        form: UtilityForm::Exponential { gamma },
        y0: y0_of(&sol, &model.r0),
        riccati: sol,
        coeffs,
        strategy_grid,
        diagnostics: SolveDiagnostics {
            drift_match: drift,
            cross_check: None,
            cone_margin: Some(margin),
        },
    })
}

/// Exponential-utility problem with and without a claim.
#[derive(Clone, Debug)]
pub struct ClaimSolveResult {
    pub with_claim: UtilitySolveResult,
    pub without: UtilitySolveResult,
    pub price: IndifferencePrice,
    /// Hedge `π_with - π_without` on the Riccati grid.
    pub hedge_grid: Vec<DVector<f64>>,
}

fn claim_result(with_claim: UtilitySolveResult, without: UtilitySolveResult) -> ClaimSolveResult {
    let price = IndifferencePrice {
        form: with_claim.form,
        y0_with: with_claim.y0,
        y0_without: without.y0,
    };
    let hedge_grid = with_claim.strategy_grid.iter().zip(&without.strategy_grid).map(|(a, b)| a - b).collect();
    ClaimSolveResult {
        with_claim,
        without,
        price,
        hedge_grid,
    }
}

/// Heston exponential utility with a claim; the price and the hedge
/// `2(Γ_with - Γ_without)Σᵀρ` (sign: amount held less by the claim holder).
pub fn heston_exp_price(model: &HestonModel, gamma: f64, claim: &EndowmentSpec, horizon: f64, steps: usize) -> Result<ClaimSolveResult> {
    let with_claim = heston_exp_solve(model, gamma, claim, horizon, steps)?;
    let without = heston_exp_solve(model, gamma, &EndowmentSpec::none(model.dim()), horizon, steps)?;
    Ok(claim_result(with_claim, without))
}

fn bns_params(model: &BnsModel) -> Result<AffineParams> {
    model.spec.to_affine()
}

/// Generator of the BNS power problem.
pub fn bns_power_coeffs(model: &BnsModel, gamma: f64) -> GeneratorCoeffs {
    let d = model.dim();
    let eta = dvec(&model.eta);
    let mut c = GeneratorCoeffs::zero(d);
    c.c_x = TimeFn::Constant(&eta * eta.transpose() * (-0.5 * gamma / (1.0 - gamma)));
    c.g_t = Some(Arc::new(|_, k: f64| -((-k).exp_m1() + k)));
    c
}

/// Linear Riccati equation: block exponential for `H`-form drift, RK4
/// otherwise; the other route is the cross-check.
fn solve_linear(params: &AffineParams, coeffs: &GeneratorCoeffs, v: f64, horizon: f64, steps: usize) -> Result<(RiccatiSolution, Option<f64>)> {
    let d = params.dim();
    let rk = solve_rk(params, coeffs, &SymMat::zeros(d), v, horizon, RkOptions::fixed(steps))?;
    if params.drift.h().is_none() {
        return Ok((rk, None));
    }
    let sol = solve_block_exp(params, coeffs, horizon, v, steps)?;
    let diff = max_entry_diff(&sol, &rk);
    if !(diff <= CROSS_CHECK_TOL) {
        return Err(Error::CrossCheck {
            what: "block exponential vs RK4".into(),
            diff,
        });
    }
    Ok((sol, Some(diff)))
}

/// BNS power utility `x^γ/γ`; `Γ` is negative semidefinite and the
/// strategy is the constant fraction `η/(1-γ)`.
pub fn bns_power_solve(model: &BnsModel, gamma: f64, horizon: f64, steps: usize) -> Result<UtilitySolveResult> {
    check_gamma_power(gamma)?;
    let params = bns_params(model)?;
    let coeffs = bns_power_coeffs(model, gamma);
    let (sol, diff) = solve_linear(&params, &coeffs, 0.0, horizon, steps)?;
    let drift = diagnostics(&params, &coeffs, &sol, &model.r0)?;
    let pi = dvec(&model.eta) / (1.0 - gamma);
    let margin = max_eig_on_grid(&sol);
    Ok(UtilitySolveResult {
        form: UtilityForm::Power { gamma, y_sign: -1.0 },
        y0: y0_of(&sol, &model.r0),
        strategy_grid: vec![pi; sol.grid.len()],
        riccati: sol,
        coeffs,
        diagnostics: SolveDiagnostics {
            drift_match: drift,
            cross_check: diff,
            cone_margin: Some(margin),
        },
    })
}

/// Generator of the BNS exponential problem.
pub fn bns_exp_coeffs(model: &BnsModel, gamma: f64, endow: &EndowmentSpec) -> GeneratorCoeffs {
    let d = model.dim();
    let eta = dvec(&model.eta);
    let mut c = GeneratorCoeffs::zero(d);
    c.c_x = TimeFn::Constant(&eta * eta.transpose() * (0.5 / gamma));
    c.c_hzhz = TimeFn::Constant(GenMat::identity(d, d) * (-0.5 * gamma));
    c.g_t = Some(Arc::new(move |_, k: f64| -((-gamma * k).exp_m1() + gamma * k) / gamma));
    endow.apply(&mut c);
    c
}

/// BNS exponential utility with claim `F`; strategy `η/γ` in money.
pub fn bns_exp_solve(model: &BnsModel, gamma: f64, endow: &EndowmentSpec, horizon: f64, steps: usize) -> Result<UtilitySolveResult> {
    check_gamma_exp(gamma)?;
    endow.check(model.dim())?;
    let params = bns_params(model)?;
    let coeffs = bns_exp_coeffs(model, gamma, endow);
    let (sol, diff) = solve_linear(&params, &coeffs, -endow.strike, horizon, steps)?;
    let drift = diagnostics(&params, &coeffs, &sol, &model.r0)?;
    let pi = dvec(&model.eta) / gamma;
    let margin = min_eig_on_grid(&sol);
    Ok(UtilitySolveResult {
        form: UtilityForm::Exponential { gamma },
        y0: y0_of(&sol, &model.r0),
        strategy_grid: vec![pi; sol.grid.len()],
        riccati: sol,
        coeffs,
        diagnostics: SolveDiagnostics {
            drift_match: drift,
            cross_check: diff,
            cone_margin: Some(margin),
        },
    })
}

pub fn bns_exp_price(model: &BnsModel, gamma: f64, claim: &EndowmentSpec, horizon: f64, steps: usize) -> Result<ClaimSolveResult> {
    let with_claim = bns_exp_solve(model, gamma, claim, horizon, steps)?;
    let without = bns_exp_solve(model, gamma, &EndowmentSpec::none(model.dim()), horizon, steps)?;
    Ok(claim_result(with_claim, without))
}

/// Closed-form solution of the one-dimensional Heston exponential problem
/// `dN = R η dt + √R dQ`, `dR = (b + λ R) dt + σ √R dW`, `d⟨W, Q⟩ = ρ dt`.
///
/// With `τ = T - t`, `Γ` solves `dΓ/dτ = qΓ² + lΓ + c`, `Γ(τ = 0) = 0`, where
/// `q = γσ²(ρ² - 1)/2`, `l = λ - σρη`, `c = η²/(2γ)`, and
///
/// ```text
/// Γ(τ) = 2c φ / (φ (s - l) + 2),   φ = (e^{sτ} - 1)/s,   s = √(l² - 4qc),
/// ```
///
/// which covers `s = 0` through `φ = τ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Heston1dExp {
    pub eta: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub rho: f64,
    pub gamma: f64,
    pub b: f64,
    pub r0: f64,
    pub horizon: f64,
}

/// Panels of the Simpson rule for `∫ b Γ`.
const CLOSED_FORM_PANELS: usize = 4000;

impl Heston1dExp {
    pub fn q(&self) -> f64 {
        0.5 * self.gamma * self.sigma * self.sigma * (self.rho * self.rho - 1.0)
    }

    pub fn l(&self) -> f64 {
        self.lambda - self.sigma * self.rho * self.eta
    }

    pub fn c(&self) -> f64 {
        self.eta * self.eta / (2.0 * self.gamma)
    }

    /// `s² = l² - 4qc`.
    pub fn discriminant(&self) -> f64 {
        let l = self.l();
        l * l - 4.0 * self.q() * self.c()
    }

    pub fn gamma_at(&self, t: f64) -> f64 {
        let tau = self.horizon - t;
        let s = self.discriminant().max(0.0).sqrt();
        let phi = if s * tau == 0.0 { tau } else { (s * tau).exp_m1() / s };
        2.0 * self.c() * phi / (phi * (s - self.l()) + 2.0)
    }

    /// `w(t) = ∫_t^T b Γ(s) ds` by Simpson's rule.
    pub fn w_at(&self, t: f64) -> f64 {
        let n = CLOSED_FORM_PANELS;
        let h = (self.horizon - t) / n as f64;
        if h == 0.0 {
            return 0.0;
        }
        let f: Vec<f64> = (0..=n).map(|k| self.b * self.gamma_at(t + k as f64 * h)).collect();
        cumulative_simpson_from_end(&f, h)[0]
    }

    /// `V(x) = -exp(-γ(x + Γ(0) R₀ + w(0)))`.
    pub fn value(&self, x: f64) -> f64 {
        -(-self.gamma * (x + self.gamma_at(0.0) * self.r0 + self.w_at(0.0))).exp()
    }

    /// `π(t) = η/γ - Γ(t) σ ρ` (money amount).
    pub fn strategy_at(&self, t: f64) -> f64 {
        self.eta / self.gamma - self.gamma_at(t) * self.sigma * self.rho
    }

    /// The same model as a [`HestonModel`] (`Σ = σ/2`, `H = λ/2`).
    pub fn to_model(&self) -> Result<HestonModel> {
        let sig = self.sigma / 2.0;
        let params = AffineParams::new(
            SymMat::from_row_slice(1, &[sig * sig]),
            SymMat::from_row_slice(1, &[self.b]),
            LinearDrift::HForm(GenMat::from_element(1, 1, self.lambda / 2.0)),
            JumpAtomsConstant::default(),
            Default::default(),
        )?
        .with_sigma_factor(GenMat::from_element(1, 1, sig))?;
        HestonModel::new(
            params,
            vec![self.eta],
            CorrelationSpec::new(vec![self.rho])?,
            SymMat::from_row_slice(1, &[self.r0]),
        )
    }
}

pub fn heston1d_exp_closed_form(eta: f64, lambda: f64, sigma: f64, rho: f64, gamma: f64, b: f64, r0: f64, horizon: f64) -> Result<Heston1dExp> {
    for (name, v) in [("η", eta), ("λ", lambda), ("ρ", rho), ("b", b), ("R₀", r0)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    if !(sigma > 0.0) || !(gamma > 0.0) || !(horizon > 0.0) || rho.abs() > 1.0 || b < 0.0 || r0 < 0.0 {
        return Err(Error::InvalidParams("need σ > 0, γ > 0, T > 0, |ρ| ≤ 1, b ≥ 0, R₀ ≥ 0".into()));
    }
    Ok(Heston1dExp {
        eta,
        lambda,
        sigma,
        rho,
        gamma,
        b,
        r0,
        horizon,
    })
}

/// Two-dimensional Heston-type preset: Wishart volatility with `k = d + 1`
/// degrees of freedom, negative correlation and a positive risk premium.
pub fn heston_preset() -> HestonModel {
    let sigma = GenMat::from_row_slice(2, 2, &[0.15, 0.02, 0.0, 0.12]);
    let h = GenMat::from_row_slice(2, 2, &[-1.0, 0.1, 0.05, -0.8]);
    let params = AffineParams::wishart(&sigma, 3.0, h).expect("valid preset");
    HestonModel::new(
        params,
        vec![1.5, 1.0],
        CorrelationSpec::new(vec![-0.5, -0.3]).expect("valid preset"),
        SymMat::from_row_slice(2, &[0.04, 0.005, 0.005, 0.03]),
    )
    .expect("valid preset")
}

/// Two-dimensional BNS preset with three jump atoms.
pub fn bns_preset() -> BnsModel {
    let atoms = vec![
        ConstantAtom {
            xi: SymMat::from_row_slice(2, &[0.03, 0.01, 0.01, 0.02]),
            weight: 1.5,
        },
        ConstantAtom {
            xi: SymMat::from_row_slice(2, &[0.06, 0.0, 0.0, 0.01]),
            weight: 0.5,
        },
        ConstantAtom {
            xi: SymMat::from_row_slice(2, &[0.01, -0.005, -0.005, 0.05]),
            weight: 0.8,
        },
    ];
    let spec = BnsJumpSpec {
        lambda0: SymMat::from_row_slice(2, &[0.01, 0.002, 0.002, 0.008]),
        lambda_op: LinearDrift::HForm(GenMat::from_row_slice(2, 2, &[-1.0, 0.1, 0.0, -0.8])),
        b_j: SymMat::zeros(2),
        m_j: JumpAtomsConstant::new(atoms),
    };
    BnsModel::new(spec, vec![1.2, 0.8], SymMat::from_row_slice(2, &[0.04, 0.005, 0.005, 0.03])).expect("valid preset")
}

pub const PRESET_HORIZON: f64 = 1.0;
pub const PRESET_POWER_GAMMA: f64 = 0.5;
pub const PRESET_EXP_GAMMA: f64 = 2.0;
pub const PRESET_SWAP_STRIKE: f64 = 0.04;

/// The four shipped utility problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    HestonPower,
    HestonExp,
    BnsPower,
    BnsExp,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::HestonPower, Preset::HestonExp, Preset::BnsPower, Preset::BnsExp];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::HestonPower => "heston-power",
            Preset::HestonExp => "heston-exp",
            Preset::BnsPower => "bns-power",
            Preset::BnsExp => "bns-exp",
        }
    }

    /// Claim of the preset: a variance swap on the first asset for the
    /// exponential problems, nothing for the power problems.
    pub fn endowment(&self) -> EndowmentSpec {
        match self {
            Preset::HestonExp | Preset::BnsExp => {
                EndowmentSpec::variance_swap(2, 1, PRESET_HORIZON, PRESET_SWAP_STRIKE).expect("valid preset")
            }
            _ => EndowmentSpec::none(2),
        }
    }

    pub fn solve(&self) -> Result<UtilitySolveResult> {
        let endow = self.endowment();
        match self {
            Preset::HestonPower => heston_power_solve(&heston_preset(), PRESET_POWER_GAMMA, &endow, PRESET_HORIZON, DEFAULT_RK_STEPS),
            Preset::HestonExp => heston_exp_solve(&heston_preset(), PRESET_EXP_GAMMA, &endow, PRESET_HORIZON, DEFAULT_RK_STEPS),
            Preset::BnsPower => bns_power_solve(&bns_preset(), PRESET_POWER_GAMMA, PRESET_HORIZON, DEFAULT_RK_STEPS),
            Preset::BnsExp => bns_exp_solve(&bns_preset(), PRESET_EXP_GAMMA, &endow, PRESET_HORIZON, DEFAULT_RK_STEPS),
        }
    }

    /// Riccati data of the solve as a [`BsdeSolutionEval`].
    pub fn bsde(&self, res: &UtilitySolveResult) -> Result<BsdeSolutionEval> {
        let params = match self {
            Preset::HestonPower | Preset::HestonExp => heston_preset().params,
            Preset::BnsPower | Preset::BnsExp => bns_preset().spec.to_affine()?,
        };
        BsdeSolutionEval::new(params, res.coeffs.clone(), res.riccati.clone())
    }
}

/// Eight perturbations `π + δ e_j` with `|δ| ∈ {s, 2s}`, both signs, and
/// directions cycling through the coordinates.
pub fn perturbed_strategies(pi: &TimeFn<DVector<f64>>, d: usize, scale: f64) -> Vec<(String, TimeFn<DVector<f64>>)> {
    (0..8)
        .map(|k| {
            let j = k % d;
            let sign = if (k / d).is_multiple_of(2) { 1.0 } else { -1.0 };
            let mag = if k < 4 { 1.0 } else { 2.0 };
            let delta = sign * mag * scale;
            let base = pi.clone();
            let label = format!("e{}{}{}", j + 1, if sign > 0.0 { "+" } else { "-" }, mag);
            let f = TimeFn::callback(move |t| {
                let mut v = base.eval(t);
                v[j] += delta;
                v
            });
            (label, f)
        })
        .collect()
}

/// Audit of one perturbed strategy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbedAudit {
    pub label: String,
    #[serde(flatten)]
    pub audit: AuditResult,
}

/// Monte Carlo check of a solved problem: `L^π` for the optimal and eight
/// perturbed strategies on common paths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimalityProbe {
    pub wealth0: f64,
    pub value: f64,
    pub optimal: AuditResult,
    pub perturbed: Vec<PerturbedAudit>,
}

impl OptimalityProbe {
    /// Optimal strategy is a martingale within 3 SE and no perturbation is a
    /// significant improvement.
    pub fn pass(&self) -> bool {
        (self.optimal.ratio - 1.0).abs() <= 3.0 * self.optimal.std_err
            && self.perturbed.iter().all(|p| p.audit.ratio <= 1.0 + 3.0 * p.audit.std_err)
    }
}

/// Perturbation size: a quarter of the largest optimal position, at least 0.05.
fn perturbation_scale(res: &UtilitySolveResult) -> f64 {
    let m = res.strategy_grid.iter().map(|v| v.amax()).fold(0.0, f64::max);
    0.25 * m.max(0.2)
}

/// Runs the optimal strategy of `res` and eight perturbations of it through
/// the martingale audit on `engine`, which must carry the claim's `O`.
pub fn optimality_probe<E: PathEngine>(
    engine: &E,
    res: &UtilitySolveResult,
    endow: &EndowmentSpec,
    wealth0: f64,
    opts: &McOptions,
) -> Result<OptimalityProbe> {
    let pi = res.strategy();
    let mut strategies = vec![pi.clone()];
    let perturbed = perturbed_strategies(&pi, engine.dim(), perturbation_scale(res));
    strategies.extend(perturbed.iter().map(|(_, s)| s.clone()));
    let value = res.value_at(wealth0);
    let setup = AuditSetup {
        engine,
        form: res.form,
        wealth0,
        terminal: endow.terminal(),
        l0: value,
    };
    let out = martingale_audit(&setup, &strategies, opts)?;
    Ok(OptimalityProbe {
        wealth0,
        value,
        optimal: out[0],
        perturbed: perturbed
            .into_iter()
            .zip(&out[1..])
            .map(|((label, _), audit)| PerturbedAudit { label, audit: *audit })
            .collect(),
    })
}

/// Initial wealth used by the preset probes.
pub const PROBE_WEALTH: f64 = 1.0;
pub const PROBE_HESTON_STEPS: usize = 500;
/// The BNS flow is exact between grid points; only the strategy and wealth
/// updates see the grid.
pub const PROBE_BNS_STEPS: usize = 100;

impl Preset {
    pub fn probe(&self, res: &UtilitySolveResult, opts: &McOptions) -> Result<OptimalityProbe> {
        let endow = self.endowment();
        match self {
            Preset::HestonPower | Preset::HestonExp => {
                let engine = heston_preset().engine(TimeGrid::new(PRESET_HORIZON, PROBE_HESTON_STEPS)?, &endow)?;
                optimality_probe(&engine, res, &endow, PROBE_WEALTH, opts)
            }
            Preset::BnsPower | Preset::BnsExp => {
                let engine = bns_preset().engine(TimeGrid::new(PRESET_HORIZON, PROBE_BNS_STEPS)?, &endow)?;
                optimality_probe(&engine, res, &endow, PROBE_WEALTH, opts)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heston_1d(sig: f64, h: f64, b: f64, eta: f64, rho: f64, r0: f64) -> HestonModel {
        let params = AffineParams::new(
            SymMat::from_row_slice(1, &[sig * sig]),
            SymMat::from_row_slice(1, &[b]),
            LinearDrift::HForm(GenMat::from_element(1, 1, h)),
            JumpAtomsConstant::default(),
            Default::default(),
        )
        .unwrap()
        .with_sigma_factor(GenMat::from_element(1, 1, sig))
        .unwrap();
        HestonModel::new(params, vec![eta], CorrelationSpec::new(vec![rho]).unwrap(), SymMat::from_row_slice(1, &[r0])).unwrap()
    }

    /// `Γ(τ)` of `dΓ/dτ = qΓ² + lΓ + c`, `Γ(0) = 0`, for `l² ≥ 4qc`.
    fn scalar_riccati(q: f64, l: f64, c: f64, tau: f64) -> f64 {
        let s = (l * l - 4.0 * q * c).sqrt();
        let phi = (s * tau).exp_m1() / s;
        2.0 * c * phi / (phi * (s - l) + 2.0)
    }

    fn bns_zero_lambda(eta: Vec<f64>, atoms: Vec<ConstantAtom>) -> BnsModel {
        let spec = BnsJumpSpec {
            lambda0: SymMat::from_row_slice(2, &[0.02, 0.0, 0.0, 0.01]),
            lambda_op: LinearDrift::HForm(GenMat::zeros(2, 2)),
            b_j: SymMat::from_row_slice(2, &[0.01, 0.0, 0.0, 0.0]),
            m_j: JumpAtomsConstant::new(atoms),
        };
        BnsModel::new(spec, eta, SymMat::from_row_slice(2, &[0.04, 0.0, 0.0, 0.03])).unwrap()
    }

    #[test]
    fn heston_power_without_risk_premium_is_trivial() {
        let mut m = heston_preset();
        m.eta = vec![0.0, 0.0];
        m.corr = CorrelationSpec::zero(2);
        let r = heston_power_solve(&m, 0.3, &EndowmentSpec::none(2), 1.0, DEFAULT_RK_STEPS).unwrap();
        assert!(r.riccati.gamma.iter().all(|g| g.norm() == 0.0));
        assert!((r.value_at(2.0) - 2f64.powf(0.3) / 0.3).abs() < 1e-15);
        assert!(r.strategy_grid.iter().all(|p| p.amax() == 0.0));
    }

    #[test]
    fn heston_power_scalar_matches_closed_form() {
        let (sig, h, eta, rho, gamma) = (0.3, -1.5, 0.8, -0.6, 0.4);
        let m = heston_1d(sig, h, 0.1, eta, rho, 0.05);
        let r = heston_power_solve(&m, gamma, &EndowmentSpec::none(1), 2.0, DEFAULT_RK_STEPS).unwrap();
        let k = gamma / (1.0 - gamma);
        let sh = 2.0 * sig;
        let (q, l, c) = (0.5 * sh * sh * (1.0 + k * rho * rho), 2.0 * h + k * eta * sh * rho, 0.5 * k * eta * eta);
        for (i, t) in r.riccati.grid.iter().enumerate().step_by(97) {
            let exact = scalar_riccati(q, l, c, 2.0 - t);
            assert!((r.riccati.gamma[i].as_mat()[(0, 0)] - exact).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn heston_power_routes_agree_on_value() {
        let m = heston_preset();
        let coeffs = heston_power_coeffs(&m, 0.5, &EndowmentSpec::none(2));
        let rk = solve_rk(&m.params, &coeffs, &SymMat::zeros(2), 0.0, 1.0, RkOptions::fixed(DEFAULT_RK_STEPS)).unwrap();
        let r = heston_power_solve(&m, 0.5, &EndowmentSpec::none(2), 1.0, DEFAULT_RK_STEPS).unwrap();
        let v_rk = r.form.value(1.3, y0_of(&rk, &m.r0));
        assert!(((r.value_at(1.3) - v_rk) / v_rk).abs() < 1e-7);
    }

    #[test]
    fn value_covariance_in_wealth() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pw = Preset::HestonPower.solve().unwrap();
        let ex = Preset::BnsExp.solve().unwrap();
        for _ in 0..10 {
            let (x, c) = (rng.random_range(0.1..5.0), rng.random_range(0.1..5.0));
            let g = PRESET_POWER_GAMMA;
            assert!((pw.value_at(c * x) - c.powf(g) * pw.value_at(x)).abs() <= 1e-13 * pw.value_at(c * x).abs());
            let y = rng.random_range(-2.0..2.0);
            let lhs = ex.value_at(x + y);
            assert!((lhs - (-PRESET_EXP_GAMMA * y).exp() * ex.value_at(x)).abs() <= 1e-13 * lhs.abs());
        }
    }

    #[test]
    fn value_increasing_in_wealth() {
        for p in Preset::ALL {
            let r = p.solve().unwrap();
            let v: Vec<f64> = (1..20).map(|k| r.value_at(k as f64 * 0.25)).collect();
            assert!(v.windows(2).all(|w| w[1] > w[0]), "{}", p.name());
        }
    }

    #[test]
    fn strategies_follow_their_formulas() {
        let m = heston_preset();
        let sr = m.params.sigma().transpose() * dvec(m.corr.rho());
        let eta = dvec(&m.eta);
        let pw = Preset::HestonPower.solve().unwrap();
        let ex = Preset::HestonExp.solve().unwrap();
        let n = pw.riccati.grid.len();
        for i in (0..n).step_by(n / 20) {
            let g = pw.riccati.gamma[i].as_mat();
            let expect = (&eta + g * &sr * 2.0) / (1.0 - PRESET_POWER_GAMMA);
            assert!((&pw.strategy_grid[i] - expect).amax() <= 1e-12);
            let g = ex.riccati.gamma[i].as_mat();
            let expect = &eta / PRESET_EXP_GAMMA - g * &sr * 2.0;
            assert!((&ex.strategy_grid[i] - expect).amax() <= 1e-12);
        }
        let bp = Preset::BnsPower.solve().unwrap();
        let eta = dvec(&bns_preset().eta);
        assert!(bp.strategy_grid.iter().all(|p| (p - &eta / (1.0 - PRESET_POWER_GAMMA)).amax() == 0.0));
    }

    #[test]
    fn presets_pass_drift_match() {
        for p in Preset::ALL {
            let r = p.solve().unwrap();
            assert!(r.diagnostics.drift_match.pass, "{}: {:?}", p.name(), r.diagnostics.drift_match.max_scaled);
        }
    }

    #[test]
    fn cone_signs_on_grid() {
        let he = Preset::HestonExp.solve().unwrap();
        assert!(min_eig_on_grid(&he.riccati) >= -1e-9);
        let bp = Preset::BnsPower.solve().unwrap();
        assert!(max_eig_on_grid(&bp.riccati) <= 1e-9);
        let be = Preset::BnsExp.solve().unwrap();
        assert!(min_eig_on_grid(&be.riccati) >= -1e-9);
    }

    #[test]
    fn numeraire_plug_back_and_identical_legs() {
        let m = heston_preset();
        let a = GenMat::identity(2, 2) * 0.5;
        let o3 = GenMat::from_diagonal(&DVector::from_vec(vec![0.03, 0.01]));
        let o2 = GenMat::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2]);
        let p = heston_power_numeraire_value(&m, 0.5, &a, (&o3, &o2), &o3, 1.0, DEFAULT_RK_STEPS).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = rng.random_range(0.5..10.0);
            assert!(p.price_at(x) != 0.0);
            assert!(p.plug_back_error(x) <= 1e-10);
        }
        let zero = GenMat::zeros(2, 2);
        let same = heston_power_numeraire_value(&m, 0.5, &a, (&o3, &zero), &o3, 1.0, DEFAULT_RK_STEPS).unwrap();
        assert_eq!(same.price_at(3.0), 0.0);
    }

    #[test]
    fn swap_prices_plug_back() {
        let claim = Preset::HestonExp.endowment();
        let h = heston_exp_price(&heston_preset(), 2.0, &claim, 1.0, DEFAULT_RK_STEPS).unwrap();
        let b = bns_exp_price(&bns_preset(), 2.0, &claim, 1.0, DEFAULT_RK_STEPS).unwrap();
        for x in [-1.0, 0.0, 0.7, 2.5, 10.0] {
            assert!(h.price.plug_back_error(x) <= 1e-10);
            assert!(b.price.plug_back_error(x) <= 1e-10);
        }
        // Paying realized variance against a strike near its mean is cheap.
        assert!(h.price.price_at(0.0).abs() < 0.02);
    }

    #[test]
    fn no_swap_has_zero_price_and_hedge() {
        let none = EndowmentSpec::variance_swap(2, 0, 1.0, 0.5).unwrap();
        let h = heston_exp_price(&heston_preset(), 2.0, &none, 1.0, DEFAULT_RK_STEPS).unwrap();
        assert_eq!(h.price.price_at(1.0), 0.0);
        assert!(h.hedge_grid.iter().all(|v| v.amax() == 0.0));
        let b = bns_exp_price(&bns_preset(), 2.0, &none, 1.0, DEFAULT_RK_STEPS).unwrap();
        assert_eq!(b.price.price_at(1.0), 0.0);
    }

    #[test]
    fn uncorrelated_swap_needs_no_hedge() {
        let mut m = heston_preset();
        m.corr = CorrelationSpec::zero(2);
        let claim = EndowmentSpec::variance_swap(2, 2, 1.0, 0.03).unwrap();
        let h = heston_exp_price(&m, 1.5, &claim, 1.0, DEFAULT_RK_STEPS).unwrap();
        assert!(h.price.price_at(0.0) != 0.0);
        assert!(h.hedge_grid.iter().all(|v| v.amax() == 0.0));
    }

    #[test]
    fn bns_without_mean_reversion_is_linear_in_time() {
        let atoms = bns_preset().spec.m_j.atoms.clone();
        let m = bns_zero_lambda(vec![1.0, 0.5], atoms);
        let eta = dvec(&m.eta);
        let g = 0.4;
        let r = bns_power_solve(&m, g, 1.5, DEFAULT_RK_STEPS).unwrap();
        let slope = &eta * eta.transpose() * (-0.5 * g / (1.0 - g));
        for (t, gm) in r.riccati.grid.iter().zip(&r.riccati.gamma) {
            assert!((gm.as_mat() - &slope * (1.5 - t)).amax() < 1e-13);
        }
        let claim = EndowmentSpec::variance_swap(2, 1, 1.5, 0.02).unwrap();
        let r = bns_exp_solve(&m, 2.0, &claim, 1.5, DEFAULT_RK_STEPS).unwrap();
        let slope = &eta * eta.transpose() * 0.25 + &claim.a;
        for (t, gm) in r.riccati.grid.iter().zip(&r.riccati.gamma) {
            assert!((gm.as_mat() - &slope * (1.5 - t)).amax() < 1e-13);
        }
    }

    #[test]
    fn bns_without_jumps_has_drift_only_value() {
        let m = bns_zero_lambda(vec![1.0, 0.5], vec![]);
        let g = 0.4;
        let r = bns_power_solve(&m, g, 1.0, DEFAULT_RK_STEPS).unwrap();
        let eta = dvec(&m.eta);
        let b = m.spec.lambda0.as_mat() + m.spec.b_j.as_mat();
        let k = g / (1.0 - g);
        let w0 = -0.25 * k * (eta.transpose() * b * &eta)[0];
        assert!((r.riccati.w[0] - w0).abs() < 1e-12);
        let y0 = trace_prod(r.riccati.gamma[0].as_mat(), m.r0.as_mat()) + w0;
        assert!((r.value_at(1.0) - (-y0).exp() / g).abs() < 1e-12);
    }

    #[test]
    fn bns_power_without_premium_is_trivial() {
        let mut m = bns_preset();
        m.eta = vec![0.0, 0.0];
        let r = bns_power_solve(&m, 0.5, 1.0, DEFAULT_RK_STEPS).unwrap();
        assert!(r.riccati.gamma.iter().all(|g| g.norm() == 0.0));
        assert_eq!(r.value_at(4.0), 4.0);
    }

    #[test]
    fn closed_form_degenerate_branch() {
        let cf = heston1d_exp_closed_form(1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.1, 1.0).unwrap();
        assert_eq!(cf.discriminant(), 0.0);
        assert!((cf.gamma_at(0.0) - 0.5).abs() < 1e-15);
        let zero = heston1d_exp_closed_form(0.0, -1.0, 0.5, 0.3, 2.0, 0.5, 0.1, 1.0).unwrap();
        assert_eq!(zero.gamma_at(0.3), 0.0);
        assert_eq!(zero.strategy_at(0.3), 0.0);
        assert_eq!(zero.value(1.5), -(-3.0f64).exp());
    }

    #[test]
    fn closed_form_matches_rk() {
        let cf = heston1d_exp_closed_form(0.7, -2.0, 0.6, -0.7, 1.5, 0.08, 0.05, 2.0).unwrap();
        let r = heston_exp_solve(&cf.to_model().unwrap(), cf.gamma, &EndowmentSpec::none(1), cf.horizon, DEFAULT_RK_STEPS).unwrap();
        for (i, t) in r.riccati.grid.iter().enumerate() {
            assert!((r.riccati.gamma[i].as_mat()[(0, 0)] - cf.gamma_at(*t)).abs() < 1e-9);
            assert!((r.strategy_grid[i][0] - cf.strategy_at(*t)).abs() < 1e-9);
        }
        assert!(((r.value_at(0.4) - cf.value(0.4)) / cf.value(0.4)).abs() < 1e-9);
    }

    #[test]
    fn closed_form_rejects_bad_input() {
        assert!(heston1d_exp_closed_form(1.0, 1.0, 0.0, 0.5, 1.0, 0.1, 0.1, 1.0).is_err());
        assert!(heston1d_exp_closed_form(1.0, 1.0, 1.0, 1.5, 1.0, 0.1, 0.1, 1.0).is_err());
        assert!(heston1d_exp_closed_form(f64::NAN, 1.0, 1.0, 0.5, 1.0, 0.1, 0.1, 1.0).is_err());
    }

    #[test]
    fn perturbations_cover_both_signs_and_sizes() {
        let pi = TimeFn::Constant(DVector::from_vec(vec![1.0, 2.0]));
        let ps = perturbed_strategies(&pi, 2, 0.1);
        assert_eq!(ps.len(), 8);
        let shifts: Vec<DVector<f64>> = ps.iter().map(|(_, f)| f.eval(0.5) - pi.eval(0.5)).collect();
        for (k, s) in shifts.iter().enumerate() {
            assert_eq!(s.iter().filter(|v| **v != 0.0).count(), 1);
            for t in &shifts[..k] {
                assert!((s - t).amax() > 1e-12);
            }
        }
    }

    #[test]
    fn gamma_ranges_are_checked() {
        let m = heston_preset();
        assert!(heston_power_solve(&m, 1.0, &EndowmentSpec::none(2), 1.0, DEFAULT_RK_STEPS).is_err());
        assert!(heston_exp_solve(&m, -1.0, &EndowmentSpec::none(2), 1.0, DEFAULT_RK_STEPS).is_err());
        assert!(EndowmentSpec::variance_swap(2, 3, 1.0, 0.0).is_err());
    }

    #[test]
    fn ordinary_exponential_shifts_eta() {
        assert_eq!(heston_preset().ordinary_exponential().eta, vec![2.0, 1.5]);
        assert_eq!(bns_preset().ordinary_exponential().eta, vec![1.7, 1.3]);
    }
}
