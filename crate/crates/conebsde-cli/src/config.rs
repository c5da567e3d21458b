//! Run configuration: the JSON schema, validation and conversion into
//! library objects.
//!
//! Structural problems (missing fields, wrong types) are reported by the
//! JSON parser. Everything else is checked by [`validate`], which collects
//! every problem before returning.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use conebsde::affine_model::{AffineParams, ConstantAtom, JumpAtomsConstant, JumpAtomsLinear, LinearAtom, LinearDrift};
use conebsde::portfolio::{BnsModel, EndowmentSpec, HestonModel};
use conebsde::riccati::{GeneratorCoeffs, TimeFn, DEFAULT_BLOWUP_NORM, DEFAULT_RK45_TOL, DEFAULT_RK_STEPS};
use conebsde::simulator::{BnsJumpSpec, CorrelationSpec, DEFAULT_PATHS, DEFAULT_STEPS};
use conebsde::symcone::{asymmetry, from_rows, GenMat, SymMat};

pub const SCHEMA: &str = "conebsde/1";

/// Asymmetry above which symmetrizing an input triggers a warning.
pub const SYMMETRY_WARN: f64 = 1e-12;

/// Row-major nested array.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub horizon: f64,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endowment: Option<EndowmentConfig>,
    /// Explicit generator for `riccati-solve` and `verify drift-match`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riccati: Option<RiccatiConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Heston(HestonConfig),
    Bns(BnsConfig),
    RawAffine(RawAffineConfig),
}

/// Wishart volatility: `α = ΣᵀΣ`, drift `b + Hx + xHᵀ` with `b` given
/// directly or as `k α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonConfig {
    pub sigma: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    pub h: Matrix,
    pub eta: Vec<f64>,
    pub rho: Vec<f64>,
    pub r0: Matrix,
    #[serde(default)]
    pub ordinary_exponential: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub xi: Matrix,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearAtomConfig {
    pub xi: Matrix,
    pub u: Matrix,
}

/// Ornstein-Uhlenbeck volatility `dR = (λ + HR + RHᵀ) dt + dJ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnsConfig {
    pub lambda0: Matrix,
    pub h: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_j: Option<Matrix>,
    #[serde(default)]
    pub atoms: Vec<AtomConfig>,
    pub eta: Vec<f64>,
    pub r0: Matrix,
    #[serde(default)]
    pub ordinary_exponential: bool,
}

/// Admissible parameter set given entry by entry. Exactly one of `h` and
/// `beta` describes the linear drift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAffineConfig {
    pub alpha: Matrix,
    pub b: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<Vec<Matrix>>>,
    #[serde(default)]
    pub m: Vec<AtomConfig>,
    #[serde(default)]
    pub mu: Vec<LinearAtomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunc_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Matrix>,
    pub x0: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UtilityConfig {
    Power { gamma: f64 },
    Exponential { gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EndowmentConfig {
    None,
    /// Average realized variance of asset `index` (1-based, 0 = none)
    /// against `strike`.
    VarianceSwap { index: usize, strike: f64 },
    /// `Tr(a O_T) - strike` with `dO = σ√R dQ̂ + (o₁ + o₂R) dt`.
    Claim {
        a: Matrix,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigma: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        o1: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        o2: Option<Matrix>,
        #[serde(default)]
        strike: f64,
    },
    /// Floating rate `Tr(a(o₁ + o₂R))` against the fixed rate `Tr(a o₃)`.
    Numeraire {
        a: Matrix,
        floating_o1: Matrix,
        floating_o2: Matrix,
        fixed_o3: Matrix,
    },
}

/// Constant generator coefficients; omitted entries are zero (`o2` defaults
/// to the identity).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_zz: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_zsqrtx: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_x: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hzhz: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hzz: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hzsqrtx: Option<Matrix>,
    #[serde(default)]
    pub c_y: f64,
    #[serde(default)]
    pub c_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o1: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub o2: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_u: Option<Matrix>,
    #[serde(default)]
    pub terminal_v: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Block exponential when it applies, RK4 otherwise.
    #[default]
    Auto,
    Rk4,
    Rk45,
    BlockExp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub steps: usize,
    pub method: Method,
    pub tol: f64,
    pub blowup_norm: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: DEFAULT_RK_STEPS,
            method: Method::Auto,
            tol: DEFAULT_RK45_TOL,
            blowup_norm: DEFAULT_BLOWUP_NORM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub paths: u64,
    pub seed: u64,
    pub steps: usize,
    pub antithetic: bool,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            paths: DEFAULT_PATHS,
            seed: 0,
            steps: DEFAULT_STEPS,
            antithetic: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Transform,
    Martingale,
    DriftMatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub check: Check,
    /// Transform argument; defaults to the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Matrix>,
    /// Initial wealth of the martingale audit.
    #[serde(default = "one")]
    pub wealth: f64,
    /// Random `(t, x)` samples of the drift-match check.
    #[serde(default = "fifty")]
    pub samples: usize,
}

fn one() -> f64 {
    1.0
}

fn fifty() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    /// Wealth levels at which values and prices are reported.
    pub value_points: Vec<f64>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: None,
            value_points: vec![1.0],
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config: {e}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Model ready for the solvers.
#[derive(Clone, Debug)]
pub enum Model {
    Heston(HestonModel),
    Bns(BnsModel),
    Raw { params: AffineParams, x0: SymMat },
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Heston(_) => "heston",
            Model::Bns(_) => "bns",
            Model::Raw { .. } => "raw-affine",
        }
    }

    pub fn params(&self) -> AffineParams {
        match self {
            Model::Heston(m) => m.params.clone(),
            Model::Bns(m) => m.spec.to_affine().expect("validated"),
            Model::Raw { params, .. } => params.clone(),
        }
    }

    pub fn initial_state(&self) -> &SymMat {
        match self {
            Model::Heston(m) => &m.r0,
            Model::Bns(m) => &m.r0,
            Model::Raw { x0, .. } => x0,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Endowment {
    Spec(EndowmentSpec),
    Numeraire {
        a: GenMat,
        floating: (GenMat, GenMat),
        fixed: GenMat,
    },
}

impl Endowment {
    /// Endowment whose `O` the simulator tracks and whose claim enters the
    /// terminal value.
    pub fn primary(&self, d: usize) -> EndowmentSpec {
        match self {
            Endowment::Spec(e) => e.clone(),
            Endowment::Numeraire { a, floating, .. } => EndowmentSpec {
                a: a.clone(),
                o1: floating.0.clone(),
                o2: floating.1.clone(),
                ..EndowmentSpec::none(d)
            },
        }
    }
}

/// Explicit Riccati problem.
#[derive(Clone, Debug)]
pub struct RiccatiSpec {
    pub coeffs: GeneratorCoeffs,
    pub terminal_u: SymMat,
    pub terminal_v: f64,
}

/// Validated configuration with its library objects.
#[derive(Clone, Debug)]
pub struct Validated {
    pub config: RunConfig,
    pub dim: usize,
    pub model: Model,
    pub endowment: Endowment,
    pub riccati: Option<RiccatiSpec>,
    pub warnings: Vec<String>,
}

struct Collector {
    errors: Vec<String>,
    warnings: Vec<String>,
}

impl Collector {
    fn err(&mut self, path: &str, msg: impl std::fmt::Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    fn general(&mut self, path: &str, m: &Matrix, d: usize) -> Option<GenMat> {
        match from_rows(m) {
            Ok(g) if g.shape() == (d, d) => {
                if g.iter().any(|v| !v.is_finite()) {
                    self.err(path, "entries must be finite");
                    return None;
                }
                Some(g)
            }
            Ok(g) => {
                self.err(path, format!("expected a {d}x{d} matrix, got {}x{}", g.nrows(), g.ncols()));
                None
            }
            Err(e) => {
                self.err(path, e);
                None
            }
        }
    }

    fn symmetric(&mut self, path: &str, m: &Matrix, d: usize) -> Option<SymMat> {
        let g = self.general(path, m, d)?;
        let asym = asymmetry(&g);
        if asym > SYMMETRY_WARN {
            self.warnings.push(format!("{path}: symmetrized input with asymmetry {asym:e}"));
        }
        Some(SymMat::new(g))
    }

    fn psd(&mut self, path: &str, m: &Matrix, d: usize) -> Option<SymMat> {
        let s = self.symmetric(path, m, d)?;
        let lmin = s.min_eigenvalue();
        if lmin < -1e-12 * (1.0 + s.norm()) {
            self.err(path, format!("must be positive semidefinite (smallest eigenvalue {lmin:e})"));
            return None;
        }
        Some(s)
    }

    fn vector(&mut self, path: &str, v: &[f64], d: usize) -> Option<Vec<f64>> {
        if v.len() != d {
            self.err(path, format!("expected {d} entries, got {}", v.len()));
            return None;
        }
        if v.iter().any(|x| !x.is_finite()) {
            self.err(path, "entries must be finite");
            return None;
        }
        Some(v.to_vec())
    }

    fn atoms(&mut self, path: &str, atoms: &[AtomConfig], d: usize) -> Option<Vec<ConstantAtom>> {
        let mut out = Vec::new();
        let mut ok = true;
        for (i, a) in atoms.iter().enumerate() {
            let xi = self.psd(&format!("{path}[{i}].xi"), &a.xi, d);
            if !(a.weight.is_finite() && a.weight > 0.0) {
                self.err(&format!("{path}[{i}].weight"), "must be positive and finite");
                ok = false;
            }
            match xi {
                Some(xi) if ok => out.push(ConstantAtom { xi, weight: a.weight }),
                _ => ok = false,
            }
        }
        ok.then_some(out)
    }
}

fn dim_of(model: &ModelConfig) -> usize {
    match model {
        ModelConfig::Heston(h) => h.eta.len(),
        ModelConfig::Bns(b) => b.eta.len(),
        ModelConfig::RawAffine(r) => r.alpha.len(),
    }
}

fn build_model(c: &mut Collector, model: &ModelConfig, d: usize) -> Option<Model> {
    match model {
        ModelConfig::Heston(h) => {
            let sigma = c.general("model.sigma", &h.sigma, d);
            let hm = c.general("model.h", &h.h, d);
            let eta = c.vector("model.eta", &h.eta, d);
            let rho = c.vector("model.rho", &h.rho, d);
            let r0 = c.psd("model.r0", &h.r0, d);
            let b = match (&h.b, h.k) {
                (Some(b), None) => c.psd("model.b", b, d),
                (None, Some(k)) => match &sigma {
                    Some(s) if k.is_finite() => Some(SymMat::new(s.transpose() * s).scale(k)),
                    Some(_) => {
                        c.err("model.k", "must be finite");
                        None
                    }
                    None => None,
                },
                _ => {
                    c.err("model", "give exactly one of b and k");
                    None
                }
            };
            let corr = match rho.map(CorrelationSpec::new) {
                Some(Ok(corr)) => Some(corr),
                Some(Err(e)) => {
                    c.err("model.rho", e);
                    None
                }
                None => None,
            };
            let (sigma, hm, eta, corr, r0, b) = (sigma?, hm?, eta?, corr?, r0?, b?);
            let alpha = SymMat::new(sigma.transpose() * &sigma);
            let params = AffineParams::new(alpha, b, LinearDrift::HForm(hm), JumpAtomsConstant::default(), JumpAtomsLinear::default())
                .and_then(|p| p.with_sigma_factor(sigma));
            let params = match params {
                Ok(p) => p,
                Err(e) => {
                    c.err("model", e);
                    return None;
                }
            };
            let adm = params.admissibility();
            if !adm.admissible {
                let field = if h.k.is_some() { "model.k" } else { "model.b" };
                c.err(field, format!("b - (d-1)·alpha must be PSD (min eigenvalue {:e})", adm.b_margin));
                return None;
            }
            match HestonModel::new(params, eta, corr, r0) {
                Ok(m) => Some(Model::Heston(if h.ordinary_exponential { m.ordinary_exponential() } else { m })),
                Err(e) => {
                    c.err("model", e);
                    None
                }
            }
        }
        ModelConfig::Bns(b) => {
            let lambda0 = c.psd("model.lambda0", &b.lambda0, d);
            let hm = c.general("model.h", &b.h, d);
            let b_j = match &b.b_j {
                Some(m) => c.psd("model.b_j", m, d),
                None => Some(SymMat::zeros(d)),
            };
            let atoms = c.atoms("model.atoms", &b.atoms, d);
            let eta = c.vector("model.eta", &b.eta, d);
            let r0 = c.psd("model.r0", &b.r0, d);
            let (lambda0, hm, b_j, atoms, eta, r0) = (lambda0?, hm?, b_j?, atoms?, eta?, r0?);
            let spec = BnsJumpSpec {
                lambda0,
                lambda_op: LinearDrift::HForm(hm),
                b_j,
                m_j: JumpAtomsConstant::new(atoms),
            };
            match BnsModel::new(spec, eta, r0) {
                Ok(m) => Some(Model::Bns(if b.ordinary_exponential { m.ordinary_exponential() } else { m })),
                Err(e) => {
                    c.err("model", e);
                    None
                }
            }
        }
        ModelConfig::RawAffine(r) => {
            let alpha = c.psd("model.alpha", &r.alpha, d);
            let b = c.psd("model.b", &r.b, d);
            let drift = match (&r.h, &r.beta) {
                (Some(h), None) => c.general("model.h", h, d).map(LinearDrift::HForm),
                (None, Some(beta)) => {
                    if beta.len() != d || beta.iter().any(|row| row.len() != d) {
                        c.err("model.beta", format!("expected {d}x{d} blocks"));
                        None
                    } else {
                        let mut ok = true;
                        let mut blocks = Vec::new();
                        for (i, row) in beta.iter().enumerate() {
                            let mut out = Vec::new();
                            for (j, m) in row.iter().enumerate() {
                                match c.symmetric(&format!("model.beta[{i}][{j}]"), m, d) {
                                    Some(s) => out.push(s),
                                    None => ok = false,
                                }
                            }
                            blocks.push(out);
                        }
                        ok.then_some(LinearDrift::GeneralForm(blocks))
                    }
                }
                _ => {
                    c.err("model", "give exactly one of h and beta");
                    None
                }
            };
            let m = c.atoms("model.m", &r.m, d);
            let mut mu = Some(Vec::new());
            for (i, a) in r.mu.iter().enumerate() {
                let xi = c.psd(&format!("model.mu[{i}].xi"), &a.xi, d);
                let u = c.psd(&format!("model.mu[{i}].u"), &a.u, d);
                match (xi, u, mu.as_mut()) {
                    (Some(xi), Some(u), Some(v)) => v.push(LinearAtom { xi, u }),
                    _ => mu = None,
                }
            }
            let sigma = r.sigma.as_ref().map(|s| c.general("model.sigma", s, d));
            let x0 = c.psd("model.x0", &r.x0, d);
            let (alpha, b, drift, m, mu, x0) = (alpha?, b?, drift?, m?, mu?, x0?);
            let mut params = AffineParams::new(alpha, b, drift, JumpAtomsConstant::new(m), JumpAtomsLinear::new(mu));
            if let Some(t) = r.trunc_radius {
                params = params.and_then(|p| p.with_trunc_radius(t));
            }
            if let Some(s) = sigma {
                params = params.and_then(|p| p.with_sigma_factor(s.expect("checked above")));
            }
            match params {
                Ok(p) => {
                    let adm = p.admissibility();
                    if adm.admissible {
                        Some(Model::Raw { params: p, x0 })
                    } else {
                        c.err(
                            "model",
                            format!(
                                "parameters are not admissible (alpha PSD: {}, b margin {:e}, inward min {:e})",
                                adm.alpha_psd, adm.b_margin, adm.inward_min
                            ),
                        );
                        None
                    }
                }
                Err(e) => {
                    c.err("model", e);
                    None
                }
            }
        }
    }
}

fn build_endowment(c: &mut Collector, e: &EndowmentConfig, d: usize, horizon: f64) -> Option<Endowment> {
    match e {
        EndowmentConfig::None => Some(Endowment::Spec(EndowmentSpec::none(d))),
        EndowmentConfig::VarianceSwap { index, strike } => {
            if !strike.is_finite() {
                c.err("endowment.strike", "must be finite");
                return None;
            }
            match EndowmentSpec::variance_swap(d, *index, horizon, *strike) {
                Ok(s) => Some(Endowment::Spec(s)),
                Err(e) => {
                    c.err("endowment.index", e);
                    None
                }
            }
        }
        EndowmentConfig::Claim { a, sigma, o1, o2, strike } => {
            let base = EndowmentSpec::none(d);
            let a = c.general("endowment.a", a, d);
            let mut get = |name: &str, m: &Option<Matrix>, default: &GenMat| match m {
                Some(m) => c.general(&format!("endowment.{name}"), m, d),
                None => Some(default.clone()),
            };
            let sigma = get("sigma", sigma, &base.sigma);
            let o1 = get("o1", o1, &base.o1);
            let o2 = get("o2", o2, &base.o2);
            if !strike.is_finite() {
                c.err("endowment.strike", "must be finite");
                return None;
            }
            Some(Endowment::Spec(EndowmentSpec {
                a: a?,
                sigma: sigma?,
                o1: o1?,
                o2: o2?,
                strike: *strike,
            }))
        }
        EndowmentConfig::Numeraire {
            a,
            floating_o1,
            floating_o2,
            fixed_o3,
        } => {
            let a = c.general("endowment.a", a, d);
            let o1 = c.general("endowment.floating_o1", floating_o1, d);
            let o2 = c.general("endowment.floating_o2", floating_o2, d);
            let o3 = c.general("endowment.fixed_o3", fixed_o3, d);
            Some(Endowment::Numeraire {
                a: a?,
                floating: (o1?, o2?),
                fixed: o3?,
            })
        }
    }
}

fn build_riccati(c: &mut Collector, r: &RiccatiConfig, d: usize) -> Option<RiccatiSpec> {
    let mut co = GeneratorCoeffs::zero(d);
    let mut ok = true;
    {
        let mut set = |name: &str, m: &Option<Matrix>, slot: &mut TimeFn<GenMat>| {
            if let Some(m) = m {
                match c.general(&format!("riccati.{name}"), m, d) {
                    Some(g) => *slot = TimeFn::Constant(g),
                    None => ok = false,
                }
            }
        };
        set("c_zz", &r.c_zz, &mut co.c_zz);
        set("c_zsqrtx", &r.c_zsqrtx, &mut co.c_zsqrtx);
        set("c_x", &r.c_x, &mut co.c_x);
        set("c_hzhz", &r.c_hzhz, &mut co.c_hzhz);
        set("c_hzz", &r.c_hzz, &mut co.c_hzz);
        set("c_hzsqrtx", &r.c_hzsqrtx, &mut co.c_hzsqrtx);
        set("sigma", &r.sigma, &mut co.sigma);
        set("o1", &r.o1, &mut co.o1);
        set("o2", &r.o2, &mut co.o2);
    }
    if let Some(a) = &r.a {
        match c.general("riccati.a", a, d) {
            Some(g) => co.a = g,
            None => ok = false,
        }
    }
    for (name, v) in [("c_y", r.c_y), ("c_t", r.c_t), ("terminal_v", r.terminal_v)] {
        if !v.is_finite() {
            c.err(&format!("riccati.{name}"), "must be finite");
            ok = false;
        }
    }
    co.c_y = TimeFn::Constant(r.c_y);
    if r.c_y != 0.0 && co.a.amax() > 0.0 {
        c.warnings.push("riccati: c_y with nonzero a adds c_y Tr(aO) to the generator, which the explicit solution does not carry".into());
    }
    co.c_t = TimeFn::Constant(r.c_t);
    let u = match &r.terminal_u {
        Some(m) => c.symmetric("riccati.terminal_u", m, d),
        None => Some(SymMat::zeros(d)),
    };
    let u = u?;
    ok.then_some(RiccatiSpec {
        coeffs: co,
        terminal_u: u,
        terminal_v: r.terminal_v,
    })
}

/// Checks every part of the configuration and builds the library objects.
/// Returns all problems found, not just the first.
pub fn validate(config: &RunConfig) -> Result<Validated, Vec<String>> {
    let mut c = Collector {
        errors: Vec::new(),
        warnings: Vec::new(),
    };
    if config.schema != SCHEMA {
        c.err("schema", format!("expected \"{SCHEMA}\", got \"{}\"", config.schema));
    }
    if !(config.horizon.is_finite() && config.horizon > 0.0) {
        c.err("horizon", "must be positive and finite");
    }
    let d = dim_of(&config.model);
    if d == 0 {
        c.err("model", "dimension must be at least 1");
        return Err(c.errors);
    }
    let model = build_model(&mut c, &config.model, d);
    match config.utility {
        Some(UtilityConfig::Power { gamma }) if !(gamma > 0.0 && gamma < 1.0) => c.err("utility.gamma", "power utility needs gamma in (0, 1)"),
        Some(UtilityConfig::Exponential { gamma }) if !(gamma.is_finite() && gamma > 0.0) => {
            c.err("utility.gamma", "exponential utility needs gamma > 0")
        }
        _ => {}
    }
    let horizon = if config.horizon > 0.0 { config.horizon } else { 1.0 };
    let endowment = build_endowment(&mut c, config.endowment.as_ref().unwrap_or(&EndowmentConfig::None), d, horizon);
    if matches!(config.endowment, Some(EndowmentConfig::Numeraire { .. })) && !matches!(config.utility, Some(UtilityConfig::Power { .. })) {
        c.err("endowment", "a numeraire change needs power utility");
    }
    let riccati = config.riccati.as_ref().map(|r| build_riccati(&mut c, r, d));
    let s = &config.solver;
    if s.steps < 2 || !s.steps.is_multiple_of(2) {
        c.err("solver.steps", "must be even and at least 2");
    }
    if !(s.tol.is_finite() && s.tol > 0.0) {
        c.err("solver.tol", "must be positive");
    }
    if !(s.blowup_norm > 0.0) {
        c.err("solver.blowup_norm", "must be positive");
    }
    let mc = &config.monte_carlo;
    if mc.paths == 0 {
        c.err("monte_carlo.paths", "must be positive");
    }
    if mc.steps == 0 {
        c.err("monte_carlo.steps", "must be positive");
    }
    if let Some(v) = &config.verify {
        if let Some(u) = &v.u {
            c.psd("verify.u", u, d);
        }
        if !(v.wealth.is_finite() && v.wealth > 0.0) {
            c.err("verify.wealth", "must be positive");
        }
        if v.samples == 0 {
            c.err("verify.samples", "must be positive");
        }
    }
    if config.output.value_points.iter().any(|x| !x.is_finite()) {
        c.err("output.value_points", "must be finite");
    }
    if !c.errors.is_empty() {
        return Err(c.errors);
    }
    Ok(Validated {
        config: config.clone(),
        dim: d,
        model: model.expect("no errors"),
        endowment: endowment.expect("no errors"),
        riccati: riccati.map(|r| r.expect("no errors")),
        warnings: c.warnings,
    })
}

/// Vector helper shared by the commands.
pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
