//! The five commands. Each returns a summary document, numeric tables and
//! a short human-readable report; `main` decides where they go.

use nalgebra::DVector;
use serde_json::{json, Map, Value};

use conebsde::bsde::{drift_match_report, BsdeSolutionEval};
use conebsde::portfolio::{
    bns_exp_coeffs, bns_exp_price, bns_power_coeffs, bns_power_solve, heston_exp_coeffs, heston_exp_price, heston_power_coeffs,
    heston_power_indifference_value, heston_power_numeraire_value, heston_power_solve, optimality_probe, EndowmentSpec,
    IndifferencePrice, UtilitySolveResult,
};
use conebsde::riccati::{
    solve_block_exp, solve_rk, validate_assumptions, Assumption, GeneratorCoeffs, RiccatiSolution, RkOptions,
};
use conebsde::simulator::{
    run_mc, simulate_bundle, CorrelationSpec, McOptions, PathEngine, PathId, TimeGrid, WishartEngine,
};
use conebsde::affine_model::{solve_transform, AffineParams};
use conebsde::symcone::{trace_prod, SymMat};
use conebsde::Error;

use crate::config::{Check, Endowment, Method, Model, UtilityConfig, Validated};
use crate::output::{num, to_value, upper_names, vector_names, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    /// Blow-up or another numerical failure that still produced a report.
    Numerical,
    VerificationFail,
}

#[derive(Debug)]
pub struct CommandOutput {
    /// Name of the summary file without extension.
    pub summary_name: &'static str,
    pub summary: Value,
    pub tables: Vec<(String, Table)>,
    pub report: String,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Validation(Vec<String>),
    Numerical(String),
}

impl CliError {
    fn invalid(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParams(_) | Error::Dimension { .. } | Error::NotPsd { .. } => CliError::Validation(vec![e.to_string()]),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

type CmdResult = Result<CommandOutput, CliError>;

fn obj(pairs: Vec<(&str, Value)>) -> Value {
    let mut m = Map::new();
    for (k, v) in pairs {
        m.insert(k.to_string(), v);
    }
    Value::Object(m)
}

fn matrix_value(m: &SymMat) -> Value {
    let d = m.dim();
    Value::Array((0..d).map(|i| Value::Array((0..d).map(|j| num(m.as_mat()[(i, j)])).collect())).collect())
}

fn riccati_table(sol: &RiccatiSolution) -> Table {
    let d = sol.dim();
    let mut cols = vec!["t".to_string()];
    cols.extend(upper_names("gamma", d));
    cols.push("w".into());
    let mut t = Table::new(cols);
    for (k, time) in sol.grid.iter().enumerate() {
        let mut row = vec![*time];
        row.extend(sol.gamma[k].upper_triangle());
        row.push(sol.w[k]);
        t.push(row);
    }
    t
}

fn vector_table(name: &str, grid: &[f64], values: &[DVector<f64>]) -> Table {
    let d = values.first().map_or(0, |v| v.len());
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_names(name, d));
    let mut t = Table::new(cols);
    for (time, v) in grid.iter().zip(values) {
        let mut row = vec![*time];
        row.extend(v.iter());
        t.push(row);
    }
    t
}

fn utility_value(u: UtilityConfig) -> Value {
    to_value(&u)
}

fn need_utility(v: &Validated) -> Result<UtilityConfig, CliError> {
    v.config.utility.ok_or_else(|| CliError::invalid("utility: required by this command"))
}

/// Solved utility problem with its indifference price, if any.
pub struct UtilityRun {
    pub result: UtilitySolveResult,
    pub price: Option<IndifferencePrice>,
    pub hedge: Option<Vec<DVector<f64>>>,
    /// Endowment whose claim enters the optimized problem.
    pub endowment: EndowmentSpec,
}

pub fn solve_utility(v: &Validated) -> Result<UtilityRun, CliError> {
    let utility = need_utility(v)?;
    let (h, steps, d) = (v.config.horizon, v.config.solver.steps, v.dim);
    let none = EndowmentSpec::none(d);
    let endowment = v.endowment.primary(d);
    match (&v.model, utility) {
        (Model::Heston(m), UtilityConfig::Power { gamma }) => {
            let result = heston_power_solve(m, gamma, &endowment, h, steps)?;
            let price = match &v.endowment {
                Endowment::Numeraire { a, floating, fixed } => {
                    heston_power_numeraire_value(m, gamma, a, (&floating.0, &floating.1), fixed, h, steps)?
                }
                Endowment::Spec(e) => heston_power_indifference_value(m, gamma, e, &none, h, steps)?,
            };
            Ok(UtilityRun {
                result,
                price: Some(price),
                hedge: None,
                endowment,
            })
        }
        (Model::Heston(m), UtilityConfig::Exponential { gamma }) => {
            let c = heston_exp_price(m, gamma, &endowment, h, steps)?;
            Ok(UtilityRun {
                result: c.with_claim,
                price: Some(c.price),
                hedge: Some(c.hedge_grid),
                endowment,
            })
        }
        (Model::Bns(m), UtilityConfig::Power { gamma }) => {
            if endowment != none {
                return Err(CliError::invalid("endowment: the BNS power problem takes no claim"));
            }
            Ok(UtilityRun {
                result: bns_power_solve(m, gamma, h, steps)?,
                price: None,
                hedge: None,
                endowment,
            })
        }
        (Model::Bns(m), UtilityConfig::Exponential { gamma }) => {
            let c = bns_exp_price(m, gamma, &endowment, h, steps)?;
            Ok(UtilityRun {
                result: c.with_claim,
                price: Some(c.price),
                hedge: Some(c.hedge_grid),
                endowment,
            })
        }
        (Model::Raw { .. }, _) => Err(CliError::invalid("model: utility problems need a heston or bns model")),
    }
}

/// Generator, terminal data and parameters of the Riccati problem the
/// configuration describes.
fn riccati_problem(v: &Validated) -> Result<(AffineParams, GeneratorCoeffs, SymMat, f64), CliError> {
    let params = v.model.params();
    if let Some(r) = &v.riccati {
        return Ok((params, r.coeffs.clone(), r.terminal_u.clone(), r.terminal_v));
    }
    let utility = v
        .config
        .utility
        .ok_or_else(|| CliError::invalid("riccati: give a riccati section or a utility problem"))?;
    let endow = v.endowment.primary(v.dim);
    let zero = SymMat::zeros(v.dim);
    let coeffs = match (&v.model, utility) {
        (Model::Heston(m), UtilityConfig::Power { gamma }) => heston_power_coeffs(m, gamma, &endow),
        (Model::Heston(m), UtilityConfig::Exponential { gamma }) => heston_exp_coeffs(m, gamma, &endow),
        (Model::Bns(m), UtilityConfig::Power { gamma }) => bns_power_coeffs(m, gamma),
        (Model::Bns(m), UtilityConfig::Exponential { gamma }) => bns_exp_coeffs(m, gamma, &endow),
        (Model::Raw { .. }, _) => return Err(CliError::invalid("riccati: a raw-affine model needs a riccati section")),
    };
    Ok((params, coeffs, zero, -endow.strike))
}

fn solve_configured(v: &Validated, params: &AffineParams, coeffs: &GeneratorCoeffs, u: &SymMat, tv: f64) -> Result<RiccatiSolution, Error> {
    let s = &v.config.solver;
    let h = v.config.horizon;
    let mut rk = RkOptions::fixed(s.steps);
    rk.blowup_norm = s.blowup_norm;
    match s.method {
        Method::Rk4 => solve_rk(params, coeffs, u, tv, h, rk),
        Method::Rk45 => {
            let mut o = RkOptions::adaptive(s.tol);
            o.blowup_norm = s.blowup_norm;
            solve_rk(params, coeffs, u, tv, h, o)
        }
        Method::BlockExp => {
            if u.norm() != 0.0 {
                return Err(Error::InvalidParams("the block exponential route needs terminal_u = 0".into()));
            }
            solve_block_exp(params, coeffs, h, tv, s.steps)
        }
        Method::Auto => {
            if u.norm() == 0.0 {
                match solve_block_exp(params, coeffs, h, tv, s.steps) {
                    Err(Error::InvalidParams(_)) => {}
                    other => return other,
                }
            }
            solve_rk(params, coeffs, u, tv, h, rk)
        }
    }
}

pub fn riccati_solve(v: &Validated) -> CmdResult {
    let (params, coeffs, u, tv) = riccati_problem(v)?;
    match solve_configured(v, &params, &coeffs, &u, tv) {
        Ok(sol) => {
            let assumptions = validate_assumptions(&params, &coeffs, v.config.horizon, &Assumption::ALL)?;
            let summary = obj(vec![
                ("command", json!("riccati-solve")),
                ("status", json!("ok")),
                ("method", to_value(&sol.method)),
                ("dimension", json!(v.dim)),
                ("horizon", num(v.config.horizon)),
                ("grid_points", json!(sol.grid.len())),
                ("gamma_0", matrix_value(&sol.gamma[0])),
                ("w_0", num(sol.w[0])),
                ("theta_asymmetry", num(sol.theta_asymmetry)),
                ("assumptions", to_value(&assumptions)),
            ]);
            let report = format!(
                "riccati-solve: {:?} on {} points, w(0) = {:.6e}, assumptions {}\n",
                sol.method,
                sol.grid.len(),
                sol.w[0],
                if assumptions.all_pass() { "all hold" } else { "not all hold" }
            );
            Ok(CommandOutput {
                summary_name: "summary",
                summary,
                tables: vec![("riccati".into(), riccati_table(&sol))],
                report,
                status: Status::Pass,
            })
        }
        Err(Error::BlowUp { t, norm }) => Ok(CommandOutput {
            summary_name: "summary",
            summary: obj(vec![
                ("command", json!("riccati-solve")),
                ("status", json!("blow-up")),
                ("explosion_time", num(t)),
                ("norm", num(norm)),
                ("horizon", num(v.config.horizon)),
            ]),
            tables: vec![],
            report: format!("riccati-solve: solution exploded at t = {t:.6e} (norm {norm:.3e})\n"),
            status: Status::Numerical,
        }),
        Err(e) => Err(e.into()),
    }
}

fn price_rows(p: &IndifferencePrice, xs: &[f64]) -> (Value, Table) {
    let mut t = Table::new(vec!["x".into(), "price".into(), "plug_back_error".into()]);
    let rows = xs
        .iter()
        .map(|&x| {
            let (pr, err) = (p.price_at(x), p.plug_back_error(x));
            t.push(vec![x, pr, err]);
            obj(vec![("x", num(x)), ("price", num(pr)), ("plug_back_error", num(err))])
        })
        .collect();
    (Value::Array(rows), t)
}

fn price_value(p: &IndifferencePrice, xs: &[f64]) -> Value {
    obj(vec![
        ("y0_with", num(p.y0_with)),
        ("y0_without", num(p.y0_without)),
        ("at", price_rows(p, xs).0),
    ])
}

pub fn portfolio(v: &Validated) -> CmdResult {
    let run = solve_utility(v)?;
    let r = &run.result;
    let xs = &v.config.output.value_points;
    let mut values = Table::new(vec!["x".into(), "value".into()]);
    let value_at: Vec<Value> = xs
        .iter()
        .map(|&x| {
            values.push(vec![x, r.value_at(x)]);
            obj(vec![("x", num(x)), ("value", num(r.value_at(x)))])
        })
        .collect();
    let summary = obj(vec![
        ("command", json!("portfolio")),
        ("model", json!(v.model.kind())),
        ("utility", utility_value(need_utility(v)?)),
        ("method", to_value(&r.riccati.method)),
        ("y0", num(r.y0)),
        ("value_at", Value::Array(value_at)),
        ("price", run.price.as_ref().map_or(Value::Null, |p| price_value(p, xs))),
        ("strategy_0", Value::Array(r.strategy_grid[0].iter().map(|x| num(*x)).collect())),
        ("diagnostics", to_value(&r.diagnostics)),
    ]);
    let mut tables = vec![
        ("strategy".into(), vector_table("pi", &r.riccati.grid, &r.strategy_grid)),
        ("value".into(), values),
    ];
    if let Some(h) = &run.hedge {
        tables.push(("hedge".into(), vector_table("delta", &r.riccati.grid, h)));
    }
    let report = format!(
        "portfolio: {} {}, Y0 = {:.6e}, V({}) = {:.6e}, drift match {:.2e} ({})\n",
        v.model.kind(),
        r.form_name(),
        r.y0,
        xs.first().copied().unwrap_or(1.0),
        r.value_at(xs.first().copied().unwrap_or(1.0)),
        r.diagnostics.drift_match.max_scaled,
        if r.diagnostics.drift_match.pass { "PASS" } else { "FAIL" }
    );
    Ok(CommandOutput {
        summary_name: "summary",
        summary,
        tables,
        report,
        status: Status::Pass,
    })
}

trait FormName {
    fn form_name(&self) -> &'static str;
}

impl FormName for UtilitySolveResult {
    fn form_name(&self) -> &'static str {
        match self.form {
            conebsde::bsde::UtilityForm::Power { .. } => "power",
            conebsde::bsde::UtilityForm::Exponential { .. } => "exponential",
        }
    }
}

pub fn price(v: &Validated) -> CmdResult {
    let run = solve_utility(v)?;
    let p = run
        .price
        .ok_or_else(|| CliError::invalid("endowment: this model and utility have no indifference price"))?;
    let xs = &v.config.output.value_points;
    let (rows, table) = price_rows(&p, xs);
    let summary = obj(vec![
        ("command", json!("price")),
        ("model", json!(v.model.kind())),
        ("utility", utility_value(need_utility(v)?)),
        ("y0_with", num(p.y0_with)),
        ("y0_without", num(p.y0_without)),
        ("prices", rows),
    ]);
    let mut tables = vec![("price".into(), table)];
    if let Some(h) = &run.hedge {
        tables.push(("hedge".into(), vector_table("delta", &run.result.riccati.grid, h)));
    }
    let x0 = xs.first().copied().unwrap_or(1.0);
    Ok(CommandOutput {
        summary_name: "summary",
        summary,
        tables,
        report: format!("price: p({x0}) = {:.10e}\n", p.price_at(x0)),
        status: Status::Pass,
    })
}

fn mc_options(v: &Validated) -> McOptions {
    let mc = &v.config.monte_carlo;
    McOptions::new(mc.paths, mc.seed).antithetic(mc.antithetic)
}

fn grid(v: &Validated) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::new(v.config.horizon, v.config.monte_carlo.steps)?)
}

/// Runs `f` with the path engine of the model.
fn with_engine<T>(v: &Validated, endow: &EndowmentSpec, f: &mut dyn FnMut(&dyn EngineRef) -> Result<T, CliError>) -> Result<T, CliError> {
    let g = grid(v)?;
    match &v.model {
        Model::Heston(m) => f(&m.engine(g, endow)?),
        Model::Bns(m) => f(&m.engine(g, endow)?),
        Model::Raw { params, x0 } => {
            let d = v.dim;
            let e = WishartEngine::new(params, x0, &CorrelationSpec::zero(d), &vec![0.0; d], g)?.with_aux(&endow.aux())?;
            f(&e)
        }
    }
}

/// Object-safe view of the concrete engines.
pub trait EngineRef {
    fn transform_mc(&self, u: &SymMat, opts: &McOptions) -> Result<(f64, f64), Error>;
    fn probe(&self, run: &UtilityRun, wealth: f64, opts: &McOptions) -> Result<conebsde::portfolio::OptimalityProbe, Error>;
    fn bundle(&self, seed: u64, n: u64) -> conebsde::simulator::PathBundle;
}

impl<E: PathEngine> EngineRef for E {
    fn transform_mc(&self, u: &SymMat, opts: &McOptions) -> Result<(f64, f64), Error> {
        let d = self.dim();
        let last = self.grid().steps - 1;
        let stats = run_mc(self, opts, 1, |e, ws, id: PathId, out| {
            let mut val = 0.0;
            e.run_path(ws, id, &mut |s| {
                if s.k == last {
                    let r = SymMat::from_row_slice(d, s.r_next);
                    val = (-trace_prod(u.as_mat(), r.as_mat())).exp();
                }
            });
            out[0] = val;
        })?;
        Ok((stats[0].mean, stats[0].std_err()))
    }

    fn probe(&self, run: &UtilityRun, wealth: f64, opts: &McOptions) -> Result<conebsde::portfolio::OptimalityProbe, Error> {
        optimality_probe(self, &run.result, &run.endowment, wealth, opts)
    }

    fn bundle(&self, seed: u64, n: u64) -> conebsde::simulator::PathBundle {
        simulate_bundle(self, seed, n)
    }
}

fn verdict(pass: bool) -> Value {
    json!(if pass { "PASS" } else { "FAIL" })
}

pub fn verify(v: &Validated, check: Option<Check>) -> CmdResult {
    let check = check
        .or(v.config.verify.as_ref().map(|c| c.check))
        .ok_or_else(|| CliError::invalid("verify.check: choose transform, martingale or drift-match"))?;
    let mc = &v.config.monte_carlo;
    let (summary, report, pass) = match check {
        Check::Transform => {
            let u = match v.config.verify.as_ref().and_then(|c| c.u.as_ref()) {
                Some(m) => SymMat::new(conebsde::symcone::from_rows(m).map_err(CliError::invalid)?),
                None => SymMat::identity(v.dim),
            };
            let none = EndowmentSpec::none(v.dim);
            let (mean, se) = with_engine(v, &none, &mut |e| Ok(e.transform_mc(&u, &mc_options(v))?))?;
            let exact = solve_transform(&v.model.params(), &u, v.config.horizon, v.config.solver.steps)?.laplace(v.model.initial_state());
            let diff = (mean - exact).abs();
            let pass = diff <= 3.0 * se;
            let summary = obj(vec![
                ("check", json!("transform")),
                ("mc_mean", num(mean)),
                ("std_err", num(se)),
                ("exact", num(exact)),
                ("abs_error", num(diff)),
                ("paths", json!(mc.paths)),
                ("steps", json!(mc.steps)),
                ("seed", json!(mc.seed)),
                ("verdict", verdict(pass)),
            ]);
            let report = format!(
                "{:<12} {:>24} {:>24} {:>12}  {}\n{:<12} {:>24.16e} {:>24.16e} {:>12.4e}  {}\n",
                "check",
                "monte carlo",
                "transform ODE",
                "std err",
                "verdict",
                "transform",
                mean,
                exact,
                se,
                if pass { "PASS" } else { "FAIL" }
            );
            (summary, report, pass)
        }
        Check::Martingale => {
            let run = solve_utility(v)?;
            let wealth = v.config.verify.as_ref().map_or(1.0, |c| c.wealth);
            let probe = with_engine(v, &run.endowment, &mut |e| Ok(e.probe(&run, wealth, &mc_options(v))?))?;
            let pass = probe.pass();
            let mut report = format!("{:<10} {:>20} {:>12}  {}\n", "strategy", "E[L_T]/L_0", "std err", "verdict");
            let mut line = |label: &str, a: &conebsde::bsde::AuditResult| {
                let verdict = to_value(&a.verdict);
                report.push_str(&format!("{label:<10} {:>20.12} {:>12.4e}  {}\n", a.ratio, a.std_err, verdict.as_str().unwrap_or("")));
            };
            line("optimal", &probe.optimal);
            for p in &probe.perturbed {
                line(&p.label, &p.audit);
            }
            report.push_str(if pass { "PASS\n" } else { "FAIL\n" });
            let summary = obj(vec![
                ("check", json!("martingale")),
                ("paths", json!(mc.paths)),
                ("steps", json!(mc.steps)),
                ("seed", json!(mc.seed)),
                ("probe", to_value(&probe)),
                ("verdict", verdict(pass)),
            ]);
            (summary, report, pass)
        }
        Check::DriftMatch => {
            let (params, coeffs, sol) = if v.riccati.is_some() {
                let (params, coeffs, u, tv) = riccati_problem(v)?;
                let sol = solve_configured(v, &params, &coeffs, &u, tv)?;
                (params, coeffs, sol)
            } else {
                let run = solve_utility(v)?;
                (v.model.params(), run.result.coeffs, run.result.riccati)
            };
            let samples = v.config.verify.as_ref().map_or(50, |c| c.samples);
            let scale = (4.0 * v.model.initial_state().max_eigenvalue()).max(0.1);
            let eval = BsdeSolutionEval::new(params, coeffs, sol)?;
            let rep = drift_match_report(&eval, samples, mc.seed, scale)?;
            let report = format!(
                "{:<12} {:>8} {:>14} {:>14} {:>10}  {}\ndrift-match  {:>8} {:>14.4e} {:>14.4e} {:>10.1e}  {}\n",
                "check",
                "samples",
                "max |r|",
                "max scaled",
                "tolerance",
                "verdict",
                rep.samples,
                rep.max_residual,
                rep.max_scaled,
                rep.tolerance,
                if rep.pass { "PASS" } else { "FAIL" }
            );
            let pass = rep.pass;
            let summary = obj(vec![
                ("check", json!("drift-match")),
                ("seed", json!(mc.seed)),
                ("report", to_value(&rep)),
                ("verdict", verdict(pass)),
            ]);
            (summary, report, pass)
        }
    };
    Ok(CommandOutput {
        summary_name: "report",
        summary,
        tables: vec![],
        report,
        status: if pass { Status::Pass } else { Status::VerificationFail },
    })
}

pub fn simulate(v: &Validated) -> CmdResult {
    let mc = &v.config.monte_carlo;
    let endow = v.endowment.primary(v.dim);
    let bundle = with_engine(v, &endow, &mut |e| Ok(e.bundle(mc.seed, mc.paths)))?;
    let d = v.dim;
    let mut cols = vec!["path".to_string(), "t".to_string()];
    cols.extend(upper_names("r", d));
    cols.extend(vector_names("n", d));
    cols.extend(upper_names("o", d));
    let mut table = Table::new(cols).with_index_columns(1);
    let mut per_path = Vec::new();
    for (p, rec) in bundle.paths.iter().enumerate() {
        for (k, t) in rec.times.iter().enumerate() {
            let mut row = vec![p as f64, *t];
            row.extend(rec.r[k].upper_triangle());
            row.extend(&rec.n[k]);
            for i in 0..d {
                for j in i..d {
                    row.push(rec.o[k][(i, j)]);
                }
            }
            table.push(row);
        }
        per_path.push(obj(vec![
            ("path", json!(p)),
            ("projections", json!(rec.projections)),
            ("max_rel_projection", num(rec.max_rel_projection)),
            ("jumps", json!(rec.jumps.len())),
        ]));
    }
    let summary = obj(vec![
        ("command", json!("simulate")),
        ("model", json!(v.model.kind())),
        ("seed", json!(bundle.seed)),
        ("paths", json!(bundle.paths.len())),
        ("steps", json!(mc.steps)),
        ("horizon", num(v.config.horizon)),
        ("path_stats", Value::Array(per_path)),
        ("warnings", json!(bundle.warnings)),
    ]);
    Ok(CommandOutput {
        summary_name: "summary",
        summary,
        tables: vec![("paths".into(), table)],
        report: format!("simulate: {} paths of {} steps, {} warnings\n", bundle.paths.len(), mc.steps, bundle.warnings.len()),
        status: Status::Pass,
    })
}
