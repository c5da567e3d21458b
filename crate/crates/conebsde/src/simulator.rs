//! Monte Carlo engines for the forward processes.
//!
//! * [`WishartEngine`]: Euler full truncation for
//!   `dR = (b + B(R)) dt + √R dW Σ + Σᵀ dWᵀ √R + dJ` with compound-Poisson
//!   jumps `J` from the constant measure `m`, and eigenvalue clamping after
//!   every step.
//! * [`BnsEngine`]: exact flow of `dR = (λ + Λ(R)) dt + dJ` between jump
//!   times through the exponential of an augmented linear system.
//!
//! Both engines carry the price factor `dN = R η dt + √R dQ` with
//! `dQ = dW ρ + √(1 - ρᵀρ) dD` and the auxiliary process
//! `dO = σ √R dQ̂ + (o₁ + o₂ R) dt`.
//!
//! Randomness is ChaCha8 keyed by the run seed; path `i` reads stream `2i`
//! for Gaussian draws and `2i + 1` for jump clocks, so adding paths never
//! changes earlier ones. Under antithetic sampling paths `2j` and `2j + 1`
//! share streams and the odd one negates every Gaussian draw.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::affine_model::{AffineParams, JumpAtomsConstant, LinearDrift};
use crate::error::{Error, Result};
use crate::riccati::TimeFn;
use crate::symcone::{cone_classify_default, jacobi_eigen, mat_exp, GenMat, SymMat};

/// Correlation vector `ρ` of `dQ = dW ρ + √(1 - ρᵀρ) dD`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationSpec {
    rho: Vec<f64>,
}

impl CorrelationSpec {
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.iter().any(|r| !r.is_finite() || r.abs() > 1.0) {
            return Err(Error::InvalidParams("correlations must lie in [-1, 1]".into()));
        }
        let n2: f64 = rho.iter().map(|r| r * r).sum();
        if n2 > 1.0 + 1e-12 {
            return Err(Error::InvalidParams(format!("ρᵀρ = {n2} exceeds 1")));
        }
        Ok(CorrelationSpec { rho })
    }

    pub fn zero(d: usize) -> Self {
        CorrelationSpec { rho: vec![0.0; d] }
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn dim(&self) -> usize {
        self.rho.len()
    }

    /// `√(max(0, 1 - ρᵀρ))`.
    pub fn complement(&self) -> f64 {
        (1.0 - self.rho.iter().map(|r| r * r).sum::<f64>()).max(0.0).sqrt()
    }
}

/// Uniform grid `t_k = k T / steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || steps == 0 {
            return Err(Error::InvalidParams("time grid needs T > 0 and at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Constant coefficients of `dO = σ √R dQ̂ + (o₁ + o₂ R) dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxProcess {
    pub sigma: GenMat,
    pub o1: GenMat,
    pub o2: GenMat,
}

impl AuxProcess {
    pub fn zero(d: usize) -> Self {
        AuxProcess {
            sigma: GenMat::zeros(d, d),
            o1: GenMat::zeros(d, d),
            o2: GenMat::zeros(d, d),
        }
    }

    /// `O_t = ∫₀ᵗ R ds`.
    pub fn integrated_variance(d: usize) -> Self {
        AuxProcess {
            o2: GenMat::identity(d, d),
            ..AuxProcess::zero(d)
        }
    }
}

/// Identifies a path: run seed, path index and sampling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathId {
    pub seed: u64,
    pub index: u64,
    pub antithetic: bool,
}

struct PathRng {
    normals: ChaCha8Rng,
    jumps: ChaCha8Rng,
    sign: f64,
}

impl PathRng {
    fn new(id: PathId) -> Self {
        let base = if id.antithetic { id.index / 2 } else { id.index };
        let mut normals = ChaCha8Rng::seed_from_u64(id.seed);
        normals.set_stream(2 * base);
        let mut jumps = ChaCha8Rng::seed_from_u64(id.seed);
        jumps.set_stream(2 * base + 1);
        let sign = if id.antithetic && id.index % 2 == 1 { -1.0 } else { 1.0 };
        PathRng { normals, jumps, sign }
    }

    fn fill_normals(&mut self, out: &mut [f64], scale: f64) {
        let s = scale * self.sign;
        for v in out.iter_mut() {
            let z: f64 = self.normals.sample(StandardNormal);
            *v = s * z;
        }
    }

    fn exp1(&mut self) -> f64 {
        self.jumps.sample(Exp1)
    }

    fn uniform(&mut self) -> f64 {
        self.jumps.random::<f64>()
    }
}

/// Everything a visitor sees about one step `[t, t + dt]`. Matrices are
/// row-major `d x d` slices. Slices for increments an engine does not
/// produce are empty.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub r: &'a [f64],
    /// `√R` at the start of the step (Wishart engine).
    pub sqrt_r: &'a [f64],
    pub r_next: &'a [f64],
    /// `∫ R ds` over the step.
    pub int_r: &'a [f64],
    /// `O` at the end of the step.
    pub o_next: &'a [f64],
    pub dw: &'a [f64],
    pub dd: &'a [f64],
    pub dq: &'a [f64],
    pub dqhat: &'a [f64],
    /// `dN`.
    pub dn: &'a [f64],
    /// Martingale part of `dN`.
    pub dm: &'a [f64],
    /// Jumps `(time, atom index)` inside the step.
    pub jumps: &'a [(f64, usize)],
}

/// Per-path buffers and state. After [`PathEngine::run_path`] the fields
/// `r`, `n` and `o` hold the terminal values.
#[derive(Clone, Debug)]
pub struct Workspace {
    d: usize,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub o: Vec<f64>,
    sqrt_r: Vec<f64>,
    r_next: Vec<f64>,
    int_r: Vec<f64>,
    dw: Vec<f64>,
    dd: Vec<f64>,
    dq: Vec<f64>,
    dqhat: Vec<f64>,
    dn: Vec<f64>,
    dm: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    eig_a: Vec<f64>,
    eig_v: Vec<f64>,
    eig_l: Vec<f64>,
    aug: Vec<f64>,
    aug2: Vec<f64>,
    jumps: Vec<(f64, usize)>,
    /// Steps whose update needed eigenvalue clamping.
    pub projections: u64,
    /// Largest clamped negative eigenvalue relative to `‖R‖`.
    pub max_rel_projection: f64,
}

impl Workspace {
    fn new(d: usize, aug: usize) -> Self {
        let m = d * d;
        Workspace {
            d,
            r: vec![0.0; m],
            n: vec![0.0; d],
            o: vec![0.0; m],
            sqrt_r: vec![0.0; m],
            r_next: vec![0.0; m],
            int_r: vec![0.0; m],
            dw: vec![0.0; m],
            dd: vec![0.0; d],
            dq: vec![0.0; d],
            dqhat: vec![0.0; m],
            dn: vec![0.0; d],
            dm: vec![0.0; d],
            tmp: vec![0.0; m],
            tmp2: vec![0.0; m],
            eig_a: vec![0.0; m],
            eig_v: vec![0.0; m],
            eig_l: vec![0.0; d],
            aug: vec![0.0; aug],
            aug2: vec![0.0; aug],
            jumps: Vec::new(),
            projections: 0,
            max_rel_projection: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn r_sym(&self) -> SymMat {
        SymMat::from_row_slice(self.d, &self.r)
    }

    pub fn o_mat(&self) -> GenMat {
        GenMat::from_row_slice(self.d, self.d, &self.o)
    }
}

/// A path simulator usable by the Monte Carlo driver.
pub trait PathEngine: Sync {
    fn dim(&self) -> usize;
    fn grid(&self) -> TimeGrid;
    fn workspace(&self) -> Workspace;
    /// Simulates one path, calling `visit` after every step.
    fn run_path(&self, ws: &mut Workspace, id: PathId, visit: &mut dyn FnMut(&StepView<'_>));
}

fn matmul(a: &[f64], b: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            out[i * d + j] = s;
        }
    }
}

fn matvec(a: &[f64], x: &[f64], out: &mut [f64], d: usize) {
    for i in 0..d {
        let mut s = 0.0;
        for k in 0..d {
            s += a[i * d + k] * x[k];
        }
        out[i] = s;
    }
}

fn flat(m: &GenMat) -> Vec<f64> {
    let d = m.nrows();
    let mut v = vec![0.0; d * m.ncols()];
    for i in 0..d {
        for j in 0..m.ncols() {
            v[i * m.ncols() + j] = m[(i, j)];
        }
    }
    v
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetrizes `r`, clamps negative eigenvalues and writes `√r`. Returns the
/// most negative eigenvalue before clamping (zero if none).
fn project_and_sqrt(r: &mut [f64], sqrt_r: &mut [f64], a: &mut [f64], v: &mut [f64], l: &mut [f64], d: usize) -> f64 {
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (r[i * d + j] + r[j * d + i]);
            r[i * d + j] = s;
            r[j * d + i] = s;
        }
    }
    a.copy_from_slice(r);
    jacobi_eigen(a, v, l, d);
    let neg = l[d - 1].min(0.0);
    if neg < 0.0 {
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += v[i * d + k] * l[k].max(0.0) * v[j * d + k];
                }
                r[i * d + j] = s;
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += v[i * d + k] * l[k].max(0.0).sqrt() * v[j * d + k];
            }
            sqrt_r[i * d + j] = s;
        }
    }
    neg
}

fn psd_sqrt_flat(x: &[f64], out: &mut [f64], a: &mut [f64], v: &mut [f64], l: &mut [f64], d: usize) {
    a.copy_from_slice(x);
    for i in 0..d {
        for j in (i + 1)..d {
            let s = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = s;
            a[j * d + i] = s;
        }
    }
    jacobi_eigen(a, v, l, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += v[i * d + k] * l[k].max(0.0).sqrt() * v[j * d + k];
            }
            out[i * d + j] = s;
        }
    }
}

enum FlatDrift {
    H(Vec<f64>),
    General(Vec<Vec<f64>>),
}

impl FlatDrift {
    fn new(drift: &LinearDrift) -> Self {
        match drift {
            LinearDrift::HForm(h) => FlatDrift::H(flat(h)),
            LinearDrift::GeneralForm(betas) => {
                FlatDrift::General(betas.iter().flatten().map(|b| flat(b.as_mat())).collect())
            }
        }
    }

    /// `out += scale · B(r)`.
    fn add_apply(&self, r: &[f64], out: &mut [f64], tmp: &mut [f64], d: usize, scale: f64) {
        match self {
            FlatDrift::H(h) => {
                matmul(h, r, tmp, d);
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] += scale * (tmp[i * d + j] + tmp[j * d + i]);
                    }
                }
            }
            FlatDrift::General(betas) => {
                for (idx, beta) in betas.iter().enumerate() {
                    let x = r[idx];
                    if x != 0.0 {
                        for (o, b) in out.iter_mut().zip(beta) {
                            *o += scale * x * b;
                        }
                    }
                }
            }
        }
    }
}

struct FlatAtoms {
    xi: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
    total: f64,
}

impl FlatAtoms {
    fn new(m: &JumpAtomsConstant) -> Self {
        let mut acc = 0.0;
        let cumulative = m
            .atoms
            .iter()
            .map(|a| {
                acc += a.weight;
                acc
            })
            .collect();
        FlatAtoms {
            xi: m.atoms.iter().map(|a| flat(a.xi.as_mat())).collect(),
            cumulative,
            total: acc,
        }
    }

    fn pick(&self, u: f64) -> usize {
        let target = u * self.total;
        self.cumulative.partition_point(|&c| c <= target).min(self.xi.len() - 1)
    }

    /// Jump times in `(t, t_end]` appended to `out`, continuing the clock.
    fn advance(&self, rng: &mut PathRng, next: &mut f64, t_end: f64, out: &mut Vec<(f64, usize)>) {
        while *next <= t_end {
            let atom = self.pick(rng.uniform());
            out.push((*next, atom));
            *next += rng.exp1() / self.total;
        }
    }
}

struct FlatAux {
    sigma: Vec<f64>,
    o1: Vec<f64>,
    o2: Vec<f64>,
    noisy: bool,
}

impl FlatAux {
    fn new(aux: &AuxProcess) -> Self {
        FlatAux {
            sigma: flat(&aux.sigma),
            o1: flat(&aux.o1),
            o2: flat(&aux.o2),
            noisy: aux.sigma.iter().any(|v| *v != 0.0),
        }
    }
}

fn check_vec(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

fn check_r0(r0: &SymMat, d: usize) -> Result<()> {
    if r0.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: r0.dim(),
        });
    }
    if !cone_classify_default(r0).is_psd() {
        return Err(Error::NotPsd {
            min_eigenvalue: r0.min_eigenvalue(),
        });
    }
    Ok(())
}

/// Euler engine for continuous affine dynamics plus constant-intensity jumps.
pub struct WishartEngine {
    d: usize,
    grid: TimeGrid,
    sigma: Vec<f64>,
    b: Vec<f64>,
    drift: FlatDrift,
    atoms: Option<FlatAtoms>,
    rho: Vec<f64>,
    complement: f64,
    eta: Vec<f64>,
    aux: FlatAux,
    r0: Vec<f64>,
    force_qhat: bool,
}

impl WishartEngine {
    /// State-dependent jumps (`μ`) are not supported.
    pub fn new(params: &AffineParams, r0: &SymMat, corr: &CorrelationSpec, eta: &[f64], grid: TimeGrid) -> Result<Self> {
        let d = params.dim();
        if !params.mu.is_empty() {
            return Err(Error::InvalidParams("the Euler engine does not simulate state-dependent jumps".into()));
        }
        check_r0(r0, d)?;
        check_vec("η", eta, d)?;
        if corr.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                found: corr.dim(),
            });
        }
        Ok(WishartEngine {
            d,
            grid,
            sigma: flat(&params.sigma()),
            b: flat(params.b.as_mat()),
            drift: FlatDrift::new(&params.drift),
            atoms: (!params.m.is_empty()).then(|| FlatAtoms::new(&params.m)),
            rho: corr.rho().to_vec(),
            complement: corr.complement(),
            eta: eta.to_vec(),
            aux: FlatAux::new(&AuxProcess::zero(d)),
            r0: flat(r0.as_mat()),
            force_qhat: false,
        })
    }

    pub fn with_aux(mut self, aux: &AuxProcess) -> Result<Self> {
        let d = self.d;
        for m in [&aux.sigma, &aux.o1, &aux.o2] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidParams("auxiliary coefficients must be d x d".into()));
            }
        }
        self.aux = FlatAux::new(aux);
        Ok(self)
    }

    /// Draw `dQ̂` even when `σ = 0` (for visitors that integrate against it).
    pub fn with_qhat(mut self) -> Self {
        self.force_qhat = true;
        self
    }

    fn step_jumps(&self, rng: &mut PathRng, next: &mut f64, t_end: f64, ws: &mut Workspace) {
        ws.jumps.clear();
        if let Some(atoms) = &self.atoms {
            atoms.advance(rng, next, t_end, &mut ws.jumps);
            let d = self.d;
            for &(_, a) in &ws.jumps {
                for (r, x) in ws.r_next[..d * d].iter_mut().zip(&atoms.xi[a]) {
                    *r += x;
                }
            }
        }
    }

    /// Terminal `R_T` on the engine grid and on coarser grids that sum
    /// `factor` consecutive Brownian increments, all driven by one path.
    /// Only for jump-free dynamics. `out[0]` is the fine level.
    pub fn terminal_coupled(&self, id: PathId, factors: &[usize], out: &mut [Vec<f64>]) -> Result<()> {
        if self.atoms.is_some() {
            return Err(Error::InvalidParams("coupled levels need jump-free dynamics".into()));
        }
        let d = self.d;
        let m = d * d;
        let steps = self.grid.steps;
        if factors.iter().any(|&f| f == 0 || !steps.is_multiple_of(f)) || out.len() != factors.len() + 1 {
            return Err(Error::InvalidParams("coarsening factors must divide the step count".into()));
        }
        let dt = self.grid.dt();
        let mut rng = PathRng::new(id);
        let levels = factors.len() + 1;
        let mut r = vec![self.r0.clone(); levels];
        let mut sq = vec![vec![0.0; m]; levels];
        let mut acc = vec![vec![0.0; m]; levels];
        let mut dw = vec![0.0; m];
        let (mut a, mut v, mut l, mut tmp, mut tmp2) = (vec![0.0; m], vec![0.0; m], vec![0.0; d], vec![0.0; m], vec![0.0; m]);
        for lvl in 0..levels {
            project_and_sqrt(&mut r[lvl], &mut sq[lvl], &mut a, &mut v, &mut l, d);
        }
        for k in 0..steps {
            rng.fill_normals(&mut dw, dt.sqrt());
            for lvl in 0..levels {
                let f = if lvl == 0 { 1 } else { factors[lvl - 1] };
                for (x, y) in acc[lvl].iter_mut().zip(&dw) {
                    *x += y;
                }
                if (k + 1) % f != 0 {
                    continue;
                }
                let h = dt * f as f64;
                self.euler_r(&mut r[lvl], &sq[lvl], &acc[lvl], h, &mut tmp, &mut tmp2);
                project_and_sqrt(&mut r[lvl], &mut sq[lvl], &mut a, &mut v, &mut l, d);
                acc[lvl].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for (o, r) in out.iter_mut().zip(r) {
            *o = r;
        }
        Ok(())
    }

    /// `r += (b + B(r)) h + √r dW Σ + Σᵀ dWᵀ √r` in place (no projection).
    fn euler_r(&self, r: &mut [f64], sqrt_r: &[f64], dw: &[f64], h: f64, tmp: &mut [f64], tmp2: &mut [f64]) {
        let d = self.d;
        matmul(sqrt_r, dw, tmp, d);
        matmul(tmp, &self.sigma, tmp2, d);
        let mut scratch = vec![0.0; d * d];
        for i in 0..d * d {
            tmp[i] = self.b[i] * h;
        }
        self.drift.add_apply(r, tmp, &mut scratch, d, h);
        for i in 0..d {
            for j in 0..d {
                r[i * d + j] += tmp[i * d + j] + tmp2[i * d + j] + tmp2[j * d + i];
            }
        }
    }
}

impl PathEngine for WishartEngine {
    fn dim(&self) -> usize {
        self.d
    }

    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn workspace(&self) -> Workspace {
        Workspace::new(self.d, 0)
    }

    fn run_path(&self, ws: &mut Workspace, id: PathId, visit: &mut dyn FnMut(&StepView<'_>)) {
        let d = self.d;
        let m = d * d;
        let dt = self.grid.dt();
        let sdt = dt.sqrt();
        let mut rng = PathRng::new(id);
        ws.r.copy_from_slice(&self.r0);
        ws.n.iter_mut().for_each(|x| *x = 0.0);
        ws.o.iter_mut().for_each(|x| *x = 0.0);
        ws.projections = 0;
        ws.max_rel_projection = 0.0;
        let neg = project_and_sqrt(&mut ws.r, &mut ws.sqrt_r, &mut ws.eig_a, &mut ws.eig_v, &mut ws.eig_l, d);
        debug_assert!(neg >= -1e-9 * (1.0 + frob(&ws.r)));
        let want_qhat = self.aux.noisy || self.force_qhat;
        let mut next_jump = match &self.atoms {
            Some(a) => rng.exp1() / a.total,
            None => f64::INFINITY,
        };
        let mut scratch = vec![0.0; m];
        for k in 0..self.grid.steps {
            let t = self.grid.time(k);
            let t_end = self.grid.time(k + 1);
            rng.fill_normals(&mut ws.dw, sdt);
            if self.complement > 0.0 {
                rng.fill_normals(&mut ws.dd, sdt);
            }
            if want_qhat {
                rng.fill_normals(&mut ws.dqhat, sdt);
            }
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += ws.dw[i * d + j] * self.rho[j];
                }
                ws.dq[i] = s + self.complement * ws.dd[i];
            }
            matvec(&ws.sqrt_r, &ws.dq, &mut ws.dm, d);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += ws.r[i * d + j] * self.eta[j];
                }
                ws.dn[i] = s * dt + ws.dm[i];
                ws.n[i] += ws.dn[i];
            }
            for i in 0..m {
                ws.int_r[i] = ws.r[i] * dt;
            }
            // O before R moves.
            matmul(&self.aux.o2, &ws.r, &mut ws.tmp, d);
            for i in 0..m {
                ws.o[i] += (self.aux.o1[i] + ws.tmp[i]) * dt;
            }
            if self.aux.noisy {
                matmul(&ws.sqrt_r, &ws.dqhat, &mut ws.tmp, d);
                matmul(&self.aux.sigma, &ws.tmp, &mut ws.tmp2, d);
                for i in 0..m {
                    ws.o[i] += ws.tmp2[i];
                }
            }
            // R update.
            matmul(&ws.sqrt_r, &ws.dw, &mut ws.tmp, d);
            matmul(&ws.tmp, &self.sigma, &mut ws.tmp2, d);
            for i in 0..m {
                ws.tmp[i] = self.b[i] * dt;
            }
            self.drift.add_apply(&ws.r, &mut ws.tmp, &mut scratch, d, dt);
            for i in 0..d {
                for j in 0..d {
                    ws.r_next[i * d + j] = ws.r[i * d + j] + ws.tmp[i * d + j] + ws.tmp2[i * d + j] + ws.tmp2[j * d + i];
                }
            }
            self.step_jumps(&mut rng, &mut next_jump, t_end, ws);
            let mut new_sqrt = std::mem::take(&mut ws.tmp2);
            let neg = project_and_sqrt(&mut ws.r_next, &mut new_sqrt, &mut ws.eig_a, &mut ws.eig_v, &mut ws.eig_l, d);
            if neg < 0.0 {
                ws.projections += 1;
                let rel = -neg / frob(&ws.r_next).max(f64::MIN_POSITIVE);
                ws.max_rel_projection = ws.max_rel_projection.max(rel);
            }
            visit(&StepView {
                k,
                t,
                dt,
                r: &ws.r,
                sqrt_r: &ws.sqrt_r,
                r_next: &ws.r_next,
                int_r: &ws.int_r,
                o_next: &ws.o,
                dw: &ws.dw,
                dd: if self.complement > 0.0 { &ws.dd } else { &[] },
                dq: &ws.dq,
                dqhat: if want_qhat { &ws.dqhat } else { &[] },
                dn: &ws.dn,
                dm: &ws.dm,
                jumps: &ws.jumps,
            });
            std::mem::swap(&mut ws.r, &mut ws.r_next);
            ws.tmp2 = std::mem::replace(&mut ws.sqrt_r, new_sqrt);
        }
    }
}

/// BNS-type jump specification `dR = (λ + Λ(R)) dt + dJ`, where `J` has drift
/// `b^J` and jump measure `m^J` (compound Poisson with intensity equal to the
/// total weight and marks chosen proportionally to the weights).
#[derive(Clone, Debug, PartialEq)]
pub struct BnsJumpSpec {
    pub lambda0: SymMat,
    pub lambda_op: LinearDrift,
    pub b_j: SymMat,
    pub m_j: JumpAtomsConstant,
}

impl BnsJumpSpec {
    pub fn dim(&self) -> usize {
        self.lambda0.dim()
    }

    /// The equivalent affine parameter set `(0, λ + b^J, Λ, m^J, 0)`.
    pub fn to_affine(&self) -> Result<AffineParams> {
        let d = self.dim();
        AffineParams::new(
            SymMat::zeros(d),
            &self.lambda0 + &self.b_j,
            self.lambda_op.clone(),
            self.m_j.clone(),
            Default::default(),
        )
    }

    /// λ PSD, `b^J` PSD and the inward condition on `Λ`.
    pub fn validate(&self) -> Result<()> {
        if !cone_classify_default(&self.lambda0).is_psd() {
            return Err(Error::InvalidParams("λ must be PSD".into()));
        }
        if !cone_classify_default(&self.b_j).is_psd() {
            return Err(Error::InvalidParams("b^J must be PSD".into()));
        }
        self.to_affine()?.require_admissible()
    }
}

/// Exact-flow engine for BNS dynamics. Between jumps the augmented state
/// `(vec R, vec ∫R, 1)` evolves linearly; the price increment over a step is
/// drawn exactly as `(∫R) η + √(∫R) Z`.
pub struct BnsEngine {
    d: usize,
    grid: TimeGrid,
    generator: GenMat,
    step_flow: Vec<f64>,
    atoms: Option<FlatAtoms>,
    eta: Vec<f64>,
    aux: FlatAux,
    r0: Vec<f64>,
}

impl BnsEngine {
    pub fn new(spec: &BnsJumpSpec, r0: &SymMat, eta: &[f64], grid: TimeGrid) -> Result<Self> {
        let d = spec.dim();
        spec.validate()?;
        check_r0(r0, d)?;
        check_vec("η", eta, d)?;
        let m = d * d;
        let n = 2 * m + 1;
        let lop = spec.lambda_op.vec_operator();
        let c = &spec.lambda0 + &spec.b_j;
        let mut g = GenMat::zeros(n, n);
        g.view_mut((0, 0), (m, m)).copy_from(&lop);
        for i in 0..m {
            g[(m + i, i)] = 1.0;
        }
        for j in 0..d {
            for i in 0..d {
                g[(j * d + i, 2 * m)] = c[(i, j)];
            }
        }
        let step_flow = flat(&mat_exp(&(&g * grid.dt()))?);
        Ok(BnsEngine {
            d,
            grid,
            generator: g,
            step_flow,
            atoms: (!spec.m_j.is_empty()).then(|| FlatAtoms::new(&spec.m_j)),
            eta: eta.to_vec(),
            aux: FlatAux::new(&AuxProcess::integrated_variance(d)),
            r0: flat(r0.as_mat()),
        })
    }

    pub fn with_aux(mut self, aux: &AuxProcess) -> Result<Self> {
        let d = self.d;
        for m in [&aux.sigma, &aux.o1, &aux.o2] {
            if m.shape() != (d, d) {
                return Err(Error::InvalidParams("auxiliary coefficients must be d x d".into()));
            }
        }
        self.aux = FlatAux::new(aux);
        Ok(self)
    }

    fn flow(&self, h: f64, state: &mut [f64], scratch: &mut [f64], cached: bool) {
        let n = state.len();
        let owned;
        let e: &[f64] = if cached {
            &self.step_flow
        } else {
            owned = flat(&mat_exp(&(&self.generator * h)).expect("finite generator"));
            &owned
        };
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += e[i * n + k] * state[k];
            }
            scratch[i] = s;
        }
        state.copy_from_slice(scratch);
    }
}

impl PathEngine for BnsEngine {
    fn dim(&self) -> usize {
        self.d
    }

    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn workspace(&self) -> Workspace {
        Workspace::new(self.d, 2 * self.d * self.d + 1)
    }

    fn run_path(&self, ws: &mut Workspace, id: PathId, visit: &mut dyn FnMut(&StepView<'_>)) {
        let d = self.d;
        let m = d * d;
        let dt = self.grid.dt();
        let mut rng = PathRng::new(id);
        ws.r.copy_from_slice(&self.r0);
        ws.n.iter_mut().for_each(|x| *x = 0.0);
        ws.o.iter_mut().for_each(|x| *x = 0.0);
        ws.projections = 0;
        ws.max_rel_projection = 0.0;
        let mut next_jump = match &self.atoms {
            Some(a) => rng.exp1() / a.total,
            None => f64::INFINITY,
        };
        let mut z = vec![0.0; d];
        for k in 0..self.grid.steps {
            let t = self.grid.time(k);
            let t_end = self.grid.time(k + 1);
            ws.jumps.clear();
            if let Some(atoms) = &self.atoms {
                atoms.advance(&mut rng, &mut next_jump, t_end, &mut ws.jumps);
            }
            for j in 0..d {
                for i in 0..d {
                    ws.aug[j * d + i] = ws.r[i * d + j];
                }
            }
            ws.aug[m..2 * m].iter_mut().for_each(|x| *x = 0.0);
            ws.aug[2 * m] = 1.0;
            if ws.jumps.is_empty() {
                self.flow(dt, &mut ws.aug, &mut ws.aug2, true);
            } else {
                let atoms = self.atoms.as_ref().expect("jumps imply atoms");
                let mut cur = t;
                for &(tj, a) in &ws.jumps {
                    self.flow(tj - cur, &mut ws.aug, &mut ws.aug2, false);
                    for j in 0..d {
                        for i in 0..d {
                            ws.aug[j * d + i] += atoms.xi[a][i * d + j];
                        }
                    }
                    cur = tj;
                }
                self.flow(t_end - cur, &mut ws.aug, &mut ws.aug2, false);
            }
            for j in 0..d {
                for i in 0..d {
                    ws.r_next[i * d + j] = ws.aug[j * d + i];
                    ws.int_r[i * d + j] = ws.aug[m + j * d + i];
                }
            }
            for i in 0..d {
                for j in (i + 1)..d {
                    let s = 0.5 * (ws.r_next[i * d + j] + ws.r_next[j * d + i]);
                    ws.r_next[i * d + j] = s;
                    ws.r_next[j * d + i] = s;
                    let s = 0.5 * (ws.int_r[i * d + j] + ws.int_r[j * d + i]);
                    ws.int_r[i * d + j] = s;
                    ws.int_r[j * d + i] = s;
                }
            }
            rng.fill_normals(&mut z, 1.0);
            psd_sqrt_flat(&ws.int_r, &mut ws.tmp, &mut ws.eig_a, &mut ws.eig_v, &mut ws.eig_l, d);
            matvec(&ws.tmp, &z, &mut ws.dm, d);
            for i in 0..d {
                let mut s = 0.0;
                for j in 0..d {
                    s += ws.int_r[i * d + j] * self.eta[j];
                }
                ws.dn[i] = s + ws.dm[i];
                ws.n[i] += ws.dn[i];
            }
            matmul(&self.aux.o2, &ws.int_r, &mut ws.tmp, d);
            for i in 0..m {
                ws.o[i] += self.aux.o1[i] * dt + ws.tmp[i];
            }
            if self.aux.noisy {
                rng.fill_normals(&mut ws.dqhat, dt.sqrt());
                psd_sqrt_flat(&ws.r, &mut ws.sqrt_r, &mut ws.eig_a, &mut ws.eig_v, &mut ws.eig_l, d);
                matmul(&ws.sqrt_r, &ws.dqhat, &mut ws.tmp, d);
                matmul(&self.aux.sigma, &ws.tmp, &mut ws.tmp2, d);
                for i in 0..m {
                    ws.o[i] += ws.tmp2[i];
                }
            }
            visit(&StepView {
                k,
                t,
                dt,
                r: &ws.r,
                sqrt_r: if self.aux.noisy { &ws.sqrt_r } else { &[] },
                r_next: &ws.r_next,
                int_r: &ws.int_r,
                o_next: &ws.o,
                dw: &[],
                dd: &[],
                dq: &[],
                dqhat: if self.aux.noisy { &ws.dqhat } else { &[] },
                dn: &ws.dn,
                dm: &ws.dm,
                jumps: &ws.jumps,
            });
            std::mem::swap(&mut ws.r, &mut ws.r_next);
        }
    }
}

/// Streaming mean and variance (Welford, with Chan's merge).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RunningStats {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = self.count + other.count;
        let delta = other.mean - self.mean;
        let nf = n as f64;
        self.mean += delta * other.count as f64 / nf;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / nf;
        self.count = n;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}

/// Monte Carlo run settings. Paths are processed in fixed-size batches whose
/// statistics are merged in batch order, so results do not depend on the
/// number of worker threads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McOptions {
    pub paths: u64,
    pub seed: u64,
    pub batch: u64,
    pub antithetic: bool,
}

pub const DEFAULT_PATHS: u64 = 100_000;
pub const DEFAULT_STEPS: usize = 500;
pub const DEFAULT_BATCH: u64 = 1024;

impl McOptions {
    pub fn new(paths: u64, seed: u64) -> Self {
        McOptions {
            paths,
            seed,
            batch: DEFAULT_BATCH,
            antithetic: false,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }
}

/// Runs `f` on every path and accumulates its `outputs` values. Under
/// antithetic sampling each pair contributes the average of its two paths.
pub fn run_mc<E, F>(engine: &E, opts: &McOptions, outputs: usize, f: F) -> Result<Vec<RunningStats>>
where
    E: PathEngine,
    F: Fn(&E, &mut Workspace, PathId, &mut [f64]) + Sync,
{
    if opts.paths == 0 || opts.batch == 0 {
        return Err(Error::InvalidParams("path count and batch size must be positive".into()));
    }
    if opts.antithetic && (!opts.paths.is_multiple_of(2) || !opts.batch.is_multiple_of(2)) {
        return Err(Error::InvalidParams("antithetic sampling needs even path and batch counts".into()));
    }
    let batches = opts.paths.div_ceil(opts.batch);
    let per_batch: Vec<Vec<RunningStats>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut ws = engine.workspace();
            let mut stats = vec![RunningStats::default(); outputs];
            let mut buf = vec![0.0; outputs];
            let mut buf2 = vec![0.0; outputs];
            let start = b * opts.batch;
            let end = (start + opts.batch).min(opts.paths);
            let mut i = start;
            while i < end {
                let id = |index| PathId {
                    seed: opts.seed,
                    index,
                    antithetic: opts.antithetic,
                };
                f(engine, &mut ws, id(i), &mut buf);
                if opts.antithetic {
                    f(engine, &mut ws, id(i + 1), &mut buf2);
                    for (s, (a, b)) in stats.iter_mut().zip(buf.iter().zip(&buf2)) {
                        s.push(0.5 * (a + b));
                    }
                    i += 2;
                } else {
                    for (s, a) in stats.iter_mut().zip(&buf) {
                        s.push(*a);
                    }
                    i += 1;
                }
            }
            stats
        })
        .collect();
    let mut total = vec![RunningStats::default(); outputs];
    for batch in &per_batch {
        for (t, s) in total.iter_mut().zip(batch) {
            t.merge(s);
        }
    }
    if total.iter().any(|s| !s.mean.is_finite()) {
        return Err(Error::NonFinite("Monte Carlo estimate".into()));
    }
    Ok(total)
}

/// Increments recorded for one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepIncrements {
    pub dw: Vec<f64>,
    pub dd: Vec<f64>,
    pub dqhat: Vec<f64>,
    pub dm: Vec<f64>,
    pub int_r: Vec<f64>,
}

/// One fully recorded path.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub r: Vec<SymMat>,
    pub n: Vec<Vec<f64>>,
    pub o: Vec<GenMat>,
    pub increments: Vec<StepIncrements>,
    pub jumps: Vec<(f64, usize)>,
    pub projections: u64,
    pub max_rel_projection: f64,
}

impl PathRecord {
    /// CSV with columns `t`, upper triangle of `R`, `N`, upper triangle of `O`.
    pub fn to_csv(&self) -> String {
        let d = self.r[0].dim();
        let mut out = String::from("t");
        for i in 0..d {
            for j in i..d {
                out.push_str(&format!(",r_{}{}", i + 1, j + 1));
            }
        }
        for i in 0..d {
            out.push_str(&format!(",n_{}", i + 1));
        }
        for i in 0..d {
            for j in i..d {
                out.push_str(&format!(",o_{}{}", i + 1, j + 1));
            }
        }
        out.push('\n');
        for (k, t) in self.times.iter().enumerate() {
            out.push_str(&format!("{t:.16e}"));
            for v in self.r[k].upper_triangle() {
                out.push_str(&format!(",{v:.16e}"));
            }
            for v in &self.n[k] {
                out.push_str(&format!(",{v:.16e}"));
            }
            for i in 0..d {
                for j in i..d {
                    out.push_str(&format!(",{:.16e}", self.o[k][(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn record_path<E: PathEngine>(engine: &E, id: PathId) -> PathRecord {
    let d = engine.dim();
    let grid = engine.grid();
    let mut ws = engine.workspace();
    let mut r = Vec::with_capacity(grid.steps + 1);
    let mut n = vec![vec![0.0; d]];
    let mut o = vec![GenMat::zeros(d, d)];
    let mut increments = Vec::with_capacity(grid.steps);
    let mut jumps = Vec::new();
    let mut n_acc = vec![0.0; d];
    let mut first = true;
    engine.run_path(&mut ws, id, &mut |s| {
        if first {
            r.push(SymMat::from_row_slice(d, s.r));
            first = false;
        }
        r.push(SymMat::from_row_slice(d, s.r_next));
        for (a, b) in n_acc.iter_mut().zip(s.dn) {
            *a += b;
        }
        n.push(n_acc.clone());
        o.push(GenMat::from_row_slice(d, d, s.o_next));
        increments.push(StepIncrements {
            dw: s.dw.to_vec(),
            dd: s.dd.to_vec(),
            dqhat: s.dqhat.to_vec(),
            dm: s.dm.to_vec(),
            int_r: s.int_r.to_vec(),
        });
        jumps.extend_from_slice(s.jumps);
    });
    PathRecord {
        times: grid.times(),
        r,
        n,
        o,
        increments,
        jumps,
        projections: ws.projections,
        max_rel_projection: ws.max_rel_projection,
    }
}

/// Recorded paths with the seed that produced them and step-size warnings.
#[derive(Clone, Debug, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub paths: Vec<PathRecord>,
    pub warnings: Vec<String>,
}

/// Relative clamp size beyond which a smaller step is advisable.
pub const PROJECTION_WARN: f64 = 1e-3;

pub fn simulate_bundle<E: PathEngine>(engine: &E, seed: u64, n_paths: u64) -> PathBundle {
    let paths: Vec<PathRecord> = (0..n_paths)
        .map(|i| {
            record_path(
                engine,
                PathId {
                    seed,
                    index: i,
                    antithetic: false,
                },
            )
        })
        .collect();
    let warnings = paths
        .iter()
        .enumerate()
        .filter(|(_, p)| p.max_rel_projection > PROJECTION_WARN)
        .map(|(i, p)| format!("path {i}: eigenvalue clamp of relative size {:e}; reduce the step size", p.max_rel_projection))
        .collect();
    PathBundle { seed, paths, warnings }
}

/// Time-dependent coefficients of
/// `P = ∫σ_Qᵀ√R dQ + ∫Tr(σ_W √R dW) + ∫Tr(σ_Q̂ √R dQ̂) + ∫∫(e^{Tr(σ_μ ξ)} - 1)(μ^R - m) ds`.
#[derive(Clone, Debug)]
pub struct ExponentialSigmas {
    pub sigma_q: TimeFn<DVector<f64>>,
    pub sigma_w: TimeFn<GenMat>,
    pub sigma_qhat: TimeFn<GenMat>,
    pub sigma_mu: TimeFn<GenMat>,
}

impl ExponentialSigmas {
    pub fn zero(d: usize) -> Self {
        ExponentialSigmas {
            sigma_q: TimeFn::Constant(DVector::zeros(d)),
            sigma_w: TimeFn::Constant(GenMat::zeros(d, d)),
            sigma_qhat: TimeFn::Constant(GenMat::zeros(d, d)),
            sigma_mu: TimeFn::Constant(GenMat::zeros(d, d)),
        }
    }
}

/// Sample mean and standard error of a Monte Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub paths: u64,
}

impl From<RunningStats> for McEstimate {
    fn from(s: RunningStats) -> Self {
        McEstimate {
            mean: s.mean,
            std_err: s.std_err(),
            paths: s.count,
        }
    }
}

/// Simulates `ℰ(P)_T` through its logarithm along Euler paths of `R`.
/// Given the path of `R` each step multiplies by an exact lognormal
/// martingale factor, and jumps are compensated exactly.
pub fn stochastic_exponential_check(
    params: &AffineParams,
    r0: &SymMat,
    corr: &CorrelationSpec,
    sigmas: &ExponentialSigmas,
    grid: TimeGrid,
    opts: &McOptions,
) -> Result<McEstimate> {
    let d = params.dim();
    let engine = WishartEngine::new(params, r0, corr, &vec![0.0; d], grid)?.with_qhat();
    let steps = grid.steps;
    let sq: Vec<Vec<f64>> = (0..steps).map(|k| sigmas.sigma_q.eval(grid.time(k)).iter().copied().collect()).collect();
    let sw: Vec<Vec<f64>> = (0..steps).map(|k| flat(&sigmas.sigma_w.eval(grid.time(k)))).collect();
    let sh: Vec<Vec<f64>> = (0..steps).map(|k| flat(&sigmas.sigma_qhat.eval(grid.time(k)))).collect();
    let smu: Vec<Vec<f64>> = (0..steps)
        .map(|k| {
            let s = sigmas.sigma_mu.eval(grid.time(k));
            params.m.atoms.iter().map(|a| (s.transpose() * a.xi.as_mat()).trace()).collect()
        })
        .collect();
    let comp: Vec<f64> = smu
        .iter()
        .map(|ks| params.m.atoms.iter().zip(ks).map(|(a, k)| a.weight * k.exp_m1()).sum())
        .collect();
    let rho = corr.rho().to_vec();
    let c2 = corr.complement().powi(2);
    let stats = run_mc(&engine, opts, 1, |eng, ws, id, out| {
        let mut log = 0.0;
        let mut v = vec![0.0; d];
        let mut mw = vec![0.0; d * d];
        let mut mh = vec![0.0; d * d];
        eng.run_path(ws, id, &mut |s| {
            let k = s.k;
            matvec(s.sqrt_r, &sq[k], &mut v, d);
            matmul(&sw[k], s.sqrt_r, &mut mw, d);
            matmul(&sh[k], s.sqrt_r, &mut mh, d);
            let mut incr = 0.0;
            let mut qv = 0.0;
            for i in 0..d {
                incr += v[i] * s.dq[i];
                qv += c2 * v[i] * v[i];
                for j in 0..d {
                    incr += mw[j * d + i] * s.dw[i * d + j] + mh[j * d + i] * s.dqhat[i * d + j];
                    let cw = v[i] * rho[j] + mw[j * d + i];
                    qv += cw * cw + mh[j * d + i] * mh[j * d + i];
                }
            }
            log += incr - 0.5 * qv * s.dt - comp[k] * s.dt;
            for &(_, a) in s.jumps {
                log += smu[k][a];
            }
        });
        out[0] = log.exp();
    })?;
    Ok(stats[0].into())
}
