//! Diagonally preconditioned primal-dual hybrid gradient for
//! `min_u max_w <c,u> + <K u - b, w> + g(u) - f*(w)`, where `g` and `f*`
//! are sums of simple block functions.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::{dykstra_inplace, project_simplex_inplace, ConvexSet, DykstraOptions, PairDifference, WulffShape};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, Default)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; n_rows + 1];
        let mut indices = Vec::with_capacity(t.len());
        let mut values: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            assert!(r < n_rows && c < n_cols, "triplet out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c as u32);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        let mut m = CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        };
        m.drop_zeros();
        m
    }

    fn drop_zeros(&mut self) {
        let mut indptr = vec![0; self.n_rows + 1];
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k] != 0.0 {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(|k| (self.indices[k] as usize, self.values[k]))
    }

    /// `y = A x`, parallel over rows (deterministic for any thread count).
    pub fn mul_into(&self, x: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(4096).enumerate().for_each(|(chunk, ys)| {
            let r0 = chunk * 4096;
            for (i, yi) in ys.iter_mut().enumerate() {
                let r = r0 + i;
                let mut acc = 0.0;
                for k in self.indptr[r]..self.indptr[r + 1] {
                    acc += self.values[k] * x[self.indices[k] as usize];
                }
                *yi = acc;
            }
        });
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_into(x, &mut y);
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.n_cols {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[k] as usize;
                indices[fill[c]] = r as u32;
                values[fill[c]] = self.values[k];
                fill[c] += 1;
            }
        }
        CsrMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            indptr: counts,
            indices,
            values,
        }
    }

    /// `sum_j |A_ij|^p` for every row.
    pub fn row_abs_pow_sums(&self, p: f64) -> Vec<f64> {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs().powf(p)).sum())
            .collect()
    }
}

/// Proximal structure of a run of primal blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimalKind {
    Free,
    NonNegative,
    /// Each block is constrained to the probability simplex.
    Simplex,
    /// Each block carries `support_W(.)` of shape `shapes[id]`.
    Support(usize),
}

/// Proximal structure of a run of dual blocks (conjugate side).
#[derive(Debug, Clone, PartialEq)]
pub enum DualKind {
    Free,
    /// Each block is constrained to shape `shapes[id]`.
    Shape(usize),
    /// Each block holds `m` vectors of dimension `d` constrained by
    /// `lambda^i - lambda^j in shapes[ids[pair]]` for all pairs `i < j`.
    PairDifference {
        m: usize,
        d: usize,
        ids: Vec<usize>,
    },
}

/// `count` consecutive blocks of `block_len` entries starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct Run<K> {
    pub start: usize,
    pub block_len: usize,
    pub count: usize,
    pub kind: K,
}

impl<K> Run<K> {
    pub fn end(&self) -> usize {
        self.start + self.block_len * self.count
    }
}

#[derive(Debug, Clone, Default)]
pub struct SaddleProblem {
    pub k: CsrMatrix,
    pub kt: CsrMatrix,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub primal_runs: Vec<Run<PrimalKind>>,
    pub dual_runs: Vec<Run<DualKind>>,
    pub shapes: Vec<WulffShape>,
    /// Per-row divisor of equality residuals; empty means one.
    pub residual_scale: Vec<f64>,
}

impl SaddleProblem {
    pub fn new(
        k: CsrMatrix,
        c: Vec<f64>,
        b: Vec<f64>,
        primal_runs: Vec<Run<PrimalKind>>,
        dual_runs: Vec<Run<DualKind>>,
        shapes: Vec<WulffShape>,
    ) -> Result<Self> {
        let check = |ends: Vec<(usize, usize)>, n: usize, what: &str| -> Result<()> {
            let mut pos = 0;
            for (s, e) in ends {
                if s != pos {
                    return Err(Error::InvalidParams(format!("{what} runs leave a gap at {pos}")));
                }
                pos = e;
            }
            if pos != n {
                return Err(Error::InvalidParams(format!("{what} runs cover {pos} of {n} entries")));
            }
            Ok(())
        };
        check(
            primal_runs.iter().map(|r| (r.start, r.end())).collect(),
            k.n_cols,
            "primal",
        )?;
        check(dual_runs.iter().map(|r| (r.start, r.end())).collect(), k.n_rows, "dual")?;
        if c.len() != k.n_cols || b.len() != k.n_rows {
            return Err(Error::DimensionMismatch {
                expected: k.n_cols,
                got: c.len(),
            });
        }
        let kt = k.transpose();
        Ok(SaddleProblem {
            k,
            kt,
            c,
            b,
            primal_runs,
            dual_runs,
            shapes,
            residual_scale: Vec::new(),
        })
    }

    pub fn n_primal(&self) -> usize {
        self.k.n_cols
    }

    pub fn n_dual(&self) -> usize {
        self.k.n_rows
    }

    /// Rows whose dual is free, i.e. equality constraints `K u = b`.
    pub fn equality_residual(&self, u: &[f64]) -> f64 {
        let ku = self.k.mul(u);
        let mut r = 0.0f64;
        for run in &self.dual_runs {
            if run.kind == DualKind::Free {
                for i in run.start..run.end() {
                    let w = self.residual_scale.get(i).copied().unwrap_or(1.0);
                    r = r.max((ku[i] - self.b[i]).abs() / w);
                }
            }
        }
        r
    }

    /// Projects a primal vector onto the domain of `g` (ignores prox weights).
    pub fn project_primal(&self, u: &mut [f64]) {
        for run in &self.primal_runs {
            for blk in 0..run.count {
                let s = run.start + blk * run.block_len;
                let x = &mut u[s..s + run.block_len];
                match run.kind {
                    PrimalKind::NonNegative => x.iter_mut().for_each(|v| *v = v.max(0.0)),
                    PrimalKind::Simplex => project_simplex_inplace(x),
                    _ => {}
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub check_every: usize,
    /// Over-relaxation of the primal extrapolation.
    pub theta: f64,
    /// Exponent of the diagonal preconditioner.
    pub alpha: f64,
    pub preconditioned: bool,
    /// Energy above which the run is declared divergent.
    pub divergence_bound: f64,
    pub dykstra_cycles: usize,
    /// Primal steps are multiplied and dual steps divided by this factor.
    pub step_ratio: f64,
    /// Iterations between restart checks; 0 disables restarts.
    pub restart_every: usize,
    /// Re-balance primal and dual step sizes at every restart.
    pub rebalance: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 10_000,
            tol: 1e-6,
            check_every: 50,
            theta: 1.0,
            alpha: 1.0,
            preconditioned: true,
            divergence_bound: 1e12,
            dykstra_cycles: 20,
            step_ratio: 1.0,
            restart_every: 0,
            rebalance: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.check_every == 0 || !(self.tol > 0.0) || !(0.0..=2.0).contains(&self.alpha) || !(self.step_ratio > 0.0)
        {
            return Err(Error::InvalidParams(
                "check_every > 0, tol > 0 and alpha in [0, 2] are required".into(),
            ));
        }
        Ok(())
    }
}

/// Iterates of a saddle point run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub primal: Vec<f64>,
    pub dual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub energy: f64,
    pub residual: f64,
    pub change: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    /// CSV rendering; timing is optional so that runs can be compared byte for byte.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from(if with_timing {
            "iter,energy,residual,change,wall_ms\n"
        } else {
            "iter,energy,residual,change\n"
        });
        for r in &self.rows {
            let _ = write!(s, "{},{:.17e},{:.17e},{:.17e}", r.iter, r.energy, r.residual, r.change);
            if with_timing {
                let _ = write!(s, ",{:.3}", r.wall_ms);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub state: SolverState,
    pub trace: Trace,
    pub iterations: usize,
    pub termination: Termination,
}

/// Energy and residual reported at checkpoints.
pub trait Monitor {
    fn monitor(&self, state: &SolverState) -> (f64, f64);
}

/// Evaluates only the linear part and the equality residual.
pub struct LinearMonitor<'a>(pub &'a SaddleProblem);

impl Monitor for LinearMonitor<'_> {
    fn monitor(&self, state: &SolverState) -> (f64, f64) {
        let e: f64 = self.0.c.iter().zip(&state.primal).map(|(a, b)| a * b).sum();
        (e, self.0.equality_residual(&state.primal))
    }
}

/// Step sizes `tau_j = 1 / sum_i |K_ij|^(2-alpha)` and
/// `sigma_i = 1 / sum_j |K_ij|^alpha`, made uniform inside coupled blocks.
pub fn preconditioners(p: &SaddleProblem, alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let inv = |v: f64| if v > 0.0 { 1.0 / v } else { 1.0 };
    let mut tau: Vec<f64> = p.kt.row_abs_pow_sums(2.0 - alpha).into_iter().map(inv).collect();
    let mut sigma: Vec<f64> = p.k.row_abs_pow_sums(alpha).into_iter().map(inv).collect();
    let uniform = |v: &mut [f64]| {
        let m = v.iter().copied().fold(f64::INFINITY, f64::min);
        v.iter_mut().for_each(|x| *x = m);
    };
    for run in &p.primal_runs {
        if matches!(run.kind, PrimalKind::Simplex | PrimalKind::Support(_)) {
            for b in 0..run.count {
                let s = run.start + b * run.block_len;
                uniform(&mut tau[s..s + run.block_len]);
            }
        }
    }
    for run in &p.dual_runs {
        if !matches!(run.kind, DualKind::Free) {
            for b in 0..run.count {
                let s = run.start + b * run.block_len;
                uniform(&mut sigma[s..s + run.block_len]);
            }
        }
    }
    (tau, sigma)
}

/// Largest singular value of `K` by power iteration.
pub fn operator_norm(p: &SaddleProblem, iters: usize) -> f64 {
    let n = p.n_primal();
    if n == 0 || p.k.nnz() == 0 {
        return 0.0;
    }
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let mut est = 0.0;
    for _ in 0..iters {
        let y = p.k.mul(&x);
        let z = p.kt.mul(&y);
        let nz = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nz == 0.0 {
            return 0.0;
        }
        est = (nz / nx).sqrt();
        x = z.iter().map(|v| v / nz).collect();
    }
    est
}

/// Initial state: simplex blocks uniform, everything else zero.
pub fn initial_state(p: &SaddleProblem) -> SolverState {
    let mut primal = vec![0.0; p.n_primal()];
    for run in &p.primal_runs {
        if run.kind == PrimalKind::Simplex {
            let v = 1.0 / run.block_len as f64;
            primal[run.start..run.end()].iter_mut().for_each(|x| *x = v);
        }
    }
    SolverState {
        primal,
        dual: vec![0.0; p.n_dual()],
    }
}

fn prox_primal(p: &SaddleProblem, u: &mut [f64], tau: &[f64]) {
    for run in &p.primal_runs {
        let seg = &mut u[run.start..run.end()];
        let bl = run.block_len;
        match &run.kind {
            PrimalKind::Free => {}
            PrimalKind::NonNegative => seg.par_iter_mut().for_each(|v| *v = v.max(0.0)),
            PrimalKind::Simplex => seg.par_chunks_mut(bl).for_each(project_simplex_inplace),
            PrimalKind::Support(id) => {
                let shape = &p.shapes[*id];
                let t = &tau[run.start..run.end()];
                seg.par_chunks_mut(bl)
                    .zip(t.par_chunks(bl))
                    .for_each(|(x, t)| shape.prox_support_inplace(x, t[0]));
            }
        }
    }
}

fn prox_dual(p: &SaddleProblem, w: &mut [f64], incr: &mut [Vec<f64>], opts: DykstraOptions) {
    for (ri, run) in p.dual_runs.iter().enumerate() {
        let seg = &mut w[run.start..run.end()];
        let bl = run.block_len;
        match &run.kind {
            DualKind::Free => {}
            DualKind::Shape(id) => {
                let shape = &p.shapes[*id];
                seg.par_chunks_mut(bl).for_each(|x| shape.project_self(x));
            }
            DualKind::PairDifference { m, d, ids } => {
                let sets: Vec<PairDifference> = crate::shapes::pairs(*m)
                    .zip(ids)
                    .map(|((i, j), &id)| PairDifference {
                        i,
                        j,
                        dim: *d,
                        shape: &p.shapes[id],
                    })
                    .collect();
                let refs: Vec<&dyn ConvexSet> = sets.iter().map(|s| s as &dyn ConvexSet).collect();
                let inc = &mut incr[ri];
                let per = bl * sets.len();
                seg.par_chunks_mut(bl)
                    .zip(inc.par_chunks_mut(per))
                    .for_each(|(x, inc)| {
                        dykstra_inplace(&refs, x, inc, opts);
                    });
            }
        }
    }
}

/// Scratch buffers of one PDHG step.
struct Workspace {
    ktw: Vec<f64>,
    ku: Vec<f64>,
    ubar: Vec<f64>,
}

impl Workspace {
    fn new(p: &SaddleProblem) -> Self {
        Workspace {
            ktw: vec![0.0; p.n_primal()],
            ku: vec![0.0; p.n_dual()],
            ubar: vec![0.0; p.n_primal()],
        }
    }
}

/// One PDHG step from `(u, w)`: writes the primal update into `u_new` and
/// updates `w` in place.
#[allow(clippy::too_many_arguments)]
fn step(
    p: &SaddleProblem,
    theta: f64,
    tau: &[f64],
    sigma: &[f64],
    u: &[f64],
    u_new: &mut [f64],
    w: &mut [f64],
    incr: &mut [Vec<f64>],
    dyk: DykstraOptions,
    ws: &mut Workspace,
) {
    p.kt.mul_into(w, &mut ws.ktw);
    let ktw = &ws.ktw;
    u_new
        .par_iter_mut()
        .enumerate()
        .for_each(|(j, v)| *v = u[j] - tau[j] * (ktw[j] + p.c[j]));
    prox_primal(p, u_new, tau);
    ws.ubar
        .par_iter_mut()
        .enumerate()
        .for_each(|(j, v)| *v = u_new[j] + theta * (u_new[j] - u[j]));
    p.k.mul_into(&ws.ubar, &mut ws.ku);
    let ku = &ws.ku;
    w.par_iter_mut()
        .enumerate()
        .for_each(|(i, v)| *v += sigma[i] * (ku[i] - p.b[i]));
    prox_dual(p, w, incr, dyk);
}

fn weighted_norm(a: &[f64], b: &[f64], step: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2) / step[i];
    }
    s.sqrt()
}

/// Fixed-point residual of one step from `(u, w)` in the step-size metric.
#[allow(clippy::too_many_arguments)]
fn fixed_point_residual(
    p: &SaddleProblem,
    theta: f64,
    tau: &[f64],
    sigma: &[f64],
    u: &[f64],
    w: &[f64],
    incr: &[Vec<f64>],
    dyk: DykstraOptions,
    ws: &mut Workspace,
) -> f64 {
    let mut u_new = vec![0.0; u.len()];
    let mut w_new = w.to_vec();
    let mut inc = incr.to_vec();
    step(p, theta, tau, sigma, u, &mut u_new, &mut w_new, &mut inc, dyk, ws);
    (weighted_norm(u, &u_new, tau).powi(2) + weighted_norm(w, &w_new, sigma).powi(2)).sqrt()
}

/// Restart bookkeeping: running averages since the last restart and the
/// residual reached there.
struct Restarts {
    u_sum: Vec<f64>,
    w_sum: Vec<f64>,
    count: usize,
    u_anchor: Vec<f64>,
    w_anchor: Vec<f64>,
    last: f64,
    previous: f64,
    since: usize,
}

impl Restarts {
    fn new(st: &SolverState) -> Self {
        Restarts {
            u_sum: vec![0.0; st.primal.len()],
            w_sum: vec![0.0; st.dual.len()],
            count: 0,
            u_anchor: st.primal.clone(),
            w_anchor: st.dual.clone(),
            last: f64::INFINITY,
            previous: f64::INFINITY,
            since: 0,
        }
    }

    fn add(&mut self, st: &SolverState) {
        self.u_sum.iter_mut().zip(&st.primal).for_each(|(a, b)| *a += b);
        self.w_sum.iter_mut().zip(&st.dual).for_each(|(a, b)| *a += b);
        self.count += 1;
        self.since += 1;
    }

    fn average(&self) -> SolverState {
        let k = self.count.max(1) as f64;
        SolverState {
            primal: self.u_sum.iter().map(|v| v / k).collect(),
            dual: self.w_sum.iter().map(|v| v / k).collect(),
        }
    }

    fn reset(&mut self, st: &SolverState, residual: f64) {
        self.u_sum.iter_mut().for_each(|v| *v = 0.0);
        self.w_sum.iter_mut().for_each(|v| *v = 0.0);
        self.count = 0;
        self.since = 0;
        self.u_anchor.copy_from_slice(&st.primal);
        self.w_anchor.copy_from_slice(&st.dual);
        self.last = residual;
        self.previous = residual;
    }
}

/// Runs preconditioned PDHG from `init` (or the default start).
pub fn solve(
    p: &SaddleProblem,
    cfg: &SolverConfig,
    init: Option<SolverState>,
    monitor: &dyn Monitor,
) -> Result<SolveOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (tau0, sigma0) = if cfg.preconditioned {
        preconditioners(p, cfg.alpha)
    } else {
        let l = operator_norm(p, 100).max(1e-12) * 1.01;
        (vec![1.0 / l; p.n_primal()], vec![1.0 / l; p.n_dual()])
    };
    let mut gamma = cfg.step_ratio;
    let scaled = |gamma: f64| -> (Vec<f64>, Vec<f64>) {
        (
            tau0.iter().map(|t| t * gamma).collect(),
            sigma0.iter().map(|s| s / gamma).collect(),
        )
    };
    let (mut tau, mut sigma) = scaled(gamma);
    let mut st = init.unwrap_or_else(|| initial_state(p));
    if st.primal.len() != p.n_primal() || st.dual.len() != p.n_dual() {
        return Err(Error::InconsistentState("state does not match problem size".into()));
    }
    let mut incr: Vec<Vec<f64>> = p
        .dual_runs
        .iter()
        .map(|r| match &r.kind {
            DualKind::PairDifference { ids, .. } => vec![0.0; r.block_len * r.count * ids.len()],
            _ => Vec::new(),
        })
        .collect();
    let dyk = DykstraOptions {
        max_cycles: cfg.dykstra_cycles.max(1),
        tol: 1e-12,
    };
    let np = p.n_primal();
    let nd = p.n_dual();
    let mut ws = Workspace::new(p);
    let mut u_new = vec![0.0; np];
    let mut restarts = (cfg.restart_every > 0).then(|| Restarts::new(&st));
    let mut trace = Trace::default();
    let mut termination = Termination::MaxIterations;
    let mut iterations = cfg.max_iters;
    for it in 1..=cfg.max_iters {
        let check = it % cfg.check_every == 0 || it == cfg.max_iters;
        let w_old = if check { Some(st.dual.clone()) } else { None };
        step(
            p,
            cfg.theta,
            &tau,
            &sigma,
            &st.primal,
            &mut u_new,
            &mut st.dual,
            &mut incr,
            dyk,
            &mut ws,
        );
        let (mut du, mut nu) = (0.0f64, 1.0f64);
        if check {
            for j in 0..np {
                du = du.max((u_new[j] - st.primal[j]).abs());
                nu = nu.max(u_new[j].abs());
            }
        }
        std::mem::swap(&mut st.primal, &mut u_new);
        if let Some(rs) = restarts.as_mut() {
            rs.add(&st);
            if it % cfg.restart_every == 0 {
                let r_cur = fixed_point_residual(p, cfg.theta, &tau, &sigma, &st.primal, &st.dual, &incr, dyk, &mut ws);
                let avg = rs.average();
                let r_avg =
                    fixed_point_residual(p, cfg.theta, &tau, &sigma, &avg.primal, &avg.dual, &incr, dyk, &mut ws);
                let (candidate, r) = if r_avg < r_cur {
                    (Some(avg), r_avg)
                } else {
                    (None, r_cur)
                };
                let restart = rs.last.is_infinite()
                    || r <= 0.2 * rs.last
                    || (r <= 0.8 * rs.last && r > rs.previous)
                    || rs.since as f64 >= 0.36 * it as f64;
                if restart {
                    if let Some(c) = candidate {
                        st = c;
                    }
                    if cfg.rebalance {
                        let dx = weighted_norm(&st.primal, &rs.u_anchor, &tau0);
                        let dy = weighted_norm(&st.dual, &rs.w_anchor, &sigma0);
                        if dx > 1e-10 && dy > 1e-10 {
                            gamma = (0.5 * (dx / dy).ln() + 0.5 * gamma.ln()).exp();
                            (tau, sigma) = scaled(gamma);
                        }
                    }
                    rs.reset(&st, r);
                } else {
                    rs.previous = r;
                }
            }
        }
        if check {
            let w_old = w_old.unwrap();
            let (mut dw, mut nw) = (0.0f64, 1.0f64);
            for i in 0..nd {
                dw = dw.max((st.dual[i] - w_old[i]).abs());
                nw = nw.max(st.dual[i].abs());
            }
            let change = (du / nu).max(dw / nw);
            let (energy, residual) = monitor.monitor(&st);
            trace.rows.push(TraceRow {
                iter: it,
                energy,
                residual,
                change,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            if !energy.is_finite() || energy.abs() > cfg.divergence_bound || !change.is_finite() {
                return Err(Error::Diverged(it));
            }
            if change.max(residual) < cfg.tol {
                termination = Termination::Converged;
                iterations = it;
                break;
            }
        }
    }
    Ok(SolveOutcome {
        state: st,
        trace,
        iterations,
        termination,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_roundtrip() {
        let a = CsrMatrix::from_triplets(2, 3, vec![(0, 1, 2.0), (1, 0, -1.0), (1, 2, 3.0), (0, 1, 1.0)]);
        let t = a.transpose();
        assert_eq!(t.n_rows, 3);
        assert_eq!(t.row(1).collect::<Vec<_>>(), vec![(0, 3.0)]);
        assert_eq!(t.transpose().row(1).collect::<Vec<_>>(), vec![(0, -1.0), (2, 3.0)]);
    }

    #[test]
    fn equality_constrained_simplex_lp() {
        // min <c,u> s.t. u in simplex, u0 = 0.25: optimum puts the rest on the cheapest other entry
        let k = CsrMatrix::from_triplets(1, 3, vec![(0, 0, 1.0)]);
        let p = SaddleProblem::new(
            k,
            vec![0.0, 1.0, 2.0],
            vec![0.25],
            vec![Run {
                start: 0,
                block_len: 3,
                count: 1,
                kind: PrimalKind::Simplex,
            }],
            vec![Run {
                start: 0,
                block_len: 1,
                count: 1,
                kind: DualKind::Free,
            }],
            vec![],
        )
        .unwrap();
        let cfg = SolverConfig {
            max_iters: 20_000,
            tol: 1e-10,
            ..Default::default()
        };
        let out = solve(&p, &cfg, None, &LinearMonitor(&p)).unwrap();
        let u = &out.state.primal;
        assert!((u[0] - 0.25).abs() < 1e-6 && (u[1] - 0.75).abs() < 1e-6, "{u:?}");
    }

    #[test]
    fn restarts_reach_the_same_optimum() {
        let k = CsrMatrix::from_triplets(2, 4, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 2, 2.0), (1, 3, -1.0)]);
        let p = SaddleProblem::new(
            k,
            vec![0.3, 0.1, 1.0, 0.2],
            vec![0.6, 0.0],
            vec![Run {
                start: 0,
                block_len: 4,
                count: 1,
                kind: PrimalKind::Simplex,
            }],
            vec![Run {
                start: 0,
                block_len: 2,
                count: 1,
                kind: DualKind::Free,
            }],
            vec![],
        )
        .unwrap();
        let base = SolverConfig {
            max_iters: 50_000,
            tol: 1e-10,
            ..Default::default()
        };
        let plain = solve(&p, &base, None, &LinearMonitor(&p)).unwrap();
        let cfg = SolverConfig {
            restart_every: 16,
            rebalance: true,
            ..base
        };
        let restarted = solve(&p, &cfg, None, &LinearMonitor(&p)).unwrap();
        assert_eq!(restarted.termination, Termination::Converged);
        for (a, b) in plain.state.primal.iter().zip(&restarted.state.primal) {
            assert!(
                (a - b).abs() < 1e-5,
                "{:?} vs {:?}",
                plain.state.primal,
                restarted.state.primal
            );
        }
    }
}
