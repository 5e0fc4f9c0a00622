//! Monte Carlo estimate of the value of a Gibbs policy.
//!
//! Only the drift is controlled, so running the relaxed control amounts to
//! simulating `dX = b_hat dt + sigma dW` and accumulating the discounted
//! running reward `r_hat - H_hat`. Both coefficients are tabulated once on a
//! fine grid that extends the PDE domain by the distance a path can plausibly
//! travel before the horizon, then read at the nearest node. On a grid eight
//! times finer than the PDE grid this is as accurate as linear interpolation
//! in the weak sense: both errors are second order in the spacing.
//!
//! Each antithetic pair (or each path, without pairing) draws from its own
//! random stream selected by its index, and per-pair results are summed in
//! index order. Estimates therefore do not depend on the thread count.

mod normal;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluate::{interpolate, GridGeometry};
use crate::gibbs::{point_stats, PolicySnapshot};
use crate::model::ControlProblem;
use crate::pia::reward_sup;
use crate::quadrature::ActionQuadrature;
use normal::{has_avx512, NormalGroup, NormalStream, GROUP};

/// Largest distance the coefficient table extends past the PDE domain.
const MAX_EXTENSION: f64 = 200.0;
/// Table spacing relative to the PDE grid spacing.
const TABLE_REFINE: f64 = 8.0;
/// Table nodes per action-sampling node.
const ACTION_STRIDE: usize = 4;
/// Antithetic pairs advanced together; a block holds both legs.
const PAIRS: usize = 32;
/// Paths advanced together.
const BLOCK: usize = 2 * PAIRS;
/// Steps per batch of normals.
const CHUNK: usize = 32;
/// Largest tolerated fraction of paths with a non-finite state.
const MAX_ABORTED: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub dt: f64,
    /// `None` selects `required_horizon` with `horizon_eps`.
    pub horizon: Option<f64>,
    pub horizon_eps: f64,
    pub seed: u64,
    pub antithetic: bool,
    /// Sample `u ~ Gamma` every step for the reward term instead of using
    /// `r_hat - H_hat`.
    pub sample_actions: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 200_000,
            dt: 1e-3,
            horizon: None,
            horizon_eps: 1e-4,
            seed: 0,
            antithetic: true,
            sample_actions: false,
        }
    }
}

impl McConfig {
    fn check(&self) -> Result<()> {
        if self.n_paths < 2 {
            return Err(Error::param("n_paths", "need at least 2 paths"));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::param("n_paths", "must be even with antithetic pairing"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::param("dt", "must be positive"));
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::param("horizon", "must be positive"));
            }
        } else if !(self.horizon_eps > 0.0) {
            return Err(Error::param("horizon_eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub x0: f64,
    pub mean: f64,
    pub std_error: f64,
    /// `(K / rho) e^{-rho T}`, `K` the largest `|r_hat - H_hat|` in the table.
    pub tail_bound: f64,
    pub n_paths: usize,
    pub aborted: usize,
    /// Simulated horizon, a whole number of steps.
    pub horizon: f64,
}

/// Gradient field defining a Gibbs policy, linear in `x` between grid nodes
/// and constant beyond the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyField {
    geometry: GridGeometry,
    y: Vec<f64>,
}

impl PolicyField {
    pub fn new(geometry: GridGeometry, y: Vec<f64>) -> Result<Self> {
        if y.len() != geometry.len() {
            return Err(Error::FieldLength {
                name: "policy gradient",
                got: y.len(),
                expected: geometry.len(),
            });
        }
        if y.iter().any(|a| !a.is_finite()) {
            return Err(Error::param("policy gradient", "non-finite value"));
        }
        Ok(Self { geometry, y })
    }

    /// Zero gradient: the Gibbs policy of `r` alone.
    pub fn uniform(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            y: vec![0.0; geometry.len()],
        }
    }

    pub fn from_snapshot(geometry: GridGeometry, snap: &PolicySnapshot) -> Result<Self> {
        Self::new(geometry, snap.gradient().to_vec())
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn gradient(&self) -> &[f64] {
        &self.y
    }

    pub fn at(&self, x: f64) -> f64 {
        interpolate(&self.geometry, &self.y, x)
    }

    pub fn sup_abs(&self) -> f64 {
        self.y.iter().fold(0.0, |m, a| m.max(a.abs()))
    }
}

/// `ln(K / (rho eps)) / rho`, the horizon after which `(K / rho) e^{-rho T}`
/// drops to `eps`. Zero when the tail is already below `eps`.
pub fn horizon_for(k: f64, rho: f64, eps: f64) -> f64 {
    ((k / (rho * eps)).ln() / rho).max(0.0)
}

pub fn tail_bound(k: f64, rho: f64, horizon: f64) -> f64 {
    k / rho * (-rho * horizon).exp()
}

/// Horizon for tail error `eps`, with
/// `K = sup|r| + lambda |ln Leb U| + lambda ln(1 + y_abs)` and `sup|r|` taken
/// over the grid and the action nodes (or the model's declared ceiling).
pub fn required_horizon(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    geom: &GridGeometry,
    y_abs: f64,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::param("eps", "must be positive"));
    }
    let lambda = problem.lambda();
    let k = reward_sup(problem, quad, &geom.nodes())
        + lambda * quad.measure().ln().abs()
        + lambda * (1.0 + y_abs.abs()).ln();
    Ok(horizon_for(k, problem.rho(), eps))
}

/// Coefficients at the table nodes, read at the nearest node. Paths are
/// tracked in table units `(x - lo) / dx`, so one Euler step adds
/// `drift[i] + noise * z`.
struct CoeffTable {
    lo: f64,
    inv_dx: f64,
    s_max: f64,
    /// `(b_hat dt / dx, r_hat - H_hat)` per node.
    nodes: Vec<[f64; 2]>,
    noise: NoiseTable,
    max_abs_f: f64,
    actions: Option<ActionTable>,
}

/// `sigma sqrt(dt) / dx`.
enum NoiseTable {
    Constant(f64),
    Nodes(Vec<f64>),
}

/// Action sampling: at every `ACTION_STRIDE`-th table node, cumulative action
/// probabilities and the reward term `r - lambda ln Gamma` at each action node.
struct ActionTable {
    n_actions: usize,
    n_nodes: usize,
    cdf: Vec<f64>,
    reward: Vec<f64>,
}

fn build_table(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    policy: &PolicyField,
    horizon: f64,
    dt: f64,
    with_actions: bool,
) -> Result<CoeffTable> {
    let geom = policy.geometry();
    let x = geom.nodes();
    let b_sup = x
        .iter()
        .flat_map(|&xi| quad.nodes().iter().map(move |&u| problem.drift(xi, u).abs()))
        .fold(0.0, f64::max);
    let s_sup = x.iter().map(|&xi| problem.vol(xi).abs()).fold(0.0, f64::max);
    let reach = (b_sup * horizon + 8.0 * s_sup * horizon.sqrt()).min(MAX_EXTENSION);
    if !reach.is_finite() {
        return Err(Error::param("policy", "drift or volatility is not finite on the grid"));
    }
    let dx = geom.h() / TABLE_REFINE;
    let lo = geom.x_lo() - reach;
    let m = ((geom.x_hi() + reach - lo) / dx).ceil() as usize + 1;
    let lambda = problem.lambda();

    struct Node {
        b: f64,
        f: f64,
        s: f64,
        actions: Option<(Vec<f64>, Vec<f64>)>,
    }
    let nodes: Vec<Node> = (0..m)
        .into_par_iter()
        .map(|i| {
            let xi = lo + i as f64 * dx;
            let y = policy.at(xi);
            let st = point_stats(problem, quad, xi, y).map_err(|e| match e {
                Error::NonFiniteModel { u, what, .. } => Error::NonFiniteModel { node: i, x: xi, u, what },
                other => other,
            })?;
            let s = problem.vol(xi);
            if !s.is_finite() {
                return Err(Error::NonFiniteModel {
                    node: i,
                    x: xi,
                    u: f64::NAN,
                    what: "volatility",
                });
            }
            let actions = (with_actions && i % ACTION_STRIDE == 0).then(|| {
                let g: Vec<f64> = quad
                    .nodes()
                    .iter()
                    .map(|&u| (problem.drift(xi, u) * y + problem.reward(xi, u)) / lambda)
                    .collect();
                let mut acc = 0.0;
                let mut cdf = Vec::with_capacity(g.len());
                let mut rew = Vec::with_capacity(g.len());
                for (j, &u) in quad.nodes().iter().enumerate() {
                    let log_p = g[j] - st.log_z;
                    acc += quad.weights()[j] * log_p.exp();
                    cdf.push(acc);
                    rew.push(problem.reward(xi, u) - lambda * log_p);
                }
                (cdf, rew)
            });
            Ok(Node {
                b: st.b_hat,
                f: st.r_hat - st.h_hat,
                s,
                actions,
            })
        })
        .collect::<Result<_>>()?;

    let inv_dx = 1.0 / dx;
    let step_noise = dt.sqrt() * inv_dx;
    let noise = if nodes.iter().all(|n| n.s == nodes[0].s) {
        NoiseTable::Constant(nodes[0].s * step_noise)
    } else {
        NoiseTable::Nodes(nodes.iter().map(|n| n.s * step_noise).collect())
    };
    let max_abs_f = nodes.iter().fold(0.0, |acc: f64, n| acc.max(n.f.abs()));
    let actions = with_actions.then(|| {
        let n_actions = quad.len();
        let mut cdf = Vec::new();
        let mut reward = Vec::new();
        for (c, r) in nodes.iter().filter_map(|n| n.actions.as_ref()) {
            cdf.extend_from_slice(c);
            reward.extend_from_slice(r);
        }
        ActionTable {
            n_actions,
            n_nodes: cdf.len() / n_actions,
            cdf,
            reward,
        }
    });
    Ok(CoeffTable {
        lo,
        inv_dx,
        s_max: (m - 1) as f64,
        nodes: nodes.iter().map(|n| [n.b * dt * inv_dx, n.f]).collect(),
        noise,
        max_abs_f,
        actions,
    })
}

impl CoeffTable {
    fn to_units(&self, x: f64) -> f64 {
        (x - self.lo) * self.inv_dx
    }

    fn covers(&self, x: f64) -> bool {
        let s = self.to_units(x);
        s >= 0.0 && s <= self.s_max
    }

    /// Nearest node to `s`, clamped to the table. NaN maps to node 0.
    #[inline(always)]
    fn node(&self, s: f64) -> usize {
        s.max(0.0).min(self.s_max).round_ties_even() as usize
    }
}

struct StepConsts {
    dt: f64,
    steps: usize,
    decay: f64,
}

/// Advance the block by one Euler step in table units, adding `disc * f` to
/// `acc`. `noise` is `None` for the constant scale `n_const`.
#[inline(always)]
fn step_lanes(
    tab: &CoeffTable,
    noise: Option<&[f64]>,
    n_const: f64,
    s: &mut [f64; BLOCK],
    acc: &mut [f64; BLOCK],
    z: &[f64; BLOCK],
    disc: f64,
) {
    for l in 0..BLOCK {
        // NaN states read node 0 and stay NaN; they are counted afterwards.
        let i = tab.node(s[l]);
        // `i <= s_max`, the last index of every table.
        let [b, f] = unsafe { *tab.nodes.get_unchecked(i) };
        let sg = match noise {
            None => n_const,
            Some(v) => unsafe { *v.get_unchecked(i) },
        };
        acc[l] += disc * f;
        s[l] += b + sg * z[l];
    }
}

/// Normals for the next `rows.len()` steps. With pairing the second half of
/// each row mirrors the first.
#[inline(always)]
fn fill_rows(gens: &mut [NormalGroup], rows: &mut [[f64; BLOCK]], antithetic: bool, vector: bool) {
    for (g, gen) in gens.iter_mut().enumerate() {
        #[cfg(target_arch = "x86_64")]
        if vector {
            // Safety: `vector` is only set after the feature check.
            unsafe { gen.fill_avx512(rows, g * GROUP) };
            continue;
        }
        let _ = vector;
        gen.fill_scalar(rows, g * GROUP);
    }
    if antithetic {
        for row in rows.iter_mut() {
            let (a, b) = row.split_at_mut(PAIRS);
            for (p, q) in a.iter().zip(b.iter_mut()) {
                *q = -*p;
            }
        }
    }
}

#[inline(always)]
fn run_block_generic(
    tab: &CoeffTable,
    s: &mut [f64; BLOCK],
    acc: &mut [f64; BLOCK],
    gens: &mut [NormalGroup],
    antithetic: bool,
    c: &StepConsts,
) {
    let (noise, n_const) = match &tab.noise {
        NoiseTable::Constant(n) => (None, *n),
        NoiseTable::Nodes(v) => (Some(v.as_slice()), 0.0),
    };
    let mut z = vec![[0.0; BLOCK]; CHUNK];
    let mut disc = 1.0;
    let mut done = 0;
    while done < c.steps {
        let rows = &mut z[..CHUNK.min(c.steps - done)];
        fill_rows(gens, rows, antithetic, false);
        for row in rows.iter() {
            if noise.is_none() {
                step_lanes(tab, None, n_const, s, acc, row, disc);
            } else {
                step_lanes(tab, noise, n_const, s, acc, row, disc);
            }
            disc *= c.decay;
        }
        done += rows.len();
    }
}

/// Same arithmetic as [`step_lanes`] with constant noise, one step per row of
/// `rows`. Lanes are held eight to a vector in registers across the rows, and
/// table reads are gathers. Operations are applied in the same order without
/// fused multiply-adds, so results are identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq")]
unsafe fn steps_avx512(
    tab: &CoeffTable,
    n_const: f64,
    s: &mut [f64; BLOCK],
    acc: &mut [f64; BLOCK],
    rows: &[[f64; BLOCK]],
    disc: &mut f64,
    decay: f64,
) {
    use std::arch::x86_64::*;
    const V: usize = BLOCK / 8;
    const NEAREST: i32 = _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC;
    let zero = _mm512_setzero_pd();
    let s_max = _mm512_set1_pd(tab.s_max);
    let noise = _mm512_set1_pd(n_const);
    let base = tab.nodes.as_ptr() as *const f64;
    let mut sv: [__m512d; V] = std::array::from_fn(|v| _mm512_loadu_pd(s.as_ptr().add(8 * v)));
    let mut av: [__m512d; V] = std::array::from_fn(|v| _mm512_loadu_pd(acc.as_ptr().add(8 * v)));
    for row in rows {
        let dv = _mm512_set1_pd(*disc);
        for v in 0..V {
            // max returns its second operand for NaN input, matching f64::max.
            let clamped = _mm512_min_pd(_mm512_max_pd(sv[v], zero), s_max);
            let idx = _mm512_slli_epi64::<1>(_mm512_cvt_roundpd_epi64::<NEAREST>(clamped));
            let b = _mm512_i64gather_pd::<8>(idx, base);
            let f = _mm512_i64gather_pd::<8>(idx, base.add(1));
            av[v] = _mm512_add_pd(av[v], _mm512_mul_pd(dv, f));
            let zv = _mm512_loadu_pd(row.as_ptr().add(8 * v));
            sv[v] = _mm512_add_pd(sv[v], _mm512_add_pd(b, _mm512_mul_pd(noise, zv)));
        }
        *disc *= decay;
    }
    for v in 0..V {
        _mm512_storeu_pd(s.as_mut_ptr().add(8 * v), sv[v]);
        _mm512_storeu_pd(acc.as_mut_ptr().add(8 * v), av[v]);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512dq")]
unsafe fn run_block_avx512(
    tab: &CoeffTable,
    s: &mut [f64; BLOCK],
    acc: &mut [f64; BLOCK],
    gens: &mut [NormalGroup],
    antithetic: bool,
    c: &StepConsts,
) {
    let NoiseTable::Constant(n_const) = tab.noise else {
        return run_block_generic(tab, s, acc, gens, antithetic, c);
    };
    let mut z = vec![[0.0; BLOCK]; CHUNK];
    let mut disc = 1.0;
    let mut done = 0;
    while done < c.steps {
        let rows = &mut z[..CHUNK.min(c.steps - done)];
        fill_rows(gens, rows, antithetic, true);
        steps_avx512(tab, n_const, s, acc, rows, &mut disc, c.decay);
        done += rows.len();
    }
}

fn run_block(
    tab: &CoeffTable,
    s: &mut [f64; BLOCK],
    acc: &mut [f64; BLOCK],
    gens: &mut [NormalGroup],
    antithetic: bool,
    c: &StepConsts,
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx512() {
        // Safety: the CPU supports the enabled features. No FMA is used, so
        // results match the portable path bit for bit.
        unsafe { run_block_avx512(tab, s, acc, gens, antithetic, c) };
        return;
    }
    run_block_generic(tab, s, acc, gens, antithetic, c)
}

/// Action-sampling variant: one scalar path, reward drawn from `Gamma` at a
/// neighbouring action node.
fn run_path_sampled(tab: &CoeffTable, s0: f64, rng: &mut NormalStream, normals: &[f64], c: &StepConsts) -> (f64, f64) {
    let at = tab.actions.as_ref().expect("action table");
    let mut s = s0;
    let mut acc = 0.0;
    let mut disc = 1.0;
    for &z in normals.iter().take(c.steps) {
        let i = tab.node(s);
        let sg = match &tab.noise {
            NoiseTable::Constant(n) => *n,
            NoiseTable::Nodes(v) => v[i],
        };
        // Random rounding between action nodes interpolates the reward linearly
        // in expectation.
        let a = s.max(0.0).min(tab.s_max) / ACTION_STRIDE as f64;
        let k = a as usize;
        let node = if k + 1 < at.n_nodes && rng.uniform() < a - k as f64 { k + 1 } else { k.min(at.n_nodes - 1) };
        let cdf = &at.cdf[node * at.n_actions..(node + 1) * at.n_actions];
        let target = rng.uniform() * cdf[at.n_actions - 1];
        let j = cdf.partition_point(|&p| p <= target).min(at.n_actions - 1);
        acc += disc * at.reward[node * at.n_actions + j];
        s += tab.nodes[i][0] + sg * z;
        disc *= c.decay;
    }
    (s, acc)
}

/// Per-sample values (pair means with antithetic pairing) and the number of
/// aborted paths.
fn sample_values(tab: &CoeffTable, x0: f64, cfg: &McConfig, c: &StepConsts) -> (Vec<f64>, usize) {
    let s0 = tab.to_units(x0);
    let weight = if c.decay < 1.0 { (1.0 - c.decay) / (-c.decay.ln()) * c.dt } else { c.dt };
    let n_samples = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    // Samples (pairs, or single paths) per block.
    let per_block = if cfg.antithetic { PAIRS } else { BLOCK };
    let n_blocks = if cfg.sample_actions { n_samples } else { n_samples.div_ceil(per_block) };

    let blocks: Vec<Vec<Option<f64>>> = (0..n_blocks)
        .into_par_iter()
        .map(|blk| {
            if cfg.sample_actions {
                let mut rng = NormalStream::new(cfg.seed, blk as u64);
                let normals: Vec<f64> = (0..c.steps).map(|_| rng.normal()).collect();
                let mut value = 0.0;
                let mut ok = true;
                let legs: &[f64] = if cfg.antithetic { &[1.0, -1.0] } else { &[1.0] };
                for &sign in legs {
                    let z: Vec<f64> = normals.iter().map(|n| sign * n).collect();
                    let (x, acc) = run_path_sampled(tab, s0, &mut rng, &z, c);
                    ok &= x.is_finite() && acc.is_finite();
                    value += acc * weight;
                }
                return vec![ok.then_some(value / legs.len() as f64)];
            }
            let first = blk * per_block;
            let mut gens: Vec<NormalGroup> = (0..per_block / GROUP)
                .map(|g| NormalGroup::new(cfg.seed, (first + g * GROUP) as u64))
                .collect();
            let mut x = [s0; BLOCK];
            let mut acc = [0.0; BLOCK];
            run_block(tab, &mut x, &mut acc, &mut gens, cfg.antithetic, c);
            let live = per_block.min(n_samples - first);
            if cfg.antithetic {
                (0..live)
                    .map(|l| {
                        let ok = [l, l + PAIRS].iter().all(|&k| x[k].is_finite() && acc[k].is_finite());
                        ok.then(|| 0.5 * (acc[l] + acc[l + PAIRS]) * weight)
                    })
                    .collect()
            } else {
                (0..live)
                    .map(|l| (x[l].is_finite() && acc[l].is_finite()).then(|| acc[l] * weight))
                    .collect()
            }
        })
        .collect();

    let per_sample = if cfg.antithetic { 2 } else { 1 };
    let mut values = Vec::with_capacity(n_samples);
    let mut aborted = 0;
    for v in blocks.into_iter().flatten() {
        match v {
            Some(v) => values.push(v),
            None => aborted += per_sample,
        }
    }
    (values, aborted)
}

/// Estimate the value of `policy` at each starting point. The coefficient table
/// is built once and shared.
pub fn simulate_values(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    policy: &PolicyField,
    x0: &[f64],
    cfg: &McConfig,
) -> Result<Vec<McEstimate>> {
    cfg.check()?;
    let horizon = match cfg.horizon {
        Some(t) => t,
        None => required_horizon(problem, quad, policy.geometry(), policy.sup_abs(), cfg.horizon_eps)?,
    };
    let steps = ((horizon / cfg.dt).ceil() as usize).max(1);
    let consts = StepConsts {
        dt: cfg.dt,
        steps,
        decay: (-problem.rho() * cfg.dt).exp(),
    };
    let sim_horizon = steps as f64 * cfg.dt;
    let tab = build_table(problem, quad, policy, sim_horizon, cfg.dt, cfg.sample_actions)?;
    x0.iter()
        .map(|&x| {
            if !tab.covers(x) {
                return Err(Error::param("x0", format!("{x} lies outside the simulated domain")));
            }
            let (values, aborted) = sample_values(&tab, x, cfg, &consts);
            if aborted as f64 > MAX_ABORTED * cfg.n_paths as f64 {
                return Err(Error::RolloutAborted {
                    aborted,
                    total: cfg.n_paths,
                });
            }
            let k = values.len() as f64;
            let mean = values.iter().sum::<f64>() / k;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0).max(1.0);
            Ok(McEstimate {
                x0: x,
                mean,
                std_error: (var / k).sqrt(),
                tail_bound: tail_bound(tab.max_abs_f, problem.rho(), sim_horizon),
                n_paths: cfg.n_paths - aborted,
                aborted,
                horizon: sim_horizon,
            })
        })
        .collect()
}

pub fn simulate_value(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    policy: &PolicyField,
    x0: f64,
    cfg: &McConfig,
) -> Result<McEstimate> {
    simulate_values(problem, quad, policy, &[x0], cfg).map(|mut v| v.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gibbs::soft_hamiltonian;
    use crate::model::{make_constant, make_merton, ActionSpace, MertonParams};
    use crate::quadrature::{build_quadrature, QuadRule};

    fn constant() -> (ControlProblem, ActionQuadrature, GridGeometry) {
        let p = make_constant(0.3, 0.8, ActionSpace::interval(0.05, 0.5).unwrap(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        (p, q, GridGeometry::new(-2.0, 2.0, 41).unwrap())
    }

    fn small(n_paths: usize, horizon: f64) -> McConfig {
        McConfig {
            n_paths,
            dt: 1e-2,
            horizon: Some(horizon),
            ..McConfig::default()
        }
    }

    #[test]
    fn horizon_arithmetic() {
        assert!((horizon_for(1.0, 1.0, (-5.0f64).exp()) - 5.0).abs() < 1e-12);
        let t = tail_bound(1.4, 0.1, 100.0);
        assert!((t - 14.0 * (-10.0f64).exp()).abs() < 1e-15);
        assert!((t - 6.4e-4).abs() < 1e-5);
        assert_eq!(horizon_for(1e-9, 1.0, 1.0), 0.0);
    }

    #[test]
    fn merton_required_horizon() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 101).unwrap();
        let t = required_horizon(&p, &q, &g, 0.0, 1e-4).unwrap();
        let k = 1.0 + 0.5 * 0.45f64.ln().abs();
        assert!((t - (k / (0.1 * 1e-4)).ln() / 0.1).abs() < 1e-9);
        assert!((tail_bound(k, 0.1, t) - 1e-4).abs() < 1e-12);
        assert!(required_horizon(&p, &q, &g, 0.0, 0.0).is_err());
    }

    #[test]
    fn constant_model_matches_closed_form() {
        let (p, q, g) = constant();
        let c = soft_hamiltonian(&p, &q, 0.0, 0.0).unwrap();
        let est = simulate_value(&p, &q, &PolicyField::uniform(g), 0.3, &small(64, 30.0)).unwrap();
        let exact = c * (1.0 - (-0.1f64 * est.horizon).exp()) / 0.1;
        assert!((est.mean - exact).abs() <= 3.0 * est.std_error + 1e-9, "{} {exact}", est.mean);
        assert!(est.std_error < 1e-12);

        // Doubling the horizon past the required one moves the estimate by at most eps.
        let eps = 1e-3;
        let t = horizon_for(c.abs(), 0.1, eps);
        let a = simulate_value(&p, &q, &PolicyField::uniform(g), 0.0, &small(2, t)).unwrap();
        let b = simulate_value(&p, &q, &PolicyField::uniform(g), 0.0, &small(2, 2.0 * t)).unwrap();
        assert!((a.mean - b.mean).abs() <= eps * 1.001);
    }

    #[test]
    fn seed_determinism_and_thread_independence() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 101).unwrap();
        let cfg = small(200, 5.0);
        let pol = PolicyField::uniform(g);
        let a = simulate_value(&p, &q, &pol, 0.0, &cfg).unwrap();
        let b = simulate_value(&p, &q, &pol, 0.0, &cfg).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| simulate_value(&p, &q, &pol, 0.0, &cfg).unwrap());
        assert_eq!(a.mean.to_bits(), c.mean.to_bits());
        assert_eq!(a.std_error.to_bits(), c.std_error.to_bits());
        // Portable kernel agrees with the dispatched one.
        let tab = build_table(&p, &q, &pol, 5.0, 1e-2, false).unwrap();
        // 1030 steps leave a partial batch of normals at the end.
        let consts = StepConsts { dt: 1e-2, steps: 1030, decay: (-0.1f64 * 1e-2).exp() };
        for (antithetic, groups) in [(true, PAIRS / GROUP), (false, BLOCK / GROUP)] {
            let mut x1 = [tab.to_units(0.0); BLOCK];
            let mut a1 = [0.0; BLOCK];
            let mut x2 = x1;
            let mut a2 = a1;
            let mut r1: Vec<_> = (0..groups).map(|g| NormalGroup::new(7, (g * GROUP) as u64)).collect();
            let mut r2 = r1.clone();
            run_block(&tab, &mut x1, &mut a1, &mut r1, antithetic, &consts);
            run_block_generic(&tab, &mut x2, &mut a2, &mut r2, antithetic, &consts);
            assert_eq!(x1, x2);
            assert_eq!(a1, a2);
            assert_eq!(r1, r2);
        }
        let other = simulate_value(&p, &q, &pol, 0.0, &McConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.mean.to_bits(), other.mean.to_bits());
    }

    #[test]
    fn standard_error_scales_with_path_count() {
        // Zero drift and a reward varying in x give a non-degenerate estimator.
        let p = ControlProblem::new(
            "wavy",
            0.5,
            0.5,
            ActionSpace::interval(0.0, 1.0).unwrap(),
            std::sync::Arc::new(|_x, _u| 0.0),
            std::sync::Arc::new(|_x| 1.0),
            std::sync::Arc::new(|x: f64, u| x.sin() * u),
            1.0,
        )
        .unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-3.0, 3.0, 61).unwrap();
        let pol = PolicyField::uniform(g);
        let a = simulate_value(&p, &q, &pol, 0.5, &small(2_000, 4.0)).unwrap();
        let b = simulate_value(&p, &q, &pol, 0.5, &small(8_000, 4.0)).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio - 2.0).abs() <= 0.6, "{ratio}");
    }

    #[test]
    fn action_sampling_agrees() {
        let p = make_merton(MertonParams::default(), 0.5, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::GaussLegendre { order: 8, panels: 1 }).unwrap();
        let g = GridGeometry::new(-3.0, 3.0, 61).unwrap();
        let pol = PolicyField::new(g, g.nodes().iter().map(|x| 0.5 * x).collect()).unwrap();
        let base = small(4_000, 6.0);
        let a = simulate_value(&p, &q, &pol, 0.5, &base).unwrap();
        let b = simulate_value(&p, &q, &pol, 0.5, &McConfig { sample_actions: true, ..base }).unwrap();
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() <= 3.0 * se, "{} {} {se}", a.mean, b.mean);
    }

    #[test]
    fn config_and_domain_errors() {
        let (p, q, g) = constant();
        let pol = PolicyField::uniform(g);
        for bad in [
            McConfig { n_paths: 1, ..small(2, 1.0) },
            McConfig { n_paths: 3, ..small(2, 1.0) },
            McConfig { dt: 0.0, ..small(2, 1.0) },
            McConfig { horizon: Some(-1.0), ..small(2, 1.0) },
        ] {
            assert!(simulate_value(&p, &q, &pol, 0.0, &bad).is_err());
        }
        assert!(simulate_value(&p, &q, &pol, 1e6, &small(2, 1.0)).is_err());
        assert!(PolicyField::new(g, vec![0.0; 3]).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let p = ControlProblem::new(
            "explosive",
            0.1,
            0.5,
            ActionSpace::interval(0.0, 1.0).unwrap(),
            std::sync::Arc::new(|_x, _u| 0.0),
            std::sync::Arc::new(|x: f64| if x > 0.05 { f64::MAX } else { 1.0 }),
            std::sync::Arc::new(|_x, _u| 0.0),
            1.0,
        )
        .unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-1.0, 0.0, 11).unwrap();
        let r = simulate_value(&p, &q, &PolicyField::uniform(g), 0.0, &small(64, 1.0));
        assert!(matches!(r, Err(Error::RolloutAborted { .. })), "{r:?}");
    }
}
