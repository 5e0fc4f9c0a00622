//! Sampled checks of the standing assumptions: positive finite measure and
//! cone condition for `U`, a Lipschitz constant in `u`, ellipticity, and
//! finiteness proxies for the sup-norms of `x`-derivatives.
//!
//! Suprema are estimated by deterministic seeded sampling over a working
//! domain. They are lower estimates, never proofs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluate::GridGeometry;
use crate::model::{ActionSpace, ControlProblem};

/// Proxies above this are treated as infinite.
pub const BLOW_UP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleConfig {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_samples: usize,
    pub seed: u64,
    /// Finite-difference step for the derivative proxies.
    pub fd_step: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            x_lo: -6.0,
            x_hi: 4.0,
            n_samples: 4096,
            seed: 0,
            fd_step: 1e-4,
        }
    }
}

impl SampleConfig {
    pub fn for_grid(geom: &GridGeometry) -> Self {
        Self {
            x_lo: geom.x_lo(),
            x_hi: geom.x_hi(),
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.x_hi > self.x_lo) || !self.x_lo.is_finite() || !self.x_hi.is_finite() {
            return Err(Error::param("sample domain", "need finite x_lo < x_hi"));
        }
        if self.n_samples < 1000 {
            return Err(Error::param("n_samples", "sampling budget must be at least 1000"));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::param("fd_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionSpaceCheck {
    pub leb_ok: bool,
    pub measure: f64,
    pub cone_ok: bool,
    /// Shortest maximal interval.
    pub zeta: f64,
    pub failure: Option<String>,
}

/// Check raw intervals. Overlapping or touching intervals are merged first;
/// `cone_ok` requires every maximal interval to be at least `zeta_min` long
/// and of positive length.
pub fn check_action_space(intervals: &[(f64, f64)], zeta_min: f64) -> ActionSpaceCheck {
    let fail = |msg: String| ActionSpaceCheck {
        leb_ok: false,
        measure: 0.0,
        cone_ok: false,
        zeta: 0.0,
        failure: Some(msg),
    };
    if intervals.is_empty() {
        return fail("no intervals".into());
    }
    for (i, &(lo, hi)) in intervals.iter().enumerate() {
        if !lo.is_finite() || !hi.is_finite() {
            return fail(format!("interval {i} is unbounded or not finite"));
        }
        if hi < lo {
            return fail(format!("interval {i} has hi < lo ({lo} > {hi})"));
        }
    }
    let mut sorted = intervals.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in sorted {
        match merged.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    let measure: f64 = merged.iter().map(|(lo, hi)| hi - lo).sum();
    let zeta = merged.iter().map(|(lo, hi)| hi - lo).fold(f64::INFINITY, f64::min);
    let leb_ok = measure > 0.0 && measure.is_finite();
    let degenerate = intervals.iter().position(|(lo, hi)| hi == lo);
    let cone_ok = leb_ok && zeta > 0.0 && zeta >= zeta_min;
    let failure = if let Some(i) = degenerate {
        Some(format!("interval {i} has zero length"))
    } else if !cone_ok {
        Some(format!("shortest interval {zeta} is below the cone length {zeta_min}"))
    } else {
        None
    };
    ActionSpaceCheck {
        leb_ok,
        measure,
        cone_ok: cone_ok && degenerate.is_none(),
        zeta,
        failure,
    }
}

fn sample_action(space: &ActionSpace, rng: &mut ChaCha8Rng) -> f64 {
    let mut t = rng.random_range(0.0..space.measure());
    for &(lo, hi) in space.intervals() {
        if t <= hi - lo {
            return lo + t;
        }
        t -= hi - lo;
    }
    space.upper()
}

/// Lower estimate of the Lipschitz constant in `u` of `|r| + |b|`.
///
/// Draws form a fixed sequence per seed, so a larger budget only adds samples
/// and the estimate is nondecreasing in the budget.
pub fn estimate_theta(problem: &ControlProblem, cfg: &SampleConfig) -> Result<f64> {
    cfg.check()?;
    let space = problem.action_space();
    let local = 1e-3 * space.measure();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta: f64 = 0.0;
    for k in 0..cfg.n_samples {
        let x = rng.random_range(cfg.x_lo..=cfg.x_hi);
        let u1 = sample_action(space, &mut rng);
        let far = sample_action(space, &mut rng);
        // Alternate global pairs with nearby pairs to catch steep slopes.
        let u2 = if k % 2 == 0 {
            far
        } else if space.contains(u1 + local) {
            u1 + local
        } else {
            u1 - local
        };
        if u1 == u2 || !space.contains(u2) {
            continue;
        }
        let dr = (problem.reward(x, u1) - problem.reward(x, u2)).abs();
        let db = (problem.drift(x, u1) - problem.drift(x, u2)).abs();
        let q = (dr + db) / (u1 - u2).abs();
        if q.is_nan() {
            return Err(Error::NonFiniteModel {
                node: k,
                x,
                u: u1,
                what: "Lipschitz quotient",
            });
        }
        theta = theta.max(q);
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EllipticityCheck {
    pub ok: bool,
    pub min_sq: f64,
}

/// `min_i sigma(x_i)^2`; passes iff the declared floor is positive and met.
pub fn check_ellipticity(problem: &ControlProblem, x: &[f64]) -> EllipticityCheck {
    let min_sq = x
        .iter()
        .map(|&xi| {
            let s = problem.vol(xi);
            s * s
        })
        .fold(f64::INFINITY, |a, b| if b.is_nan() { f64::NAN } else { a.min(b) });
    EllipticityCheck {
        ok: problem.eta0() > 0.0 && min_sq >= problem.eta0(),
        min_sq,
    }
}

/// Sampled sups of `|d^j/dx^j|` of `b`, `r` and `sigma` for `j <= k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaProxies {
    pub k: usize,
    pub drift: Vec<f64>,
    pub reward: Vec<f64>,
    pub vol: Vec<f64>,
    /// Some proxy exceeds [`BLOW_UP`], is not finite, or keeps growing when the
    /// sampling domain is widened tenfold.
    pub blown_up: bool,
}

impl LambdaProxies {
    pub fn max(&self) -> f64 {
        self.drift
            .iter()
            .chain(&self.reward)
            .chain(&self.vol)
            .fold(0.0, |m, &a| if a.is_nan() { f64::NAN } else { m.max(a) })
    }
}

fn fd_derivs(f: impl Fn(f64) -> f64, x: f64, h: f64, k: usize) -> [f64; 3] {
    let (m, c, p) = (f(x - h), f(x), f(x + h));
    let mut d = [c.abs(), 0.0, 0.0];
    if k >= 1 {
        d[1] = ((p - m) / (2.0 * h)).abs();
    }
    if k >= 2 {
        d[2] = ((p - 2.0 * c + m) / (h * h)).abs();
    }
    d
}

fn sampled_sups(problem: &ControlProblem, k: usize, lo: f64, hi: f64, cfg: &SampleConfig) -> [[f64; 3]; 3] {
    let space = problem.action_space();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a4b_da00_0000);
    let mut sups = [[0.0f64; 3]; 3];
    let mut fold = |row: usize, d: [f64; 3]| {
        for j in 0..=k {
            let s = &mut sups[row][j];
            *s = if d[j].is_nan() || s.is_nan() { f64::NAN } else { s.max(d[j]) };
        }
    };
    for _ in 0..cfg.n_samples {
        let x = rng.random_range(lo..=hi);
        let u = sample_action(space, &mut rng);
        fold(0, fd_derivs(|x| problem.drift(x, u), x, cfg.fd_step, k));
        fold(1, fd_derivs(|x| problem.reward(x, u), x, cfg.fd_step, k));
        fold(2, fd_derivs(|x| problem.vol(x), x, cfg.fd_step, k));
    }
    sups
}

pub fn estimate_lambda_k(problem: &ControlProblem, k: usize, cfg: &SampleConfig) -> Result<LambdaProxies> {
    cfg.check()?;
    if k > 2 {
        return Err(Error::param("k", "derivative proxies are available for k <= 2"));
    }
    let base = sampled_sups(problem, k, cfg.x_lo, cfg.x_hi, cfg);
    let mid = 0.5 * (cfg.x_lo + cfg.x_hi);
    let half = 5.0 * (cfg.x_hi - cfg.x_lo);
    let wide = sampled_sups(problem, k, mid - half, mid + half, cfg);
    let mut blown_up = false;
    for row in 0..3 {
        for j in 0..=k {
            let (b, w) = (base[row][j], wide[row][j]);
            if !b.is_finite() || !w.is_finite() || b > BLOW_UP || w > BLOW_UP || w > 1.5 * b + 1e-9 {
                blown_up = true;
            }
        }
    }
    let take = |row: usize| base[row][..=k].to_vec();
    Ok(LambdaProxies {
        k,
        drift: take(0),
        reward: take(1),
        vol: take(2),
        blown_up,
    })
}

/// Everything the bounds and solvers rely on, with a pass/fail summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub model: String,
    pub leb_ok: bool,
    pub measure: f64,
    pub cone_ok: bool,
    pub zeta: f64,
    pub theta: f64,
    pub theta_ceiling: Option<f64>,
    pub theta_budget: usize,
    pub ellipticity_ok: bool,
    pub min_sigma_sq: f64,
    pub eta0: f64,
    pub lambda_k: LambdaProxies,
    /// Sampled `sup |r|` over the working domain.
    pub reward_sup: f64,
    pub reward_sup_ceiling: Option<f64>,
    pub passed: bool,
    pub failures: Vec<String>,
}

impl AssumptionReport {
    /// `sup |r|` for bound arithmetic: the declared ceiling if present,
    /// otherwise the sampled value.
    pub fn reward_sup_for_bounds(&self) -> f64 {
        self.reward_sup_ceiling.unwrap_or(self.reward_sup).max(self.reward_sup)
    }
}

pub fn validate_problem(problem: &ControlProblem, geom: &GridGeometry, cfg: &SampleConfig) -> Result<AssumptionReport> {
    let mut failures = Vec::new();
    let space = check_action_space(problem.action_space().intervals(), 0.0);
    if let Some(f) = &space.failure {
        failures.push(format!("action space: {f}"));
    }
    let theta = estimate_theta(problem, cfg)?;
    let ceilings = problem.ceilings();
    if let Some(c) = ceilings.theta {
        if theta > c * (1.0 + 1e-9) {
            failures.push(format!("sampled theta {theta} exceeds the declared ceiling {c}"));
        }
    }
    let ell = check_ellipticity(problem, &geom.nodes());
    if !ell.ok {
        failures.push(format!(
            "ellipticity: min sigma^2 = {} against floor {}",
            ell.min_sq,
            problem.eta0()
        ));
    }
    let lambda_k = estimate_lambda_k(problem, 2, cfg)?;
    if lambda_k.blown_up {
        failures.push("derivative proxies grow with the domain or exceed 1e6".into());
    }
    let reward_sup = lambda_k.reward[0];
    if let Some(c) = ceilings.reward_sup {
        if reward_sup > c * (1.0 + 1e-9) {
            failures.push(format!("sampled sup|r| {reward_sup} exceeds the declared ceiling {c}"));
        }
    }
    Ok(AssumptionReport {
        model: problem.name().to_string(),
        leb_ok: space.leb_ok,
        measure: space.measure,
        cone_ok: space.cone_ok,
        zeta: space.zeta,
        theta,
        theta_ceiling: ceilings.theta,
        theta_budget: cfg.n_samples,
        ellipticity_ok: ell.ok,
        min_sigma_sq: ell.min_sq,
        eta0: problem.eta0(),
        lambda_k,
        reward_sup,
        reward_sup_ceiling: ceilings.reward_sup,
        passed: failures.is_empty(),
        failures,
    })
}
