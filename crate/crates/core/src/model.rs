//! Control problem primitives and the built-in models.
//!
//! A [`ControlProblem`] bundles the discount rate, the entropy weight, the
//! action space and three pure functions: the drift `b(x, u)`, the volatility
//! `sigma(x)` and the running reward `r(x, u)`. Only the drift depends on the
//! action; the diffusion coefficient is uncontrolled.
//!
//! The two consumption models work in log-state `x = ln z`. Their numeric
//! defaults are implementation choices, not calibrated values.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type StateActionFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A finite union of disjoint closed intervals in the real line.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    intervals: Vec<(f64, f64)>,
    total_measure: f64,
}

impl ActionSpace {
    /// Intervals must be finite, strictly increasing (`lo < hi`), sorted and
    /// pairwise disjoint.
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::ActionSpace("no intervals".into()));
        }
        for (i, &(lo, hi)) in intervals.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::ActionSpace(format!("interval {i} is not finite")));
            }
            if lo >= hi {
                return Err(Error::ActionSpace(format!(
                    "interval {i} = [{lo}, {hi}] has non-positive length"
                )));
            }
            if i > 0 && lo <= intervals[i - 1].1 {
                return Err(Error::ActionSpace(format!(
                    "interval {i} overlaps or precedes interval {}",
                    i - 1
                )));
            }
        }
        let total_measure = intervals.iter().map(|(lo, hi)| hi - lo).sum();
        Ok(Self {
            intervals,
            total_measure,
        })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![(lo, hi)])
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Lebesgue measure of the set.
    pub fn measure(&self) -> f64 {
        self.total_measure
    }

    pub fn lower(&self) -> f64 {
        self.intervals[0].0
    }

    pub fn upper(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].1
    }

    pub fn contains(&self, u: f64) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= u && u <= hi)
    }
}

/// Analytic bounds a model may declare so that sampled estimates can be
/// cross-checked against them.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Ceilings {
    /// Upper bound on the Lipschitz constant in `u` of `r + b`.
    pub theta: Option<f64>,
    /// Upper bound on `sup |r|`.
    pub reward_sup: Option<f64>,
}

/// An entropy-regularized control problem. Immutable after construction.
#[derive(Clone)]
pub struct ControlProblem {
    name: String,
    rho: f64,
    lambda: f64,
    action_space: ActionSpace,
    drift: StateActionFn,
    vol: StateFn,
    reward: StateActionFn,
    eta0: f64,
    ceilings: Ceilings,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("rho", &self.rho)
            .field("lambda", &self.lambda)
            .field("action_space", &self.action_space)
            .field("eta0", &self.eta0)
            .field("ceilings", &self.ceilings)
            .finish_non_exhaustive()
    }
}

impl ControlProblem {
    /// `eta0` is the declared ellipticity floor for `sigma^2`; it is checked by
    /// [`crate::validate::check_ellipticity`], not here.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        rho: f64,
        lambda: f64,
        action_space: ActionSpace,
        drift: StateActionFn,
        vol: StateFn,
        reward: StateActionFn,
        eta0: f64,
    ) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::param("rho", format!("must be positive, got {rho}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param(
                "lambda",
                format!("must be positive, got {lambda}"),
            ));
        }
        if !(eta0 >= 0.0 && eta0.is_finite()) {
            return Err(Error::param(
                "eta0",
                format!("must be finite and non-negative, got {eta0}"),
            ));
        }
        Ok(Self {
            name: name.into(),
            rho,
            lambda,
            action_space,
            drift,
            vol,
            reward,
            eta0,
            ceilings: Ceilings::default(),
        })
    }

    pub fn with_ceilings(mut self, ceilings: Ceilings) -> Self {
        self.ceilings = ceilings;
        self
    }

    /// Same problem with a different entropy weight.
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param(
                "lambda",
                format!("must be positive, got {lambda}"),
            ));
        }
        let mut p = self.clone();
        p.lambda = lambda;
        Ok(p)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn ceilings(&self) -> Ceilings {
        self.ceilings
    }

    #[inline]
    pub fn drift(&self, x: f64, u: f64) -> f64 {
        (self.drift)(x, u)
    }

    #[inline]
    pub fn vol(&self, x: f64) -> f64 {
        (self.vol)(x)
    }

    #[inline]
    pub fn reward(&self, x: f64, u: f64) -> f64 {
        (self.reward)(x, u)
    }
}

/// Exponential utility of consumption `u * e^x`.
fn exp_utility_reward(risk_alpha: f64) -> StateActionFn {
    Arc::new(move |x: f64, u: f64| -(-risk_alpha * u * x.exp()).exp())
}

/// Merton consumption with a fixed risky proportion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertonParams {
    /// Riskfree rate.
    pub rf: f64,
    /// Risk premium of the risky asset.
    pub prem: f64,
    /// Volatility of the risky asset.
    pub vol_a: f64,
    /// Fixed proportion of wealth held in the risky asset.
    pub frac_eta: f64,
    /// Absolute risk aversion of the exponential utility.
    pub risk_alpha: f64,
    /// Subsistence consumption rate.
    pub c_floor: f64,
}

impl Default for MertonParams {
    fn default() -> Self {
        Self {
            rf: 0.03,
            prem: 0.05,
            vol_a: 0.2,
            frac_eta: 0.5,
            risk_alpha: 1.0,
            c_floor: 0.05,
        }
    }
}

pub fn make_merton(p: MertonParams, rho: f64, lambda: f64) -> Result<ControlProblem> {
    if !(p.rf > 0.0) {
        return Err(Error::param("rf", "must be positive"));
    }
    if !(p.prem >= 0.0) {
        return Err(Error::param("prem", "must be non-negative"));
    }
    if !(p.vol_a > 0.0) {
        return Err(Error::param("vol_a", "must be positive"));
    }
    if !(p.frac_eta > 0.0 && p.frac_eta < 1.0) {
        return Err(Error::param("frac_eta", "must lie in (0, 1)"));
    }
    if !(p.risk_alpha > 0.0) {
        return Err(Error::param("risk_alpha", "must be positive"));
    }
    if !(p.c_floor > 0.0) {
        return Err(Error::param("c_floor", "must be positive"));
    }
    if p.c_floor >= 1.0 - p.frac_eta {
        return Err(Error::param(
            "c_floor",
            format!(
                "action space [{}, {}] is empty",
                p.c_floor,
                1.0 - p.frac_eta
            ),
        ));
    }
    let space = ActionSpace::interval(p.c_floor, 1.0 - p.frac_eta)?;
    let base = p.rf + p.prem * p.frac_eta - 0.5 * p.vol_a * p.vol_a * p.frac_eta * p.frac_eta;
    let sigma = p.vol_a * p.frac_eta;
    let problem = ControlProblem::new(
        "merton",
        rho,
        lambda,
        space,
        Arc::new(move |_x, u| base - u),
        Arc::new(move |_x| sigma),
        exp_utility_reward(p.risk_alpha),
        sigma * sigma,
    )?;
    // |r| <= 1 and |r_u| <= e^{-1}/u; the drift has unit slope in u.
    Ok(problem.with_ceilings(Ceilings {
        theta: Some(1.0 + (-1.0f64).exp() / p.c_floor),
        reward_sup: Some(1.0),
    }))
}

/// Stochastic growth model with production `f(z) = theta z / (1 + z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthParams {
    pub mu_dep: f64,
    pub vol_a: f64,
    pub risk_alpha: f64,
    pub c_floor: f64,
    pub prod_theta: f64,
}

impl Default for GrowthParams {
    fn default() -> Self {
        Self {
            mu_dep: 0.05,
            vol_a: 0.2,
            risk_alpha: 1.0,
            c_floor: 0.1,
            prod_theta: 1.0,
        }
    }
}

impl GrowthParams {
    /// Production function.
    pub fn production(&self, z: f64) -> f64 {
        self.prod_theta * z / (1.0 + z)
    }

    /// `f(e^x) e^{-x}`, written so that it stays finite for large `x`.
    pub fn output_per_capital(&self, x: f64) -> f64 {
        self.prod_theta / (1.0 + x.exp())
    }
}

pub fn make_growth(p: GrowthParams, rho: f64, lambda: f64) -> Result<ControlProblem> {
    if !(p.prod_theta > 0.0) {
        return Err(Error::param("prod_theta", "must be positive"));
    }
    if !(p.mu_dep > 0.0) {
        return Err(Error::param("mu_dep", "must be positive"));
    }
    if !(p.vol_a > 0.0) {
        return Err(Error::param("vol_a", "must be positive"));
    }
    if !(p.risk_alpha > 0.0) {
        return Err(Error::param("risk_alpha", "must be positive"));
    }
    if !(p.c_floor > 0.0 && p.c_floor < 1.0) {
        return Err(Error::param("c_floor", "must lie in (0, 1)"));
    }
    let space = ActionSpace::interval(p.c_floor, 1.0)?;
    let shift = p.mu_dep + 0.5 * p.vol_a * p.vol_a;
    let sigma = p.vol_a;
    let problem = ControlProblem::new(
        "growth",
        rho,
        lambda,
        space,
        Arc::new(move |x, u| p.output_per_capital(x) - shift - u),
        Arc::new(move |_x| sigma),
        exp_utility_reward(p.risk_alpha),
        sigma * sigma,
    )?;
    Ok(problem.with_ceilings(Ceilings {
        theta: Some(1.0 + (-1.0f64).exp() / p.c_floor),
        reward_sup: Some(1.0),
    }))
}

/// Synthetic model with `b(x, u) = u`, `sigma = 1` and
/// `r(x, u) = -(u - y_star)^2`; its Gibbs densities are truncated Gaussians.
pub fn make_quadratic_test(
    y_star: f64,
    rho: f64,
    lambda: f64,
    space: ActionSpace,
) -> Result<ControlProblem> {
    if space.intervals().len() != 1 {
        return Err(Error::ActionSpace(
            "quadratic test model needs a single interval".into(),
        ));
    }
    let (lo, hi) = space.intervals()[0];
    let reach = (lo - y_star).abs().max((hi - y_star).abs());
    let problem = ControlProblem::new(
        "quadratic",
        rho,
        lambda,
        space,
        Arc::new(|_x, u| u),
        Arc::new(|_x| 1.0),
        Arc::new(move |_x, u| -(u - y_star) * (u - y_star)),
        1.0,
    )?;
    Ok(problem.with_ceilings(Ceilings {
        theta: Some(1.0 + 2.0 * reach),
        reward_sup: Some(reach * reach),
    }))
}

/// State-independent model: zero drift, constant volatility and
/// `r(x, u) = slope * u`. Its value under every Gibbs policy is constant.
pub fn make_constant(
    sigma: f64,
    reward_slope: f64,
    space: ActionSpace,
    rho: f64,
    lambda: f64,
) -> Result<ControlProblem> {
    if !sigma.is_finite() || !reward_slope.is_finite() {
        return Err(Error::param("sigma/reward_slope", "must be finite"));
    }
    let reach = space.lower().abs().max(space.upper().abs());
    let problem = ControlProblem::new(
        "constant",
        rho,
        lambda,
        space,
        Arc::new(|_x, _u| 0.0),
        Arc::new(move |_x| sigma),
        Arc::new(move |_x, u| reward_slope * u),
        sigma * sigma,
    )?;
    Ok(problem.with_ceilings(Ceilings {
        theta: Some(reward_slope.abs()),
        reward_sup: Some(reward_slope.abs() * reach),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn merton_drift_volatility_and_measure() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        for x in [-5.0, 0.0, 3.0] {
            for u in [0.05, 0.2, 0.5] {
                assert!(close(p.drift(x, u), 0.05 - u, 1e-15));
            }
            assert!(close(p.vol(x), 0.1, 1e-15));
        }
        assert!(close(p.action_space().measure(), 0.45, 1e-15));
        assert!(close(p.eta0(), 0.01, 1e-15));
        assert!(close(p.reward(0.0, 0.05), -(-0.05f64).exp(), 1e-15));
        assert!(close(p.reward(0.0, 0.05), -0.951229, 1e-6));
    }

    #[test]
    fn merton_rejects_empty_action_space() {
        let params = MertonParams {
            c_floor: 0.5,
            ..MertonParams::default()
        };
        assert!(make_merton(params, 0.1, 0.5).is_err());
    }

    #[test]
    fn merton_reward_bounds_hold_on_samples() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let d = 1e-5;
        let e1 = (-1.0f64).exp();
        for i in 0..=200 {
            let x = -8.0 + 14.0 * i as f64 / 200.0;
            for j in 0..=20 {
                let u = 0.05 + 0.45 * j as f64 / 20.0;
                assert!(p.reward(x, u).abs() <= 1.0);
                let rx = (p.reward(x + d, u) - p.reward(x - d, u)) / (2.0 * d);
                assert!(rx.abs() <= e1 + 1e-6, "r_x = {rx} at ({x}, {u})");
                let (ua, ub) = ((u - d).max(0.05), (u + d).min(0.5));
                let ru = (p.reward(x, ub) - p.reward(x, ua)) / (ub - ua);
                assert!(ru.abs() <= e1 / 0.05 + 1e-6);
            }
        }
    }

    #[test]
    fn growth_drift_examples() {
        let p = make_growth(GrowthParams::default(), 0.1, 0.5).unwrap();
        assert!(close(p.drift(0.0, 0.5), -0.07, 1e-15));
        // f(e^x) e^{-x} -> 0 as x -> infinity.
        assert!(close(p.drift(60.0, 0.5), -0.05 - 0.02 - 0.5, 1e-12));
        assert!(p.drift(800.0, 0.5).is_finite());
        assert!(make_growth(
            GrowthParams {
                prod_theta: 0.0,
                ..GrowthParams::default()
            },
            0.1,
            0.5
        )
        .is_err());
    }

    #[test]
    fn growth_production_is_bounded_and_drift_slope_bounded() {
        let g = GrowthParams::default();
        let p = make_growth(g, 0.1, 0.5).unwrap();
        let d = 1e-5;
        let mut sup_ratio: f64 = 0.0;
        for i in 0..=400 {
            let x = -10.0 + 20.0 * i as f64 / 400.0;
            sup_ratio = sup_ratio.max(g.output_per_capital(x));
            let slope = (p.drift(x + d, 0.3) - p.drift(x - d, 0.3)) / (2.0 * d);
            // f'(z) - f(z)/z = theta (1/(1+z)^2 - 1/(1+z)), bounded by theta/4.
            assert!(slope.abs() <= g.prod_theta / 4.0 + 1e-6);
        }
        assert!(sup_ratio <= g.prod_theta);
        assert!(close(g.production(0.0), 0.0, 0.0));
    }

    #[test]
    fn built_in_models_meet_their_ellipticity_floor() {
        let m = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let g = make_growth(GrowthParams::default(), 0.1, 0.5).unwrap();
        let q = make_quadratic_test(0.0, 0.1, 1.0, ActionSpace::interval(-1.0, 1.0).unwrap())
            .unwrap();
        for p in [m, g, q] {
            for i in 0..=100 {
                let x = -6.0 + 0.1 * i as f64;
                assert!(p.vol(x).powi(2) >= p.eta0() * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn action_space_rejects_bad_intervals() {
        assert!(ActionSpace::new(vec![]).is_err());
        assert!(ActionSpace::interval(0.3, 0.3).is_err());
        assert!(ActionSpace::new(vec![(0.0, 0.5), (0.4, 1.0)]).is_err());
        let u = ActionSpace::new(vec![(-1.0, -0.5), (0.5, 1.0)]).unwrap();
        assert!(close(u.measure(), 1.0, 1e-15));
        assert!(u.contains(0.7) && !u.contains(0.0));
    }
}
