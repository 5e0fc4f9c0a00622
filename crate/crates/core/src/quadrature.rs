//! Fixed-node quadrature over the action space.
//!
//! Every integral over `U` in the crate goes through an [`ActionQuadrature`]:
//! a flat list of nodes and positive weights built once per problem, so that
//! all grid points share the same action nodes.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};
use crate::model::ActionSpace;

/// Per-interval rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadRule {
    /// Composite Gauss-Legendre with `order` nodes on each of `panels` equal
    /// panels per interval.
    GaussLegendre { order: usize, panels: usize },
    /// Composite trapezoid with `panels` equal panels per interval.
    Trapezoid { panels: usize },
}

impl Default for QuadRule {
    fn default() -> Self {
        QuadRule::GaussLegendre {
            order: 16,
            panels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionQuadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    rule: QuadRule,
    measure: f64,
}

pub fn build_quadrature(space: &ActionSpace, rule: QuadRule) -> Result<ActionQuadrature> {
    if space.intervals().is_empty() {
        return Err(Error::ActionSpace("no intervals".into()));
    }
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    match rule {
        QuadRule::GaussLegendre { order, panels } => {
            if order < 2 {
                return Err(Error::param("quad.order", "must be at least 2"));
            }
            if panels < 1 {
                return Err(Error::param("quad.panels", "must be at least 1"));
            }
            let reference = GaussLegendre::new(NonZeroUsize::new(order).unwrap());
            let mut pairs: Vec<(f64, f64)> = reference.as_node_weight_pairs().to_vec();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for &(lo, hi) in space.intervals() {
                let width = (hi - lo) / panels as f64;
                for k in 0..panels {
                    let a = lo + width * k as f64;
                    let half = 0.5 * width;
                    let mid = a + half;
                    for &(t, w) in &pairs {
                        nodes.push(mid + half * t);
                        weights.push(half * w);
                    }
                }
            }
        }
        QuadRule::Trapezoid { panels } => {
            if panels < 2 {
                return Err(Error::param("quad.panels", "must be at least 2"));
            }
            for &(lo, hi) in space.intervals() {
                let width = (hi - lo) / panels as f64;
                for k in 0..=panels {
                    let u = if k == panels {
                        hi
                    } else {
                        lo + width * k as f64
                    };
                    let w = if k == 0 || k == panels {
                        0.5 * width
                    } else {
                        width
                    };
                    nodes.push(u);
                    weights.push(w);
                }
            }
        }
    }
    Ok(ActionQuadrature {
        nodes,
        weights,
        rule,
        measure: space.measure(),
    })
}

impl ActionQuadrature {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn rule(&self) -> QuadRule {
        self.rule
    }

    /// Lebesgue measure of the underlying action space.
    pub fn measure(&self) -> f64 {
        self.measure
    }

    /// `sum_j w_j f(u_j)`. A non-finite `f(u_j)` is an error.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (index, (&u, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let value = f(u);
            if !value.is_finite() {
                return Err(Error::NonFiniteIntegrand { index, u, value });
            }
            acc += w * value;
        }
        Ok(acc)
    }

    /// `ln ∫_U exp(g(u)) du`, evaluated with the max-shift so it never
    /// overflows. `g = -inf` at a node contributes nothing.
    pub fn log_integral_exp<F: Fn(f64) -> f64>(&self, g: F) -> Result<f64> {
        let values: Vec<f64> = self.nodes.iter().map(|&u| g(u)).collect();
        self.log_sum_exp_nodes(&values)
    }

    /// [`Self::log_integral_exp`] for exponents already evaluated at the nodes.
    pub fn log_sum_exp_nodes(&self, g: &[f64]) -> Result<f64> {
        debug_assert_eq!(g.len(), self.nodes.len());
        let mut max = f64::NEG_INFINITY;
        for (index, &value) in g.iter().enumerate() {
            if value.is_nan() || value == f64::INFINITY {
                return Err(Error::NonFiniteIntegrand {
                    index,
                    u: self.nodes[index],
                    value,
                });
            }
            if value > max {
                max = value;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptySupport);
        }
        let sum: f64 = g
            .iter()
            .zip(&self.weights)
            .map(|(&v, &w)| w * (v - max).exp())
            .sum();
        Ok(max + sum.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_merton, MertonParams};
    use proptest::prelude::*;

    fn gl(order: usize, panels: usize) -> QuadRule {
        QuadRule::GaussLegendre { order, panels }
    }

    #[test]
    fn weights_sum_to_measure_and_nodes_stay_inside() {
        let spaces = [
            ActionSpace::interval(0.05, 0.5).unwrap(),
            ActionSpace::new(vec![(-1.0, -0.5), (0.5, 1.0)]).unwrap(),
            ActionSpace::new(vec![(0.0, 0.1), (0.5, 1.0)]).unwrap(),
        ];
        for space in &spaces {
            for rule in [gl(16, 4), gl(5, 1), QuadRule::Trapezoid { panels: 10 }] {
                let q = build_quadrature(space, rule).unwrap();
                let total: f64 = q.weights().iter().sum();
                assert!((total - space.measure()).abs() <= 1e-12 * space.measure());
                assert!(q.nodes().iter().all(|&u| space.contains(u)));
                assert!(q.weights().iter().all(|&w| w > 0.0));
                assert!((q.integrate(|_| 1.0).unwrap() - space.measure()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gauss_legendre_polynomial_exactness() {
        let q = build_quadrature(&ActionSpace::interval(0.0, 1.0).unwrap(), gl(5, 1)).unwrap();
        assert!((q.integrate(|u| u * u).unwrap() - 1.0 / 3.0).abs() < 1e-14);
        // Degree 2m - 1 = 9.
        assert!((q.integrate(|u| u.powi(9)).unwrap() - 0.1).abs() < 1e-14);
    }

    #[test]
    fn integrate_examples() {
        let q = build_quadrature(&ActionSpace::interval(0.05, 0.5).unwrap(), QuadRule::default())
            .unwrap();
        assert!((q.integrate(|_| 1.0).unwrap() - 0.45).abs() < 1e-14);
        assert!((q.integrate(|_| 2.5).unwrap() - 2.5 * 0.45).abs() < 1e-14);

        let sym = build_quadrature(
            &ActionSpace::new(vec![(-1.0, -0.5), (0.5, 1.0)]).unwrap(),
            QuadRule::default(),
        )
        .unwrap();
        assert!(sym.integrate(|u| u).unwrap().abs() < 1e-15);

        let e = build_quadrature(&ActionSpace::interval(0.0, 1.0).unwrap(), gl(20, 1)).unwrap();
        let exact = std::f64::consts::E - 1.0;
        assert!((e.integrate(f64::exp).unwrap() - exact).abs() < 1e-12);
    }

    #[test]
    fn merton_reward_integral_matches_refined_trapezoid() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let got = q.integrate(|u| p.reward(0.0, u)).unwrap();
        // Independent oracle: 10^6-panel composite trapezoid.
        let (lo, hi) = (0.05, 0.5);
        let n = 1_000_000;
        let h = (hi - lo) / n as f64;
        let mut oracle = 0.5 * (p.reward(0.0, lo) + p.reward(0.0, hi));
        for k in 1..n {
            oracle += p.reward(0.0, lo + h * k as f64);
        }
        oracle *= h;
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let q = build_quadrature(&ActionSpace::interval(0.0, 1.0).unwrap(), gl(4, 1)).unwrap();
        match q.integrate(|u| if u > 0.5 { f64::NAN } else { u }) {
            Err(Error::NonFiniteIntegrand { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected error, got {other:?}"),
        }
        assert!(q.log_integral_exp(|_| f64::INFINITY).is_err());
        assert!(matches!(
            q.log_integral_exp(|_| f64::NEG_INFINITY),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn rejects_bad_rules() {
        let u = ActionSpace::interval(0.0, 1.0).unwrap();
        assert!(build_quadrature(&u, gl(1, 1)).is_err());
        assert!(build_quadrature(&u, gl(4, 0)).is_err());
        assert!(build_quadrature(&u, QuadRule::Trapezoid { panels: 1 }).is_err());
    }

    #[test]
    fn log_integral_exp_constants() {
        let unit = build_quadrature(&ActionSpace::interval(0.0, 1.0).unwrap(), QuadRule::default())
            .unwrap();
        assert!((unit.log_integral_exp(|_| 3.7).unwrap() - 3.7).abs() < 1e-14);
        let m = build_quadrature(&ActionSpace::interval(0.05, 0.5).unwrap(), QuadRule::default())
            .unwrap();
        assert!((m.log_integral_exp(|_| -2.0).unwrap() - (-2.0 + 0.45f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn log_integral_exp_steep_exponent_does_not_overflow() {
        let space = ActionSpace::interval(0.0, 1.0).unwrap();
        // Closed form: 1000 + ln((1 - e^{-1000}) / 1000); e^{-1000} underflows,
        // so in double precision this is exactly 1000 - ln 1000.
        let oracle = 1000.0 - 1000f64.ln();
        let fine = build_quadrature(&space, gl(16, 2000)).unwrap();
        let got = fine.log_integral_exp(|u| 1000.0 * u).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        let coarse = build_quadrature(&space, QuadRule::default()).unwrap();
        assert!(coarse.log_integral_exp(|u| 1000.0 * u).unwrap().is_finite());
    }

    #[test]
    fn trapezoid_refinement_converges_at_second_order() {
        let space = ActionSpace::interval(0.05, 0.5).unwrap();
        let f = |u: f64| (3.0 * u).sin() * (-u).exp();
        let vals: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&panels| {
                build_quadrature(&space, QuadRule::Trapezoid { panels })
                    .unwrap()
                    .integrate(f)
                    .unwrap()
            })
            .collect();
        for w in vals.windows(3) {
            let (d1, d2) = ((w[1] - w[0]).abs(), (w[2] - w[1]).abs());
            assert!(d2 <= d1 / 3.0, "{d2} > {d1}/3");
        }
    }

    proptest! {
        #[test]
        fn log_integral_exp_is_shift_invariant(
            c in -1.0e4f64..1.0e4,
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let q = build_quadrature(
                &ActionSpace::new(vec![(-1.0, -0.2), (0.3, 1.5)]).unwrap(),
                QuadRule::default(),
            ).unwrap();
            let g = |u: f64| a * u + b * u * u;
            let base = q.log_integral_exp(g).unwrap();
            let shifted = q.log_integral_exp(|u| g(u) + c).unwrap();
            // Relative to the magnitude of the shift: g + c itself is rounded
            // at the ulp of c.
            prop_assert!((shifted - (base + c)).abs() <= 1e-12 * c.abs().max(1.0));
        }
    }
}
