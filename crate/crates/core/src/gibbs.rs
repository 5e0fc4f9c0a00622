//! Gibbs policies and the quantities averaged against them.
//!
//! For a state `x` and a value gradient `y`, the Gibbs density on `U` is
//!
//! ```text
//! Gamma(x, y, u) = exp(g(x, y, u)) / Z(x, y),   g = (b(x, u) y + r(x, u)) / lambda
//! ```
//!
//! Everything is kept in log space: a [`PolicySnapshot`] stores `g` at the
//! quadrature nodes together with `ln Z`, and densities are only formed while
//! integrating against them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ControlProblem;
use crate::quadrature::ActionQuadrature;
use crate::validate::AssumptionReport;

/// A Gibbs policy tabulated on a spatial grid and on the action nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    x: Vec<f64>,
    y: Vec<f64>,
    n_actions: usize,
    /// Row-major `[node][action]`.
    log_weights: Vec<f64>,
    drift: Vec<f64>,
    reward: Vec<f64>,
    log_z: Vec<f64>,
}

/// Gibbs averages of the model functions, one entry per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct HattedCoeffs {
    pub b_hat: Vec<f64>,
    pub r_hat: Vec<f64>,
    /// `lambda * ∫ Gamma ln Gamma du`, i.e. lambda times the negative entropy.
    pub h_hat: Vec<f64>,
    /// `lambda * ln Z`, the soft Hamiltonian at the node.
    pub soft: Vec<f64>,
}

/// Tabulated model values and the Gibbs statistics at a single `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PointStats {
    pub log_z: f64,
    pub b_hat: f64,
    pub r_hat: f64,
    pub h_hat: f64,
}

struct NodeRow {
    g: Vec<f64>,
    b: Vec<f64>,
    r: Vec<f64>,
    log_z: f64,
}

fn tabulate_row(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    node: usize,
    x: f64,
    y: f64,
) -> Result<NodeRow> {
    let lambda = problem.lambda();
    let m = quad.len();
    let (mut g, mut b, mut r) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    for &u in quad.nodes() {
        let bu = problem.drift(x, u);
        if !bu.is_finite() {
            return Err(Error::NonFiniteModel {
                node,
                x,
                u,
                what: "drift",
            });
        }
        let ru = problem.reward(x, u);
        if !ru.is_finite() {
            return Err(Error::NonFiniteModel {
                node,
                x,
                u,
                what: "reward",
            });
        }
        g.push((bu * y + ru) / lambda);
        b.push(bu);
        r.push(ru);
    }
    let log_z = quad.log_sum_exp_nodes(&g)?;
    Ok(NodeRow { g, b, r, log_z })
}

fn row_stats(quad: &ActionQuadrature, lambda: f64, g: &[f64], b: &[f64], r: &[f64], log_z: f64) -> PointStats {
    let (mut b_hat, mut r_hat, mut neg_ent) = (0.0, 0.0, 0.0);
    for j in 0..g.len() {
        let log_p = g[j] - log_z;
        let wp = quad.weights()[j] * log_p.exp();
        b_hat += wp * b[j];
        r_hat += wp * r[j];
        neg_ent += wp * log_p;
    }
    PointStats {
        log_z,
        b_hat,
        r_hat,
        h_hat: lambda * neg_ent,
    }
}

/// Gibbs statistics at one point.
pub(crate) fn point_stats(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    x: f64,
    y: f64,
) -> Result<PointStats> {
    if !y.is_finite() {
        return Err(Error::param("y", format!("non-finite gradient at x = {x}")));
    }
    let row = tabulate_row(problem, quad, 0, x, y)?;
    Ok(row_stats(quad, problem.lambda(), &row.g, &row.b, &row.r, row.log_z))
}

/// Build the Gibbs policy `Gamma(x_i, y_i, .)` at every grid node.
pub fn gibbs_snapshot(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    x: &[f64],
    y: &[f64],
) -> Result<PolicySnapshot> {
    if y.len() != x.len() {
        return Err(Error::FieldLength {
            name: "y",
            got: y.len(),
            expected: x.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::param(
            "y",
            format!("non-finite gradient at node {i} (x = {})", x[i]),
        ));
    }
    let rows: Vec<NodeRow> = x
        .par_iter()
        .zip(y.par_iter())
        .enumerate()
        .map(|(i, (&xi, &yi))| tabulate_row(problem, quad, i, xi, yi))
        .collect::<Result<_>>()?;
    let m = quad.len();
    let n = x.len();
    let mut snap = PolicySnapshot {
        x: x.to_vec(),
        y: y.to_vec(),
        n_actions: m,
        log_weights: Vec::with_capacity(n * m),
        drift: Vec::with_capacity(n * m),
        reward: Vec::with_capacity(n * m),
        log_z: Vec::with_capacity(n),
    };
    for row in rows {
        snap.log_weights.extend_from_slice(&row.g);
        snap.drift.extend_from_slice(&row.b);
        snap.reward.extend_from_slice(&row.r);
        snap.log_z.push(row.log_z);
    }
    Ok(snap)
}

impl PolicySnapshot {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// The gradient field the policy was built from.
    pub fn gradient(&self) -> &[f64] {
        &self.y
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn log_partition(&self) -> &[f64] {
        &self.log_z
    }

    /// `g(x_i, y_i, u_j)` for all actions at node `i`.
    pub fn log_weights(&self, i: usize) -> &[f64] {
        &self.log_weights[i * self.n_actions..(i + 1) * self.n_actions]
    }

    pub fn log_density(&self, i: usize, j: usize) -> f64 {
        self.log_weights[i * self.n_actions + j] - self.log_z[i]
    }

    pub fn density(&self, i: usize, j: usize) -> f64 {
        self.log_density(i, j).exp()
    }

    /// Densities at node `i` on the action nodes.
    pub fn densities(&self, i: usize) -> Vec<f64> {
        (0..self.n_actions).map(|j| self.density(i, j)).collect()
    }

    pub(crate) fn drift_row(&self, i: usize) -> &[f64] {
        &self.drift[i * self.n_actions..(i + 1) * self.n_actions]
    }

    pub(crate) fn reward_row(&self, i: usize) -> &[f64] {
        &self.reward[i * self.n_actions..(i + 1) * self.n_actions]
    }
}

pub fn hatted(problem: &ControlProblem, quad: &ActionQuadrature, snap: &PolicySnapshot) -> HattedCoeffs {
    let lambda = problem.lambda();
    let n = snap.len();
    let mut out = HattedCoeffs {
        b_hat: Vec::with_capacity(n),
        r_hat: Vec::with_capacity(n),
        h_hat: Vec::with_capacity(n),
        soft: Vec::with_capacity(n),
    };
    for i in 0..n {
        let s = row_stats(
            quad,
            lambda,
            snap.log_weights(i),
            snap.drift_row(i),
            snap.reward_row(i),
            snap.log_z[i],
        );
        out.b_hat.push(s.b_hat);
        out.r_hat.push(s.r_hat);
        out.h_hat.push(s.h_hat);
        out.soft.push(lambda * s.log_z);
    }
    out
}

/// `lambda ln ∫_U exp((b(x,u) y + r(x,u)) / lambda) du`, the supremum over
/// densities of the entropy-regularized Hamiltonian integrand.
pub fn soft_hamiltonian(problem: &ControlProblem, quad: &ActionQuadrature, x: f64, y: f64) -> Result<f64> {
    let lambda = problem.lambda();
    let log_z = quad.log_integral_exp(|u| (problem.drift(x, u) * y + problem.reward(x, u)) / lambda)?;
    Ok(lambda * log_z)
}

/// Constants entering the growth bounds on `Gamma` and its entropy, for a
/// one-dimensional action space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyConstants {
    /// Lipschitz constant in `u` of `r + b`.
    pub theta: f64,
    /// Cone (one-sided interval) length.
    pub zeta: f64,
    pub lambda: f64,
    /// Lebesgue measure of `U`.
    pub measure: f64,
}

impl EntropyConstants {
    /// Take `theta` and `zeta` from a validation report. Uses the model's
    /// analytic ceiling for `theta` when one is declared, otherwise the sampled
    /// estimate.
    pub fn from_report(report: &AssumptionReport, lambda: f64) -> Result<Self> {
        if !report.leb_ok {
            return Err(Error::Assumptions("action space has no positive finite measure".into()));
        }
        if !report.cone_ok || !(report.zeta > 0.0) {
            return Err(Error::Assumptions("cone condition not established".into()));
        }
        let theta = report.theta_ceiling.unwrap_or(report.theta).max(report.theta);
        if !theta.is_finite() {
            return Err(Error::Assumptions("Lipschitz constant in u is not finite".into()));
        }
        Ok(Self {
            theta,
            zeta: report.zeta,
            lambda,
            measure: report.measure,
        })
    }
}

const ONE_MINUS_INV_E: f64 = 1.0 - 1.0 / std::f64::consts::E;

/// Upper bound on `sup_{x,u} Gamma(x, y, u)` over `|y| <= y_abs`:
/// `max{ e / zeta, (theta / lambda)(1 + y_abs) / (1 - e^{-1}) }`.
pub fn gamma_sup_bound(c: &EntropyConstants, y_abs: f64) -> f64 {
    let near = std::f64::consts::E / c.zeta;
    let far = (c.theta / c.lambda) * (1.0 + y_abs.abs()) / ONE_MINUS_INV_E;
    near.max(far)
}

/// `(kappa, slope)` with `|H_hat(x, y)| <= kappa + slope * ln(1 + |y|)`.
pub fn entropy_bound_kappa(c: &EntropyConstants) -> (f64, f64) {
    let big_c = (std::f64::consts::E / c.zeta).max((c.theta / c.lambda) / ONE_MINUS_INV_E);
    let kappa = c.lambda * (c.measure.ln().abs() + big_c.ln().abs());
    (kappa, c.lambda)
}
