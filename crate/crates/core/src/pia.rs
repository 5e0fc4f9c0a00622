//! The policy improvement loop.
//!
//! Starting from `v^0`, each iteration builds the Gibbs policy from the value
//! gradient of the previous iterate and evaluates it. With the upwind scheme
//! the gradient fed to the improvement step is chosen node by node so that the
//! new policy maximizes the discrete Hamiltonian of the evaluation stencil
//! (Howard's step). That makes the discrete iteration monotone, as in the
//! continuous setting.

use crate::error::{Error, Result};
use crate::evaluate::{
    evaluate_with, hjb_residual, interior_sup, sup_abs, BoundaryCondition, DriftScheme, GridGeometry,
    ValueGrid,
};
use crate::gibbs::{point_stats, PolicySnapshot};
use crate::model::ControlProblem;
use crate::quadrature::ActionQuadrature;

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialValue {
    #[default]
    Zero,
    Constant(f64),
    Field(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiaConfig {
    pub max_iters: usize,
    /// Stop once `sup |v^n - v^{n-1}| <= stop_tol * max(sup |v^n|, 1)`.
    pub stop_tol: f64,
    /// Target for the interior HJB residual; reported, not used for stopping.
    pub residual_tol: f64,
    pub v0: InitialValue,
    pub bc: BoundaryCondition,
    pub scheme: DriftScheme,
}

impl Default for PiaConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            stop_tol: 1e-8,
            residual_tol: 5e-3,
            v0: InitialValue::Zero,
            bc: BoundaryCondition::NeumannZero,
            scheme: DriftScheme::Upwind,
        }
    }
}

impl PiaConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::param("max_iters", "must be at least 1"));
        }
        if !(self.stop_tol > 0.0) {
            return Err(Error::param("stop_tol", "must be positive"));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::param("residual_tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    pub sup_delta: f64,
    /// `min_i (v^n_i - v^{n-1}_i)` over all nodes.
    pub mono_margin: f64,
    pub residual_sup: f64,
    /// `sup|v| + sup|v'| + sup|v''|` on the interior nodes.
    pub c2_proxy: f64,
    pub sup_abs: f64,
}

#[derive(Debug, Clone)]
pub struct PiaHistory {
    pub records: Vec<IterationRecord>,
    pub final_grid: ValueGrid,
    pub final_policy: PolicySnapshot,
    pub final_residual: Vec<f64>,
    pub converged: bool,
    pub value_bound: f64,
}

impl PiaHistory {
    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// `max(sup |v*|, 1)`, the scale used for relative tolerances.
    pub fn scale(&self) -> f64 {
        self.final_grid.sup_abs().max(1.0)
    }
}

/// `(sup |r| + lambda |ln Leb U|) / rho`. `sup |r|` is the declared ceiling
/// when the model has one, otherwise the maximum over `x` and the action nodes.
pub fn uniform_value_bound(problem: &ControlProblem, quad: &ActionQuadrature, x: &[f64]) -> f64 {
    (reward_sup(problem, quad, x) + problem.lambda() * quad.measure().ln().abs()) / problem.rho()
}

/// Declared `sup |r|` if any, raised to the maximum over `x` and the action
/// nodes.
pub(crate) fn reward_sup(problem: &ControlProblem, quad: &ActionQuadrature, x: &[f64]) -> f64 {
    let sampled = x
        .iter()
        .flat_map(|&xi| quad.nodes().iter().map(move |&u| (xi, u)))
        .map(|(xi, u)| problem.reward(xi, u).abs())
        .fold(0.0, f64::max);
    problem.ceilings().reward_sup.unwrap_or(sampled).max(sampled)
}

/// Central-difference gradient, second-order one-sided at the ends.
pub fn gradient(vgrid: &ValueGrid) -> Vec<f64> {
    vgrid.dv.clone()
}

/// Gradient field that defines the improved policy.
///
/// With the central scheme this is the central gradient. With the upwind
/// scheme, at an interior node with one-sided differences `D+` and `D-`:
/// if `D+ >= D-` the better of the two; otherwise the one whose Gibbs drift
/// points the right way, or the point in between where the Gibbs drift
/// vanishes. Neumann boundary rows carry no drift, so `y = 0` there.
pub fn improvement_gradient(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    vgrid: &ValueGrid,
    scheme: DriftScheme,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;

    let geom = vgrid.geometry;
    let n = geom.len();
    let h = geom.h();
    let v = &vgrid.v;
    if scheme == DriftScheme::Central {
        let mut y = vgrid.dv.clone();
        if vgrid.bc == BoundaryCondition::NeumannZero {
            y[0] = 0.0;
            y[n - 1] = 0.0;
        }
        return Ok(y);
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            if i == 0 || i + 1 == n {
                return Ok(match vgrid.bc {
                    BoundaryCondition::NeumannZero => 0.0,
                    BoundaryCondition::Dirichlet { .. } => vgrid.dv[i],
                });
            }
            let x = geom.x(i);
            let fwd = (v[i + 1] - v[i]) / h;
            let bwd = (v[i] - v[i - 1]) / h;
            if fwd >= bwd {
                let sf = point_stats(problem, quad, x, fwd)?.log_z;
                let sb = point_stats(problem, quad, x, bwd)?.log_z;
                return Ok(if sf >= sb { fwd } else { bwd });
            }
            if point_stats(problem, quad, x, bwd)?.b_hat <= 0.0 {
                return Ok(bwd);
            }
            if point_stats(problem, quad, x, fwd)?.b_hat >= 0.0 {
                return Ok(fwd);
            }
            // b_hat is nondecreasing in y; bracket [fwd, bwd] has a sign change.
            let (mut lo, mut hi) = (fwd, bwd);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if point_stats(problem, quad, x, mid)?.b_hat >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(0.5 * (lo + hi))
        })
        .collect()
}

fn initial_values(cfg: &PiaConfig, n: usize) -> Result<Vec<f64>> {
    match &cfg.v0 {
        InitialValue::Zero => Ok(vec![0.0; n]),
        InitialValue::Constant(c) if c.is_finite() => Ok(vec![*c; n]),
        InitialValue::Constant(c) => Err(Error::param("v0", format!("non-finite constant {c}"))),
        InitialValue::Field(f) if f.len() != n => Err(Error::FieldLength {
            name: "v0",
            got: f.len(),
            expected: n,
        }),
        InitialValue::Field(f) => {
            if f.iter().all(|a| a.is_finite()) {
                Ok(f.clone())
            } else {
                Err(Error::param("v0", "non-finite initial field"))
            }
        }
    }
}

fn c2_proxy(vgrid: &ValueGrid) -> f64 {
    let r = vgrid.geometry.interior();
    sup_abs(&vgrid.v[r.clone()]) + sup_abs(&vgrid.dv[r.clone()]) + sup_abs(&vgrid.d2v[r])
}

pub fn run_pia(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    geom: &GridGeometry,
    cfg: &PiaConfig,
) -> Result<PiaHistory> {
    cfg.check()?;
    let n = geom.len();
    let bound = uniform_value_bound(problem, quad, &geom.nodes());
    let mut prev = ValueGrid::from_values(*geom, initial_values(cfg, n)?, cfg.bc)?;
    let mut records = Vec::new();
    let mut converged = false;
    let mut last = None;
    for it in 1..=cfg.max_iters {
        let y = improvement_gradient(problem, quad, &prev, cfg.scheme)?;
        let eval = evaluate_with(problem, quad, geom, &y, cfg.bc, cfg.scheme)?;
        let cur = eval.grid;
        let sup = cur.sup_abs();
        if !(sup <= 10.0 * bound + 1e-9) {
            return Err(Error::Diverged {
                iteration: it,
                sup_abs: sup,
                bound,
            });
        }
        let (mut sup_delta, mut mono_margin) = (0.0f64, f64::INFINITY);
        for (a, b) in cur.v.iter().zip(&prev.v) {
            let d = a - b;
            sup_delta = sup_delta.max(d.abs());
            mono_margin = mono_margin.min(d);
        }
        let residual = hjb_residual(problem, quad, &cur)?;
        records.push(IterationRecord {
            n: it,
            sup_delta,
            mono_margin,
            residual_sup: interior_sup(geom, &residual),
            c2_proxy: c2_proxy(&cur),
            sup_abs: sup,
        });
        let done = sup_delta <= cfg.stop_tol * sup.max(1.0);
        last = Some((eval.snapshot, residual));
        prev = cur;
        if done {
            converged = true;
            break;
        }
    }
    let (final_policy, final_residual) = last.expect("max_iters >= 1");
    Ok(PiaHistory {
        records,
        final_grid: prev,
        final_policy,
        final_residual,
        converged,
        value_bound: bound,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub tol: f64,
    /// `(n, mono_margin)` for every iteration `n >= 2` with margin below `-tol`.
    pub violations: Vec<(usize, f64)>,
    pub min_margin: f64,
}

impl MonotoneReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn check_monotone(records: &[IterationRecord], tol: f64) -> MonotoneReport {
    let mut report = MonotoneReport {
        tol,
        violations: Vec::new(),
        min_margin: f64::INFINITY,
    };
    for r in records.iter().filter(|r| r.n >= 2) {
        report.min_margin = report.min_margin.min(r.mono_margin);
        if !(r.mono_margin >= -tol) {
            report.violations.push((r.n, r.mono_margin));
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct C2Track {
    pub series: Vec<f64>,
    pub running_max: Vec<f64>,
    /// Relative growth of the running max across the final quarter.
    pub final_quarter_growth: f64,
    pub still_growing: bool,
}

pub fn c2_norm_track(records: &[IterationRecord]) -> C2Track {
    let series: Vec<f64> = records.iter().map(|r| r.c2_proxy).collect();
    let mut running_max = Vec::with_capacity(series.len());
    let mut m = f64::NEG_INFINITY;
    for &s in &series {
        m = m.max(s);
        running_max.push(m);
    }
    let len = series.len();
    let growth = if len < 2 {
        0.0
    } else {
        let start = (3 * len / 4).clamp(1, len - 1);
        running_max[len - 1] / running_max[start - 1] - 1.0
    };
    C2Track {
        series,
        running_max,
        final_quarter_growth: growth,
        still_growing: growth > 0.01,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::evaluate_policy;
    use crate::gibbs::soft_hamiltonian;
    use crate::model::{make_constant, make_merton, ActionSpace, MertonParams};
    use crate::quadrature::{build_quadrature, QuadRule};

    fn record(n: usize, margin: f64, c2: f64) -> IterationRecord {
        IterationRecord {
            n,
            sup_delta: margin.abs(),
            mono_margin: margin,
            residual_sup: 0.0,
            c2_proxy: c2,
            sup_abs: 1.0,
        }
    }

    #[test]
    fn gradient_examples() {
        let g = GridGeometry::new(0.0, 1.0, 11).unwrap();
        let bc = BoundaryCondition::NeumannZero;
        let flat = ValueGrid::from_values(g, vec![2.5; 11], bc).unwrap();
        assert!(gradient(&flat).iter().all(|&d| d == 0.0));
        let lin = ValueGrid::from_values(g, g.nodes(), bc).unwrap();
        for d in &gradient(&lin)[1..10] {
            assert!((d - 1.0).abs() < 1e-12);
        }

        let g = GridGeometry::new(0.0, 6.0, 601).unwrap();
        let sine = ValueGrid::from_values(g, g.nodes().iter().map(|x| x.sin()).collect(), bc).unwrap();
        let err = (1..600)
            .map(|i| (gradient(&sine)[i] - g.x(i).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 2e-5 && err <= 0.01f64.powi(2) / 6.0 * 1.001);
    }

    #[test]
    fn constant_model_converges_immediately() {
        let p = make_constant(0.5, 0.4, ActionSpace::interval(0.05, 0.5).unwrap(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-2.0, 2.0, 41).unwrap();
        let h = run_pia(&p, &q, &g, &PiaConfig::default()).unwrap();
        assert!(h.converged && h.iterations() <= 2);
        assert!(h.records[1].sup_delta <= 1e-10);
        let soft = soft_hamiltonian(&p, &q, 0.0, 0.0).unwrap();
        assert!(h.final_grid.v.iter().all(|v| (v - soft / 0.1).abs() < 1e-8));
        assert!(check_monotone(&h.records, 1e-12).passed());
        let track = c2_norm_track(&h.records);
        assert!(track.series.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-9));
    }

    #[test]
    fn merton_coarse_run_is_monotone_and_optimal() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 201).unwrap();
        let h = run_pia(&p, &q, &g, &PiaConfig::default()).unwrap();
        assert!(h.converged);
        let scale = h.scale();
        assert!(check_monotone(&h.records, 1e-7 * scale).passed());
        assert!(h.records.iter().all(|r| r.sup_abs <= h.value_bound + 1e-6 * scale));
        assert!(h.records.last().unwrap().residual_sup <= h.records[0].residual_sup);

        // Restart from the fixed point.
        let cfg = PiaConfig {
            v0: InitialValue::Field(h.final_grid.v.clone()),
            ..PiaConfig::default()
        };
        let again = run_pia(&p, &q, &g, &cfg).unwrap();
        assert!(again.records[0].sup_delta <= 5e-8 * scale);

        // Dominates constant-gradient Gibbs policies.
        for c in [0.0, -3.0, 2.0] {
            let other = evaluate_policy(&p, &q, &g, &vec![c; 201], BoundaryCondition::NeumannZero).unwrap();
            for i in g.interior() {
                assert!(h.final_grid.v[i] >= other.v[i] - 1e-6 * scale);
            }
        }
    }

    #[test]
    fn max_iters_caps_the_run() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 101).unwrap();
        let cfg = PiaConfig {
            max_iters: 1,
            ..PiaConfig::default()
        };
        let h = run_pia(&p, &q, &g, &cfg).unwrap();
        assert!(!h.converged && h.iterations() == 1);
        assert!(run_pia(&p, &q, &g, &PiaConfig { max_iters: 0, ..PiaConfig::default() }).is_err());
        let bad = PiaConfig {
            v0: InitialValue::Field(vec![0.0; 3]),
            ..PiaConfig::default()
        };
        assert!(run_pia(&p, &q, &g, &bad).is_err());
    }

    #[test]
    fn monotone_check_reports_injected_fault() {
        let recs = vec![record(1, -5.0, 1.0), record(2, -1e-3, 1.0), record(3, 0.0, 1.0)];
        let r = check_monotone(&recs, 1e-7);
        assert_eq!(r.violations, vec![(2, -1e-3)]);
        assert!(check_monotone(&recs[2..], 1e-7).passed());
    }

    #[test]
    fn c2_track_flags_late_growth() {
        let flat: Vec<_> = (1..=8).map(|n| record(n, 0.0, if n < 3 { n as f64 } else { 3.0 })).collect();
        assert!(!c2_norm_track(&flat).still_growing);
        let growing: Vec<_> = (1..=8).map(|n| record(n, 0.0, n as f64)).collect();
        let t = c2_norm_track(&growing);
        assert!(t.still_growing);
        assert_eq!(t.running_max, (1..=8).map(|n| n as f64).collect::<Vec<_>>());
    }
}
