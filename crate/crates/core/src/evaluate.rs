//! Policy evaluation on a truncated uniform grid.
//!
//! For a fixed Gibbs policy the value solves the linear equation
//! `rho v - b_hat v' - sigma^2 v'' / 2 = r_hat - H_hat`. It is discretized by
//! finite differences (upwind drift by default) and each row is scaled by
//! `h^2`, which gives a strictly diagonally dominant tridiagonal M-matrix.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gibbs::{gibbs_snapshot, hatted, soft_hamiltonian, HattedCoeffs, PolicySnapshot};
use crate::model::ControlProblem;
use crate::quadrature::ActionQuadrature;

/// Uniform grid `x_i = x_lo + i h`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    x_lo: f64,
    x_hi: f64,
    n: usize,
}

impl GridGeometry {
    pub fn new(x_lo: f64, x_hi: f64, n: usize) -> Result<Self> {
        if !x_lo.is_finite() || !x_hi.is_finite() {
            return Err(Error::Grid("endpoints must be finite".into()));
        }
        if n < 5 {
            return Err(Error::Grid(format!("need at least 5 nodes, got {n}")));
        }
        if !(x_hi > x_lo) {
            return Err(Error::Grid(format!(
                "x_hi ({x_hi}) must exceed x_lo ({x_lo})"
            )));
        }
        Ok(Self { x_lo, x_hi, n })
    }

    pub fn x_lo(&self) -> f64 {
        self.x_lo
    }

    pub fn x_hi(&self) -> f64 {
        self.x_hi
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.n - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.x_hi
        } else {
            self.x_lo + i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Nodes used by diagnostics: 10% of the nodes on each side are treated as
    /// a boundary buffer and skipped.
    pub fn interior(&self) -> Range<usize> {
        let buf = (self.n / 10).max(1);
        buf..self.n - buf
    }

    /// Same extent with twice the resolution.
    pub fn refined(&self) -> Self {
        Self {
            n: 2 * self.n - 1,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryCondition {
    /// `v' = 0` at both ends, imposed by a reflected ghost node.
    NeumannZero,
    Dirichlet { left: f64, right: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DriftScheme {
    /// Forward difference where `b_hat >= 0`, backward otherwise.
    #[default]
    Upwind,
    /// Centered difference; an M-matrix only while `|b_hat| h <= sigma^2`.
    Central,
}

/// Tridiagonal system. `sub[i]` couples row `i + 1` to unknown `i`; `sup[i]`
/// couples row `i` to unknown `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn new(sub: Vec<f64>, diag: Vec<f64>, sup: Vec<f64>, rhs: Vec<f64>) -> Result<Self> {
        let n = diag.len();
        if n == 0 {
            return Err(Error::Grid("empty tridiagonal system".into()));
        }
        for (name, len, expected) in [
            ("sub", sub.len(), n - 1),
            ("sup", sup.len(), n - 1),
            ("rhs", rhs.len(), n),
        ] {
            if len != expected {
                return Err(Error::FieldLength {
                    name,
                    got: len,
                    expected,
                });
            }
        }
        Ok(Self { sub, diag, sup, rhs })
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// `A v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut s = self.diag[i] * v[i];
                if i > 0 {
                    s += self.sub[i - 1] * v[i - 1];
                }
                if i + 1 < n {
                    s += self.sup[i] * v[i + 1];
                }
                s
            })
            .collect()
    }
}

/// Value function on a grid together with its central-difference derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub geometry: GridGeometry,
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    pub d2v: Vec<f64>,
    pub bc: BoundaryCondition,
}

impl ValueGrid {
    pub fn from_values(geometry: GridGeometry, v: Vec<f64>, bc: BoundaryCondition) -> Result<Self> {
        if v.len() != geometry.len() {
            return Err(Error::FieldLength {
                name: "v",
                got: v.len(),
                expected: geometry.len(),
            });
        }
        let (dv, d2v) = central_derivatives(&v, geometry.h());
        Ok(Self {
            geometry,
            v,
            dv,
            d2v,
            bc,
        })
    }

    pub fn x(&self) -> Vec<f64> {
        self.geometry.nodes()
    }

    pub fn sup_abs(&self) -> f64 {
        sup_abs(&self.v)
    }

    /// Linear interpolation of `v`, clamped to the end values outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        interpolate(&self.geometry, &self.v, x)
    }
}

pub(crate) fn sup_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

pub(crate) fn interpolate(geom: &GridGeometry, f: &[f64], x: f64) -> f64 {
    let n = geom.len();
    if x <= geom.x_lo() {
        return f[0];
    }
    if x >= geom.x_hi() {
        return f[n - 1];
    }
    let s = (x - geom.x_lo()) / geom.h();
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    f[i] + t * (f[i + 1] - f[i])
}

/// Central first and second differences, with second-order one-sided stencils
/// at the two ends.
pub fn central_derivatives(v: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    assert!(n >= 4, "need at least 4 values for boundary stencils");
    let mut dv = vec![0.0; n];
    let mut d2v = vec![0.0; n];
    let h2 = h * h;
    for i in 1..n - 1 {
        dv[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
        d2v[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
    }
    dv[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    dv[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
    d2v[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
    d2v[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
    (dv, d2v)
}

fn check_field(name: &'static str, f: &[f64], n: usize) -> Result<()> {
    if f.len() != n {
        return Err(Error::FieldLength {
            name,
            got: f.len(),
            expected: n,
        });
    }
    if let Some(i) = f.iter().position(|a| !a.is_finite()) {
        return Err(Error::param(name, format!("non-finite value at node {i}")));
    }
    Ok(())
}

/// Assemble `rho v - b_hat D_h v - sigma^2 / 2 D^2_h v = source`, every row
/// multiplied by `h^2`.
pub fn assemble(
    problem: &ControlProblem,
    geom: &GridGeometry,
    b_hat: &[f64],
    source: &[f64],
    bc: BoundaryCondition,
    scheme: DriftScheme,
) -> Result<TridiagonalSystem> {
    let n = geom.len();
    check_field("b_hat", b_hat, n)?;
    check_field("source", source, n)?;
    let h = geom.h();
    if !(h > 0.0) {
        return Err(Error::Grid(format!("non-positive spacing {h}")));
    }
    let h2 = h * h;
    let rho = problem.rho();

    let rows: Vec<(f64, f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = geom.x(i);
            let s = problem.vol(x);
            if !s.is_finite() {
                return Err(Error::NonFiniteModel {
                    node: i,
                    x,
                    u: f64::NAN,
                    what: "volatility",
                });
            }
            let s2 = s * s;
            let rhs = h2 * source[i];
            let boundary = i == 0 || i + 1 == n;
            let row = match (boundary, bc) {
                (true, BoundaryCondition::Dirichlet { left, right }) => {
                    (0.0, 1.0, 0.0, if i == 0 { left } else { right })
                }
                // Ghost node v_{-1} = v_1: the first difference vanishes, so the
                // drift term drops out.
                (true, BoundaryCondition::NeumannZero) if i == 0 => (0.0, rho * h2 + s2, -s2, rhs),
                (true, BoundaryCondition::NeumannZero) => (-s2, rho * h2 + s2, 0.0, rhs),
                (false, _) => {
                    let b = b_hat[i];
                    match scheme {
                        DriftScheme::Upwind => {
                            let (bp, bm) = (b.max(0.0) * h, (-b).max(0.0) * h);
                            (-(0.5 * s2 + bm), rho * h2 + s2 + bp + bm, -(0.5 * s2 + bp), rhs)
                        }
                        DriftScheme::Central => (
                            -(0.5 * s2 - 0.5 * b * h),
                            rho * h2 + s2,
                            -(0.5 * s2 + 0.5 * b * h),
                            rhs,
                        ),
                    }
                }
            };
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let mut sys = TridiagonalSystem {
        sub: Vec::with_capacity(n - 1),
        diag: Vec::with_capacity(n),
        sup: Vec::with_capacity(n - 1),
        rhs: Vec::with_capacity(n),
    };
    for (i, (lo, d, up, r)) in rows.into_iter().enumerate() {
        if i > 0 {
            sys.sub.push(lo);
        }
        if i + 1 < n {
            sys.sup.push(up);
        }
        sys.diag.push(d);
        sys.rhs.push(r);
    }
    Ok(sys)
}

/// Thomas algorithm. Sequential by nature.
pub fn solve_tridiagonal(sys: &TridiagonalSystem) -> Result<Vec<f64>> {
    let n = sys.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = sys.diag[0];
    if pivot.abs() < 1e-300 {
        return Err(Error::Singular { row: 0, pivot });
    }
    if n > 1 {
        c[0] = sys.sup[0] / pivot;
    }
    d[0] = sys.rhs[0] / pivot;
    for i in 1..n {
        pivot = sys.diag[i] - sys.sub[i - 1] * c[i - 1];
        if !(pivot.abs() >= 1e-300) {
            return Err(Error::Singular { row: i, pivot });
        }
        if i + 1 < n {
            c[i] = sys.sup[i] / pivot;
        }
        d[i] = (sys.rhs[i] - sys.sub[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Output of one policy evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub grid: ValueGrid,
    pub snapshot: PolicySnapshot,
    pub coeffs: HattedCoeffs,
}

/// Evaluate the Gibbs policy built from the gradient field `y`.
pub fn evaluate_with(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    geom: &GridGeometry,
    y: &[f64],
    bc: BoundaryCondition,
    scheme: DriftScheme,
) -> Result<Evaluation> {
    let x = geom.nodes();
    let snapshot = gibbs_snapshot(problem, quad, &x, y)?;
    let coeffs = hatted(problem, quad, &snapshot);
    let source: Vec<f64> = coeffs
        .r_hat
        .iter()
        .zip(&coeffs.h_hat)
        .map(|(r, h)| r - h)
        .collect();
    let sys = assemble(problem, geom, &coeffs.b_hat, &source, bc, scheme)?;
    let v = solve_tridiagonal(&sys)?;
    let grid = ValueGrid::from_values(*geom, v, bc)?;
    Ok(Evaluation {
        grid,
        snapshot,
        coeffs,
    })
}

/// Upwind evaluation of the Gibbs policy built from `y`.
pub fn evaluate_policy(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    geom: &GridGeometry,
    y: &[f64],
    bc: BoundaryCondition,
) -> Result<ValueGrid> {
    evaluate_with(problem, quad, geom, y, bc, DriftScheme::Upwind).map(|e| e.grid)
}

/// `-rho v + sigma^2 v'' / 2 + soft_hamiltonian(x, v')` at every node, using the
/// central derivatives stored in `vgrid`. Diagnostics read it on
/// [`GridGeometry::interior`] only.
pub fn hjb_residual(
    problem: &ControlProblem,
    quad: &ActionQuadrature,
    vgrid: &ValueGrid,
) -> Result<Vec<f64>> {
    let geom = vgrid.geometry;
    (0..geom.len())
        .into_par_iter()
        .map(|i| {
            let x = geom.x(i);
            let s = problem.vol(x);
            let soft = soft_hamiltonian(problem, quad, x, vgrid.dv[i])?;
            Ok(-problem.rho() * vgrid.v[i] + 0.5 * s * s * vgrid.d2v[i] + soft)
        })
        .collect()
}

/// `sup |residual|` over the interior nodes.
pub fn interior_sup(geom: &GridGeometry, field: &[f64]) -> f64 {
    sup_abs(&field[geom.interior()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_constant, make_merton, ActionSpace, MertonParams};
    use crate::quadrature::{build_quadrature, QuadRule};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn diffusion(sigma: f64, rho: f64) -> ControlProblem {
        make_constant(sigma, 0.0, ActionSpace::interval(0.0, 1.0).unwrap(), rho, 1.0).unwrap()
    }

    /// Gaussian elimination with partial pivoting on a dense copy.
    fn dense_solve(sys: &TridiagonalSystem) -> Vec<f64> {
        let n = sys.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            a[i][i] = sys.diag[i];
            if i > 0 {
                a[i][i - 1] = sys.sub[i - 1];
            }
            if i + 1 < n {
                a[i][i + 1] = sys.sup[i];
            }
            a[i][n] = sys.rhs[i];
        }
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap())
                .unwrap();
            a.swap(k, p);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                if f != 0.0 {
                    for j in k..=n {
                        a[i][j] -= f * a[k][j];
                    }
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = a[i][n];
            for j in i + 1..n {
                s -= a[i][j] * x[j];
            }
            x[i] = s / a[i][i];
        }
        x
    }

    #[test]
    fn geometry_rules() {
        assert!(GridGeometry::new(0.0, 1.0, 4).is_err());
        assert!(GridGeometry::new(1.0, 1.0, 10).is_err());
        let g = GridGeometry::new(-6.0, 4.0, 801).unwrap();
        assert!((g.h() - 0.0125).abs() < 1e-15);
        assert_eq!(g.interior(), 80..721);
        assert_eq!(g.x(800), 4.0);
        assert_eq!(g.refined().len(), 1601);
    }

    #[test]
    fn thomas_examples() {
        let sys = TridiagonalSystem::new(
            vec![1.0, 1.0],
            vec![2.0, 2.0, 2.0],
            vec![1.0, 1.0],
            vec![1.0, 0.0, 1.0],
        )
        .unwrap();
        let v = solve_tridiagonal(&sys).unwrap();
        let oracle = dense_solve(&sys);
        // Rows: 2a + b = 1, a + 2b + c = 0, b + 2c = 1.
        for (a, b) in v.iter().zip([1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in v.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }

        let rhs = vec![3.0, -1.0, 2.5, 7.0];
        let id = TridiagonalSystem::new(vec![0.0; 3], vec![1.0; 4], vec![0.0; 3], rhs.clone()).unwrap();
        assert_eq!(solve_tridiagonal(&id).unwrap(), rhs);

        let singular = TridiagonalSystem::new(vec![1.0], vec![1.0, 1.0], vec![1.0], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            solve_tridiagonal(&singular),
            Err(Error::Singular { row: 1, .. })
        ));
        assert!(TridiagonalSystem::new(vec![1.0], vec![1.0; 3], vec![1.0; 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn thomas_matches_dense_oracle_on_random_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1000;
        let sub: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sup: Vec<f64> = (0..n - 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let diag: Vec<f64> = (0..n)
            .map(|i| {
                let off = if i > 0 { sub[i - 1].abs() } else { 0.0 } + if i + 1 < n { sup[i].abs() } else { 0.0 };
                off + rng.random_range(0.1..2.0)
            })
            .collect();
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let sys = TridiagonalSystem::new(sub, diag, sup, rhs).unwrap();
        let v = solve_tridiagonal(&sys).unwrap();
        let oracle = dense_solve(&sys);
        let scale = sup_abs(&oracle);
        for (a, b) in v.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9 * scale);
        }
        let av = sys.apply(&v);
        let res = av.iter().zip(&sys.rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res <= 1e-10 * sup_abs(&sys.rhs));
    }

    #[test]
    fn constants_solve_the_dirichlet_problem() {
        let p = diffusion(1.0, 0.3);
        let g = GridGeometry::new(-1.0, 2.0, 31).unwrap();
        let c = 1.7;
        let sys = assemble(
            &p,
            &g,
            &vec![0.0; 31],
            &vec![0.3 * c; 31],
            BoundaryCondition::Dirichlet { left: c, right: c },
            DriftScheme::Upwind,
        )
        .unwrap();
        for v in solve_tridiagonal(&sys).unwrap() {
            assert!((v - c).abs() < 1e-12);
        }
    }

    #[test]
    fn upwind_rows_are_diagonally_dominant() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 101).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b: Vec<f64> = (0..101).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sys = assemble(&p, &g, &b, &vec![1.0; 101], BoundaryCondition::NeumannZero, DriftScheme::Upwind).unwrap();
        let margin = 0.1 * g.h() * g.h();
        for i in 1..100 {
            assert!(sys.sub[i - 1] <= 0.0 && sys.sup[i] <= 0.0);
            let off = sys.sub[i - 1].abs() + sys.sup[i].abs();
            assert!(sys.diag[i] >= off + margin * (1.0 - 1e-12));
        }
    }

    /// Manufactured solution `v*(x) = exp(-x^2)` with a fixed drift field.
    fn manufactured_error(n: usize, scheme: DriftScheme) -> f64 {
        let p = diffusion(0.8, 0.5);
        let g = GridGeometry::new(-3.0, 3.0, n).unwrap();
        let x = g.nodes();
        let b: Vec<f64> = x.iter().map(|x| (2.0 * x).sin()).collect();
        let exact: Vec<f64> = x.iter().map(|x| (-x * x).exp()).collect();
        let source: Vec<f64> = x
            .iter()
            .zip(&b)
            .map(|(&x, &b)| {
                let v = (-x * x).exp();
                let dv = -2.0 * x * v;
                let d2v = (4.0 * x * x - 2.0) * v;
                0.5 * v - b * dv - 0.5 * 0.64 * d2v
            })
            .collect();
        let bc = BoundaryCondition::Dirichlet {
            left: exact[0],
            right: exact[n - 1],
        };
        let sys = assemble(&p, &g, &b, &source, bc, scheme).unwrap();
        let v = solve_tridiagonal(&sys).unwrap();
        v.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_converges() {
        let coarse = manufactured_error(201, DriftScheme::Upwind);
        let fine = manufactured_error(401, DriftScheme::Upwind);
        assert!(coarse < 0.05 && fine <= 0.5 * coarse * 1.05, "{coarse} {fine}");
        let c2 = manufactured_error(201, DriftScheme::Central);
        let f2 = manufactured_error(401, DriftScheme::Central);
        assert!(f2 <= 0.3 * c2, "{c2} {f2}");
    }

    #[test]
    fn constant_model_value_is_closed_form() {
        let p = make_constant(0.5, 0.3, ActionSpace::interval(0.05, 0.5).unwrap(), 0.2, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-2.0, 2.0, 41).unwrap();
        let vg = evaluate_policy(&p, &q, &g, &vec![0.0; 41], BoundaryCondition::NeumannZero).unwrap();
        let soft = soft_hamiltonian(&p, &q, 0.0, 0.0).unwrap();
        for &v in &vg.v {
            assert!((v - soft / 0.2).abs() < 1e-8);
        }
        let res = hjb_residual(&p, &q, &vg).unwrap();
        assert!(sup_abs(&res) < 1e-9);
    }

    #[test]
    fn merton_uniform_policy_within_bounds() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
        let g = GridGeometry::new(-4.0, 4.0, 801).unwrap();
        let vg = evaluate_policy(&p, &q, &g, &vec![0.0; 801], BoundaryCondition::NeumannZero).unwrap();
        let bound = (1.0 + 0.5 * 0.45f64.ln().abs()) / 0.1;
        assert!((bound - 13.99).abs() < 0.01);
        assert!(vg.sup_abs() <= bound);

        // Boundedness through Lambda_0 = max(sup|b|, sup|r|, sup|sigma|) and y = 0.
        let lambda0 = 1.0f64.max(0.055).max(0.1);
        assert!(vg.sup_abs() <= (3.0 * lambda0 + 0.5 * 0.45f64.ln().abs()) / 0.1);

        // With v = 0 the residual reduces to the soft Hamiltonian at y = 0.
        let zero = ValueGrid::from_values(g, vec![0.0; 801], BoundaryCondition::NeumannZero).unwrap();
        let res = hjb_residual(&p, &q, &zero).unwrap();
        for i in (0..801).step_by(50) {
            let s = soft_hamiltonian(&p, &q, g.x(i), 0.0).unwrap();
            assert_eq!(res[i], s);
        }
    }

    #[test]
    fn discrete_maximum_principle() {
        let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
        let g = GridGeometry::new(-6.0, 4.0, 201).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let b: Vec<f64> = (0..201).map(|_| rng.random_range(-2.0..2.0)).collect();
            let src: Vec<f64> = (0..201).map(|_| rng.random_range(0.0..1.0)).collect();
            for bc in [
                BoundaryCondition::NeumannZero,
                BoundaryCondition::Dirichlet { left: 0.0, right: 0.3 },
            ] {
                let sys = assemble(&p, &g, &b, &src, bc, DriftScheme::Upwind).unwrap();
                let v = solve_tridiagonal(&sys).unwrap();
                assert!(v.iter().all(|&a| a >= -1e-12));
            }
        }
    }

    #[test]
    fn assemble_rejects_bad_fields() {
        let p = diffusion(1.0, 0.1);
        let g = GridGeometry::new(0.0, 1.0, 11).unwrap();
        let bc = BoundaryCondition::NeumannZero;
        assert!(assemble(&p, &g, &[0.0; 10], &[0.0; 11], bc, DriftScheme::Upwind).is_err());
        let mut b = vec![0.0; 11];
        b[4] = f64::NAN;
        assert!(assemble(&p, &g, &b, &[0.0; 11], bc, DriftScheme::Upwind).is_err());
        let bad_vol = ControlProblem::new(
            "bad",
            0.1,
            1.0,
            ActionSpace::interval(0.0, 1.0).unwrap(),
            Arc::new(|_x, _u| 0.0),
            Arc::new(|x| if x > 0.5 { f64::INFINITY } else { 1.0 }),
            Arc::new(|_x, _u| 0.0),
            1.0,
        )
        .unwrap();
        assert!(matches!(
            assemble(&bad_vol, &g, &[0.0; 11], &[0.0; 11], bc, DriftScheme::Upwind),
            Err(Error::NonFiniteModel { what: "volatility", .. })
        ));
    }

    #[test]
    fn derivative_stencils_are_exact_on_quadratics() {
        let h = 0.1;
        let v: Vec<f64> = (0..9).map(|i| { let x = i as f64 * h; 3.0 * x * x - x + 2.0 }).collect();
        let (dv, d2v) = central_derivatives(&v, h);
        for i in 0..9 {
            let x = i as f64 * h;
            assert!((dv[i] - (6.0 * x - 1.0)).abs() < 1e-10);
            assert!((d2v[i] - 6.0).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn solution_is_linear_in_the_source(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..1000) {
            let p = diffusion(0.4, 0.2);
            let g = GridGeometry::new(-1.0, 1.0, 51).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = (0..51).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f1: Vec<f64> = (0..51).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f2: Vec<f64> = (0..51).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = f1.iter().zip(&f2).map(|(a, c)| alpha * a + beta * c).collect();
            let bc = BoundaryCondition::NeumannZero;
            let solve = |f: &[f64]| solve_tridiagonal(&assemble(&p, &g, &b, f, bc, DriftScheme::Upwind).unwrap()).unwrap();
            let (v1, v2, vm) = (solve(&f1), solve(&f2), solve(&mix));
            for i in 0..51 {
                prop_assert!((vm[i] - (alpha * v1[i] + beta * v2[i])).abs() <= 1e-10);
            }
        }

        #[test]
        fn value_respects_the_uniform_bound(c in -20.0f64..20.0, x0 in -2.0f64..2.0) {
            let p = make_merton(MertonParams::default(), 0.1, 0.5).unwrap();
            let q = build_quadrature(p.action_space(), QuadRule::default()).unwrap();
            let g = GridGeometry::new(x0 - 4.0, x0 + 4.0, 161).unwrap();
            let vg = evaluate_policy(&p, &q, &g, &vec![c; 161], BoundaryCondition::NeumannZero).unwrap();
            let upper = (1.0 + 0.5 * 0.45f64.ln().abs()) / 0.1;
            prop_assert!(vg.v.iter().all(|&v| v <= upper + 1e-6 * upper));
        }
    }
}
