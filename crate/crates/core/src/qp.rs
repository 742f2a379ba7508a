//! Small dense convex quadratic programs of the form
//!
//! ```text
//!     minimize    1/2 x' P x + q' x
//!     subject to  l <= A x <= u
//! ```
//!
//! solved by an operator-splitting iteration (with constraint-row
//! equilibration and a slowly adapted penalty) plus an active-set polish
//! step that drives the KKT residual to machine precision when it succeeds.
//! `P` may be positive semidefinite.
//!
//! This is an internal building block sized for problems with tens of
//! variables (battery control horizons); it is not a general-purpose solver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Debug, Clone, Copy)]
pub(crate) struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    /// Absolute KKT-residual target (unscaled problem data).
    pub eps: f64,
    pub max_iters: usize,
    pub adaptive_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 0.1,
            sigma: 1e-6,
            eps: 1e-8,
            max_iters: 20_000,
            adaptive_interval: 100,
        }
    }
}

/// Iterates kept between solves for warm starting (scaled space).
#[derive(Debug, Clone)]
pub(crate) struct QpState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct QpResult {
    pub x: DVector<f64>,
    /// Dual variables of the original (unscaled) rows.
    pub y: DVector<f64>,
    /// Worst constraint violation of `x` against the original bounds.
    pub primal_res: f64,
    /// Stationarity residual `max |P x + q + A' y|`.
    pub dual_res: f64,
    pub iterations: usize,
    pub converged: bool,
    pub polished: bool,
}

/// A QP with fixed `P` and `A`; `q` and the bounds may change per solve.
pub(crate) struct QpProblem {
    n: usize,
    m: usize,
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    /// Row-equilibrated constraint matrix used by the iteration.
    a_scaled: DMatrix<f64>,
    /// Per-row scaling factors: `a_scaled = diag(row_scale) * a`.
    row_scale: DVector<f64>,
    ata_scaled: DMatrix<f64>,
    settings: QpSettings,
    rho: f64,
    factor: Cholesky<f64, Dyn>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, a: DMatrix<f64>, settings: QpSettings) -> Self {
        let n = p.nrows();
        assert_eq!(p.ncols(), n);
        assert_eq!(a.ncols(), n);
        let m = a.nrows();
        let mut row_scale = DVector::from_element(m, 1.0);
        for i in 0..m {
            let norm = a.row(i).amax();
            if norm > 0.0 {
                row_scale[i] = 1.0 / norm;
            }
        }
        let mut a_scaled = a.clone();
        for i in 0..m {
            for j in 0..n {
                a_scaled[(i, j)] *= row_scale[i];
            }
        }
        let ata_scaled = a_scaled.transpose() * &a_scaled;
        let rho = settings.rho;
        let factor = Self::factorize(&p, &ata_scaled, settings.sigma, rho, n);
        Self {
            n,
            m,
            p,
            a,
            a_scaled,
            row_scale,
            ata_scaled,
            settings,
            rho,
            factor,
        }
    }

    fn factorize(
        p: &DMatrix<f64>,
        ata: &DMatrix<f64>,
        sigma: f64,
        rho: f64,
        n: usize,
    ) -> Cholesky<f64, Dyn> {
        let mut m = p + ata * rho;
        for i in 0..n {
            m[(i, i)] += sigma;
        }
        Cholesky::new(m).expect("P + sigma I + rho A'A must be positive definite")
    }

    fn set_rho(&mut self, rho: f64) {
        self.rho = rho;
        self.factor = Self::factorize(&self.p, &self.ata_scaled, self.settings.sigma, rho, self.n);
    }

    /// True constraint violation and stationarity residual of `(x, y)`
    /// against the original problem data.
    fn true_residuals(
        &self,
        q: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
    ) -> (f64, f64) {
        let ax = &self.a * x;
        let mut primal = 0.0f64;
        for i in 0..self.m {
            primal = primal.max(lower[i] - ax[i]).max(ax[i] - upper[i]);
        }
        let dual = (&self.p * x + q + self.a.transpose() * y).amax();
        (primal.max(0.0), dual)
    }

    pub fn solve(
        &mut self,
        q: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        warm: Option<&QpState>,
    ) -> (QpResult, QpState) {
        // Scaled bounds for the iteration.
        let mut l = lower.clone();
        let mut u = upper.clone();
        for i in 0..self.m {
            l[i] *= self.row_scale[i];
            u[i] *= self.row_scale[i];
        }

        let (mut x, mut z, mut y) = match warm {
            Some(s) if s.x.len() == self.n && s.z.len() == self.m => {
                let mut z = s.z.clone();
                clamp_into(&mut z, &l, &u);
                (s.x.clone(), z, s.y.clone())
            }
            _ => {
                let x = DVector::zeros(self.n);
                let mut z = &self.a_scaled * &x;
                clamp_into(&mut z, &l, &u);
                (x, z, DVector::zeros(self.m))
            }
        };

        let mut iterations = 0;
        let mut converged = false;
        let mut rhs = DVector::zeros(self.n);
        let mut ax = DVector::zeros(self.m);
        let mut scratch_m = DVector::zeros(self.m);
        let mut dual_vec = DVector::zeros(self.n);

        for k in 1..=self.settings.max_iters {
            iterations = k;
            // rhs = sigma x - q + A'(rho z - y)
            scratch_m.copy_from(&z);
            scratch_m *= self.rho;
            scratch_m -= &y;
            rhs.gemv_tr(1.0, &self.a_scaled, &scratch_m, 0.0);
            rhs.axpy(self.settings.sigma, &x, 1.0);
            rhs -= q;
            x.copy_from(&rhs);
            self.factor.solve_mut(&mut x);
            ax.gemv(1.0, &self.a_scaled, &x, 0.0);
            for i in 0..self.m {
                z[i] = (ax[i] + y[i] / self.rho).clamp(l[i], u[i]);
                y[i] += self.rho * (ax[i] - z[i]);
            }

            // Residuals in unscaled terms: each scaled row violation maps
            // back through its scaling factor.
            let mut primal = 0.0f64;
            for i in 0..self.m {
                primal = primal.max((ax[i] - z[i]).abs() / self.row_scale[i]);
            }
            dual_vec.gemv(1.0, &self.p, &x, 0.0);
            dual_vec += q;
            dual_vec.gemv_tr(1.0, &self.a_scaled, &y, 1.0);
            let dual = dual_vec.amax();
            if primal <= self.settings.eps && dual <= self.settings.eps {
                converged = true;
                break;
            }
            if self.settings.adaptive_interval > 0 && k % self.settings.adaptive_interval == 0 {
                let ratio = primal / dual.max(1e-300);
                if !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (self.rho * ratio.sqrt()).clamp(1e-6, 1e6);
                    if (new_rho / self.rho).log2().abs() > 0.5 {
                        self.set_rho(new_rho);
                    }
                }
            }
        }

        // Duals of the original rows.
        let mut y_unscaled = y.clone();
        for i in 0..self.m {
            y_unscaled[i] *= self.row_scale[i];
        }
        let (primal_res, dual_res) = self.true_residuals(q, lower, upper, &x, &y_unscaled);
        let mut result = QpResult {
            x: x.clone(),
            y: y_unscaled.clone(),
            primal_res,
            dual_res,
            iterations,
            converged,
            polished: false,
        };
        // The iteration already meets its target when it converged; polish
        // only rescues stalled solves.
        if !converged {
            if let Some((px, py)) = self.polish(q, lower, upper, &y_unscaled) {
                let (prp, prd) = self.true_residuals(q, lower, upper, &px, &py);
                if prp <= result.primal_res.max(1e-9) && prd <= result.dual_res.max(1e-9) {
                    result = QpResult {
                        x: px,
                        y: py,
                        primal_res: prp,
                        dual_res: prd,
                        iterations,
                        converged: true,
                        polished: true,
                    };
                }
            }
        }

        let state = QpState { x, z, y };
        (result, state)
    }

    /// Re-solves the equality-constrained QP defined by the active set read
    /// off the dual iterate. Returns the polished `(x, y)`, or `None` when
    /// the reduced KKT system cannot be solved.
    fn polish(
        &self,
        q: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        const ACTIVE_TOL: f64 = 1e-10;
        const REG: f64 = 1e-9;

        let active: Vec<(usize, f64)> = (0..self.m)
            .filter_map(|i| {
                if y[i] > ACTIVE_TOL {
                    Some((i, upper[i]))
                } else if y[i] < -ACTIVE_TOL {
                    Some((i, lower[i]))
                } else {
                    None
                }
            })
            .collect();
        let na = active.len();
        let dim = self.n + na;

        // Exact KKT matrix and its regularized (quasi-definite) variant.
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (self.n, self.n)).copy_from(&self.p);
        for (row, &(idx, _)) in active.iter().enumerate() {
            for col in 0..self.n {
                kkt[(self.n + row, col)] = self.a[(idx, col)];
                kkt[(col, self.n + row)] = self.a[(idx, col)];
            }
        }
        let mut kkt_reg = kkt.clone();
        for i in 0..self.n {
            kkt_reg[(i, i)] += REG;
        }
        for i in self.n..dim {
            kkt_reg[(i, i)] -= REG;
        }

        let mut rhs = DVector::zeros(dim);
        for i in 0..self.n {
            rhs[i] = -q[i];
        }
        for (row, &(_, bound)) in active.iter().enumerate() {
            rhs[self.n + row] = bound;
        }

        let lu = kkt_reg.lu();
        let mut sol = lu.solve(&rhs)?;
        // Iterative refinement against the unregularized system.
        for _ in 0..3 {
            let residual = &rhs - &kkt * &sol;
            let correction = lu.solve(&residual)?;
            sol += correction;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }

        let x = DVector::from_iterator(self.n, (0..self.n).map(|i| sol[i]));
        let mut y_pol = DVector::zeros(self.m);
        for (row, &(idx, _)) in active.iter().enumerate() {
            y_pol[idx] = sol[self.n + row];
        }
        Some((x, y_pol))
    }
}

fn clamp_into(z: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].max(lower[i]).min(upper[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn solve_once(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> QpResult {
        let mut problem = QpProblem::new(p, a, QpSettings::default());
        let (result, _) = problem.solve(&q, &l, &u, None);
        result
    }

    #[test]
    fn box_projection_clamps() {
        // min 1/2 ||x - c||^2 s.t. 0 <= x <= 1 has solution clamp(c).
        let c = DVector::from_vec(vec![2.0, -0.5, 0.3]);
        let result = solve_once(
            DMatrix::identity(3, 3),
            -c.clone(),
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
        );
        assert!(result.converged);
        let expected = [1.0, 0.0, 0.3];
        for i in 0..3 {
            assert_abs_diff_eq!(result.x[i], expected[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn equality_constrained_average() {
        // min 1/2 ||x||^2 s.t. sum x = 1 has solution x = 1/n.
        let n = 4;
        let a = DMatrix::from_element(1, n, 1.0);
        let result = solve_once(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            a,
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
        );
        assert!(result.converged);
        for i in 0..n {
            assert_abs_diff_eq!(result.x[i], 0.25, epsilon = 1e-7);
        }
    }

    #[test]
    fn semidefinite_objective_with_coupling() {
        // min 1/2 (x1 + x2 - 2)^2 s.t. 0 <= x1 <= 0.5, 0 <= x2 <= 0.5.
        // Optimal value is 1/2 * 1 = 0.5 at x1 = x2 = 0.5.
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let q = DVector::from_vec(vec![-2.0, -2.0]);
        let result = solve_once(
            p.clone(),
            q.clone(),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DVector::from_element(2, 0.5),
        );
        assert!(result.converged);
        let obj = 0.5 * (result.x.transpose() * &p * &result.x)[(0, 0)]
            + q.dot(&result.x)
            + 2.0;
        assert_abs_diff_eq!(obj, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn polish_reaches_tight_kkt_residuals() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_vec(vec![-1.0, 1.0]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = DVector::from_vec(vec![0.0, -0.2, 0.0]);
        let u = DVector::from_vec(vec![0.8, 0.2, 0.7]);
        let result = solve_once(p, q, a, l, u);
        assert!(result.converged);
        assert!(result.primal_res <= 1e-8, "primal {}", result.primal_res);
        assert!(result.dual_res <= 1e-8, "dual {}", result.dual_res);
    }

    #[test]
    fn badly_scaled_rows_still_converge() {
        // Mix of unit box rows and a large coupling row, mimicking the
        // battery subproblem's structure.
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 0.81]);
        let q = DVector::from_vec(vec![0.3, 0.27]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 4.0, -4.2]);
        let l = DVector::from_vec(vec![0.0, -0.25, 0.0]);
        let u = DVector::from_vec(vec![0.25, 0.0, 1.0]);
        let result = solve_once(p, q, a, l, u);
        assert!(result.primal_res <= 1e-8, "primal {}", result.primal_res);
        assert!(result.dual_res <= 1e-8, "dual {}", result.dual_res);
    }

    #[test]
    fn warm_start_reuses_previous_solution() {
        let p = DMatrix::identity(3, 3);
        let a = DMatrix::identity(3, 3);
        let mut problem = QpProblem::new(p, a, QpSettings::default());
        let q = DVector::from_vec(vec![-0.4, 0.1, -0.9]);
        let l = DVector::zeros(3);
        let u = DVector::from_element(3, 1.0);
        let (first, state) = problem.solve(&q, &l, &u, None);
        let (second, _) = problem.solve(&q, &l, &u, Some(&state));
        assert!(second.iterations <= first.iterations);
        for i in 0..3 {
            assert_abs_diff_eq!(first.x[i], second.x[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn matches_dense_grid_on_random_tiny_problem() {
        // 2-variable box QP cross-checked against a fine grid.
        let p = DMatrix::from_row_slice(2, 2, &[1.5, 0.3, 0.3, 0.8]);
        let q = DVector::from_vec(vec![0.2, -0.7]);
        let result = solve_once(
            p.clone(),
            q.clone(),
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        let f = |x0: f64, x1: f64| {
            0.5 * (p[(0, 0)] * x0 * x0 + 2.0 * p[(0, 1)] * x0 * x1 + p[(1, 1)] * x1 * x1)
                + q[0] * x0
                + q[1] * x1
        };
        let mut best = f64::INFINITY;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let x0 = -1.0 + 2.0 * i as f64 / steps as f64;
                let x1 = -1.0 + 2.0 * j as f64 / steps as f64;
                best = best.min(f(x0, x1));
            }
        }
        let got = f(result.x[0], result.x[1]);
        assert!(got <= best + 1e-9);
        assert!((got - best).abs() < 1e-4);
    }
}
