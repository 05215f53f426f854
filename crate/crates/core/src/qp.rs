//! Sparse convex QP assembly on top of the Clarabel interior-point solver.
//!
//! The problem is `min 0.5 z'Pz + q'z` subject to equality rows `a'z = b` and
//! inequality rows `a'z <= b`.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    /// Iteration cap or reduced-accuracy termination with a usable iterate.
    Inaccurate,
    Infeasible,
    Failed,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers, equality rows first, with `Pz + q + A'y = 0` at optimality.
    pub y: Vec<f64>,
    pub status: QpStatus,
    pub iterations: u32,
}

#[derive(Debug, Clone, Default)]
pub struct QpBuilder {
    n: usize,
    hessian: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    eq: Vec<(Vec<(usize, f64)>, f64)>,
    le: Vec<(Vec<(usize, f64)>, f64)>,
}

impl QpBuilder {
    pub fn new(n: usize) -> Self {
        Self { n, q: vec![0.0; n], ..Default::default() }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    /// Add `v` to the symmetric Hessian entries `(i, j)` and `(j, i)`.
    pub fn add_hessian(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.n && j < self.n);
        if v != 0.0 {
            self.hessian.push((i.min(j), i.max(j), v));
        }
    }

    pub fn add_linear(&mut self, i: usize, v: f64) {
        self.q[i] += v;
    }

    pub fn add_eq(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push((row, rhs));
    }

    pub fn add_le(&mut self, row: Vec<(usize, f64)>, rhs: f64) {
        self.le.push((row, rhs));
    }

    pub fn num_eq(&self) -> usize {
        self.eq.len()
    }

    pub fn num_le(&self) -> usize {
        self.le.len()
    }

    pub fn solve(&self, max_iter: u32, tol: f64) -> QpSolution {
        let p = csc(self.n, self.n, self.hessian.iter().copied());
        let rows = self.eq.iter().chain(self.le.iter());
        let triplets = rows.enumerate().flat_map(|(r, (row, _))| row.iter().map(move |&(c, v)| (r, c, v)));
        let m = self.eq.len() + self.le.len();
        let a = csc(m, self.n, triplets);
        let b: Vec<f64> = self.eq.iter().chain(self.le.iter()).map(|(_, rhs)| *rhs).collect();
        let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
        if !self.eq.is_empty() {
            cones.push(ZeroConeT(self.eq.len()));
        }
        if !self.le.is_empty() {
            cones.push(NonnegativeConeT(self.le.len()));
        }
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .max_iter(max_iter)
            .tol_feas(tol)
            .tol_gap_abs(tol)
            .tol_gap_rel(tol)
            .build()
            .expect("static solver settings are valid");
        let mut solver = match DefaultSolver::new(&p, &self.q, &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("QP setup failed: {e}");
                return QpSolution {
                    x: vec![0.0; self.n],
                    y: vec![0.0; self.eq.len() + self.le.len()],
                    status: QpStatus::Failed,
                    iterations: 0,
                };
            }
        };
        solver.solve();
        let sol = &solver.solution;
        let finite = sol.x.iter().all(|v| v.is_finite());
        let status = match sol.status {
            SolverStatus::Solved if finite => QpStatus::Solved,
            SolverStatus::AlmostSolved | SolverStatus::MaxIterations | SolverStatus::InsufficientProgress
                if finite =>
            {
                QpStatus::Inaccurate
            }
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpStatus::Infeasible,
            _ => QpStatus::Failed,
        };
        QpSolution { x: sol.x.clone(), y: sol.z.clone(), status, iterations: sol.iterations }
    }

    /// Largest KKT violation of the primal-dual pair `(x, y)`: stationarity,
    /// primal feasibility and complementarity, in the infinity norm.
    pub fn kkt_residual(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.eq.len() + self.le.len());
        let mut grad = self.q.clone();
        for &(i, j, v) in &self.hessian {
            grad[i] += v * x[j];
            if i != j {
                grad[j] += v * x[i];
            }
        }
        let mut worst: f64 = 0.0;
        for (r, (row, rhs)) in self.eq.iter().chain(self.le.iter()).enumerate() {
            let mut ax = 0.0;
            for &(c, v) in row {
                grad[c] += v * y[r];
                ax += v * x[c];
            }
            let gap = rhs - ax;
            worst = worst.max(if r < self.eq.len() {
                gap.abs()
            } else {
                (-gap).max(0.0).max(y[r].min(0.0).abs()).max((y[r] * gap).abs())
            });
        }
        grad.iter().fold(worst, |w, g| w.max(g.abs()))
    }
}

/// Compressed-column matrix from (row, col, value) triplets; duplicates are summed.
fn csc(m: usize, n: usize, triplets: impl Iterator<Item = (usize, usize, f64)>) -> CscMatrix<f64> {
    let mut t: Vec<(usize, usize, f64)> = triplets.collect();
    t.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(t.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(t.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in t {
        if last == Some((r, c)) {
            *nzval.last_mut().expect("previous entry exists") += v;
            continue;
        }
        rowval.push(r);
        nzval.push(v);
        colptr[c + 1] += 1;
        last = Some((r, c));
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constrained_quadratic() {
        // min (x-2)^2 + (y+1)^2  s.t.  x <= 1, x + y = 0.5
        let mut qp = QpBuilder::new(2);
        qp.add_hessian(0, 0, 2.0);
        qp.add_hessian(1, 1, 2.0);
        qp.add_linear(0, -4.0);
        qp.add_linear(1, 2.0);
        qp.add_le(vec![(0, 1.0)], 1.0);
        qp.add_eq(vec![(0, 1.0), (1, 1.0)], 0.5);
        let sol = qp.solve(50, 1e-9);
        assert_eq!(sol.status, QpStatus::Solved);
        // unconstrained in y given x = 1 would be y = -1, but x + y = 0.5 forces y = -0.5
        assert!((sol.x[0] - 1.0).abs() < 1e-6, "{:?}", sol.x);
        assert!((sol.x[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let m = csc(2, 2, [(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0), (0, 1, -1.0)].into_iter());
        assert_eq!(m.colptr, vec![0, 1, 3]);
        assert_eq!(m.rowval, vec![0, 0, 1]);
        assert_eq!(m.nzval, vec![3.0, -1.0, 4.0]);
    }

    #[test]
    fn infeasible_problem_is_reported() {
        let mut qp = QpBuilder::new(1);
        qp.add_hessian(0, 0, 1.0);
        qp.add_le(vec![(0, 1.0)], -1.0);
        qp.add_le(vec![(0, -1.0)], -1.0);
        assert_eq!(qp.solve(50, 1e-8).status, QpStatus::Infeasible);
    }
}
