//! Dense convex QP solver used by the dispatch and social-welfare programs.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    1/2 x' diag(P) x + q' x
//!     subject to  A x  = b      (dual y)
//!                 G x <= h      (dual z >= 0)
//! ```
//!
//! with a diagonal Hessian. The Lagrangian is `f(x) + y'(Ax - b) + z'(Gx - h)`,
//! so stationarity reads `P x + q + A'y + G'z = 0`. Solved with a Mehrotra
//! predictor-corrector interior point method followed by an active-set polish
//! that recovers vertex-accurate primal and dual values when the optimal active
//! set is nondegenerate.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("objective appears unbounded below (|x| = {norm:.3e} after {iterations} iterations)")]
    Unbounded { iterations: usize, norm: f64 },
    #[error(
        "interior point did not converge in {iterations} iterations \
         (primal {primal:.3e}, dual {dual:.3e}, gap {gap:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal: f64,
        dual: f64,
        gap: f64,
    },
    #[error("KKT system is singular")]
    Singular,
}

/// Sparse linear row `sum_k val[k] * x[idx[k]]`.
#[derive(Debug, Clone, Default)]
pub(crate) struct Row {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl Row {
    pub fn new(terms: &[(usize, f64)]) -> Self {
        let mut row = Row::default();
        for &(i, v) in terms {
            match row.idx.iter().position(|&j| j == i) {
                Some(k) => row.val[k] += v,
                None => {
                    row.idx.push(i);
                    row.val.push(v);
                }
            }
        }
        let (idx, val) = row
            .idx
            .iter()
            .zip(&row.val)
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (*i, *v))
            .unzip();
        Row { idx, val }
    }

    fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }

    fn axpy_t(&self, scale: f64, out: &mut [f64]) {
        for (&i, v) in self.idx.iter().zip(&self.val) {
            out[i] += scale * v;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct QpBuilder {
    p: Vec<f64>,
    q: Vec<f64>,
    eq: Vec<Row>,
    b: Vec<f64>,
    ineq: Vec<Row>,
    h: Vec<f64>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable with objective term `1/2 quad x^2 + lin x`.
    pub fn var(&mut self, quad: f64, lin: f64) -> usize {
        self.p.push(quad);
        self.q.push(lin);
        self.p.len() - 1
    }

    pub fn eq(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        self.eq.push(Row::new(terms));
        self.b.push(rhs);
        self.eq.len() - 1
    }

    pub fn le(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        self.ineq.push(Row::new(terms));
        self.h.push(rhs);
        self.ineq.len() - 1
    }

    pub fn build(self) -> QpProblem {
        QpProblem {
            p: self.p,
            q: self.q,
            eq: self.eq,
            b: self.b,
            ineq: self.ineq,
            h: self.h,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct QpProblem {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub eq: Vec<Row>,
    pub b: Vec<f64>,
    pub ineq: Vec<Row>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct QpOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub polish: bool,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            max_iter: 200,
            tol: 1e-10,
            polish: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    #[allow(dead_code)]
    pub objective: f64,
    pub iterations: usize,
    #[allow(dead_code)]
    pub polished: bool,
}

/// Iterations without improvement before the best iterate is returned.
const STALL_ITERATIONS: usize = 5;
/// Largest scaled residual a stalled iterate may have; polishing refines it.
const STALL_ACCEPT: f64 = 1e-7;

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Residuals {
    rd: Vec<f64>,
    rp: Vec<f64>,
    ri: Vec<f64>,
}

impl QpProblem {
    fn n(&self) -> usize {
        self.p.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.p.iter().zip(&self.q))
            .map(|(x, (p, q))| 0.5 * p * x * x + q * x)
            .sum()
    }

    fn residuals(&self, x: &[f64], y: &[f64], z: &[f64], s: &[f64]) -> Residuals {
        let n = self.n();
        let mut rd: Vec<f64> = (0..n).map(|i| self.p[i] * x[i] + self.q[i]).collect();
        for (row, &yk) in self.eq.iter().zip(y) {
            row.axpy_t(yk, &mut rd);
        }
        for (row, &zk) in self.ineq.iter().zip(z) {
            row.axpy_t(zk, &mut rd);
        }
        let rp = self
            .eq
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.dot(x) - b)
            .collect();
        let ri = self
            .ineq
            .iter()
            .zip(self.h.iter().zip(s))
            .map(|(row, (h, s))| row.dot(x) + s - h)
            .collect();
        Residuals { rd, rp, ri }
    }

    /// Assembles `[P + G'WG, A'; A, 0]`.
    fn kkt_matrix(&self, w: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let me = self.eq.len();
        let mut m = DMatrix::<f64>::zeros(n + me, n + me);
        for i in 0..n {
            m[(i, i)] = self.p[i];
        }
        for (row, &wk) in self.ineq.iter().zip(w) {
            for (a, (&i, vi)) in row.idx.iter().zip(&row.val).enumerate() {
                for (&j, vj) in row.idx[a..].iter().zip(&row.val[a..]) {
                    let add = wk * vi * vj;
                    m[(i, j)] += add;
                    if i != j {
                        m[(j, i)] += add;
                    }
                }
            }
        }
        for (k, row) in self.eq.iter().enumerate() {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                m[(n + k, i)] = *v;
                m[(i, n + k)] = *v;
            }
        }
        m
    }

    pub fn solve(&self, opts: &QpOptions) -> Result<QpSolution, QpError> {
        let mut sol = self.interior_point(opts)?;
        if opts.polish && !self.ineq.is_empty() {
            if let Some(p) = self.polish(&sol) {
                sol = p;
            }
        }
        Ok(sol)
    }

    fn interior_point(&self, opts: &QpOptions) -> Result<QpSolution, QpError> {
        let n = self.n();
        let me = self.eq.len();
        let mi = self.ineq.len();
        let scale_q = 1.0 + norm_inf(&self.q);
        let scale_b = 1.0 + norm_inf(&self.b).max(norm_inf(&self.h));

        // Initial point from the W = I system.
        let ones = vec![1.0; mi];
        let base = self.kkt_matrix(&ones);
        let mut rhs = DVector::<f64>::zeros(n + me);
        for i in 0..n {
            rhs[i] = -self.q[i];
        }
        for (row, &h) in self.ineq.iter().zip(&self.h) {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                rhs[i] += v * h;
            }
        }
        for k in 0..me {
            rhs[n + k] = self.b[k];
        }
        let sol0 = Regularized::new(base, n).solve(&rhs).ok_or(QpError::Singular)?;
        let mut x: Vec<f64> = sol0.rows(0, n).iter().copied().collect();
        let mut y: Vec<f64> = sol0.rows(n, me).iter().copied().collect();
        if mi == 0 {
            let objective = self.objective(&x);
            return Ok(QpSolution {
                x,
                y,
                z: Vec::new(),
                objective,
                iterations: 0,
                polished: false,
            });
        }
        let s0: Vec<f64> = self
            .ineq
            .iter()
            .zip(&self.h)
            .map(|(row, h)| h - row.dot(&x))
            .collect();
        let z0: Vec<f64> = s0.iter().map(|v| -v).collect();
        let (mut s, mut z) = mehrotra_start(&s0, &z0);

        let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        // Best iterate so far, by the largest scaled residual, for when
        // ill-conditioning stalls progress just short of the tolerance.
        let mut best: Option<(f64, QpSolution)> = None;
        let mut since_best = 0;
        for iter in 0..opts.max_iter {
            let r = self.residuals(&x, &y, &z, &s);
            let primal = (norm_inf(&r.rp).max(norm_inf(&r.ri))) / scale_b;
            let dual = norm_inf(&r.rd) / scale_q;
            let gap: f64 = s.iter().zip(&z).map(|(a, b)| a * b).sum();
            let obj = self.objective(&x);
            last = (primal, dual, gap);
            let current = || QpSolution {
                x: x.clone(),
                y: y.clone(),
                z: z.clone(),
                objective: obj,
                iterations: iter,
                polished: false,
            };
            let measure = primal.max(dual).max(gap / (1.0 + obj.abs()));
            if measure <= opts.tol {
                return Ok(current());
            }
            if best.as_ref().is_none_or(|b| measure < b.0) {
                best = Some((measure, current()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= STALL_ITERATIONS {
                    if let Some(b) = best.take().filter(|b| b.0 <= STALL_ACCEPT) {
                        return Ok(b.1);
                    }
                }
            }
            let stalled = |best: Option<(f64, QpSolution)>| match best {
                Some((m, sol)) if m <= STALL_ACCEPT => Ok(sol),
                _ => Err(QpError::Singular),
            };
            let xn = norm_inf(&x);
            if !xn.is_finite() || xn > 1e10 {
                return Err(QpError::Unbounded {
                    iterations: iter,
                    norm: xn,
                });
            }
            if !norm_inf(&z).is_finite() || norm_inf(&z) > 1e14 {
                return Err(QpError::NotConverged {
                    iterations: iter,
                    primal,
                    dual,
                    gap,
                });
            }

            let mu = gap / mi as f64;
            let w: Vec<f64> = z.iter().zip(&s).map(|(z, s)| z / s).collect();
            let kkt = Regularized::new(self.kkt_matrix(&w), n);

            // Predictor.
            let rc_aff: Vec<f64> = s.iter().zip(&z).map(|(s, z)| s * z).collect();
            let Some((dx_a, _dy_a, dz_a, ds_a)) = self.newton(&kkt, &r, &rc_aff, &s, &z) else {
                return stalled(best);
            };
            let alpha_aff = step_to_boundary(&s, &ds_a).min(step_to_boundary(&z, &dz_a));
            let mu_aff: f64 = s
                .iter()
                .zip(&ds_a)
                .zip(z.iter().zip(&dz_a))
                .map(|((s, ds), (z, dz))| (s + alpha_aff * ds) * (z + alpha_aff * dz))
                .sum::<f64>()
                / mi as f64;
            let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
            let _ = dx_a;

            // Corrector.
            let rc: Vec<f64> = (0..mi)
                .map(|k| s[k] * z[k] + ds_a[k] * dz_a[k] - sigma * mu)
                .collect();
            let Some((dx, dy, dz, ds)) = self.newton(&kkt, &r, &rc, &s, &z) else {
                return stalled(best);
            };
            let alpha = (0.99 * step_to_boundary(&s, &ds).min(step_to_boundary(&z, &dz))).min(1.0);
            for i in 0..n {
                x[i] += alpha * dx[i];
            }
            for k in 0..me {
                y[k] += alpha * dy[k];
            }
            for k in 0..mi {
                s[k] += alpha * ds[k];
                z[k] += alpha * dz[k];
            }
        }
        if let Some((m, sol)) = best {
            if m <= STALL_ACCEPT {
                return Ok(sol);
            }
        }
        Err(QpError::NotConverged {
            iterations: opts.max_iter,
            primal: last.0,
            dual: last.1,
            gap: last.2,
        })
    }

    #[allow(clippy::type_complexity)]
    fn newton(
        &self,
        kkt: &Regularized,
        r: &Residuals,
        rc: &[f64],
        s: &[f64],
        z: &[f64],
    ) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.n();
        let me = self.eq.len();
        let mi = self.ineq.len();
        let t: Vec<f64> = (0..mi).map(|k| (z[k] * r.ri[k] - rc[k]) / s[k]).collect();
        let mut rhs = DVector::<f64>::zeros(n + me);
        for i in 0..n {
            rhs[i] = -r.rd[i];
        }
        for (row, &tk) in self.ineq.iter().zip(&t) {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                rhs[i] -= v * tk;
            }
        }
        for k in 0..me {
            rhs[n + k] = -r.rp[k];
        }
        let sol = kkt.solve(&rhs)?;
        let dx: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let dy: Vec<f64> = sol.rows(n, me).iter().copied().collect();
        let mut dz = Vec::with_capacity(mi);
        let mut ds = Vec::with_capacity(mi);
        for (k, row) in self.ineq.iter().enumerate() {
            let gdx = row.dot(&dx);
            dz.push(z[k] / s[k] * gdx + t[k]);
            ds.push(-r.ri[k] - gdx);
        }
        Some((dx, dy, dz, ds))
    }

    /// Re-solves the KKT system with the guessed active set as equalities.
    ///
    /// Degenerate vertices make the guessed active rows linearly dependent,
    /// which shows up as negative multipliers; those rows are dropped one at a
    /// time, most negative first.
    fn polish(&self, ipm: &QpSolution) -> Option<QpSolution> {
        let slack: Vec<f64> = self
            .ineq
            .iter()
            .zip(&self.h)
            .map(|(row, h)| h - row.dot(&ipm.x))
            .collect();
        let mut active: Vec<usize> = (0..self.ineq.len())
            .filter(|&k| ipm.z[k] > slack[k])
            .collect();
        for _ in 0..20 {
            match self.polish_active(ipm, &active)? {
                Polish::Done(sol) => return Some(sol),
                Polish::Drop(k) => active.retain(|&a| a != k),
                Polish::Add(k) => active.push(k),
            }
        }
        None
    }

    /// Solves the equality system of an active-set guess. `None` when the
    /// guess is unusable.
    fn polish_active(&self, ipm: &QpSolution, active: &[usize]) -> Option<Polish> {
        let n = self.n();
        let me = self.eq.len();
        let na = active.len();
        let dim = n + me + na;
        let mut m = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        for i in 0..n {
            m[(i, i)] = self.p[i];
            rhs[i] = -self.q[i];
        }
        let rows = self.eq.iter().zip(&self.b).chain(
            active
                .iter()
                .map(|&k| (&self.ineq[k], &self.h[k])),
        );
        for (k, (row, &rhs_k)) in rows.enumerate() {
            for (&i, v) in row.idx.iter().zip(&row.val) {
                m[(n + k, i)] = *v;
                m[(i, n + k)] = *v;
            }
            rhs[n + k] = rhs_k;
        }
        let sol = Regularized::new(m, n).solve(&rhs)?;
        let x: Vec<f64> = sol.rows(0, n).iter().copied().collect();
        let y: Vec<f64> = sol.rows(n, me).iter().copied().collect();
        let mut z = vec![0.0; self.ineq.len()];
        for (a, &k) in active.iter().enumerate() {
            z[k] = sol[n + me + a];
        }

        // Any KKT point of a convex QP is optimal, so the polished point only
        // has to certify itself. With flat directions it may differ from the
        // interior point.
        let ys = 1.0 + norm_inf(&y).max(norm_inf(&z));
        let feas_tol = 1e-9 * (1.0 + norm_inf(&self.h).max(norm_inf(&self.b)));
        for (row, b) in self.eq.iter().zip(&self.b) {
            if (row.dot(&x) - b).abs() > feas_tol {
                return None;
            }
        }
        if let Some(&worst) = active
            .iter()
            .filter(|&&k| z[k] < -1e-9 * ys)
            .min_by(|&&a, &&b| z[a].total_cmp(&z[b]))
        {
            return Some(Polish::Drop(worst));
        }
        let violated = (0..self.ineq.len())
            .map(|k| (k, self.ineq[k].dot(&x) - self.h[k]))
            .filter(|&(_, v)| v > feas_tol)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((k, _)) = violated {
            return if active.contains(&k) { None } else { Some(Polish::Add(k)) };
        }
        let mut rd: Vec<f64> = (0..n).map(|i| self.p[i] * x[i] + self.q[i]).collect();
        for (row, &yk) in self.eq.iter().zip(&y) {
            row.axpy_t(yk, &mut rd);
        }
        for (row, &zk) in self.ineq.iter().zip(&z) {
            row.axpy_t(zk, &mut rd);
        }
        if norm_inf(&rd) > 1e-9 * (1.0 + norm_inf(&self.q)).max(ys) {
            return None;
        }
        for zk in z.iter_mut() {
            *zk = zk.max(0.0);
        }
        let objective = self.objective(&x);
        Some(Polish::Done(QpSolution {
            x,
            y,
            z,
            objective,
            iterations: ipm.iterations,
            polished: true,
        }))
    }
}

enum Polish {
    Done(QpSolution),
    /// Release an active row with a negative multiplier.
    Drop(usize),
    /// Enforce a violated inactive row.
    Add(usize),
}

fn mehrotra_start(s0: &[f64], z0: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let min_s = s0.iter().copied().fold(f64::INFINITY, f64::min);
    let min_z = z0.iter().copied().fold(f64::INFINITY, f64::min);
    let ds = (-1.5 * min_s).max(0.0);
    let dz = (-1.5 * min_z).max(0.0);
    let mut s: Vec<f64> = s0.iter().map(|v| v + ds).collect();
    let mut z: Vec<f64> = z0.iter().map(|v| v + dz).collect();
    let sz: f64 = s.iter().zip(&z).map(|(a, b)| a * b).sum();
    let sum_s: f64 = s.iter().sum();
    let sum_z: f64 = z.iter().sum();
    if sz > 0.0 && sum_s > 0.0 && sum_z > 0.0 {
        let ds2 = 0.5 * sz / sum_z;
        let dz2 = 0.5 * sz / sum_s;
        s.iter_mut().for_each(|v| *v += ds2);
        z.iter_mut().for_each(|v| *v += dz2);
    }
    for v in s.iter_mut().chain(z.iter_mut()) {
        if !(v.is_finite() && *v > 1e-8) {
            *v = 1.0;
        }
    }
    (s, z)
}

fn step_to_boundary(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0, f64::min)
}

/// LU of a lightly regularized KKT matrix with iterative refinement against
/// the exact matrix.
struct Regularized {
    exact: DMatrix<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Regularized {
    /// `primal` is the size of the leading (positive semidefinite) block.
    fn new(exact: DMatrix<f64>, primal: usize) -> Self {
        let dim = exact.nrows();
        let scale = (0..dim).fold(1.0f64, |m, i| m.max(exact[(i, i)].abs()));
        let delta = 1e-13 * scale;
        let mut reg = exact.clone();
        for i in 0..dim {
            reg[(i, i)] += if i < primal { delta } else { -delta };
        }
        Regularized {
            exact,
            lu: reg.lu(),
        }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let mut x = self.lu.solve(rhs)?;
        for _ in 0..3 {
            let r = rhs - &self.exact * &x;
            let dx = self.lu.solve(&r)?;
            x += dx;
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }
}
