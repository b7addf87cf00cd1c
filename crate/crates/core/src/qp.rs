//! Dense convex quadratic programming.
//!
//! Solves `min 1/2 u^T P u + q^T u  s.t.  L u <= h,  D u = z` with a primal
//! active-set method. Each working-set subproblem is a KKT system solved by
//! LU with one step of iterative refinement, which keeps the returned
//! multipliers accurate to machine precision on the small problems the
//! controller produces. A feasible starting point comes from (in order) the
//! warm-start working set, the minimum-norm equality solution, or an
//! elastic phase that penalises constraint violation exactly.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Added to `P` when it is not safely positive definite.
pub const REGULARIZATION: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    l: DMatrix<f64>,
    h: DVector<f64>,
    d: DMatrix<f64>,
    z: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        l: DMatrix<f64>,
        h: DVector<f64>,
        d: DMatrix<f64>,
        z: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        if n == 0 {
            return Err(Error::Validation("QP needs at least one variable".into()));
        }
        if p.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if l.ncols() != n || l.nrows() != h.len() {
            return Err(Error::Validation(format!(
                "L is {}x{} with {} bounds, expected m x {n} with m bounds",
                l.nrows(),
                l.ncols(),
                h.len()
            )));
        }
        if d.ncols() != n || d.nrows() != z.len() {
            return Err(Error::Validation(format!(
                "D is {}x{} with {} right-hand sides, expected p x {n} with p entries",
                d.nrows(),
                d.ncols(),
                z.len()
            )));
        }
        if d.nrows() > n {
            return Err(Error::Validation(format!(
                "{} equality rows exceed {n} variables",
                d.nrows()
            )));
        }
        let asym = (&p - p.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::Validation(format!("P is not symmetric (|P - P^T| = {asym:.2e})")));
        }
        let finite = p.iter().chain(q.iter()).chain(l.iter()).chain(h.iter()).chain(d.iter()).chain(z.iter());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("QP data must be finite".into()));
        }
        Ok(Self { p, q, l, h, d, z })
    }

    /// Only inequality constraints.
    pub fn with_inequalities(p: DMatrix<f64>, q: DVector<f64>, l: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(p, q, l, h, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::with_inequalities(p, q, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.h.len()
    }

    pub fn n_eq(&self) -> usize {
        self.z.len()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.p * u)) + self.q.dot(u)
    }

    /// Same problem with `P` and `q` multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            p: &self.p * s,
            q: &self.q * s,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Infinity norms of the KKT conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub nu_eq: DVector<f64>,
    pub status: QpStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    /// Inequalities held active at the returned point, ascending.
    pub active_set: Vec<usize>,
    /// `P` was regularized by [`REGULARIZATION`].
    pub regularized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

fn residuals(
    prob: &QpProblem,
    u: &DVector<f64>,
    lambda: &DVector<f64>,
    nu: &DVector<f64>,
) -> KktResiduals {
    let stat = &prob.p * u + &prob.q + prob.l.transpose() * lambda + prob.d.transpose() * nu;
    let eq = &prob.d * u - &prob.z;
    let ineq = &prob.l * u - &prob.h;
    KktResiduals {
        stationarity: stat.amax(),
        primal_eq: if eq.is_empty() { 0.0 } else { eq.amax() },
        primal_ineq: ineq.iter().fold(0.0f64, |a, v| a.max(*v)),
        complementarity: lambda.component_mul(&ineq).iter().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// KKT residuals of `sol` with respect to `prob`.
pub fn kkt_residuals(prob: &QpProblem, sol: &QpSolution) -> Result<KktResiduals> {
    crate::error::check_len("primal", prob.dim(), sol.u.len())?;
    crate::error::check_len("inequality multipliers", prob.n_ineq(), sol.lambda_ineq.len())?;
    crate::error::check_len("equality multipliers", prob.n_eq(), sol.nu_eq.len())?;
    Ok(residuals(prob, &sol.u, &sol.lambda_ineq, &sol.nu_eq))
}

/// Solves `[P A^T; A 0] [x; y] = [g; c]`.
fn kkt_solve(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DVector<f64>,
    c: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let d = p.nrows();
    let k = a.nrows();
    let mut kk = DMatrix::zeros(d + k, d + k);
    kk.view_mut((0, 0), (d, d)).copy_from(p);
    kk.view_mut((0, d), (d, k)).copy_from(&a.transpose());
    kk.view_mut((d, 0), (k, d)).copy_from(a);
    let mut rhs = DVector::zeros(d + k);
    rhs.rows_mut(0, d).copy_from(g);
    rhs.rows_mut(d, k).copy_from(c);
    let lu = kk.clone().lu();
    let mut x = lu.solve(&rhs)?;
    let r = &rhs - &kk * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let res = (&rhs - &kk * &x).amax();
    let scale = 1.0 + rhs.amax() + kk.amax() * x.amax();
    if !x.iter().all(|v| v.is_finite()) || res > 1e-9 * scale {
        return None;
    }
    Some((x.rows(0, d).into_owned(), x.rows(d, k).into_owned()))
}

fn stack_rows(top: &DMatrix<f64>, l: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let n = top.ncols();
    let mut a = DMatrix::zeros(top.nrows() + rows.len(), n);
    a.rows_mut(0, top.nrows()).copy_from(top);
    for (k, &i) in rows.iter().enumerate() {
        a.row_mut(top.nrows() + k).copy_from(&l.row(i));
    }
    a
}

fn full_row_rank(a: &DMatrix<f64>) -> bool {
    if a.nrows() == 0 {
        return true;
    }
    if a.nrows() > a.ncols() {
        return false;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    smax > 0.0 && sv.min() > 1e-10 * smax
}

/// Working data shared by the phases: objective, inequalities and the
/// reduced (full row rank) equalities.
struct Core<'a> {
    p: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    l: &'a DMatrix<f64>,
    h: &'a DVector<f64>,
    de: &'a DMatrix<f64>,
    ze: &'a DVector<f64>,
}

struct Outcome {
    u: DVector<f64>,
    working: Vec<usize>,
    lambda_w: DVector<f64>,
    nu: DVector<f64>,
    converged: bool,
}

impl Core<'_> {
    fn max_violation(&self, u: &DVector<f64>) -> f64 {
        (self.l * u - self.h).iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v))
    }

    fn feasibility_tol(&self) -> f64 {
        1e-12 * (1.0 + self.h.amax())
    }

    /// Minimizer subject to the equalities and the working set held as equalities.
    fn solve_on(&self, working: &[usize]) -> Option<DVector<f64>> {
        let a = stack_rows(self.de, self.l, working);
        let mut c = DVector::zeros(a.nrows());
        c.rows_mut(0, self.ze.len()).copy_from(self.ze);
        for (k, &i) in working.iter().enumerate() {
            c[self.ze.len() + k] = self.h[i];
        }
        kkt_solve(self.p, &a, &(-self.q), &c).map(|(u, _)| u)
    }

    /// Primal active-set iterations from a feasible `u`.
    fn iterate(&self, mut u: DVector<f64>, mut working: Vec<usize>, max_iter: usize, iters: &mut usize) -> Outcome {
        let r = self.de.nrows();
        let m = self.h.len();
        for _ in 0..max_iter {
            *iters += 1;
            let a = stack_rows(self.de, self.l, &working);
            let grad = self.p * &u + self.q;
            let Some((step, mult)) = kkt_solve(self.p, &a, &(-&grad), &DVector::zeros(a.nrows())) else {
                log::warn!("singular KKT system with {} active rows", a.nrows());
                break;
            };
            if step.amax() <= 1e-11 * (1.0 + u.amax()) {
                u += &step;
                let lambda = mult.rows(r, working.len()).into_owned();
                let thresh = -1e-12 * (1.0 + lambda.amax());
                // most negative multiplier, lowest constraint index on ties
                let mut drop: Option<(usize, f64)> = None;
                for (k, &lam) in lambda.iter().enumerate() {
                    if lam < thresh && drop.is_none_or(|(_, best)| lam < best) {
                        drop = Some((k, lam));
                    }
                }
                match drop {
                    None => {
                        return Outcome {
                            u,
                            working,
                            lambda_w: lambda,
                            nu: mult.rows(0, r).into_owned(),
                            converged: true,
                        }
                    }
                    Some((k, _)) => {
                        working.remove(k);
                    }
                }
            } else {
                let mut alpha = 1.0;
                let mut block = None;
                let snorm = step.norm();
                for i in 0..m {
                    if working.binary_search(&i).is_ok() {
                        continue;
                    }
                    let row = self.l.row(i);
                    let lp = row.dot(&step.transpose());
                    if lp <= 1e-12 * row.norm() * snorm {
                        continue;
                    }
                    let slack = (self.h[i] - row.dot(&u.transpose())).max(0.0);
                    let ai = slack / lp;
                    if ai < alpha {
                        alpha = ai;
                        block = Some(i);
                    }
                }
                u.axpy(alpha, &step, 1.0);
                if let Some(i) = block {
                    let pos = working.binary_search(&i).unwrap_err();
                    working.insert(pos, i);
                }
            }
        }
        let k = working.len();
        Outcome {
            u,
            working,
            lambda_w: DVector::zeros(k),
            nu: DVector::zeros(r),
            converged: false,
        }
    }
}

/// Finds a feasible point by minimizing the objective plus an exact penalty
/// `M (s + s^2 / 2)` on a common slack `s >= max(L u - h)`. Returns the point
/// and its working set, or `None` if even a large penalty leaves `s > 0`.
fn elastic_start(core: &Core<'_>, u0: &DVector<f64>, max_iter: usize, iters: &mut usize) -> Option<(DVector<f64>, Vec<usize>)> {
    let n = core.p.nrows();
    let m = core.h.len();
    let r = core.de.nrows();
    let s0 = core.max_violation(u0).max(0.0);
    let scale = 1.0 + core.q.amax() + core.p.amax() * (1.0 + u0.amax());

    let mut le = DMatrix::zeros(m + 1, n + 1);
    le.view_mut((0, 0), (m, n)).copy_from(core.l);
    for i in 0..=m {
        le[(i, n)] = -1.0;
    }
    let mut he = DVector::zeros(m + 1);
    he.rows_mut(0, m).copy_from(core.h);
    let mut de = DMatrix::zeros(r, n + 1);
    de.view_mut((0, 0), (r, n)).copy_from(core.de);

    for penalty in [1e3, 1e6, 1e9] {
        let big = penalty * scale;
        let mut pe = DMatrix::zeros(n + 1, n + 1);
        pe.view_mut((0, 0), (n, n)).copy_from(core.p);
        pe[(n, n)] = big;
        let mut qe = DVector::zeros(n + 1);
        qe.rows_mut(0, n).copy_from(core.q);
        qe[n] = big;
        let elastic = Core {
            p: &pe,
            q: &qe,
            l: &le,
            h: &he,
            de: &de,
            ze: core.ze,
        };
        let mut start = DVector::zeros(n + 1);
        start.rows_mut(0, n).copy_from(u0);
        start[n] = s0 + 1.0;
        let out = elastic.iterate(start, Vec::new(), max_iter, iters);
        let s = out.u[n];
        let u = out.u.rows(0, n).into_owned();
        if out.converged && s <= core.feasibility_tol() && core.max_violation(&u) <= core.feasibility_tol() {
            let working = out.working.into_iter().filter(|&i| i < m).collect();
            return Some((u, working));
        }
    }
    None
}

/// Solves `prob`, optionally starting from a guessed active set.
pub fn solve_qp(prob: &QpProblem, warm_start: Option<&[usize]>, opts: &QpOptions) -> QpSolution {
    let n = prob.dim();
    let m = prob.n_ineq();
    let peq = prob.n_eq();

    let mut regularized = false;
    let shifted = &prob.p - DMatrix::identity(n, n) * REGULARIZATION;
    let p = if shifted.cholesky().is_some() {
        prob.p.clone()
    } else {
        regularized = true;
        log::debug!("QP objective regularized by {REGULARIZATION:e} I");
        &prob.p + DMatrix::identity(n, n) * REGULARIZATION
    };

    let infeasible = |u: DVector<f64>, iterations: usize| {
        let lambda = DVector::zeros(m);
        let nu = DVector::zeros(peq);
        let kkt = residuals(prob, &u, &lambda, &nu);
        QpSolution {
            u,
            lambda_ineq: lambda,
            nu_eq: nu,
            status: QpStatus::Infeasible,
            kkt,
            iterations,
            active_set: Vec::new(),
            regularized,
        }
    };

    // Reduce the equalities to independent rows: D_r = U_r^T D, nu = U_r nu_r.
    let (de, ze, ur) = if peq == 0 {
        (DMatrix::zeros(0, n), DVector::zeros(0), DMatrix::zeros(0, 0))
    } else {
        let svd = prob.d.clone().svd(true, false);
        let u_full = svd.u.expect("requested U");
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * smax.max(1.0))
            .count();
        let ur = u_full.columns(0, rank).into_owned();
        let ze = ur.transpose() * &prob.z;
        let lost = &prob.z - &ur * &ze;
        if lost.amax() > opts.tol * (1.0 + prob.z.amax()) {
            log::debug!("inconsistent equality constraints (residual {:.2e})", lost.amax());
            return infeasible(DVector::zeros(n), 0);
        }
        (ur.transpose() * &prob.d, ze, ur)
    };

    let core = Core {
        p: &p,
        q: &prob.q,
        l: &prob.l,
        h: &prob.h,
        de: &de,
        ze: &ze,
    };
    let mut iterations = 0;

    let warm = warm_start.and_then(|ws| {
        let mut w: Vec<usize> = ws.iter().copied().filter(|&i| i < m).collect();
        w.sort_unstable();
        w.dedup();
        if !full_row_rank(&stack_rows(&de, &prob.l, &w)) {
            return None;
        }
        let u = core.solve_on(&w)?;
        (core.max_violation(&u) <= core.feasibility_tol()).then_some((u, w))
    });

    let start = match warm {
        Some(s) => Some(s),
        None => {
            let u0 = if de.nrows() == 0 {
                DVector::zeros(n)
            } else {
                // rows of D_r are orthogonal, so this is the minimum-norm solution
                let g = &de * de.transpose();
                de.transpose() * g.lu().solve(&ze).unwrap_or_else(|| DVector::zeros(ze.len()))
            };
            if m == 0 || core.max_violation(&u0) <= 0.0 {
                Some((u0, Vec::new()))
            } else {
                let found = elastic_start(&core, &u0, opts.max_iter, &mut iterations);
                if found.is_none() {
                    return infeasible(u0, iterations);
                }
                found
            }
        }
    };
    let (u_start, w_start) = start.expect("start point resolved above");

    let remaining = opts.max_iter.saturating_sub(iterations).max(1);
    let out = core.iterate(u_start, w_start, remaining, &mut iterations);

    let mut lambda = DVector::zeros(m);
    for (k, &i) in out.working.iter().enumerate() {
        lambda[i] = out.lambda_w[k];
    }
    let nu = if peq == 0 { DVector::zeros(0) } else { &ur * &out.nu };
    let kkt = residuals(prob, &out.u, &lambda, &nu);
    QpSolution {
        u: out.u,
        lambda_ineq: lambda,
        nu_eq: nu,
        status: if out.converged { QpStatus::Optimal } else { QpStatus::MaxIter },
        kkt,
        iterations,
        active_set: out.working,
        regularized,
    }
}

/// Active-set solver that warm-starts each solve from the previous optimal
/// working set.
#[derive(Clone, Debug, Default)]
pub struct ActiveSetSolver {
    pub options: QpOptions,
    working: Option<(usize, usize, Vec<usize>)>,
}

impl ActiveSetSolver {
    pub fn new(options: QpOptions) -> Self {
        Self { options, working: None }
    }

    pub fn solve(&mut self, prob: &QpProblem) -> QpSolution {
        let warm = match &self.working {
            Some((n, m, w)) if *n == prob.dim() && *m == prob.n_ineq() => Some(w.as_slice()),
            _ => None,
        };
        let sol = solve_qp(prob, warm, &self.options);
        if sol.status == QpStatus::Optimal {
            self.working = Some((prob.dim(), prob.n_ineq(), sol.active_set.clone()));
        }
        sol
    }

    pub fn reset(&mut self) {
        self.working = None;
    }
}
