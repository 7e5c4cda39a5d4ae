//! Small dense kernels: LU solves with a condition estimate, a damped 2-D
//! Newton iteration with finite-difference Jacobian, and a dual active-set
//! solver for strictly convex QPs.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{FlexError, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Pivots smaller than this multiple of ‖A‖∞ are treated as zero.
pub const SINGULAR_PIVOT_REL: f64 = 1e-13;

fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FlexError::NonFinite(what.into()))
    }
}

fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn norm_one(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// LU factorization with partial pivoting.
pub struct Lu {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
    norm1: f64,
}

impl Lu {
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(FlexError::Dimension(format!(
                "LU needs a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        ensure_finite(a, "LU input")?;
        let n = a.nrows();
        let threshold = SINGULAR_PIVOT_REL * norm_inf(a).max(f64::MIN_POSITIVE);
        let lu = a.clone().lu();
        let u = lu.u();
        let pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if n > 0 && !(pivot > threshold) {
            return Err(FlexError::Singular { pivot, threshold });
        }
        Ok(Self {
            lu,
            n,
            norm1: norm_one(a),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.n {
            return Err(FlexError::Dimension(format!(
                "rhs has {} rows, expected {}",
                b.nrows(),
                self.n
            )));
        }
        self.lu
            .solve(b)
            .ok_or(FlexError::Singular { pivot: 0.0, threshold: 0.0 })
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.n {
            return Err(FlexError::Dimension(format!(
                "rhs has {} rows, expected {}",
                b.len(),
                self.n
            )));
        }
        self.lu
            .solve(b)
            .ok_or(FlexError::Singular { pivot: 0.0, threshold: 0.0 })
    }

    /// Solves `Aᵀ y = c` with the factors of `A` (`P A = L U`).
    fn solve_transpose(&self, c: &DVector<f64>) -> DVector<f64> {
        let w = self
            .lu
            .u()
            .tr_solve_upper_triangular(c)
            .unwrap_or_else(|| c.clone());
        let mut v = self
            .lu
            .l()
            .tr_solve_lower_triangular(&w)
            .unwrap_or(w);
        self.lu.p().inv_permute_rows(&mut v);
        v
    }

    /// Hager's estimate of κ₁(A) = ‖A‖₁ ‖A⁻¹‖₁.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = DVector::from_element(n, 1.0 / n as f64);
        let mut estimate = 0.0;
        for _ in 0..5 {
            let y = match self.solve_vec(&x) {
                Ok(y) => y,
                Err(_) => return f64::INFINITY,
            };
            estimate = y.iter().map(|v| v.abs()).sum::<f64>();
            let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let z = self.solve_transpose(&xi);
            let (j, zmax) = z
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.abs()))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            if zmax <= z.dot(&x) {
                break;
            }
            x = DVector::zeros(n);
            x[j] = 1.0;
        }
        self.norm1 * estimate
    }
}

#[derive(Debug, Clone)]
pub struct LuSolve {
    pub x: DMatrix<f64>,
    pub condition: f64,
}

/// Solves `A X = B` by LU with partial pivoting and reports κ₁(A).
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<LuSolve> {
    ensure_finite(b, "LU right-hand side")?;
    let lu = Lu::factor(a)?;
    let x = lu.solve(b)?;
    Ok(LuSolve {
        x,
        condition: lu.condition_estimate(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            fd_step: 1e-6,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonResult {
    pub x: [f64; 2],
    pub residual: f64,
    pub iterations: usize,
}

fn inf_norm2(v: [f64; 2]) -> f64 {
    v[0].abs().max(v[1].abs())
}

/// Finds a root of `f: R² → R²` with a central-difference Jacobian and step
/// halving whenever the residual would grow. Failed evaluations count as
/// residual growth.
pub fn newton_2d<F>(mut f: F, x0: [f64; 2], opts: &NewtonOptions) -> Result<NewtonResult>
where
    F: FnMut([f64; 2]) -> Result<[f64; 2]>,
{
    let mut x = x0;
    let mut fx = f(x)?;
    let mut res = inf_norm2(fx);
    for it in 0..=opts.max_iter {
        if res <= opts.tol {
            return Ok(NewtonResult {
                x,
                residual: res,
                iterations: it,
            });
        }
        if it == opts.max_iter {
            break;
        }
        let h = opts.fd_step;
        let mut jac = [[0.0; 2]; 2];
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = f(xp)?;
            let fm = f(xm)?;
            for i in 0..2 {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            break;
        }
        let dx = [
            -(jac[1][1] * fx[0] - jac[0][1] * fx[1]) / det,
            -(-jac[1][0] * fx[0] + jac[0][0] * fx[1]) / det,
        ];
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial = [x[0] + alpha * dx[0], x[1] + alpha * dx[1]];
            if let Ok(ft) = f(trial) {
                let rt = inf_norm2(ft);
                if rt.is_finite() && rt < res {
                    x = trial;
                    fx = ft;
                    res = rt;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(FlexError::NoConvergence {
        iterations: opts.max_iter,
        residual: res,
        best: Some(x),
    })
}

/// `minimize ½ zᵀHz + gᵀz  s.t.  A_ineq z ≤ b_ineq,  A_eq z = b_eq`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_ineq = a;
        self.b_ineq = b;
        self
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(FlexError::Dimension("H must be n×n".into()));
        }
        if self.a_ineq.ncols() != n || self.a_ineq.nrows() != self.b_ineq.len() {
            return Err(FlexError::Dimension("inequality block".into()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(FlexError::Dimension("equality block".into()));
        }
        for (m, what) in [
            (&self.h, "H"),
            (&self.a_ineq, "A_ineq"),
            (&self.a_eq, "A_eq"),
        ] {
            ensure_finite(m, what)?;
        }
        if !self.g.iter().chain(&self.b_ineq).chain(&self.b_eq).all(|v| v.is_finite()) {
            return Err(FlexError::NonFinite("QP vectors".into()));
        }
        let scale = self.h.amax().max(1.0);
        if (&self.h - self.h.transpose()).amax() > 1e-10 * scale {
            return Err(FlexError::InvalidCase("QP Hessian is not symmetric".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    pub feas_tol: f64,
    pub kkt_tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-10,
            kkt_tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Indices of active inequality rows, ascending.
    pub active: Vec<usize>,
    pub lambda_ineq: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// A ridge was added because H was only semidefinite.
    pub regularized: bool,
}

impl QpSolution {
    /// ‖Hz + g + A_eqᵀλ_eq + A_ineqᵀλ_ineq‖∞.
    pub fn kkt_residual(&self, p: &QpProblem) -> f64 {
        let grad = &p.h * &self.z
            + &p.g
            + p.a_eq.transpose() * &self.lambda_eq
            + p.a_ineq.transpose() * &self.lambda_ineq;
        grad.amax()
    }

    /// Largest violation of any constraint.
    pub fn infeasibility(&self, p: &QpProblem) -> f64 {
        let ineq = (&p.a_ineq * &self.z - &p.b_ineq)
            .iter()
            .fold(0.0_f64, |m, &v| m.max(v));
        let eq = if p.b_eq.is_empty() {
            0.0
        } else {
            (&p.a_eq * &self.z - &p.b_eq).amax()
        };
        ineq.max(eq)
    }
}

struct Kkt<'a> {
    h: &'a DMatrix<f64>,
    a_eq: &'a DMatrix<f64>,
    a_ineq: &'a DMatrix<f64>,
}

impl Kkt<'_> {
    /// Factors `[H Aᵀ; A 0]` for the equalities plus the working set.
    fn factor(&self, working: &[usize]) -> Result<Lu> {
        let n = self.h.nrows();
        let me = self.a_eq.nrows();
        let k = n + me + working.len();
        let mut m = DMatrix::zeros(k, k);
        m.view_mut((0, 0), (n, n)).copy_from(self.h);
        for r in 0..me {
            for c in 0..n {
                m[(n + r, c)] = self.a_eq[(r, c)];
                m[(c, n + r)] = self.a_eq[(r, c)];
            }
        }
        for (w, &i) in working.iter().enumerate() {
            for c in 0..n {
                m[(n + me + w, c)] = self.a_ineq[(i, c)];
                m[(c, n + me + w)] = self.a_ineq[(i, c)];
            }
        }
        Lu::factor(&m)
    }
}

/// Dual active-set method (Goldfarb–Idnani family): starts at the
/// equality-constrained minimizer and adds the most violated inequality
/// until the point is primal feasible, dropping rows whose multiplier would
/// turn negative. A constraint that cannot be satisfied by any primal step
/// and has no droppable partner proves infeasibility.
pub fn qp_solve(p: &QpProblem) -> Result<QpSolution> {
    qp_solve_with(p, &QpOptions::default())
}

pub fn qp_solve_with(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    p.check()?;
    let n = p.dim();
    let me = p.a_eq.nrows();
    let mi = p.a_ineq.nrows();

    let regularized = p.h.clone().cholesky().is_none();
    let h = if regularized {
        let ridge = 1e-9 * p.h.diagonal().amax().max(1.0);
        &p.h + DMatrix::identity(n, n) * ridge
    } else {
        p.h.clone()
    };
    let kkt = Kkt {
        h: &h,
        a_eq: &p.a_eq,
        a_ineq: &p.a_ineq,
    };

    let row_norm: Vec<f64> = (0..mi).map(|i| p.a_ineq.row(i).norm().max(1e-300)).collect();
    let mut working: Vec<usize> = Vec::new();
    let mut lambda_w: Vec<f64> = Vec::new();

    let solve_point = |working: &[usize]| -> Result<(DVector<f64>, DVector<f64>)> {
        let lu = kkt.factor(working).map_err(|e| match e {
            FlexError::Singular { .. } => {
                FlexError::Infeasible {
                    detail: "linearly dependent equality constraints".into(),
                    rows: Vec::new(),
                }
            }
            other => other,
        })?;
        let mut rhs = DVector::zeros(n + me + working.len());
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        rhs.rows_mut(n, me).copy_from(&p.b_eq);
        for (w, &i) in working.iter().enumerate() {
            rhs[n + me + w] = p.b_ineq[i];
        }
        let sol = lu.solve_vec(&rhs)?;
        Ok((sol.rows(0, n).into_owned(), sol.rows(n, me + working.len()).into_owned()))
    };

    let (mut z, mut mult) = solve_point(&working)?;
    let mut lambda_eq: DVector<f64> = mult.rows(0, me).into_owned();
    let mut iterations = 0;

    loop {
        iterations += 1;
        if iterations > opts.max_iter {
            return Err(FlexError::NoConvergence {
                iterations,
                residual: f64::NAN,
                best: None,
            });
        }
        // most violated inequality, scaled by row norm
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..mi {
            if working.contains(&i) {
                continue;
            }
            let slack = p.a_ineq.row(i).dot(&z.transpose()) - p.b_ineq[i];
            let tol = opts.feas_tol * (1.0 + p.b_ineq[i].abs());
            if slack > tol {
                let scaled = slack / row_norm[i];
                if pick.is_none_or(|(_, s)| scaled > s) {
                    pick = Some((i, scaled));
                }
            }
        }
        let Some((j, _)) = pick else { break };

        let a_j = p.a_ineq.row(j).transpose();
        let mut lambda_j = 0.0;
        loop {
            let lu = kkt.factor(&working)?;
            let mut rhs = DVector::zeros(n + me + working.len());
            rhs.rows_mut(0, n).copy_from(&(-&a_j));
            let step = lu.solve_vec(&rhs)?;
            let dz = step.rows(0, n).into_owned();
            let dmu = step.rows(n, me + working.len()).into_owned();

            let curvature = -a_j.dot(&dz);
            let violation = a_j.dot(&z) - p.b_ineq[j];
            let primal_possible = dz.amax() > 1e-12 * (1.0 + a_j.amax()) && curvature > 0.0;
            let t1 = if primal_possible {
                violation.max(0.0) / curvature
            } else {
                f64::INFINITY
            };
            let mut t2 = f64::INFINITY;
            let mut blocking = None;
            for (w, &lam) in lambda_w.iter().enumerate() {
                let d = dmu[me + w];
                if d < -1e-14 {
                    let t = lam / -d;
                    if t < t2 {
                        t2 = t;
                        blocking = Some(w);
                    }
                }
            }
            if !t1.is_finite() && !t2.is_finite() {
                return Err(FlexError::Infeasible {
                    detail: format!("inequality {j} cannot be satisfied together with the working set"),
                    rows: std::iter::once(j).chain(working.iter().copied()).collect(),
                });
            }
            let t = t1.min(t2);
            if t1.is_finite() {
                z += &dz * t;
            }
            for (w, lam) in lambda_w.iter_mut().enumerate() {
                *lam = (*lam + t * dmu[me + w]).max(0.0);
            }
            lambda_j += t;
            if t2 < t1 {
                let w = blocking.expect("blocking row exists when t2 is finite");
                working.remove(w);
                lambda_w.remove(w);
                continue;
            }
            working.push(j);
            lambda_w.push(lambda_j);
            break;
        }
        // re-anchor the iterate on the working set to shed drift
        let (z_new, mult_new) = solve_point(&working)?;
        z = z_new;
        mult = mult_new;
        lambda_eq = mult.rows(0, me).into_owned();
        for (w, lam) in lambda_w.iter_mut().enumerate() {
            *lam = mult[me + w].max(0.0);
        }
    }

    let mut lambda_ineq = DVector::zeros(mi);
    for (w, &i) in working.iter().enumerate() {
        lambda_ineq[i] = lambda_w[w];
    }
    let mut active = working.clone();
    active.sort_unstable();

    if regularized && z.amax() > 1e8 {
        return Err(FlexError::Unbounded);
    }
    let objective = p.objective(&z);
    Ok(QpSolution {
        z,
        active,
        lambda_ineq,
        lambda_eq,
        objective,
        iterations,
        regularized,
    })
}
