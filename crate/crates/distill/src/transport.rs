//! Discrete optimal transport: cost matrices, the entropic-regularized
//! Sinkhorn solver, exact small-instance oracles, and the transport-cost
//! gradient with respect to one source point.
//!
//! Two Sinkhorn variants share one fixed point. The plain scaling variant
//! (`K = exp(-C/ε)`, alternating `v ← b/(Kᵀu)`, `u ← a/(Kv)`) is the fast
//! runtime path and is what guided sampling runs for a handful of
//! iterations. The log-domain variant performs the same updates on dual
//! potentials with log-sum-exp, which stays stable for small ε, and warm
//! starts through an ε-scaling ladder when given a generous iteration
//! budget; at any shared ε both variants converge to the same plan.
//!
//! The exact solvers exist to check everything else: [`exact_1d`] is sorted
//! quantile matching (optimal in 1-D for any convex cost of the distance),
//! and [`exact_small`] is a textbook transportation simplex with Bland's
//! rule, guarded to tiny instances.

use nalgebra::{DMatrix, DVector};

use crate::numerics::{logsumexp, Point};
use crate::{Error, Result};

/// Ground metrics for transport costs.
///
/// `Euclidean` is the default; `SqEuclidean` is available because its
/// gradient is smooth at coincident points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SqEuclidean,
}

impl Metric {
    pub fn distance(&self, x: &Point, y: &Point) -> f64 {
        let d2 = (x - y).norm_squared();
        match self {
            Metric::Euclidean => d2.sqrt(),
            Metric::SqEuclidean => d2,
        }
    }

    /// ∇_x d(x, y); zero at coincidence for the euclidean metric by
    /// convention.
    pub fn gradient(&self, x: &Point, y: &Point) -> Point {
        let diff = x - y;
        match self {
            Metric::Euclidean => {
                let n = diff.norm();
                if n == 0.0 {
                    diff * 0.0
                } else {
                    diff / n
                }
            }
            Metric::SqEuclidean => diff * 2.0,
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "sq_euclidean" => Ok(Metric::SqEuclidean),
            other => Err(Error::Config(format!(
                "unknown metric `{other}` (expected euclidean | sq_euclidean)"
            ))),
        }
    }
}

/// A weighted point set: support points plus mass coefficients summing to 1.
#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    points: Vec<Point>,
    masses: Vec<f64>,
}

const MASS_SUM_TOL: f64 = 1e-9;

impl DiscreteDistribution {
    pub fn new(points: Vec<Point>, masses: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("distribution support"));
        }
        if points.len() != masses.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: masses.len(),
            });
        }
        let d = points[0].len();
        for p in &points {
            if p.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.len(),
                });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("support point".into()));
            }
        }
        if masses.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::NotNormalized(f64::NAN));
        }
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > MASS_SUM_TOL {
            return Err(Error::NotNormalized(sum));
        }
        Ok(Self { points, masses })
    }

    /// Equal masses 1/n over the given support.
    pub fn uniform(points: Vec<Point>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("distribution support"));
        }
        let masses = vec![1.0 / n as f64; n];
        Self::new(points, masses)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
}

/// A coupling matrix with the cost it was solved against.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// Coupling γ (n × m, nonnegative).
    pub gamma: DMatrix<f64>,
    /// The cost matrix the plan was computed for.
    pub cost: DMatrix<f64>,
    /// ⟨γ, C⟩.
    pub value: f64,
    /// max_i |Σ_j γ_ij - a_i| — diagnostic, not an enforced postcondition.
    pub max_row_residual: f64,
    /// max_j |Σ_i γ_ij - b_j|.
    pub max_col_residual: f64,
}

impl TransportPlan {
    fn from_gamma(gamma: DMatrix<f64>, cost: DMatrix<f64>, a: &[f64], b: &[f64]) -> Self {
        let value = gamma.iter().zip(cost.iter()).map(|(g, c)| g * c).sum();
        let mut max_row = 0.0f64;
        for (row, &mass) in gamma.row_iter().zip(a) {
            max_row = max_row.max((row.iter().sum::<f64>() - mass).abs());
        }
        let mut max_col = 0.0f64;
        for (col, &mass) in gamma.column_iter().zip(b) {
            max_col = max_col.max((col.iter().sum::<f64>() - mass).abs());
        }
        Self {
            gamma,
            cost,
            value,
            max_row_residual: max_row,
            max_col_residual: max_col,
        }
    }
}

fn project_unit(p: &Point) -> Result<Point> {
    let n = p.norm();
    if n == 0.0 {
        return Err(Error::InvalidParameter {
            name: "project_sphere",
            reason: "cannot project a zero-norm point onto the unit sphere".into(),
        });
    }
    Ok(p / n)
}

/// Pairwise ground costs C_ij = d(x_i, k_j), with optional unit-norm
/// projection of both sides first.
pub fn cost_matrix(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    metric: Metric,
    project_sphere: bool,
) -> Result<DMatrix<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let xs: Vec<Point> = if project_sphere {
        a.points().iter().map(project_unit).collect::<Result<_>>()?
    } else {
        a.points().to_vec()
    };
    let ys: Vec<Point> = if project_sphere {
        b.points().iter().map(project_unit).collect::<Result<_>>()?
    } else {
        b.points().to_vec()
    };
    Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
        metric.distance(&xs[i], &ys[j])
    }))
}

fn check_problem(a: &DiscreteDistribution, b: &DiscreteDistribution, c: &DMatrix<f64>) -> Result<()> {
    if c.nrows() != a.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: c.nrows(),
        });
    }
    if c.ncols() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            got: c.ncols(),
        });
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    Ok(())
}

/// Entropic-regularized transport after a fixed number of alternating
/// scaling updates.
///
/// One iteration is `v ← b/(Kᵀu)` then `u ← a/(Kv)` starting from `u = 1`,
/// so row marginals are exact after every full iteration and column
/// marginals converge. `log_domain` computes the same fixed point through
/// dual potentials and log-sum-exp, with an ε-scaling warm start when the
/// iteration budget allows; use it whenever ε is small relative to the
/// cost range. The scaling path detects underflow and refuses rather than
/// returning a denormal-ridden plan.
pub fn sinkhorn(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    c: &DMatrix<f64>,
    epsilon: f64,
    iters: usize,
    log_domain: bool,
) -> Result<TransportPlan> {
    check_problem(a, b, c)?;
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            reason: format!("must be positive and finite, got {epsilon}"),
        });
    }
    if iters < 1 {
        return Err(Error::InvalidParameter {
            name: "iters",
            reason: "need at least one iteration".into(),
        });
    }
    if log_domain {
        sinkhorn_log(a, b, c, epsilon, iters)
    } else {
        sinkhorn_scaling(a, b, c, epsilon, iters)
    }
}

fn sinkhorn_scaling(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    c: &DMatrix<f64>,
    epsilon: f64,
    iters: usize,
) -> Result<TransportPlan> {
    let (n, m) = (a.len(), b.len());
    let k = c.map(|v| (-v / epsilon).exp());
    let mut u = vec![1.0f64; n];
    let mut v = vec![1.0f64; m];
    for _ in 0..iters {
        for j in 0..m {
            let ktu: f64 = (0..n).map(|i| k[(i, j)] * u[i]).sum();
            if ktu <= f64::MIN_POSITIVE {
                return Err(Error::ScalingUnderflow);
            }
            v[j] = b.masses()[j] / ktu;
        }
        for i in 0..n {
            let kv: f64 = (0..m).map(|j| k[(i, j)] * v[j]).sum();
            if kv <= f64::MIN_POSITIVE {
                return Err(Error::ScalingUnderflow);
            }
            u[i] = a.masses()[i] / kv;
        }
    }
    let gamma = DMatrix::from_fn(n, m, |i, j| u[i] * k[(i, j)] * v[j]);
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(Error::ScalingUnderflow);
    }
    Ok(TransportPlan::from_gamma(
        gamma,
        c.clone(),
        a.masses(),
        b.masses(),
    ))
}

/// Budget threshold below which the log-domain path runs plain alternating
/// updates only (mirroring the scaling variant update for update).
const ANNEAL_MIN_BUDGET: usize = 100;

/// All the state the log-domain solver threads through its phases.
struct LogSolver<'p> {
    n: usize,
    m: usize,
    c: &'p DMatrix<f64>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    a: &'p [f64],
    b: &'p [f64],
    epsilon: f64,
    /// Potentials x = [f; g] with f ≡ ε·log u, g ≡ ε·log v.
    x: Vec<f64>,
}

impl<'p> LogSolver<'p> {
    fn new(
        a: &'p DiscreteDistribution,
        b: &'p DiscreteDistribution,
        c: &'p DMatrix<f64>,
        epsilon: f64,
    ) -> Self {
        let to_log = |v: &f64| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY };
        Self {
            n: a.len(),
            m: b.len(),
            c,
            log_a: a.masses().iter().map(to_log).collect(),
            log_b: b.masses().iter().map(to_log).collect(),
            a: a.masses(),
            b: b.masses(),
            epsilon,
            x: vec![0.0; a.len() + b.len()],
        }
    }

    /// One over-relaxed sweep (g update then f update, matching the scaling
    /// variant's v-then-u order; ω = 1 is the plain update).
    #[allow(clippy::needless_range_loop)]
    fn sweep(&mut self, eps: f64, omega: f64) {
        let (n, m) = (self.n, self.m);
        let mut buf = vec![0.0f64; n.max(m)];
        let (f, g) = self.x.split_at_mut(n);
        for j in 0..m {
            for i in 0..n {
                buf[i] = (f[i] - self.c[(i, j)]) / eps;
            }
            let upd = if self.log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * (self.log_b[j] - logsumexp(&buf[..n]))
            };
            g[j] = if upd.is_finite() && g[j].is_finite() {
                (1.0 - omega) * g[j] + omega * upd
            } else {
                upd
            };
        }
        for i in 0..n {
            for j in 0..m {
                buf[j] = (g[j] - self.c[(i, j)]) / eps;
            }
            let upd = if self.log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                eps * (self.log_a[i] - logsumexp(&buf[..m]))
            };
            f[i] = if upd.is_finite() && f[i].is_finite() {
                (1.0 - omega) * f[i] + omega * upd
            } else {
                upd
            };
        }
    }

    fn plan_entry(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let lp = (x[i] + x[self.n + j] - self.c[(i, j)]) / self.epsilon;
        if lp == f64::NEG_INFINITY {
            0.0
        } else {
            lp.exp()
        }
    }

    /// Worst absolute marginal deviation of the plan implied by `x`.
    fn residual_of(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            let s: f64 = (0..self.m).map(|j| self.plan_entry(x, i, j)).sum();
            worst = worst.max((s - self.a[i]).abs());
        }
        for j in 0..self.m {
            let s: f64 = (0..self.n).map(|i| self.plan_entry(x, i, j)).sum();
            worst = worst.max((s - self.b[j]).abs());
        }
        worst
    }

    fn residual(&self) -> f64 {
        self.residual_of(&self.x)
    }

    /// Newton steps on the pinned dual system (g[m-1] held fixed to remove
    /// the additive gauge). Only effective near the fixed point, so callers
    /// gate it on a small residual. Returns true if any step was accepted.
    fn newton_polish(&mut self, remaining: &mut usize) -> bool {
        let (n, m) = (self.n, self.m);
        if self.x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        let mut improved = false;
        for _ in 0..6 {
            if *remaining == 0 {
                break;
            }
            let p = DMatrix::from_fn(n, m, |i, j| self.plan_entry(&self.x, i, j));
            let mut r = DVector::<f64>::zeros(n + m);
            for i in 0..n {
                r[i] = p.row(i).sum() - self.a[i];
            }
            for j in 0..m {
                r[n + j] = p.column(j).sum() - self.b[j];
            }
            let rn = r.amax();
            if rn < 1e-14 {
                return true;
            }
            let dim = n + m - 1;
            let mut jac = DMatrix::zeros(dim, dim);
            for i in 0..n {
                jac[(i, i)] = p.row(i).sum() / self.epsilon;
                for j in 0..m - 1 {
                    jac[(i, n + j)] = p[(i, j)] / self.epsilon;
                    jac[(n + j, i)] = p[(i, j)] / self.epsilon;
                }
            }
            for j in 0..m - 1 {
                jac[(n + j, n + j)] = p.column(j).sum() / self.epsilon;
            }
            let rhs = DVector::<f64>::from_fn(dim, |k, _| -r[k]);
            // Near-degenerate programs leave a second tiny eigenvalue
            // beyond the pinned gauge; ridge the system just enough for
            // the factorization to go through.
            let max_diag = (0..dim).map(|k| jac[(k, k)]).fold(0.0f64, f64::max);
            let mut delta = None;
            for ridge in [1e-14, 1e-10, 1e-6] {
                let damped = &jac + DMatrix::identity(dim, dim) * (ridge * max_diag);
                if let Some(chol) = damped.cholesky() {
                    let d = chol.solve(&rhs);
                    if d.iter().all(|v| v.is_finite()) {
                        delta = Some(d);
                        break;
                    }
                }
            }
            let Some(delta) = delta else { break };
            *remaining -= 1;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let mut cand = self.x.clone();
                for i in 0..n {
                    cand[i] += step * delta[i];
                }
                for j in 0..m - 1 {
                    cand[n + j] += step * delta[n + j];
                }
                if self.residual_of(&cand) < 0.5 * rn {
                    self.x = cand;
                    accepted = true;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        improved
    }

    fn into_plan(
        self,
        a: &DiscreteDistribution,
        b: &DiscreteDistribution,
        c: &DMatrix<f64>,
    ) -> TransportPlan {
        let gamma = DMatrix::from_fn(self.n, self.m, |i, j| self.plan_entry(&self.x, i, j));
        TransportPlan::from_gamma(gamma, c.clone(), a.masses(), b.masses())
    }
}

/// Log-domain solver. With a small budget it runs the plain alternating
/// updates (iterate-for-iterate the scaling variant in log space). With a
/// generous budget it drives the same fixed point much harder: an
/// ε-scaling ladder warm-starts the potentials, an over-relaxed phase with
/// the relaxation factor fitted to the measured contraction ratio burns
/// down the slow modes, and a pinned Newton step finishes once the iterate
/// is inside the quadratic basin. Every phase preserves the Gibbs form of
/// the plan, and all work is counted against the caller's budget.
fn sinkhorn_log(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    c: &DMatrix<f64>,
    epsilon: f64,
    iters: usize,
) -> Result<TransportPlan> {
    let mut solver = LogSolver::new(a, b, c, epsilon);
    let mut remaining = iters;

    if iters < ANNEAL_MIN_BUDGET {
        for _ in 0..remaining {
            solver.sweep(epsilon, 1.0);
        }
        return Ok(solver.into_plan(a, b, c));
    }

    // ε-scaling ladder: coarse halving down to 8ε, then a denser tail.
    let c_max = c.iter().cloned().fold(0.0f64, f64::max);
    if c_max > 0.0 && epsilon < c_max / 4.0 {
        let mut eps_k = c_max / 2.0;
        while eps_k > 8.0 * epsilon && remaining > 60 {
            let rounds = 30.min(remaining);
            for _ in 0..rounds {
                solver.sweep(eps_k, 1.0);
            }
            remaining -= rounds;
            eps_k *= 0.5;
        }
        while eps_k > epsilon && remaining > 60 {
            let rounds = 60.min(remaining);
            for _ in 0..rounds {
                solver.sweep(eps_k, 1.0);
            }
            remaining -= rounds;
            eps_k *= 0.75;
        }
    }

    loop {
        if remaining == 0 {
            break;
        }
        let res_now = solver.residual();
        if res_now < 1e-13 || !res_now.is_finite() {
            break;
        }
        if res_now < 1e-4 && solver.newton_polish(&mut remaining) {
            continue;
        }
        // Probe the plain map's contraction ratio, then run over-relaxed
        // with the corresponding optimal factor for a stretch.
        let probe = 8.min(remaining);
        let mut prev: Option<Vec<f64>> = None;
        let mut rho_sum = 0.0f64;
        let mut rho_count = 0usize;
        for _ in 0..probe {
            let before = solver.x.clone();
            solver.sweep(epsilon, 1.0);
            let delta: Vec<f64> = solver
                .x
                .iter()
                .zip(&before)
                .map(|(now, was)| now - was)
                .collect();
            if let Some(pd) = prev {
                let num: f64 = delta.iter().zip(&pd).map(|(a, b)| a * b).sum();
                let den: f64 = pd.iter().map(|v| v * v).sum();
                if den > 0.0 && num.is_finite() {
                    rho_sum += (num / den).clamp(0.0, 1.0);
                    rho_count += 1;
                }
            }
            prev = Some(delta);
        }
        remaining -= probe;
        if rho_count == 0 {
            continue;
        }
        let rho = rho_sum / rho_count as f64;
        let omega = if rho >= 0.999_999_9 {
            1.97
        } else {
            (2.0 / (1.0 + (1.0 - rho * rho).sqrt())).clamp(1.0, 1.97)
        };
        let stretch = 300.min(remaining);
        for _ in 0..stretch {
            solver.sweep(epsilon, omega);
        }
        remaining -= stretch;
    }

    Ok(solver.into_plan(a, b, c))
}

/// Exact 1-D transport cost by sorted quantile matching. Optimal for both
/// supported metrics (the monotone coupling is optimal for any convex
/// function of the signed distance).
pub fn exact_1d(a: &DiscreteDistribution, b: &DiscreteDistribution, metric: Metric) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: a.dim().max(b.dim()),
        });
    }
    let mut xs: Vec<(f64, f64)> = a
        .points()
        .iter()
        .zip(a.masses())
        .map(|(p, &m)| (p[0], m))
        .collect();
    let mut ys: Vec<(f64, f64)> = b
        .points()
        .iter()
        .zip(b.masses())
        .map(|(p, &m)| (p[0], m))
        .collect();
    xs.sort_by(|p, q| p.0.total_cmp(&q.0));
    ys.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut i, mut j) = (0, 0);
    let (mut rem_a, mut rem_b) = (xs[0].1, ys[0].1);
    let mut cost = 0.0;
    loop {
        let moved = rem_a.min(rem_b);
        let d = (xs[i].0 - ys[j].0).abs();
        cost += moved
            * match metric {
                Metric::Euclidean => d,
                Metric::SqEuclidean => d * d,
            };
        rem_a -= moved;
        rem_b -= moved;
        if rem_a <= 0.0 {
            i += 1;
            if i >= xs.len() {
                break;
            }
            rem_a = xs[i].1;
        }
        if rem_b <= 0.0 {
            j += 1;
            if j >= ys.len() {
                break;
            }
            rem_b = ys[j].1;
        }
    }
    Ok(cost)
}

/// Cell-count cap for [`exact_small`].
pub const EXACT_SMALL_LIMIT: usize = 64;

/// Exact transport cost on tiny instances (n·m ≤ 64) via the
/// transportation simplex: northwest-corner start, tree-structured basis,
/// Bland's rule pivoting. Used only as a test/check oracle.
pub fn exact_small(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    c: &DMatrix<f64>,
) -> Result<f64> {
    Ok(exact_small_plan(a, b, c)?.value)
}

/// As [`exact_small`], returning the full optimal plan.
pub fn exact_small_plan(
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    c: &DMatrix<f64>,
) -> Result<TransportPlan> {
    check_problem(a, b, c)?;
    let (n, m) = (a.len(), b.len());
    if n * m > EXACT_SMALL_LIMIT {
        return Err(Error::ExactSolverTooLarge {
            n,
            m,
            limit: EXACT_SMALL_LIMIT,
        });
    }
    let gamma = transportation_simplex(a.masses(), b.masses(), c)?;
    Ok(TransportPlan::from_gamma(
        gamma,
        c.clone(),
        a.masses(),
        b.masses(),
    ))
}

const REDUCED_COST_TOL: f64 = 1e-12;
const MAX_PIVOTS: usize = 20_000;

/// Transportation simplex over the bipartite graph of rows and columns.
/// The basis always forms a spanning tree with n+m-1 edges; degenerate
/// (zero-flow) basic cells are kept, and Bland's rule picks entering and
/// leaving edges so pivoting terminates.
fn transportation_simplex(a: &[f64], b: &[f64], c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = (a.len(), b.len());

    // Northwest-corner initial basic feasible solution: exactly n+m-1
    // cells, advancing one index per step.
    let mut flow = DMatrix::zeros(n, m);
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut rem_a = a.to_vec();
    let mut rem_b = b.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let moved = rem_a[i].min(rem_b[j]);
        flow[(i, j)] = moved;
        basis.push((i, j));
        rem_a[i] -= moved;
        rem_b[j] -= moved;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if rem_a[i] <= rem_b[j] && i < n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    debug_assert_eq!(basis.len(), n + m - 1);

    for _ in 0..MAX_PIVOTS {
        // Dual potentials from the basis tree: u_i + v_j = C_ij on basic
        // cells, anchored at u_0 = 0.
        let mut u = vec![f64::NAN; n];
        let mut v = vec![f64::NAN; m];
        u[0] = 0.0;
        let mut settled = 1;
        while settled < n + m {
            let mut progressed = false;
            for &(bi, bj) in &basis {
                if !u[bi].is_nan() && v[bj].is_nan() {
                    v[bj] = c[(bi, bj)] - u[bi];
                    settled += 1;
                    progressed = true;
                } else if u[bi].is_nan() && !v[bj].is_nan() {
                    u[bi] = c[(bi, bj)] - v[bj];
                    settled += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(Error::NonFinite(
                    "transportation simplex basis lost tree structure".into(),
                ));
            }
        }

        // Bland's rule: first cell (row-major) with negative reduced cost.
        let mut entering = None;
        'scan: for ei in 0..n {
            for ej in 0..m {
                if basis.contains(&(ei, ej)) {
                    continue;
                }
                if c[(ei, ej)] - u[ei] - v[ej] < -REDUCED_COST_TOL {
                    entering = Some((ei, ej));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(flow);
        };

        // The basis tree plus the entering edge contains exactly one cycle;
        // find the tree path from row node ei to column node ej.
        let cycle = tree_path(&basis, n, m, ei, ej)?;

        // Alternate signs around the cycle starting with + on the entering
        // edge; the path edges alternate -, +, -, ...
        let mut theta = f64::INFINITY;
        let mut leaving_pos = usize::MAX;
        for (pos, &(pi, pj)) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                // minus edge
                if flow[(pi, pj)] < theta {
                    theta = flow[(pi, pj)];
                    leaving_pos = pos;
                }
            }
        }
        for (pos, &(pi, pj)) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                flow[(pi, pj)] -= theta;
            } else {
                flow[(pi, pj)] += theta;
            }
        }
        flow[(ei, ej)] += theta;
        let leaving = cycle[leaving_pos];
        flow[(leaving.0, leaving.1)] = 0.0;
        let idx = basis.iter().position(|&e| e == leaving).unwrap();
        basis[idx] = (ei, ej);
    }
    Err(Error::NonFinite(
        "transportation simplex exceeded the pivot budget".into(),
    ))
}

/// Path of basis edges from row `start_row` to column `end_col` in the
/// basis spanning tree. Nodes 0..n are rows, n..n+m are columns.
fn tree_path(
    basis: &[(usize, usize)],
    n: usize,
    m: usize,
    start_row: usize,
    end_col: usize,
) -> Result<Vec<(usize, usize)>> {
    let nodes = n + m;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes]; // (neighbor, basis idx)
    for (idx, &(bi, bj)) in basis.iter().enumerate() {
        adj[bi].push((n + bj, idx));
        adj[n + bj].push((bi, idx));
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; nodes]; // (prev node, basis idx)
    let mut stack = vec![start_row];
    let mut seen = vec![false; nodes];
    seen[start_row] = true;
    while let Some(node) = stack.pop() {
        if node == n + end_col {
            break;
        }
        for &(next, idx) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, idx));
                stack.push(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = n + end_col;
    while node != start_row {
        let Some((prev, idx)) = parent[node] else {
            return Err(Error::NonFinite(
                "transportation simplex basis is disconnected".into(),
            ));
        };
        path.push(basis[idx]);
        node = prev;
    }
    path.reverse();
    Ok(path)
}

/// Gradient of ⟨γ, C(z_i)⟩ with respect to source point i, with γ frozen:
/// Σ_j γ_ij ∇_z d(z_i, k_j).
pub fn ot_grad_row(
    plan: &TransportPlan,
    a: &DiscreteDistribution,
    b: &DiscreteDistribution,
    i: usize,
    metric: Metric,
) -> Result<Point> {
    if i >= a.len() {
        return Err(Error::InvalidParameter {
            name: "i",
            reason: format!("source index {i} out of range (n = {})", a.len()),
        });
    }
    if plan.gamma.nrows() != a.len() || plan.gamma.ncols() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: plan.gamma.nrows(),
        });
    }
    let z = &a.points()[i];
    let mut grad = z * 0.0;
    for (j, k) in b.points().iter().enumerate() {
        let g = plan.gamma[(i, j)];
        if g != 0.0 {
            grad += metric.gradient(z, k) * g;
        }
    }
    Ok(grad)
}
