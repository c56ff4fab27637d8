//! Soft-margin maximization over the trace-one positive semidefinite cone.
//!
//! Maximizes `f(X, rho) = rho - C * sum_r loss(<A_r, X> - rho)` by
//! alternating an exact one-dimensional margin step with rank-one
//! conditional-gradient updates of X. Each X update moves toward `v v'`
//! where `v` is the leading eigenvector of the gradient, so feasibility
//! (unit trace, positive semidefiniteness) holds by construction and the
//! only expensive step is a leading-eigenpair computation.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::Deserialize;

use crate::data::TripletConstraint;
use crate::error::{Error, Result};
use crate::linalg::{self, leading_eigenpair_with_start, EigenPair, RankOneSumOperator};
use crate::loss::LossKind;

/// Smallest admissible margin, used when the objective pushes rho toward 0.
const RHO_FLOOR: f64 = 1e-12;
/// Halvings tried by the backtracking line search.
const LINE_SEARCH_HALVINGS: usize = 50;

/// Symmetric trace-one p.s.d. matrix maintained as a convex combination of
/// unit-vector outer products, with the combination kept as a witness.
#[derive(Debug, Clone)]
pub struct MahalanobisMatrix {
    matrix: Array2<f64>,
    /// Unscaled weights; effective weight is `raw * history_scale`.
    history: Vec<(f64, Array1<f64>)>,
    history_scale: f64,
}

impl MahalanobisMatrix {
    /// Rank-one matrix `v v'` for a unit vector `v` (normalized here).
    pub fn from_unit_vector(v: ArrayView1<f64>) -> Self {
        let norm = v.dot(&v).sqrt();
        let unit = if norm > 0.0 { &v / norm } else { v.to_owned() };
        let d = unit.len();
        let mut matrix = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                matrix[[i, j]] = unit[i] * unit[j];
            }
        }
        MahalanobisMatrix {
            matrix,
            history: vec![(1.0, unit)],
            history_scale: 1.0,
        }
    }

    /// Default initialization: outer product of the normalized all-ones
    /// vector (rank one, unit trace).
    pub fn uniform_rank_one(dim: usize) -> Self {
        Self::from_unit_vector(Array1::from_elem(dim, 1.0).view())
    }

    /// Scaled identity `I / D`, witnessed as the uniform combination of the
    /// basis outer products.
    pub fn scaled_identity(dim: usize) -> Self {
        let matrix = Array2::eye(dim) / dim as f64;
        let history = (0..dim)
            .map(|i| {
                let mut e = Array1::zeros(dim);
                e[i] = 1.0;
                (1.0 / dim as f64, e)
            })
            .collect();
        MahalanobisMatrix {
            matrix,
            history,
            history_scale: 1.0,
        }
    }

    /// Wraps a dense matrix, checking symmetry and unit trace. Positive
    /// semidefiniteness is the caller's responsibility (no witness is
    /// available for an arbitrary matrix).
    pub fn from_dense(matrix: Array2<f64>) -> Result<Self> {
        let (r, c) = matrix.dim();
        if r != c {
            return Err(Error::Dimension { expected: r, got: c });
        }
        for i in 0..r {
            for j in 0..i {
                if (matrix[[i, j]] - matrix[[j, i]]).abs() > 1e-12 {
                    return Err(Error::Domain(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let trace: f64 = matrix.diag().sum();
        if (trace - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "matrix trace must be 1, got {trace}"
            )));
        }
        Ok(MahalanobisMatrix {
            matrix,
            history: Vec::new(),
            history_scale: 1.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diag().sum()
    }

    pub fn quad(&self, w: ArrayView1<f64>) -> Result<f64> {
        linalg::quad_form(self.matrix.view(), w)
    }

    /// The convex-combination witness `(weight, vector)`; empty when the
    /// matrix was loaded densely.
    pub fn history(&self) -> Vec<(f64, Array1<f64>)> {
        self.history
            .iter()
            .map(|(w, v)| (w * self.history_scale, v.clone()))
            .collect()
    }

    /// `X <- (1 - alpha) X + alpha v v'` for a unit vector `v`.
    pub fn blend(&mut self, alpha: f64, v: &Array1<f64>) {
        debug_assert!((0.0..=1.0).contains(&alpha));
        debug_assert_eq!(v.len(), self.dim());
        if alpha == 0.0 {
            return;
        }
        if alpha == 1.0 {
            let d = self.dim();
            for i in 0..d {
                for j in 0..d {
                    self.matrix[[i, j]] = v[i] * v[j];
                }
            }
            self.history.clear();
            self.history.push((1.0, v.clone()));
            self.history_scale = 1.0;
            return;
        }
        let keep = 1.0 - alpha;
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                self.matrix[[i, j]] = keep * self.matrix[[i, j]] + alpha * v[i] * v[j];
            }
        }
        self.history_scale *= keep;
        if self.history_scale < 1e-280 {
            for (w, _) in &mut self.history {
                *w *= self.history_scale;
            }
            self.history_scale = 1.0;
        }
        self.history.push((alpha / self.history_scale, v.clone()));
    }
}

/// Solver hyperparameters.
#[derive(Debug, Clone)]
pub struct HyperParams {
    /// Trade-off between margin size and constraint violation.
    pub c: f64,
    pub loss: LossKind,
    /// Maximum outer (alternating) iterations.
    pub max_outer: usize,
    /// Maximum conditional-gradient iterations per outer round.
    pub max_inner: usize,
    /// Convergence tolerance for both the outer objective test and the
    /// inner duality-gap test.
    pub tolerance: f64,
    /// Sufficient-increase constant, `0 < c1 < c2 < 1`.
    pub wolfe_c1: f64,
    /// Curvature constant.
    pub wolfe_c2: f64,
    /// Stop the inner loop on `eigenvalue < tolerance` instead of the
    /// conditional-gradient gap.
    pub literal_eigen_gate: bool,
    /// Permit the non-differentiable hinge loss (subgradient steps).
    pub allow_nonsmooth: bool,
    pub eigen_tol: f64,
    pub eigen_max_iter: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            c: 1.0,
            loss: LossKind::SquaredHinge,
            max_outer: 500,
            max_inner: 100,
            tolerance: 1e-5,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            literal_eigen_gate: false,
            allow_nonsmooth: false,
            eigen_tol: linalg::DEFAULT_EIGEN_TOL,
            eigen_max_iter: linalg::DEFAULT_EIGEN_MAX_ITER,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(Error::Config(format!(
                "line-search constants must satisfy 0 < c1 < c2 < 1, got c1 = {}, c2 = {}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if let LossKind::Huber { h } = self.loss {
            if !(h > 0.0) {
                return Err(Error::Config("huber width must be positive".into()));
            }
        }
        if !self.loss.is_smooth() && !self.allow_nonsmooth {
            return Err(Error::Config(
                "the hinge loss is not differentiable; pass --subgradient-unsafe to force it"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Stalled,
}

/// One accepted conditional-gradient step, enough to replay the iterate
/// sequence from the initial matrix.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub alpha: f64,
    pub vertex: Array1<f64>,
    pub gap: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub x: MahalanobisMatrix,
    pub rho: f64,
    pub objective: f64,
    /// Conditional-gradient gap of the last inner evaluation.
    pub fw_gap: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Objective after every margin step and every accepted X step.
    pub trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub status: SolverStatus,
}

/// Margins `<A_r, X>` for every triplet, using the rank-one witness when it
/// is cheaper than dense quadratic forms.
pub fn margins(x: &MahalanobisMatrix, triplets: &[TripletConstraint]) -> Result<Vec<f64>> {
    check_dims(x.dim(), triplets)?;
    let history = x.history();
    if !history.is_empty() && history.len() <= x.dim() {
        let mut out = vec![0.0; triplets.len()];
        for (w, v) in &history {
            for (r, t) in triplets.iter().enumerate() {
                out[r] += t.margin_rank_one(*w, v.view());
            }
        }
        Ok(out)
    } else {
        triplets
            .iter()
            .map(|t| t.margin_dense(x.matrix().view()))
            .collect()
    }
}

fn check_dims(dim: usize, triplets: &[TripletConstraint]) -> Result<()> {
    if triplets.is_empty() {
        return Err(Error::Domain("the triplet set must be nonempty".into()));
    }
    for t in triplets {
        if t.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: t.dim(),
            });
        }
    }
    Ok(())
}

/// Objective value from precomputed margins.
pub fn objective_from_margins(margins: &[f64], rho: f64, hp: &HyperParams) -> f64 {
    let penalty: f64 = margins.iter().map(|m| hp.loss.value(m - rho)).sum();
    rho - hp.c * penalty
}

/// `f(X, rho)` evaluated through the factored margins.
pub fn objective(
    x: &MahalanobisMatrix,
    rho: f64,
    triplets: &[TripletConstraint],
    hp: &HyperParams,
) -> Result<f64> {
    let m = margins(x, triplets)?;
    Ok(objective_from_margins(&m, rho, hp))
}

/// Partial derivative of the objective with respect to rho.
pub fn rho_derivative(margins: &[f64], rho: f64, hp: &HyperParams) -> f64 {
    1.0 + hp.c * margins.iter().map(|m| hp.loss.derivative(m - rho)).sum::<f64>()
}

/// Exact maximizer of the concave map `rho -> f(X, rho)` over
/// `(0, max(1, 2 max_r m_r)]`, given the margins of the current X.
pub fn rho_step_from_margins(margins: &[f64], hp: &HyperParams) -> Result<f64> {
    rho_step_impl(margins, hp, None)
}

/// As [`rho_step_from_margins`], computing the margins from X.
pub fn rho_step(
    x: &MahalanobisMatrix,
    triplets: &[TripletConstraint],
    hp: &HyperParams,
) -> Result<f64> {
    let m = margins(x, triplets)?;
    rho_step_impl(&m, hp, None)
}

fn rho_step_impl(margins: &[f64], hp: &HyperParams, prev_rho: Option<f64>) -> Result<f64> {
    if margins.is_empty() {
        return Err(Error::Domain("the triplet set must be nonempty".into()));
    }
    let mut cap = margins.iter().fold(1.0f64, |acc, m| acc.max(2.0 * m));
    if let Some(p) = prev_rho {
        // keep the previous margin feasible so alternating steps never
        // decrease the objective
        cap = cap.max(p);
    }

    match hp.loss {
        LossKind::SquaredHinge => rho_step_squared_hinge(margins, hp.c, cap),
        LossKind::Huber { .. } | LossKind::Hinge => {
            if matches!(hp.loss, LossKind::Hinge) && !hp.allow_nonsmooth {
                return Err(Error::Config(
                    "the hinge loss is not differentiable; pass --subgradient-unsafe to force it"
                        .into(),
                ));
            }
            rho_step_bisection(margins, hp, cap)
        }
    }
}

/// Piecewise-linear stationarity solve: sort the margins and find the
/// interval whose stationary point `rho = (1 + 2 C S_t) / (2 C t)` lies
/// inside it.
fn rho_step_squared_hinge(margins: &[f64], c: f64, cap: f64) -> Result<f64> {
    let at_zero = 1.0 + 2.0 * c * margins.iter().filter(|m| **m < 0.0).map(|m| *m).sum::<f64>();
    if at_zero <= 0.0 {
        log::warn!("margin objective is decreasing at rho -> 0; clamping to {RHO_FLOOR}");
        return Ok(RHO_FLOOR);
    }
    let mut sorted = margins.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let t0 = sorted.iter().filter(|m| **m <= 0.0).count();
    let mut prefix: f64 = sorted[..t0].iter().sum();
    for t in t0..=n {
        if t > t0 {
            prefix += sorted[t - 1];
        }
        if t == 0 {
            continue; // derivative is 1 with no active terms
        }
        let lo = if t == t0 { 0.0 } else { sorted[t - 1] };
        let hi = if t < n { sorted[t].min(cap) } else { cap };
        if lo >= cap {
            break;
        }
        let candidate = (1.0 + 2.0 * c * prefix) / (2.0 * c * t as f64);
        if candidate > lo - 1e-15 * lo.abs().max(1.0) && candidate <= hi {
            return Ok(candidate.max(lo.max(RHO_FLOOR)).min(cap));
        }
    }
    log::warn!("margin derivative still positive at the cap {cap:.6e}; returning the cap");
    Ok(cap)
}

/// Bisection on the monotone derivative, to absolute tolerance 1e-10.
fn rho_step_bisection(margins: &[f64], hp: &HyperParams, cap: f64) -> Result<f64> {
    let g = |rho: f64| rho_derivative(margins, rho, hp);
    if g(RHO_FLOOR) <= 0.0 {
        log::warn!("margin objective is decreasing at rho -> 0; clamping to {RHO_FLOOR}");
        return Ok(RHO_FLOOR);
    }
    if g(cap) > 0.0 {
        log::warn!("margin derivative still positive at the cap {cap:.6e}; returning the cap");
        return Ok(cap);
    }
    let mut lo = RHO_FLOOR;
    let mut hi = cap;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Gradient coefficients `c_r = -C * loss'(m_r - rho)`; all nonnegative.
pub fn gradient_coefficients(
    margins: &[f64],
    rho: f64,
    hp: &HyperParams,
) -> Result<Vec<f64>> {
    if !hp.loss.is_smooth() && !hp.allow_nonsmooth {
        return Err(Error::Config(
            "the hinge loss is not differentiable; pass --subgradient-unsafe to force it".into(),
        ));
    }
    Ok(margins
        .iter()
        .map(|m| -hp.c * hp.loss.derivative(m - rho))
        .collect())
}

/// The gradient of the objective in X as a matrix-free operator
/// `sum_r c_r (u_r u_r' - v_r v_r')` with O(|S| D) matvec cost.
pub fn gradient_operator<'a>(
    x: &MahalanobisMatrix,
    rho: f64,
    triplets: &'a [TripletConstraint],
    hp: &HyperParams,
) -> Result<RankOneSumOperator<'a>> {
    let m = margins(x, triplets)?;
    let coeffs = gradient_coefficients(&m, rho, hp)?;
    Ok(operator_from_coefficients(x.dim(), triplets, &coeffs))
}

fn operator_from_coefficients<'a>(
    dim: usize,
    triplets: &'a [TripletConstraint],
    coeffs: &[f64],
) -> RankOneSumOperator<'a> {
    RankOneSumOperator::new(
        dim,
        triplets
            .iter()
            .zip(coeffs)
            .filter(|(_, c)| **c != 0.0)
            .map(|(t, c)| (*c, t.impostor_diff.view(), t.target_diff.view())),
    )
}

/// Outcome of one conditional-gradient step.
#[derive(Debug, Clone)]
pub struct XStep {
    pub x: MahalanobisMatrix,
    pub fw_gap: f64,
    pub alpha: f64,
    pub eigenvalue: f64,
}

/// One inner iteration: leading eigenvector of the gradient, direction
/// `v v' - X`, line-searched step. Returns `alpha = 0` with the gap when the
/// step is rejected (stall) or the gap is already below tolerance.
pub fn x_step(
    x: &MahalanobisMatrix,
    rho: f64,
    triplets: &[TripletConstraint],
    hp: &HyperParams,
) -> Result<XStep> {
    hp.validate()?;
    let mut xc = x.clone();
    let mut m = margins(x, triplets)?;
    let mut warm = None;
    let out = inner_step(&mut xc, &mut m, rho, triplets, hp, &mut warm)?;
    Ok(XStep {
        x: xc,
        fw_gap: out.gap,
        alpha: out.alpha,
        eigenvalue: out.eigenvalue,
    })
}

struct InnerOutcome {
    gap: f64,
    eigenvalue: f64,
    alpha: f64,
    applied: bool,
    converged: bool,
    objective: f64,
    vertex: Option<Array1<f64>>,
}

fn inner_step(
    x: &mut MahalanobisMatrix,
    margins: &mut [f64],
    rho: f64,
    triplets: &[TripletConstraint],
    hp: &HyperParams,
    warm: &mut Option<Array1<f64>>,
) -> Result<InnerOutcome> {
    let phi0 = objective_from_margins(margins, rho, hp);
    let coeffs = gradient_coefficients(margins, rho, hp)?;
    if coeffs.iter().all(|c| *c == 0.0) {
        // flat region: the gradient operator is zero
        return Ok(InnerOutcome {
            gap: 0.0,
            eigenvalue: 0.0,
            alpha: 0.0,
            applied: false,
            converged: true,
            objective: phi0,
            vertex: None,
        });
    }
    let op = operator_from_coefficients(x.dim(), triplets, &coeffs);
    let pair = acceptable_eigenpair(leading_eigenpair_with_start(
        &op,
        hp.eigen_tol,
        hp.eigen_max_iter,
        warm.as_ref().map(|v| v.view()),
    ))?;
    *warm = Some(pair.vector.clone());

    let grad_dot_x: f64 = coeffs.iter().zip(margins.iter()).map(|(c, m)| c * m).sum();
    let gap = pair.value - grad_dot_x;
    let converged = if hp.literal_eigen_gate {
        pair.value < hp.tolerance
    } else {
        gap < hp.tolerance
    };
    if converged {
        return Ok(InnerOutcome {
            gap,
            eigenvalue: pair.value,
            alpha: 0.0,
            applied: false,
            converged: true,
            objective: phi0,
            vertex: Some(pair.vector),
        });
    }

    // margins of the rank-one vertex; along the segment every margin is
    // affine, so the line objective is O(|S|) per evaluation
    let targets: Vec<f64> = triplets
        .iter()
        .map(|t| t.margin_rank_one(1.0, pair.vector.view()))
        .collect();
    if gap <= 0.0 {
        return Ok(InnerOutcome {
            gap,
            eigenvalue: pair.value,
            alpha: 0.0,
            applied: false,
            converged: false,
            objective: phi0,
            vertex: Some(pair.vector),
        });
    }
    let (alpha, _armijo_only) = backtrack(margins, &targets, rho, hp, phi0, gap);
    if alpha == 0.0 {
        return Ok(InnerOutcome {
            gap,
            eigenvalue: pair.value,
            alpha: 0.0,
            applied: false,
            converged: false,
            objective: phi0,
            vertex: Some(pair.vector),
        });
    }
    x.blend(alpha, &pair.vector);
    for (m, t) in margins.iter_mut().zip(&targets) {
        *m = (1.0 - alpha) * *m + alpha * t;
    }
    let objective = objective_from_margins(margins, rho, hp);
    Ok(InnerOutcome {
        gap,
        eigenvalue: pair.value,
        alpha,
        applied: true,
        converged: false,
        objective,
        vertex: Some(pair.vector),
    })
}

/// Accepts a non-converged eigenpair when its residual already meets the
/// pair's own accuracy contract; otherwise propagates the failure.
fn acceptable_eigenpair(res: Result<EigenPair>) -> Result<EigenPair> {
    match res {
        Ok(p) => Ok(p),
        Err(Error::EigenNoConvergence {
            value,
            residual,
            iterations,
            vector,
        }) => {
            if residual <= 1e-6 * value.abs().max(1.0) {
                log::debug!(
                    "accepting eigenpair with residual {residual:.3e} after {iterations} iterations"
                );
                Ok(EigenPair {
                    value,
                    vector: Array1::from_vec(vector),
                })
            } else {
                Err(Error::EigenNoConvergence {
                    value,
                    residual,
                    iterations,
                    vector,
                })
            }
        }
        Err(e) => Err(e),
    }
}

/// Backtracking line search along `p = v v' - X` for a maximization:
/// sufficient increase `phi(a) >= phi(0) + c1 a phi'(0)` plus the curvature
/// condition `|phi'(a)| <= c2 |phi'(0)|`. If no candidate satisfies both
/// within the halving budget, the largest sufficient-increase step is used.
fn backtrack(
    margins: &[f64],
    targets: &[f64],
    rho: f64,
    hp: &HyperParams,
    phi0: f64,
    dphi0: f64,
) -> (f64, bool) {
    debug_assert!(dphi0 > 0.0);
    let phi = |a: f64| -> f64 {
        let penalty: f64 = margins
            .iter()
            .zip(targets)
            .map(|(m, t)| hp.loss.value((1.0 - a) * m + a * t - rho))
            .sum();
        rho - hp.c * penalty
    };
    let dphi = |a: f64| -> f64 {
        -hp.c
            * margins
                .iter()
                .zip(targets)
                .map(|(m, t)| hp.loss.derivative((1.0 - a) * m + a * t - rho) * (t - m))
                .sum::<f64>()
    };

    let mut alpha = 1.0;
    let mut fallback: Option<f64> = None;
    for _ in 0..=LINE_SEARCH_HALVINGS {
        if phi(alpha) >= phi0 + hp.wolfe_c1 * alpha * dphi0 {
            if fallback.is_none() {
                fallback = Some(alpha);
            }
            if dphi(alpha).abs() <= hp.wolfe_c2 * dphi0.abs() {
                return (alpha, false);
            }
        }
        alpha *= 0.5;
    }
    match fallback {
        Some(a) => {
            log::debug!("curvature condition waived after {LINE_SEARCH_HALVINGS} halvings; alpha = {a:.3e}");
            (a, true)
        }
        None => (0.0, false),
    }
}

/// Step size along `p = v v' - X` from the public contract: requires an
/// ascent direction; returns 0 when no sufficient-increase step exists.
pub fn line_search(
    x: &MahalanobisMatrix,
    vertex: ArrayView1<f64>,
    rho: f64,
    triplets: &[TripletConstraint],
    hp: &HyperParams,
) -> Result<f64> {
    hp.validate()?;
    let m = margins(x, triplets)?;
    let coeffs = gradient_coefficients(&m, rho, hp)?;
    let targets: Vec<f64> = triplets
        .iter()
        .map(|t| t.margin_rank_one(1.0, vertex))
        .collect();
    let grad_dot_vertex: f64 = coeffs.iter().zip(&targets).map(|(c, t)| c * t).sum();
    let grad_dot_x: f64 = coeffs.iter().zip(&m).map(|(c, mm)| c * mm).sum();
    let dphi0 = grad_dot_vertex - grad_dot_x;
    if dphi0 <= 0.0 {
        log::warn!("line search called without an ascent direction (slope {dphi0:.3e})");
        return Ok(0.0);
    }
    let phi0 = objective_from_margins(&m, rho, hp);
    Ok(backtrack(&m, &targets, rho, hp, phi0, dphi0).0)
}

/// Alternating maximization: an exact margin step followed by up to
/// `max_inner` conditional-gradient steps, until both objective changes of a
/// round fall below the tolerance or `max_outer` rounds pass.
pub fn train(
    triplets: &[TripletConstraint],
    dim: usize,
    hp: &HyperParams,
    x0: Option<MahalanobisMatrix>,
) -> Result<SolverState> {
    hp.validate()?;
    check_dims(dim, triplets)?;
    let mut x = match x0 {
        Some(x0) => {
            if x0.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: x0.dim(),
                });
            }
            x0
        }
        None => MahalanobisMatrix::uniform_rank_one(dim),
    };
    let mut m = margins(&x, triplets)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut warm: Option<Array1<f64>> = None;
    let mut rho;
    let mut fw_gap = f64::INFINITY;
    let mut status = SolverStatus::MaxIterations;
    let mut prev_end: Option<f64> = None;
    let mut outer = 0usize;
    let mut stall_note = String::new();

    // the margin step always runs at least once, even with max_outer = 0
    rho = rho_step_impl(&m, hp, None)?;
    let mut objective = objective_from_margins(&m, rho, hp);
    trace.push(objective);

    'outer: while outer < hp.max_outer {
        outer += 1;
        if outer > 1 {
            rho = rho_step_impl(&m, hp, Some(rho))?;
        }
        let mid_obj = objective_from_margins(&m, rho, hp);
        if outer > 1 {
            trace.push(mid_obj);
        }

        let mut first_inner = true;
        for _ in 0..hp.max_inner {
            let out = inner_step(&mut x, &mut m, rho, triplets, hp, &mut warm)?;
            fw_gap = out.gap;
            if out.converged {
                break;
            }
            if !out.applied {
                if first_inner && out.gap > hp.tolerance {
                    stall_note = format!(
                        "no sufficient-increase step on the first inner iteration (gap {:.3e}, eigenvalue {:.3e})",
                        out.gap, out.eigenvalue
                    );
                    status = SolverStatus::Stalled;
                    objective = out.objective;
                    break 'outer;
                }
                break;
            }
            trace.push(out.objective);
            steps.push(StepRecord {
                alpha: out.alpha,
                vertex: out.vertex.expect("applied step has a vertex"),
                gap: out.gap,
                objective: out.objective,
            });
            first_inner = false;
        }

        let end_obj = objective_from_margins(&m, rho, hp);
        objective = end_obj;
        if outer > 1 {
            if let Some(pe) = prev_end {
                if (end_obj - mid_obj).abs() < hp.tolerance
                    && (mid_obj - pe).abs() < hp.tolerance
                {
                    status = SolverStatus::Converged;
                    break;
                }
            }
        }
        prev_end = Some(end_obj);
    }

    if status == SolverStatus::Stalled {
        log::warn!("solver stalled: {stall_note}");
    }
    Ok(SolverState {
        x,
        rho,
        objective,
        fw_gap,
        outer_iters: outer,
        inner_iters: steps.len(),
        trace,
        steps,
        status,
    })
}

/// Rank-one start from the leading eigenvector of the unweighted constraint
/// sum, selectable through the CLI.
pub fn leading_constraint_init(
    triplets: &[TripletConstraint],
    dim: usize,
    hp: &HyperParams,
) -> Result<MahalanobisMatrix> {
    check_dims(dim, triplets)?;
    let op = RankOneSumOperator::new(
        dim,
        triplets
            .iter()
            .map(|t| (1.0, t.impostor_diff.view(), t.target_diff.view())),
    );
    let pair = acceptable_eigenpair(linalg::leading_eigenpair(
        &op,
        hp.eigen_tol,
        hp.eigen_max_iter,
    ))?;
    Ok(MahalanobisMatrix::from_unit_vector(pair.vector.view()))
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Serializes a trained model. Floating-point entries carry 17 significant
/// digits so the matrix round-trips exactly.
pub fn model_to_json(
    x: &MahalanobisMatrix,
    rho: f64,
    loss: LossKind,
    c: f64,
    history: &[f64],
) -> String {
    let mut out = String::with_capacity(64 + 24 * x.dim() * x.dim() + 24 * history.len());
    out.push_str("{\"dim\":");
    out.push_str(&x.dim().to_string());
    out.push_str(",\"trace\":");
    out.push_str(&fmt17(x.trace()));
    out.push_str(",\"matrix\":[");
    let mut first = true;
    for v in x.matrix().iter() {
        if !first {
            out.push(',');
        }
        out.push_str(&fmt17(*v));
        first = false;
    }
    out.push_str("],\"rho\":");
    out.push_str(&fmt17(rho));
    out.push_str(",\"loss\":\"");
    out.push_str(loss.name());
    out.push_str("\",\"C\":");
    out.push_str(&fmt17(c));
    out.push_str(",\"history\":[");
    first = true;
    for v in history {
        if !first {
            out.push(',');
        }
        out.push_str(&fmt17(*v));
        first = false;
    }
    out.push_str("]}");
    out
}

pub fn write_model(
    path: &Path,
    x: &MahalanobisMatrix,
    rho: f64,
    loss: LossKind,
    c: f64,
    history: &[f64],
) -> Result<()> {
    fs::write(path, model_to_json(x, rho, loss, c, history)).map_err(|e| Error::io(path, e))
}

/// Parsed model file.
#[derive(Debug, Clone, Deserialize)]
pub struct ModelFile {
    pub dim: usize,
    pub trace: f64,
    pub matrix: Vec<f64>,
    pub rho: f64,
    pub loss: String,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(default)]
    pub history: Vec<f64>,
}

impl ModelFile {
    pub fn matrix(&self) -> Result<MahalanobisMatrix> {
        if self.matrix.len() != self.dim * self.dim {
            return Err(Error::Dimension {
                expected: self.dim * self.dim,
                got: self.matrix.len(),
            });
        }
        let m = Array2::from_shape_vec((self.dim, self.dim), self.matrix.clone())
            .expect("length checked");
        MahalanobisMatrix::from_dense(m)
    }
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: ModelFile = serde_json::from_str(&text)?;
    if model.matrix.len() != model.dim * model.dim {
        return Err(Error::Dimension {
            expected: model.dim * model.dim,
            got: model.matrix.len(),
        });
    }
    Ok(model)
}
