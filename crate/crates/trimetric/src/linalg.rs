//! Dense symmetric linear algebra: matrix-free leading-eigenpair
//! computation, quadratic forms, and the PCA used for preprocessing.
//!
//! The eigensolver targets the algebraically largest eigenvalue of an
//! indefinite symmetric operator. Small operators use a shifted power
//! iteration (the shift makes the operator positive definite so the largest
//! algebraic eigenvalue is also the largest in magnitude); larger ones use
//! Lanczos with full reorthogonalization.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Dimension at or below which the shifted power iteration is used.
const POWER_DIM_LIMIT: usize = 32;
/// Krylov basis size per Lanczos restart cycle.
const LANCZOS_BASIS_CAP: usize = 48;

/// Default convergence tolerance for [`leading_eigenpair`].
pub const DEFAULT_EIGEN_TOL: f64 = 1e-8;
/// Default matvec budget for [`leading_eigenpair`].
pub const DEFAULT_EIGEN_MAX_ITER: usize = 1000;

/// Symmetric D×D operator given through its matrix-vector product.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;

    /// Computes `M w`.
    fn apply(&self, w: ArrayView1<f64>) -> Array1<f64>;

    /// An upper bound on the spectral radius of `M`.
    fn norm_bound(&self) -> f64;
}

/// Any square matrix view acts as a symmetric operator (symmetry is the
/// caller's responsibility).
impl SymmetricOperator for ArrayView2<'_, f64> {
    fn dim(&self) -> usize {
        debug_assert_eq!(self.nrows(), self.ncols());
        self.nrows()
    }

    fn apply(&self, w: ArrayView1<f64>) -> Array1<f64> {
        self.dot(&w)
    }

    fn norm_bound(&self) -> f64 {
        // max absolute row sum bounds the spectral radius
        self.axis_iter(Axis(0))
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Weighted sum of signed outer products `sum_r c_r (u_r u_r' - v_r v_r')`,
/// applied without ever forming the dense matrix.
pub struct RankOneSumOperator<'a> {
    dim: usize,
    terms: Vec<(f64, ArrayView1<'a, f64>, ArrayView1<'a, f64>)>,
    bound: f64,
}

impl<'a> RankOneSumOperator<'a> {
    pub fn new(
        dim: usize,
        terms: impl IntoIterator<Item = (f64, ArrayView1<'a, f64>, ArrayView1<'a, f64>)>,
    ) -> Self {
        let terms: Vec<_> = terms.into_iter().collect();
        let bound = terms
            .iter()
            .map(|(c, u, v)| c.abs() * (u.dot(u) + v.dot(v)))
            .sum();
        RankOneSumOperator { dim, terms, bound }
    }

    /// Densifies the operator; intended for tests and small-dimension checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.dim, self.dim));
        for (c, u, v) in &self.terms {
            for i in 0..self.dim {
                for j in 0..self.dim {
                    m[[i, j]] += c * (u[i] * u[j] - v[i] * v[j]);
                }
            }
        }
        m
    }
}

impl SymmetricOperator for RankOneSumOperator<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, w: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim);
        for (c, u, v) in &self.terms {
            let cu = c * u.dot(&w);
            let cv = c * v.dot(&w);
            out.scaled_add(cu, u);
            out.scaled_add(-cv, v);
        }
        out
    }

    fn norm_bound(&self) -> f64 {
        self.bound
    }
}

/// Largest algebraic eigenvalue with its unit eigenvector.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Array1<f64>,
}

pub(crate) fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn normalize(v: &mut Array1<f64>) {
    let n = l2(v);
    if n > 0.0 {
        *v /= n;
    }
}

struct Budget {
    left: usize,
    used: usize,
}

impl Budget {
    fn take(&mut self) -> bool {
        if self.left == 0 {
            false
        } else {
            self.left -= 1;
            self.used += 1;
            true
        }
    }
}

struct Candidate {
    value: f64,
    vector: Array1<f64>,
    residual: f64,
    converged: bool,
}

/// Computes the algebraically largest eigenvalue and a unit eigenvector of a
/// symmetric operator. Converged means the residual `||Mv - lv||` is at most
/// `tol * max(1, |l|)`. `max_iter` bounds the number of operator
/// applications; exhausting it returns [`Error::EigenNoConvergence`] carrying
/// the best pair seen so the caller can decide whether to accept it.
///
/// Deterministic: fixed start vector (normalized all-ones, perturbed by
/// `1e-6 e1` only when residual stagnation suggests the start is orthogonal
/// to the dominant eigenspace) and a fixed iteration rule.
pub fn leading_eigenpair(
    op: &dyn SymmetricOperator,
    tol: f64,
    max_iter: usize,
) -> Result<EigenPair> {
    leading_eigenpair_with_start(op, tol, max_iter, None)
}

/// Same as [`leading_eigenpair`] but accepting an explicit start vector,
/// which lets iterative callers warm-start from a previous eigenvector
/// without losing determinism.
pub fn leading_eigenpair_with_start(
    op: &dyn SymmetricOperator,
    tol: f64,
    max_iter: usize,
    start: Option<ArrayView1<f64>>,
) -> Result<EigenPair> {
    let d = op.dim();
    if d == 0 {
        return Err(Error::Domain("operator dimension must be at least 1".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain("eigensolver tolerance must be positive".into()));
    }
    if d == 1 {
        let value = op.apply(Array1::ones(1).view())[0];
        return Ok(EigenPair {
            value,
            vector: Array1::ones(1),
        });
    }

    let mut start_vec = match start {
        Some(v) => {
            if v.len() != d {
                return Err(Error::Dimension {
                    expected: d,
                    got: v.len(),
                });
            }
            let mut s = v.to_owned();
            normalize(&mut s);
            s
        }
        None => Array1::from_elem(d, 1.0 / (d as f64).sqrt()),
    };

    let mut budget = Budget {
        left: max_iter.max(1),
        used: 0,
    };
    let mut best: Option<Candidate> = None;
    let mut restarts = 0usize;

    loop {
        let cand = if d <= POWER_DIM_LIMIT {
            // the crude shift can make power-iteration convergence slow when
            // the spectrum is clustered; cap it and let Lanczos finish
            let c = shifted_power(op, tol, &mut budget, &start_vec, 40);
            if c.converged || budget.left == 0 {
                c
            } else {
                let l = lanczos(op, tol, &mut budget, &c.vector);
                if l.residual <= c.residual {
                    l
                } else {
                    c
                }
            }
        } else {
            lanczos(op, tol, &mut budget, &start_vec)
        };
        let replace = best
            .as_ref()
            .map(|b| cand.residual < b.residual || cand.value > b.value + b.residual)
            .unwrap_or(true);
        if replace {
            best = Some(Candidate {
                value: cand.value,
                vector: cand.vector.clone(),
                residual: cand.residual,
                converged: cand.converged,
            });
        }

        if cand.converged && restarts < 3 {
            // Guard against having converged inside an invariant subspace
            // that misses the dominant eigenvalue: probe from a fixed vector
            // orthogonal to the candidate and restart if it sees more.
            match dominance_probe(op, cand.value, &cand.vector, tol, &mut budget) {
                Probe::Accept => {
                    return Ok(EigenPair {
                        value: cand.value,
                        vector: cand.vector,
                    });
                }
                Probe::Restart(v) => {
                    restarts += 1;
                    start_vec = v;
                    continue;
                }
            }
        } else if cand.converged {
            return Ok(EigenPair {
                value: cand.value,
                vector: cand.vector,
            });
        }

        let b = best.unwrap();
        return Err(Error::EigenNoConvergence {
            value: b.value,
            residual: b.residual,
            iterations: budget.used,
            vector: b.vector.to_vec(),
        });
    }
}

enum Probe {
    Accept,
    Restart(Array1<f64>),
}

/// Runs a few shifted power steps from a fixed pseudo-random vector
/// orthogonalized against `v`. A Rayleigh quotient above `theta` means the
/// candidate cannot be the top of the spectrum.
fn dominance_probe(
    op: &dyn SymmetricOperator,
    theta: f64,
    v: &Array1<f64>,
    tol: f64,
    budget: &mut Budget,
) -> Probe {
    let d = op.dim();
    let mut g = deterministic_probe_vector(d);
    let overlap = g.dot(v);
    g.scaled_add(-overlap, v);
    if l2(&g) < 1e-8 {
        g = Array1::zeros(d);
        g[0] = 1.0;
        let o = g.dot(v);
        g.scaled_add(-o, v);
        if l2(&g) < 1e-8 {
            return Probe::Accept;
        }
    }
    normalize(&mut g);
    let sigma = op.norm_bound();
    for _ in 0..8 {
        if !budget.take() {
            return Probe::Accept;
        }
        let mut next = op.apply(g.view());
        next.scaled_add(sigma, &g);
        if l2(&next) < 1e-250 {
            return Probe::Accept;
        }
        normalize(&mut next);
        g = next;
    }
    if !budget.take() {
        return Probe::Accept;
    }
    let theta_g = g.dot(&op.apply(g.view()));
    if theta_g > theta + tol.max(1e-12) * theta.abs().max(1.0) {
        Probe::Restart(g)
    } else {
        Probe::Accept
    }
}

fn deterministic_probe_vector(d: usize) -> Array1<f64> {
    // splitmix64 from a fixed seed
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut next = || {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut g = Array1::zeros(d);
    for i in 0..d {
        g[i] = (next() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
    }
    normalize(&mut g);
    g
}

fn shifted_power(
    op: &dyn SymmetricOperator,
    tol: f64,
    budget: &mut Budget,
    start: &Array1<f64>,
    cap: usize,
) -> Candidate {
    let d = op.dim();
    let sigma = op.norm_bound();
    let mut w = start.clone();
    normalize(&mut w);
    let mut best = Candidate {
        value: f64::NEG_INFINITY,
        vector: w.clone(),
        residual: f64::INFINITY,
        converged: false,
    };
    let mut perturbed = false;
    let mut last_progress = 0usize;
    let mut it = 0usize;

    while it < cap && budget.take() {
        it += 1;
        let mw = op.apply(w.view());
        let theta = w.dot(&mw);
        let mut res_vec = mw.clone();
        res_vec.scaled_add(-theta, &w);
        let resid = l2(&res_vec);
        if resid < 0.95 * best.residual {
            last_progress = it;
        }
        if resid < best.residual {
            best.residual = resid;
            best.value = theta;
            best.vector = w.clone();
        }
        if resid <= tol * theta.abs().max(1.0) {
            best.converged = true;
            best.value = theta;
            best.vector = w;
            best.residual = resid;
            return best;
        }
        if !perturbed && it - last_progress > 25 {
            w[0] += 1e-6;
            normalize(&mut w);
            perturbed = true;
            continue;
        }
        let mut next = mw;
        next.scaled_add(sigma, &w);
        let n = l2(&next);
        if n <= 1e-250 {
            // w sits in the lowest eigenspace; nudge it off deterministically
            w[it % d] += 1.0;
            normalize(&mut w);
            continue;
        }
        w = next / n;
    }
    best
}

fn lanczos(
    op: &dyn SymmetricOperator,
    tol: f64,
    budget: &mut Budget,
    start: &Array1<f64>,
) -> Candidate {
    let d = op.dim();
    let cap = d.min(LANCZOS_BASIS_CAP);
    let scale = op.norm_bound().max(f64::MIN_POSITIVE);
    let mut q1 = start.clone();
    normalize(&mut q1);
    let mut best = Candidate {
        value: f64::NEG_INFINITY,
        vector: q1.clone(),
        residual: f64::INFINITY,
        converged: false,
    };
    let mut prev_cycle_value = f64::NEG_INFINITY;
    let mut perturbed = false;
    let mut cycle = 0usize;

    loop {
        cycle += 1;
        let mut qs: Vec<Array1<f64>> = vec![q1.clone()];
        let mut alphas: Vec<f64> = Vec::new();
        let mut betas: Vec<f64> = Vec::new();
        let mut ritz: Vec<f64> = vec![1.0];
        let mut breakdown = false;

        while alphas.len() < cap {
            if !budget.take() {
                break;
            }
            let j = alphas.len();
            let mut w = op.apply(qs[j].view());
            let a = qs[j].dot(&w);
            alphas.push(a);
            w.scaled_add(-a, &qs[j]);
            if j > 0 {
                w.scaled_add(-betas[j - 1], &qs[j - 1]);
            }
            for _pass in 0..2 {
                for q in &qs {
                    let c = q.dot(&w);
                    w.scaled_add(-c, q);
                }
            }
            let b = l2(&w);
            let (theta, s) = tridiag_leading(&alphas, &betas);
            ritz = s;
            let resid_est = b * ritz[ritz.len() - 1].abs();
            if resid_est <= 0.5 * tol * theta.abs().max(1.0) {
                break;
            }
            if b <= 1e-13 * scale.max(1.0) {
                breakdown = true;
                break;
            }
            betas.push(b);
            qs.push(w / b);
        }

        // Ritz vector from the current basis
        let mut v = Array1::zeros(d);
        for (i, q) in qs.iter().take(ritz.len()).enumerate() {
            v.scaled_add(ritz[i], q);
        }
        normalize(&mut v);
        if !budget.take() {
            return best;
        }
        let mv = op.apply(v.view());
        let theta = v.dot(&mv);
        let mut res_vec = mv;
        res_vec.scaled_add(-theta, &v);
        let resid = l2(&res_vec);
        if resid < best.residual {
            best.residual = resid;
            best.value = theta;
            best.vector = v.clone();
        }
        if resid <= tol * theta.abs().max(1.0) {
            best.converged = true;
            best.value = theta;
            best.vector = v;
            best.residual = resid;
            return best;
        }
        if budget.left == 0 {
            return best;
        }

        let no_progress = theta <= prev_cycle_value + 1e-12 * theta.abs().max(1.0);
        prev_cycle_value = theta;
        if breakdown || no_progress {
            if !perturbed {
                q1 = v;
                q1[0] += 1e-6;
                perturbed = true;
            } else {
                q1 = v;
                q1[cycle % d] += 0.5;
            }
            normalize(&mut q1);
        } else {
            q1 = v;
        }
    }
}

/// Largest eigenvalue of a symmetric tridiagonal matrix (Sturm-sequence
/// bisection) with its eigenvector (inverse iteration).
fn tridiag_leading(diag: &[f64], off: &[f64]) -> (f64, Vec<f64>) {
    let n = diag.len();
    debug_assert!(off.len() + 1 == n);
    if n == 1 {
        return (diag[0], vec![1.0]);
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 }
            + if i < n - 1 { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let span = (hi - lo).max(1e-300);
    let mut a = lo;
    let mut b = hi + span * 1e-12 + 1e-300;
    for _ in 0..120 {
        if b - a <= 1e-15 * a.abs().max(b.abs()).max(1.0) {
            break;
        }
        let mid = 0.5 * (a + b);
        if count_below(diag, off, mid) >= n {
            b = mid;
        } else {
            a = mid;
        }
    }
    let lambda = 0.5 * (a + b);

    // inverse iteration, shifted slightly off the eigenvalue
    let mut y = vec![1.0 / (n as f64).sqrt(); n];
    let mut offset = span * 1e-12 + 1e-300;
    for _ in 0..3 {
        match tridiag_solve(diag, off, lambda + offset, &y) {
            Some(sol) => {
                let norm = sol.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    y = sol.iter().map(|x| x / norm).collect();
                } else {
                    offset *= 64.0;
                }
            }
            None => offset *= 64.0,
        }
    }
    (lambda, y)
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`.
fn count_below(diag: &[f64], off: &[f64], x: f64) -> usize {
    let mut count = 0usize;
    let mut d = 1.0f64;
    for i in 0..diag.len() {
        let sub = if i > 0 { off[i - 1] * off[i - 1] / d } else { 0.0 };
        d = diag[i] - x - sub;
        if d.abs() < 1e-300 {
            d = -1e-300;
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solves `(T - shift I) x = rhs` for tridiagonal `T` with partial pivoting.
/// Bands are zero-padded: `sub[i]` is row i's entry in column i-1, `sup[i]`
/// in column i+1 and `sup2[i]` the fill-in entry in column i+2.
fn tridiag_solve(diag: &[f64], off: &[f64], shift: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut main: Vec<f64> = diag.iter().map(|d| d - shift).collect();
    let mut sub: Vec<f64> = (0..n).map(|i| if i > 0 { off[i - 1] } else { 0.0 }).collect();
    let mut sup: Vec<f64> = (0..n).map(|i| if i < n - 1 { off[i] } else { 0.0 }).collect();
    let mut sup2 = vec![0.0f64; n];
    let mut b = rhs.to_vec();

    for i in 0..n - 1 {
        if sub[i + 1].abs() > main[i].abs() {
            // full swap of rows i and i+1 across their three band entries
            std::mem::swap(&mut main[i], &mut sub[i + 1]);
            std::mem::swap(&mut sup[i], &mut main[i + 1]);
            std::mem::swap(&mut sup2[i], &mut sup[i + 1]);
            b.swap(i, i + 1);
        }
        if main[i] == 0.0 || !main[i].is_finite() {
            return None;
        }
        let factor = sub[i + 1] / main[i];
        sub[i + 1] = 0.0;
        main[i + 1] -= factor * sup[i];
        sup[i + 1] -= factor * sup2[i];
        b[i + 1] -= factor * b[i];
    }
    if main[n - 1] == 0.0 || !main[n - 1].is_finite() {
        return None;
    }

    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        if i + 1 < n {
            acc -= sup[i] * x[i + 1];
        }
        if i + 2 < n {
            acc -= sup2[i] * x[i + 2];
        }
        x[i] = acc / main[i];
        if !x[i].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Quadratic form `w' M w` for a square matrix.
pub fn quad_form(m: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<f64> {
    let (r, c) = m.dim();
    if r != c {
        return Err(Error::Dimension { expected: r, got: c });
    }
    if w.len() != r {
        return Err(Error::Dimension {
            expected: r,
            got: w.len(),
        });
    }
    Ok(m.dot(&w).dot(&w))
}

/// Mean-centered orthonormal projection onto the top-variance directions.
#[derive(Debug, Clone)]
pub struct Projection {
    /// D×d matrix with orthonormal columns, ordered by decreasing variance.
    pub components: Array2<f64>,
    pub mean: Array1<f64>,
    /// Variance captured by each component, decreasing.
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

impl Projection {
    pub fn input_dim(&self) -> usize {
        self.components.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn project_point(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let centered = &x - &self.mean;
        centered.dot(&self.components)
    }

    pub fn project(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let centered = &xs - &self.mean;
        centered.dot(&self.components)
    }
}

/// Fits PCA on `samples` (rows) by repeated deflation of the leading
/// eigenpair of the sample covariance. Ordering is by decreasing eigenvalue;
/// each component's sign is fixed so its first non-negligible entry is
/// positive.
pub fn pca_fit(samples: ArrayView2<f64>, target_dim: usize) -> Result<Projection> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::Domain(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    if target_dim == 0 || target_dim > d.min(n) {
        return Err(Error::Domain(format!(
            "PCA target dimension {target_dim} out of range 1..={}",
            d.min(n)
        )));
    }

    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let total_variance = cov.diag().sum();

    let mut work = cov.clone();
    let mut components = Array2::zeros((d, target_dim));
    let mut eigenvalues = Vec::with_capacity(target_dim);

    for c in 0..target_dim {
        let pair = match leading_eigenpair(&work.view(), 1e-10, 10_000) {
            Ok(p) => p,
            Err(Error::EigenNoConvergence {
                value,
                residual,
                vector,
                ..
            }) if residual <= 1e-7 * value.abs().max(1.0) => EigenPair {
                value,
                vector: Array1::from_vec(vector),
            },
            Err(e) => return Err(e),
        };
        let mut v = pair.vector;
        // keep columns orthonormal even when eigenvalues are degenerate
        for _pass in 0..2 {
            for prev in 0..c {
                let p = components.column(prev);
                let overlap = p.dot(&v);
                v.scaled_add(-overlap, &p);
            }
        }
        if l2(&v) < 1e-8 {
            v = orthonormal_completion(components.view(), c, d)?;
        }
        normalize(&mut v);
        fix_sign(&mut v);
        let value = quad_form(cov.view(), v.view())?;
        eigenvalues.push(value);
        components.column_mut(c).assign(&v);
        // deflate
        for i in 0..d {
            for j in 0..d {
                work[[i, j]] -= value * v[i] * v[j];
            }
        }
    }

    Ok(Projection {
        components,
        mean,
        eigenvalues,
        total_variance,
    })
}

/// First basis vector with a non-trivial component orthogonal to the first
/// `c` columns, Gram-Schmidt cleaned.
fn orthonormal_completion(components: ArrayView2<f64>, c: usize, d: usize) -> Result<Array1<f64>> {
    for cand in 0..d {
        let mut v = Array1::zeros(d);
        v[cand] = 1.0;
        for _pass in 0..2 {
            for prev in 0..c {
                let p = components.column(prev);
                let overlap = p.dot(&v);
                v.scaled_add(-overlap, &p);
            }
        }
        if l2(&v) > 0.5 {
            normalize(&mut v);
            return Ok(v);
        }
    }
    Err(Error::Domain(
        "could not complete an orthonormal basis".into(),
    ))
}

fn fix_sign(v: &mut Array1<f64>) {
    let max_abs = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if max_abs == 0.0 {
        return;
    }
    for &x in v.iter() {
        if x.abs() > 1e-9 * max_abs {
            if x < 0.0 {
                *v *= -1.0;
            }
            return;
        }
    }
}
