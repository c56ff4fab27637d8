//! Independent brute-force verifiers: an exhaustive grid solver over the
//! two-dimensional feasible set, finite-difference gradients, and a dense
//! Jacobi eigensolver. These deliberately avoid the solver's own code paths
//! so they can cross-check them, and they ship in the library so the CLI
//! `verify` subcommand can run them.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::TripletConstraint;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::solver::{self, HyperParams, MahalanobisMatrix};

/// Exhaustive-search resolution. Odd so the boundary and center points of
/// each axis are grid points.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub resolution: usize,
    pub rho_resolution: usize,
    /// Margin search range; derived from the constraint spectra when absent.
    pub rho_range: Option<(f64, f64)>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            resolution: 401,
            rho_resolution: 401,
            rho_range: None,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        for (name, r) in [("resolution", self.resolution), ("rho_resolution", self.rho_resolution)]
        {
            if r < 3 || r % 2 == 0 {
                return Err(Error::Domain(format!(
                    "grid {name} must be odd and at least 3, got {r}"
                )));
            }
        }
        if let Some((lo, hi)) = self.rho_range {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Domain(format!(
                    "rho range must satisfy 0 < lo < hi, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GridSolution {
    pub objective: f64,
    pub x: Array2<f64>,
    pub rho: f64,
    /// How much a refinement of the grid could raise the maximum, from a
    /// crude Lipschitz estimate times half the grid spacing.
    pub refinement_bound: f64,
}

/// Exhaustive maximization of the soft-margin objective over all symmetric
/// trace-one p.s.d. 2x2 matrices `[[x, y], [y, 1 - x]]` crossed with a
/// margin grid. Ties keep the lexicographically first grid point.
pub fn grid_solve_2d(
    triplets: &[TripletConstraint],
    hp: &HyperParams,
    grid: &GridSpec,
) -> Result<GridSolution> {
    grid.validate()?;
    if triplets.is_empty() {
        return Err(Error::Domain("the triplet set must be nonempty".into()));
    }
    for t in triplets {
        if t.dim() != 2 {
            return Err(Error::Domain(format!(
                "grid solver handles dimension 2 only, got {}",
                t.dim()
            )));
        }
    }

    // <A_r, X> = (A11 - A22) x + 2 A12 y + A22 over the parameterization
    struct Lin {
        gx: f64,
        gy: f64,
        k: f64,
        lambda_max: f64,
    }
    let lins: Vec<Lin> = triplets
        .iter()
        .map(|t| {
            let (u, v) = (&t.impostor_diff, &t.target_diff);
            let a11 = u[0] * u[0] - v[0] * v[0];
            let a22 = u[1] * u[1] - v[1] * v[1];
            let a12 = u[0] * u[1] - v[0] * v[1];
            let tr = a11 + a22;
            let det = a11 * a22 - a12 * a12;
            let lambda_max = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
            Lin {
                gx: a11 - a22,
                gy: 2.0 * a12,
                k: a22,
                lambda_max,
            }
        })
        .collect();

    let (rho_lo, rho_hi) = grid.rho_range.unwrap_or_else(|| {
        let hi = lins
            .iter()
            .fold(1.0f64, |acc, l| acc.max(2.0 * l.lambda_max));
        (hi * 1e-6, hi)
    });

    let res = grid.resolution;
    let rres = grid.rho_resolution;
    let hx = 1.0 / (res - 1) as f64;
    let hy = 1.0 / (res - 1) as f64;
    let hr = (rho_hi - rho_lo) / (rres - 1) as f64;

    let mut best = (f64::NEG_INFINITY, 0usize, 0usize, 0usize);
    let mut margins = vec![0.0f64; lins.len()];
    for xi in 0..res {
        let x = xi as f64 * hx;
        for yi in 0..res {
            let y = -0.5 + yi as f64 * hy;
            if y * y > x * (1.0 - x) + 1e-15 {
                continue;
            }
            for (m, l) in margins.iter_mut().zip(&lins) {
                *m = l.gx * x + l.gy * y + l.k;
            }
            for ri in 0..rres {
                let rho = rho_lo + ri as f64 * hr;
                let obj = solver::objective_from_margins(&margins, rho, hp);
                if obj > best.0 {
                    best = (obj, xi, yi, ri);
                }
            }
        }
    }
    if best.0 == f64::NEG_INFINITY {
        return Err(Error::Domain("no feasible grid point".into()));
    }

    let bx = best.1 as f64 * hx;
    let by = -0.5 + best.2 as f64 * hy;
    let brho = rho_lo + best.3 as f64 * hr;
    let x = ndarray::array![[bx, by], [by, 1.0 - bx]];

    // Lipschitz estimate of the objective over the search box
    let zmax = lins
        .iter()
        .map(|l| l.gx.abs() + 0.5 * l.gy.abs() + l.k.abs())
        .fold(0.0f64, f64::max)
        + rho_hi;
    let dl_max = match hp.loss {
        LossKind::SquaredHinge => 2.0 * zmax,
        LossKind::Huber { .. } | LossKind::Hinge => 1.0,
    };
    let lx: f64 = hp.c * lins.iter().map(|l| dl_max * l.gx.abs()).sum::<f64>();
    let ly: f64 = hp.c * lins.iter().map(|l| dl_max * l.gy.abs()).sum::<f64>();
    let lr: f64 = 1.0 + hp.c * dl_max * lins.len() as f64;
    let refinement_bound = 0.5 * (lx * hx + ly * hy + lr * hr);

    Ok(GridSolution {
        objective: best.0,
        x,
        rho: brho,
        refinement_bound,
    })
}

/// Symmetric central differences of an objective evaluator: off-diagonal
/// entries (i, j) and (j, i) are perturbed jointly. Returns the gradient
/// matrix and the partial derivative in rho.
pub fn finite_diff_grad<F>(f: &F, x: ArrayView2<f64>, rho: f64, delta: f64) -> (Array2<f64>, f64)
where
    F: Fn(ArrayView2<f64>, f64) -> f64,
{
    assert!(delta > 0.0, "finite-difference step must be positive");
    let d = x.nrows();
    let mut grad = Array2::zeros((d, d));
    let mut work = x.to_owned();
    for i in 0..d {
        for j in 0..=i {
            let orig_ij = work[[i, j]];
            let orig_ji = work[[j, i]];
            if i == j {
                work[[i, i]] = orig_ij + delta;
                let plus = f(work.view(), rho);
                work[[i, i]] = orig_ij - delta;
                let minus = f(work.view(), rho);
                work[[i, i]] = orig_ij;
                grad[[i, i]] = (plus - minus) / (2.0 * delta);
            } else {
                work[[i, j]] = orig_ij + delta;
                work[[j, i]] = orig_ji + delta;
                let plus = f(work.view(), rho);
                work[[i, j]] = orig_ij - delta;
                work[[j, i]] = orig_ji - delta;
                let minus = f(work.view(), rho);
                work[[i, j]] = orig_ij;
                work[[j, i]] = orig_ji;
                let g = (plus - minus) / (4.0 * delta);
                grad[[i, j]] = g;
                grad[[j, i]] = g;
            }
        }
    }
    let drho = (f(x, rho + delta) - f(x, rho - delta)) / (2.0 * delta);
    (grad, drho)
}

/// Full eigen-decomposition of a symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in decreasing order with matching
/// eigenvector columns. Independent of the iterative solvers it checks.
pub fn dense_eigen_sym(m: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = m.nrows();
    assert_eq!(d, m.ncols(), "matrix must be square");
    let mut a = m.to_owned();
    let mut v: Array2<f64> = Array2::eye(d);
    let scale = m.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off.sqrt() <= 1e-14 * scale * d as f64 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[[p, j]];
                    let aqj = a[[q, j]];
                    a[[p, j]] = c * apj - s * aqj;
                    a[[q, j]] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| a[[i, i]]).collect();
    let mut vectors = Array2::zeros((d, d));
    for (c, &i) in order.iter().enumerate() {
        for r in 0..d {
            vectors[[r, c]] = v[[r, i]];
        }
    }
    (values, vectors)
}

/// Smallest eigenvalue by the dense Jacobi decomposition.
pub fn min_eigenvalue(m: ArrayView2<f64>) -> f64 {
    let (values, _) = dense_eigen_sym(m);
    *values.last().expect("nonempty matrix")
}

/// One verification check: a named pass/fail with a short detail line.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn random_triplets(dim: usize, count: usize, seed: u64) -> Vec<TripletConstraint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.5..1.5)));
            let v = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
            TripletConstraint::new(u, v, (0, 0, 0))
        })
        .collect()
}

/// Largest absolute disagreement between a loss derivative implementation
/// and central finite differences of the loss value over `[-3, 3]`.
pub fn loss_derivative_deviation(
    value: impl Fn(f64) -> f64,
    derivative: impl Fn(f64) -> f64,
) -> f64 {
    let delta = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let z = -3.0 + 6.0 * (i as f64 + 0.5) / 1000.0;
        let fd = (value(z + delta) - value(z - delta)) / (2.0 * delta);
        worst = worst.max((derivative(z) - fd).abs());
    }
    worst
}

/// The release-gate verification suite: loss values and derivatives,
/// gradient agreement, eigensolver cross-checks, feasibility, monotonicity,
/// grid-oracle equivalence and prediction scale invariance.
pub fn run_checks() -> Vec<Check> {
    let mut checks = Vec::new();

    // loss spot values
    {
        let huber = LossKind::huber(0.5).unwrap();
        let ok = LossKind::SquaredHinge.value(0.0) == 0.0
            && LossKind::SquaredHinge.value(-1.0) == 1.0
            && LossKind::Hinge.value(-2.0) == 2.0
            && huber.value(-0.5) == 0.5
            && huber.value(0.0) == 0.125
            && huber.derivative(0.0) == -0.5;
        checks.push(Check::new(
            "loss.values",
            ok,
            "piecewise definitions at boundary points".into(),
        ));
    }

    // loss derivative vs finite differences
    {
        let mut worst = 0.0f64;
        for kind in [
            LossKind::SquaredHinge,
            LossKind::huber(0.01).unwrap(),
            LossKind::huber(0.1).unwrap(),
            LossKind::huber(0.5).unwrap(),
        ] {
            worst = worst.max(loss_derivative_deviation(
                |z| kind.value(z),
                |z| kind.derivative(z),
            ));
        }
        checks.push(Check::new(
            "loss.derivative",
            worst <= 1e-6,
            format!("max finite-difference deviation {worst:.2e}"),
        ));
    }

    // loss convexity
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ok = true;
        for kind in [
            LossKind::Hinge,
            LossKind::SquaredHinge,
            LossKind::huber(0.5).unwrap(),
        ] {
            for _ in 0..1000 {
                let a = rng.gen_range(-4.0..4.0);
                let b = rng.gen_range(-4.0..4.0);
                if kind.value(0.5 * (a + b)) > 0.5 * (kind.value(a) + kind.value(b)) + 1e-12 {
                    ok = false;
                }
            }
        }
        checks.push(Check::new("loss.convexity", ok, "midpoint inequality".into()));
    }

    // huber approaches hinge
    {
        let sup = |h: f64| {
            let huber = LossKind::huber(h).unwrap();
            let mut worst = 0.0f64;
            for i in 0..=2000 {
                let z = -3.0 + 6.0 * i as f64 / 2000.0;
                worst = worst.max((huber.value(z) - LossKind::Hinge.value(z)).abs());
            }
            worst
        };
        let (g1, g2, g3) = (sup(0.5), sup(0.1), sup(0.01));
        checks.push(Check::new(
            "loss.huber_to_hinge",
            g1 > g2 && g2 > g3,
            format!("sup gaps {g1:.3} > {g2:.3} > {g3:.3}"),
        ));
    }

    // eigensolver vs dense Jacobi, small and large paths
    {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ok = true;
        let mut detail = String::new();
        for d in [8usize, 40] {
            let mut m = Array2::zeros((d, d));
            for i in 0..d {
                for j in 0..=i {
                    let v = rng.gen_range(-1.0..1.0);
                    m[[i, j]] = v;
                    m[[j, i]] = v;
                }
            }
            match crate::linalg::leading_eigenpair(&m.view(), 1e-9, 5000) {
                Ok(pair) => {
                    let (values, _) = dense_eigen_sym(m.view());
                    let diff = (pair.value - values[0]).abs();
                    if diff > 1e-8 * values[0].abs().max(1.0) {
                        ok = false;
                    }
                    detail = format!("{detail}d={d}: |diff| = {diff:.2e}; ");
                }
                Err(_) => ok = false,
            }
        }
        checks.push(Check::new("linalg.eigen_vs_jacobi", ok, detail));
    }

    // matrix-free operator agrees with its densified form
    {
        let triplets = random_triplets(7, 12, 3);
        let coeffs: Vec<f64> = (0..12).map(|i| 0.1 + 0.2 * i as f64).collect();
        let op = crate::linalg::RankOneSumOperator::new(
            7,
            triplets
                .iter()
                .zip(&coeffs)
                .map(|(t, c)| (*c, t.impostor_diff.view(), t.target_diff.view())),
        );
        let dense = op.to_dense();
        let p1 = crate::linalg::leading_eigenpair(&op, 1e-10, 5000);
        let p2 = crate::linalg::leading_eigenpair(&dense.view(), 1e-10, 5000);
        let ok = match (&p1, &p2) {
            (Ok(a), Ok(b)) => (a.value - b.value).abs() <= 1e-8 * b.value.abs().max(1.0),
            _ => false,
        };
        checks.push(Check::new(
            "linalg.rank_one_vs_dense",
            ok,
            "leading eigenvalue agreement".into(),
        ));
    }

    // gradient vs finite differences, both smooth losses
    {
        let mut ok = true;
        let mut detail = String::new();
        for loss in [LossKind::SquaredHinge, LossKind::huber(0.3).unwrap()] {
            let hp = HyperParams {
                c: 2.0,
                loss,
                ..HyperParams::default()
            };
            let triplets = random_triplets(5, 20, 4);
            let x = MahalanobisMatrix::uniform_rank_one(5);
            let rho = 0.6;
            let op = solver::gradient_operator(&x, rho, &triplets, &hp).unwrap();
            let dense = op.to_dense();
            let f = |xm: ArrayView2<f64>, r: f64| {
                let m: Vec<f64> = triplets
                    .iter()
                    .map(|t| t.margin_dense(xm).unwrap())
                    .collect();
                solver::objective_from_margins(&m, r, &hp)
            };
            let (fd, fd_rho) = finite_diff_grad(&f, x.matrix().view(), rho, 1e-6);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for i in 0..5 {
                for j in 0..5 {
                    num += (dense[[i, j]] - fd[[i, j]]).powi(2);
                    den += dense[[i, j]].powi(2);
                }
            }
            let rel = num.sqrt() / den.sqrt().max(1.0);
            let m = solver::margins(&x, &triplets).unwrap();
            let drho = solver::rho_derivative(&m, rho, &hp);
            let rel_rho = (drho - fd_rho).abs() / drho.abs().max(1.0);
            if rel > 1e-5 || rel_rho > 1e-5 {
                ok = false;
            }
            detail = format!("{detail}{}: dX {rel:.1e}, drho {rel_rho:.1e}; ", loss.name());
        }
        checks.push(Check::new("solver.gradient_vs_fd", ok, detail));
    }

    // training matches the exhaustive grid on small instances
    {
        let mut ok = true;
        let mut detail = String::new();
        for seed in [11u64, 12] {
            let triplets = random_triplets(2, 8, seed);
            let hp = HyperParams {
                c: if seed % 2 == 0 { 10.0 } else { 1.0 },
                ..HyperParams::default()
            };
            let grid = GridSpec {
                resolution: 201,
                rho_resolution: 201,
                rho_range: None,
            };
            let sol = grid_solve_2d(&triplets, &hp, &grid).unwrap();
            let state = solver::train(&triplets, 2, &hp, None).unwrap();
            if state.objective < sol.objective - 1e-3 {
                ok = false;
            }
            detail = format!(
                "{detail}seed {seed}: train {:.6} vs grid {:.6}; ",
                state.objective, sol.objective
            );
        }
        checks.push(Check::new("solver.grid_equivalence", ok, detail));
    }

    // feasibility and monotonicity along a full run
    {
        let triplets = random_triplets(4, 40, 6);
        let hp = HyperParams {
            c: 5.0,
            loss: LossKind::huber(0.5).unwrap(),
            ..HyperParams::default()
        };
        let state = solver::train(&triplets, 4, &hp, None).unwrap();
        let mut x = MahalanobisMatrix::uniform_rank_one(4);
        let mut feasible = trace_and_psd_ok(&x);
        for step in &state.steps {
            x.blend(step.alpha, &step.vertex);
            feasible &= trace_and_psd_ok(&x);
        }
        checks.push(Check::new(
            "solver.feasibility",
            feasible,
            format!("{} iterates checked densely", state.steps.len() + 1),
        ));
        let monotone = state.trace.windows(2).all(|w| w[1] >= w[0] - 1e-10);
        checks.push(Check::new(
            "solver.monotonicity",
            monotone,
            format!("{} objective evaluations", state.trace.len()),
        ));
    }

    // k-NN predictions are invariant to positive scaling of the matrix
    {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ndarray::array![[0.6, 0.2], [0.2, 0.4]];
        let m1 = crate::metric::LearnedMetric::from_matrix(x.view()).unwrap();
        let x3 = &x * 3.0;
        let m3 = crate::metric::LearnedMetric::from_matrix(x3.view()).unwrap();
        let train = ndarray::array![
            [0.0, 0.0],
            [0.3, 0.1],
            [0.1, 0.4],
            [4.0, 4.0],
            [4.3, 4.1],
            [4.1, 4.4],
        ];
        let labels = vec![0usize, 0, 0, 1, 1, 1];
        let mut ok = true;
        for _ in 0..50 {
            let q = ndarray::array![rng.gen_range(-1.0..5.0), rng.gen_range(-1.0..5.0)];
            let a = crate::metric::knn_classify(&m1, train.view(), &labels, q.view(), 3).unwrap();
            let b = crate::metric::knn_classify(&m3, train.view(), &labels, q.view(), 3).unwrap();
            if a != b {
                ok = false;
            }
        }
        checks.push(Check::new(
            "metric.scale_invariance",
            ok,
            "50 random queries".into(),
        ));
    }

    checks
}

fn trace_and_psd_ok(x: &MahalanobisMatrix) -> bool {
    (x.trace() - 1.0).abs() <= 1e-9 && min_eigenvalue(x.matrix().view()) >= -1e-9
}
