//! Consumers of a learned matrix: Mahalanobis distances, k-NN
//! classification and retrieval evaluation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg::{self, leading_eigenpair};
use crate::solver::MahalanobisMatrix;

/// A matrix X together with a factor P (columns scaled by the square root
/// of each eigenvalue, eigenvalues below 1e-12 dropped) so that `P P' ~ X`
/// and distances can be computed as squared Euclidean distances after the
/// linear map.
#[derive(Debug, Clone)]
pub struct LearnedMetric {
    matrix: Array2<f64>,
    transform: Array2<f64>,
}

impl LearnedMetric {
    pub fn new(x: &MahalanobisMatrix) -> Result<Self> {
        Self::from_matrix(x.matrix().view())
    }

    pub fn from_matrix(x: ArrayView2<f64>) -> Result<Self> {
        let (r, c) = x.dim();
        if r != c {
            return Err(Error::Dimension { expected: r, got: c });
        }
        let d = r;
        let mut work = x.to_owned();
        let mut directions: Vec<Array1<f64>> = Vec::new();
        let mut scales: Vec<f64> = Vec::new();
        while directions.len() < d {
            let pair = match leading_eigenpair(&work.view(), 1e-10, 10_000) {
                Ok(p) => p,
                Err(Error::EigenNoConvergence {
                    value,
                    residual,
                    vector,
                    ..
                }) if residual <= 1e-8 * value.abs().max(1.0) => linalg::EigenPair {
                    value,
                    vector: Array1::from_vec(vector),
                },
                Err(e) => return Err(e),
            };
            if pair.value <= 1e-12 {
                break;
            }
            let mut v = pair.vector;
            for prev in &directions {
                let o = prev.dot(&v);
                v.scaled_add(-o, prev);
            }
            let n = v.dot(&v).sqrt();
            if n < 1e-8 {
                break;
            }
            v /= n;
            for i in 0..d {
                for j in 0..d {
                    work[[i, j]] -= pair.value * v[i] * v[j];
                }
            }
            scales.push(pair.value.sqrt());
            directions.push(v);
        }
        let k = directions.len();
        let mut transform = Array2::zeros((d, k));
        for (c, (dir, s)) in directions.iter().zip(&scales).enumerate() {
            for i in 0..d {
                transform[[i, c]] = dir[i] * s;
            }
        }
        Ok(LearnedMetric {
            matrix: x.to_owned(),
            transform,
        })
    }

    /// Euclidean reference metric `X = I / D`.
    pub fn euclidean(dim: usize) -> Self {
        let matrix = Array2::eye(dim) / dim as f64;
        let transform = Array2::eye(dim) / (dim as f64).sqrt();
        LearnedMetric { matrix, transform }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }

    /// The factor P; `P P'` reconstructs X up to dropped near-null
    /// directions.
    pub fn transform(&self) -> ArrayView2<'_, f64> {
        self.transform.view()
    }

    /// Squared Mahalanobis distance `(a - b)' X (a - b)`.
    pub fn dist(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
        if a.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: a.len(),
            });
        }
        if b.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: b.len(),
            });
        }
        let diff = &a - &b;
        linalg::quad_form(self.matrix.view(), diff.view())
    }

    /// Maps points into the factor space where the metric is Euclidean.
    pub fn project(&self, points: ArrayView2<f64>) -> Result<Array2<f64>> {
        if points.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: points.ncols(),
            });
        }
        Ok(points.dot(&self.transform))
    }
}

/// Free-function form of [`LearnedMetric::dist`].
pub fn mahalanobis_dist(
    metric: &LearnedMetric,
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
) -> Result<f64> {
    metric.dist(a, b)
}

fn squared_euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// k nearest rows of `projected_train` to `query`, as indices sorted by
/// (distance, index).
fn nearest(projected_train: ArrayView2<f64>, query: ArrayView1<f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = projected_train
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (squared_euclidean(row, query), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.into_iter().map(|(_, i)| i).collect()
}

fn vote(neighbors: &[usize], labels: &[usize]) -> usize {
    let max_label = neighbors.iter().map(|&i| labels[i]).max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &i in neighbors {
        counts[labels[i]] += 1;
    }
    let best = *counts.iter().max().unwrap();
    // ties go to the label of the nearest neighbor among the tied labels
    for &i in neighbors {
        if counts[labels[i]] == best {
            return labels[i];
        }
    }
    unreachable!("neighbors is nonempty");
}

/// Majority label among the k nearest training samples. Distance ties break
/// toward the smaller training index; vote ties toward the label of the
/// nearest tied neighbor.
pub fn knn_classify(
    metric: &LearnedMetric,
    train: ArrayView2<f64>,
    train_labels: &[usize],
    query: ArrayView1<f64>,
    k: usize,
) -> Result<usize> {
    if train.nrows() == 0 {
        return Err(Error::Domain("k-NN needs a nonempty training set".into()));
    }
    if k == 0 || k > train.nrows() {
        return Err(Error::Domain(format!(
            "k must be in 1..={}, got {k}",
            train.nrows()
        )));
    }
    let pt = metric.project(train)?;
    let pq = metric.project(query.insert_axis(ndarray::Axis(0)))?;
    let neighbors = nearest(pt.view(), pq.row(0), k);
    Ok(vote(&neighbors, train_labels))
}

/// Fraction of `test` rows misclassified by k-NN over `train`.
pub fn error_rate(
    metric: &LearnedMetric,
    train: ArrayView2<f64>,
    train_labels: &[usize],
    test: ArrayView2<f64>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if train.nrows() == 0 {
        return Err(Error::Domain("k-NN needs a nonempty training set".into()));
    }
    if k == 0 || k > train.nrows() {
        return Err(Error::Domain(format!(
            "k must be in 1..={}, got {k}",
            train.nrows()
        )));
    }
    if test.nrows() == 0 {
        return Ok(0.0);
    }
    let pt = metric.project(train)?;
    let pq = metric.project(test)?;
    let mut wrong = 0usize;
    for (q, &label) in pq.rows().into_iter().zip(test_labels) {
        let neighbors = nearest(pt.view(), q, k);
        if vote(&neighbors, train_labels) != label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / test.nrows() as f64)
}

/// Mean retrieval accuracy at each depth `n = 1..=top_n`: the fraction of
/// the `n` nearest gallery items sharing the query's class, averaged over
/// queries. `top_n` is clamped to the gallery size.
pub fn retrieval_accuracy(
    metric: &LearnedMetric,
    gallery: ArrayView2<f64>,
    gallery_labels: &[usize],
    queries: ArrayView2<f64>,
    query_labels: &[usize],
    top_n: usize,
) -> Result<Vec<f64>> {
    if gallery.nrows() == 0 {
        return Err(Error::Domain("retrieval needs a nonempty gallery".into()));
    }
    if queries.nrows() == 0 {
        return Err(Error::Domain("retrieval needs at least one query".into()));
    }
    let mut depth = top_n;
    if depth > gallery.nrows() {
        log::warn!(
            "top_n {top_n} exceeds the gallery size {}; clamping",
            gallery.nrows()
        );
        depth = gallery.nrows();
    }
    if depth == 0 {
        return Err(Error::Domain("top_n must be at least 1".into()));
    }
    let pg = metric.project(gallery)?;
    let pq = metric.project(queries)?;
    let mut acc = vec![0.0f64; depth];
    for (q, &target) in pq.rows().into_iter().zip(query_labels) {
        let ranked = nearest(pg.view(), q, depth);
        let mut hits = 0usize;
        for (n, &idx) in ranked.iter().enumerate() {
            if gallery_labels[idx] == target {
                hits += 1;
            }
            acc[n] += hits as f64 / (n + 1) as f64;
        }
    }
    for a in &mut acc {
        *a /= queries.nrows() as f64;
    }
    Ok(acc)
}
