//! Dataset ingestion, stratified splitting, preprocessing and triplet
//! generation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Projection};

/// Labeled feature vectors, labels mapped to contiguous ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Array2<f64>,
    labels: Vec<usize>,
    label_names: Vec<String>,
    name: String,
}

impl Dataset {
    pub fn new(
        samples: Array2<f64>,
        labels: Vec<usize>,
        label_names: Vec<String>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (n, d) = samples.dim();
        if n < 2 {
            return Err(Error::Domain(format!(
                "dataset needs at least 2 samples, got {n}"
            )));
        }
        if d == 0 {
            return Err(Error::Domain("dataset needs at least 1 feature".into()));
        }
        if labels.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: labels.len(),
            });
        }
        if let Some((i, v)) = samples
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(idx, v)| (idx, *v))
        {
            return Err(Error::Domain(format!(
                "non-finite feature value {v} at row {}, column {}",
                i.0, i.1
            )));
        }
        if labels.iter().any(|&l| l >= label_names.len()) {
            return Err(Error::Domain("label id out of range".into()));
        }
        Ok(Dataset {
            samples,
            labels,
            label_names,
            name: name.into(),
        })
    }

    /// Same labels and name, new feature matrix.
    pub fn with_samples(&self, samples: Array2<f64>) -> Result<Self> {
        Dataset::new(
            samples,
            self.labels.clone(),
            self.label_names.clone(),
            self.name.clone(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    /// Indices grouped by class id, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }
}

/// Which CSV column holds the class label.
#[derive(Debug, Clone)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label_col: LabelColumn,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            has_header: true,
            label_col: LabelColumn::Name("label".into()),
        }
    }
}

/// Loads a dense CSV dataset with one label column. Label strings are mapped
/// to contiguous ids in sorted order.
pub fn load_dense(path: &Path, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
            ),
            _ => Error::parse(path, 1, e.to_string()),
        })?;

    let label_idx: usize = match &opts.label_col {
        LabelColumn::Index(i) => *i,
        LabelColumn::Name(name) => {
            if !opts.has_header {
                return Err(Error::Config(
                    "label column given by name but the file has no header".into(),
                ));
            }
            let headers = reader
                .headers()
                .map_err(|e| Error::parse(path, 1, e.to_string()))?;
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("label column '{name}' not found")))?
        }
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width: Option<usize> = None;
    for (row_i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e
                .position()
                .map(|p| p.line())
                .unwrap_or(row_i as u64 + 1);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(row_i as u64 + 1);
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::parse(
                    path,
                    line,
                    format!("ragged row: expected {w} fields, got {}", record.len()),
                ))
            }
            _ => {}
        }
        if label_idx >= record.len() {
            return Err(Error::parse(
                path,
                line,
                format!(
                    "label column index {label_idx} out of range for {} fields",
                    record.len()
                ),
            ));
        }
        let mut feats = Vec::with_capacity(record.len() - 1);
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(field.to_string());
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::parse(path, line, format!("non-numeric feature value '{field}'"))
                })?;
                feats.push(v);
            }
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }

    let (labels, label_names) = map_labels(&raw_labels);
    let d = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let samples = Array2::from_shape_vec((raw_labels.len(), d), flat)
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let ds = Dataset::new(samples, labels, label_names, name)?;
    log::info!(
        "loaded {}: {} samples, {} features, {} classes",
        path.display(),
        ds.len(),
        ds.dim(),
        ds.n_classes()
    );
    Ok(ds)
}

/// Loads a sparse text dataset in the common `label idx:val ...` format with
/// 1-based strictly ascending indices per line; absent indices are zero.
pub fn load_libsvm(path: &Path) -> Result<Dataset> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut raw_labels: Vec<String> = Vec::new();
    let mut sparse_rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;

    for (i, line) in content.lines().enumerate() {
        let line_no = i as u64 + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label = tokens
            .next()
            .ok_or_else(|| Error::parse(path, line_no, "missing label"))?;
        raw_labels.push(label.to_string());
        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut prev_index = 0usize;
        for token in tokens {
            let (idx_s, val_s) = token.split_once(':').ok_or_else(|| {
                Error::parse(path, line_no, format!("malformed pair '{token}'"))
            })?;
            let idx: usize = idx_s.parse().map_err(|_| {
                Error::parse(path, line_no, format!("bad feature index '{idx_s}'"))
            })?;
            if idx == 0 {
                return Err(Error::parse(path, line_no, "feature indices are 1-based"));
            }
            if idx <= prev_index {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("non-ascending feature index {idx} after {prev_index}"),
                ));
            }
            let val: f64 = val_s.parse().map_err(|_| {
                Error::parse(path, line_no, format!("bad feature value '{val_s}'"))
            })?;
            prev_index = idx;
            max_index = max_index.max(idx);
            row.push((idx - 1, val));
        }
        sparse_rows.push(row);
    }
    if sparse_rows.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }

    let (labels, label_names) = map_labels(&raw_labels);
    let mut samples = Array2::zeros((sparse_rows.len(), max_index.max(1)));
    for (r, row) in sparse_rows.iter().enumerate() {
        for &(c, v) in row {
            samples[[r, c]] = v;
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Dataset::new(samples, labels, label_names, name)
}

fn map_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut mapping: BTreeMap<&str, usize> = BTreeMap::new();
    for l in raw {
        let next = mapping.len();
        mapping.entry(l.as_str()).or_insert(next);
    }
    // contiguous ids in sorted label order
    let names: Vec<String> = mapping.keys().map(|s| s.to_string()).collect();
    let ids: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let labels = raw.iter().map(|l| ids[l.as_str()]).collect();
    (labels, names)
}

/// Disjoint train/validation/test index lists, deterministic per seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    #[serde(skip, default = "default_fractions")]
    pub fractions: [f64; 3],
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

impl SplitSpec {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("split serialization")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stratified random split. Validation and test sizes are the floors of
/// their fractions of n; the remainder goes to train. Classes with fewer
/// than 3 members are confined to train with a warning.
pub fn make_splits(ds: &Dataset, seed: u64, fractions: [f64; 3]) -> Result<SplitSpec> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    if fractions.iter().any(|f| *f < 0.0) {
        return Err(Error::Config("split fractions must be nonnegative".into()));
    }
    let n = ds.len();
    let want_val = (fractions[1] * n as f64).floor() as usize;
    let want_test = (fractions[2] * n as f64).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools = ds.indices_by_class();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let confined: Vec<bool> = pools.iter().map(|p| p.len() < 3).collect();
    for (c, conf) in confined.iter().enumerate() {
        if *conf {
            log::warn!(
                "class '{}' has {} samples; confined to the training split",
                ds.label_names()[c],
                pools[c].len()
            );
        }
    }

    let counts = |frac: f64| -> (Vec<usize>, Vec<f64>) {
        pools
            .iter()
            .zip(&confined)
            .map(|(p, conf)| {
                if *conf {
                    (0usize, 0.0f64)
                } else {
                    let exact = frac * p.len() as f64;
                    (exact.floor() as usize, exact - exact.floor())
                }
            })
            .unzip()
    };
    let (mut val_c, val_frac) = counts(fractions[1]);
    let (mut test_c, test_frac) = counts(fractions[2]);

    // ensure each non-confined class keeps at least one training member
    for c in 0..pools.len() {
        if confined[c] {
            continue;
        }
        while pools[c].len() - val_c[c] - test_c[c] < 1 {
            if val_c[c] >= test_c[c] && val_c[c] > 0 {
                val_c[c] -= 1;
            } else if test_c[c] > 0 {
                test_c[c] -= 1;
            } else {
                break;
            }
        }
    }

    // distribute floor deficits by largest fractional part, never draining a
    // class's training members
    let distribute = |counts: &mut Vec<usize>,
                      other: &Vec<usize>,
                      fracs: &[f64],
                      target: usize,
                      pools: &[Vec<usize>]| {
        let mut assigned: usize = counts.iter().sum();
        let mut order: Vec<usize> = (0..counts.len()).filter(|c| !confined[*c]).collect();
        order.sort_by(|a, b| {
            fracs[*b]
                .partial_cmp(&fracs[*a])
                .unwrap()
                .then(a.cmp(b))
        });
        while assigned < target {
            let mut placed = false;
            for &c in &order {
                if assigned >= target {
                    break;
                }
                if pools[c].len() - counts[c] - other[c] > 1 {
                    counts[c] += 1;
                    assigned += 1;
                    placed = true;
                }
            }
            if !placed {
                break;
            }
        }
    };
    distribute(&mut val_c, &test_c, &val_frac, want_val, &pools);
    distribute(&mut test_c, &val_c, &test_frac, want_test, &pools);

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        let v = val_c[c];
        let t = test_c[c];
        validation.extend_from_slice(&pool[..v]);
        test.extend_from_slice(&pool[v..v + t]);
        train.extend_from_slice(&pool[v + t..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();

    for (role, list, frac) in [
        ("train", &train, fractions[0]),
        ("validation", &validation, fractions[1]),
        ("test", &test, fractions[2]),
    ] {
        if frac > 0.0 && list.is_empty() {
            return Err(Error::Domain(format!(
                "split leaves the {role} role empty (n = {n})"
            )));
        }
    }

    Ok(SplitSpec {
        seed,
        fractions,
        train,
        validation,
        test,
    })
}

/// One proximity comparison, stored as the two difference vectors of its
/// outer-product form: `impostor_diff = a_i - a_k` (different class) and
/// `target_diff = a_i - a_j` (same class).
#[derive(Debug, Clone)]
pub struct TripletConstraint {
    pub impostor_diff: Array1<f64>,
    pub target_diff: Array1<f64>,
    /// (i, j, k) source sample indices.
    pub source: (usize, usize, usize),
}

impl TripletConstraint {
    pub fn new(
        impostor_diff: Array1<f64>,
        target_diff: Array1<f64>,
        source: (usize, usize, usize),
    ) -> Self {
        debug_assert_eq!(impostor_diff.len(), target_diff.len());
        TripletConstraint {
            impostor_diff,
            target_diff,
            source,
        }
    }

    pub fn dim(&self) -> usize {
        self.impostor_diff.len()
    }

    /// `<A_r, X>` evaluated in factored form against a dense matrix.
    pub fn margin_dense(&self, x: ndarray::ArrayView2<f64>) -> Result<f64> {
        let a = linalg::quad_form(x, self.impostor_diff.view())?;
        let b = linalg::quad_form(x, self.target_diff.view())?;
        Ok(a - b)
    }

    /// `<A_r, w v v'>` contribution of one rank-one component of X.
    pub fn margin_rank_one(&self, weight: f64, v: ArrayView1<f64>) -> f64 {
        let a = self.impostor_diff.dot(&v);
        let b = self.target_diff.dot(&v);
        weight * (a * a - b * b)
    }
}

/// Generates triplets from the training split: each training sample pairs
/// its `m` nearest same-class peers with its `m` nearest different-class
/// samples (Euclidean, ties broken by smaller index).
pub fn generate_triplets(
    ds: &Dataset,
    train_idx: &[usize],
    m: usize,
) -> Result<Vec<TripletConstraint>> {
    if m == 0 {
        return Err(Error::Domain("neighbors-per-side m must be at least 1".into()));
    }
    if train_idx.len() < 2 {
        return Err(Error::Domain("triplet generation needs at least 2 training samples".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &i in train_idx {
        seen.insert(ds.labels()[i]);
    }
    if seen.len() < 2 {
        return Err(Error::Domain(
            "triplet generation needs at least 2 distinct classes in the training split".into(),
        ));
    }

    let mut triplets = Vec::new();
    for &i in train_idx {
        let anchor = ds.row(i);
        let label = ds.labels()[i];
        let mut same: Vec<(f64, usize)> = Vec::new();
        let mut diff: Vec<(f64, usize)> = Vec::new();
        for &j in train_idx {
            if j == i {
                continue;
            }
            let delta = &anchor - &ds.row(j);
            let d2 = delta.dot(&delta);
            if ds.labels()[j] == label {
                same.push((d2, j));
            } else {
                diff.push((d2, j));
            }
        }
        if same.is_empty() {
            log::info!(
                "training sample {i} has no same-class peer; it only appears as an impostor"
            );
            continue;
        }
        let by_dist_then_index =
            |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
        same.sort_by(by_dist_then_index);
        diff.sort_by(by_dist_then_index);
        for &(_, j) in same.iter().take(m) {
            for &(_, k) in diff.iter().take(m) {
                let u = &anchor - &ds.row(k);
                let v = &anchor - &ds.row(j);
                triplets.push(TripletConstraint::new(u, v, (i, j, k)));
            }
        }
    }
    Ok(triplets)
}

/// Fits PCA on the training rows only and projects the whole dataset.
pub fn apply_pca(
    ds: &Dataset,
    train_idx: &[usize],
    target_dim: usize,
) -> Result<(Dataset, Projection)> {
    if target_dim > ds.dim() {
        return Err(Error::Domain(format!(
            "PCA target dimension {target_dim} exceeds data dimension {}",
            ds.dim()
        )));
    }
    let train_rows = ds.samples().select(Axis(0), train_idx);
    let projection = linalg::pca_fit(train_rows.view(), target_dim)?;
    let projected = projection.project(ds.samples().view());
    Ok((ds.with_samples(projected)?, projection))
}

/// Per-feature z-scoring with mean and deviation fit on the training rows.
/// Near-constant features are left unscaled.
pub fn standardize(ds: &Dataset, train_idx: &[usize]) -> Result<Dataset> {
    let train_rows = ds.samples().select(Axis(0), train_idx);
    let mean = train_rows.mean_axis(Axis(0)).ok_or_else(|| {
        Error::Domain("standardization needs a nonempty training split".into())
    })?;
    let n = train_rows.nrows() as f64;
    let mut std = Array1::zeros(ds.dim());
    for j in 0..ds.dim() {
        let var = train_rows
            .column(j)
            .iter()
            .map(|v| (v - mean[j]) * (v - mean[j]))
            .sum::<f64>()
            / (n - 1.0).max(1.0);
        std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }
    let mut out = ds.samples().clone();
    for mut row in out.rows_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - mean[j]) / std[j];
        }
    }
    ds.with_samples(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn toy_dataset() -> Dataset {
        // two tight clusters, two classes
        let samples = array![
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [5.0, 5.0],
            [5.1, 5.0],
            [5.0, 5.1],
        ];
        let labels = vec![0, 0, 0, 1, 1, 1];
        Dataset::new(samples, labels, vec!["a".into(), "b".into()], "toy").unwrap()
    }

    #[test]
    fn csv_three_lines() {
        let f = write_tmp("1.0,2.0,A\n0.0,1.0,A\n5.0,5.0,B\n");
        let ds = load_dense(
            f.path(),
            &CsvOptions {
                has_header: false,
                label_col: LabelColumn::Index(2),
            },
        )
        .unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.labels(), &[0, 0, 1]);
    }

    #[test]
    fn csv_empty_file_errors() {
        let f = write_tmp("");
        assert!(load_dense(
            f.path(),
            &CsvOptions {
                has_header: false,
                label_col: LabelColumn::Index(0)
            }
        )
        .is_err());
    }

    #[test]
    fn csv_ragged_row_reports_line() {
        let f = write_tmp("a,b,label\n1.0,2.0,x\n1.0,x\n");
        let err = load_dense(f.path(), &CsvOptions::default()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_non_numeric_feature_errors() {
        let f = write_tmp("a,b,label\n1.0,oops,x\n2.0,3.0,y\n");
        assert!(matches!(
            load_dense(f.path(), &CsvOptions::default()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn csv_unknown_label_column() {
        let f = write_tmp("a,b,label\n1.0,2.0,x\n");
        let err = load_dense(
            f.path(),
            &CsvOptions {
                has_header: true,
                label_col: LabelColumn::Name("class".into()),
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn libsvm_basic_and_errors() {
        let f = write_tmp("1 1:0.5 3:2.0\n2 2:1.0\n");
        let ds = load_libsvm(f.path()).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.samples().row(0).to_vec(), vec![0.5, 0.0, 2.0]);
        assert_eq!(ds.samples().row(1).to_vec(), vec![0.0, 1.0, 0.0]);

        let bad = write_tmp("1 3:1 2:1\n");
        let err = load_libsvm(bad.path()).unwrap_err();
        match err {
            Error::Parse { line, msg, .. } => {
                assert_eq!(line, 1);
                assert!(msg.contains("non-ascending"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn splits_sizes_and_determinism() {
        let mut samples = Array2::zeros((100, 2));
        let mut labels = Vec::new();
        for i in 0..100 {
            samples[[i, 0]] = i as f64;
            labels.push(i % 4);
        }
        let ds = Dataset::new(
            samples,
            labels,
            vec!["0".into(), "1".into(), "2".into(), "3".into()],
            "hundred",
        )
        .unwrap();
        let s = make_splits(&ds, 7, [0.7, 0.15, 0.15]).unwrap();
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.validation.len(), 15);
        assert_eq!(s.test.len(), 15);
        let s2 = make_splits(&ds, 7, [0.7, 0.15, 0.15]).unwrap();
        assert_eq!(s.train, s2.train);
        assert_eq!(s.validation, s2.validation);
        assert_eq!(s.test, s2.test);
        // disjoint and covering
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // every class reaches train
        for c in 0..4 {
            assert!(s.train.iter().any(|&i| ds.labels()[i] == c));
        }
    }

    #[test]
    fn splits_json_roundtrip() {
        let ds = toy_dataset();
        let s = make_splits(&ds, 3, [0.5, 0.25, 0.25]).unwrap();
        let json = s.to_json();
        assert!(json.starts_with("{\"seed\":3,\"train\":["));
        let back: SplitSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.train, s.train);
        assert_eq!(back.test, s.test);
    }

    #[test]
    fn triplets_toy_counts_and_labels() {
        let ds = toy_dataset();
        let idx: Vec<usize> = (0..6).collect();
        let triplets = generate_triplets(&ds, &idx, 1).unwrap();
        assert_eq!(triplets.len(), 6);
        for t in &triplets {
            let (i, j, k) = t.source;
            assert_eq!(ds.labels()[i], ds.labels()[j]);
            assert_ne!(ds.labels()[i], ds.labels()[k]);
        }
    }

    #[test]
    fn triplets_two_per_class() {
        let samples = array![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]];
        let ds = Dataset::new(
            samples,
            vec![0, 0, 1, 1],
            vec!["a".into(), "b".into()],
            "quad",
        )
        .unwrap();
        let triplets = generate_triplets(&ds, &[0, 1, 2, 3], 1).unwrap();
        assert_eq!(triplets.len(), 4);
    }

    #[test]
    fn triplet_count_formula() {
        let ds = toy_dataset();
        let idx: Vec<usize> = (0..6).collect();
        for m in 1..=4 {
            let triplets = generate_triplets(&ds, &idx, m).unwrap();
            let expected: usize = idx
                .iter()
                .map(|&i| {
                    let same = idx
                        .iter()
                        .filter(|&&j| j != i && ds.labels()[j] == ds.labels()[i])
                        .count();
                    let diff = idx
                        .iter()
                        .filter(|&&j| ds.labels()[j] != ds.labels()[i])
                        .count();
                    same.min(m) * diff.min(m)
                })
                .sum();
            assert_eq!(triplets.len(), expected);
        }
    }

    #[test]
    fn pca_full_dim_preserves_distances() {
        let mut samples = Array2::zeros((12, 3));
        for i in 0..12 {
            samples[[i, 0]] = (i as f64).sin() * 2.0;
            samples[[i, 1]] = (i as f64).cos() * 0.5;
            samples[[i, 2]] = i as f64 * 0.1;
        }
        let ds = Dataset::new(
            samples,
            (0..12).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            "rot",
        )
        .unwrap();
        let idx: Vec<usize> = (0..12).collect();
        let (projected, _) = apply_pca(&ds, &idx, 3).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let a = &ds.row(i) - &ds.row(j);
                let b = &projected.row(i) - &projected.row(j);
                assert_abs_diff_eq!(a.dot(&a), b.dot(&b), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn pca_fit_ignores_non_train_rows() {
        let mut samples = Array2::zeros((10, 3));
        for i in 0..10 {
            samples[[i, 0]] = i as f64;
            samples[[i, 1]] = (i as f64) * 0.5 + 1.0;
            samples[[i, 2]] = ((i * 7) % 5) as f64;
        }
        let ds = Dataset::new(
            samples.clone(),
            (0..10).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            "leak",
        )
        .unwrap();
        let train: Vec<usize> = (0..6).collect();
        let (_, p1) = apply_pca(&ds, &train, 2).unwrap();

        // permute the non-train rows; the fitted projection must not change
        let mut permuted = samples;
        let r8 = permuted.row(8).to_owned();
        let r9 = permuted.row(9).to_owned();
        permuted.row_mut(8).assign(&r9);
        permuted.row_mut(9).assign(&r8);
        let ds2 = Dataset::new(
            permuted,
            (0..10).map(|i| i % 2).collect(),
            vec!["a".into(), "b".into()],
            "leak2",
        )
        .unwrap();
        let (_, p2) = apply_pca(&ds2, &train, 2).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert_eq!(p1.components[[i, c]], p2.components[[i, c]]);
            }
        }
    }

    #[test]
    fn standardize_train_statistics() {
        let ds = toy_dataset();
        let train: Vec<usize> = vec![0, 1, 2, 3, 4, 5];
        let z = standardize(&ds, &train).unwrap();
        let mean = z.samples().mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(mean[j], 0.0, epsilon = 1e-12);
        }
    }
}
