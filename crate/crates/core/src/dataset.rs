//! Multi-view datasets: loading, validation, normalization, batching and a
//! seeded synthetic generator.
//!
//! On disk a dataset is a directory holding `meta.json`, one headerless CSV
//! per view (`view_0.csv`, `view_1.csv`, ...) and, optionally, `labels.csv`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{epoch_seed, seeded, sub_seed, SeedStream};

/// One view `X^v`: `N` samples by `D_v` features.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMatrix {
    data: Array2<f64>,
    view_index: usize,
}

impl ViewMatrix {
    pub fn new(data: Array2<f64>, view_index: usize) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 || d < 1 {
            return Err(Error::Shape(format!(
                "view {view_index} must have at least 2 rows and 1 column, got {n}x{d}"
            )));
        }
        if let Some(((r, c), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "view {view_index} has a non-finite entry at row {r}, column {c}"
            )));
        }
        Ok(Self { data, view_index })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn view_index(&self) -> usize {
        self.view_index
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<ViewMatrix>,
    labels: Option<Vec<usize>>,
    k: usize,
    name: String,
}

impl MultiViewDataset {
    pub fn new(
        name: impl Into<String>,
        views: Vec<ViewMatrix>,
        labels: Option<Vec<usize>>,
        k: usize,
    ) -> Result<Self> {
        if views.len() < 2 {
            return Err(Error::Validation(format!(
                "a multi-view dataset needs at least 2 views, got {}",
                views.len()
            )));
        }
        if k < 2 {
            return Err(Error::Validation(format!("need at least 2 clusters, got k={k}")));
        }
        let n = views[0].rows();
        for v in &views[1..] {
            if v.rows() != n {
                return Err(Error::Shape(format!(
                    "view {} has {} rows but view 0 has {n}",
                    v.view_index,
                    v.rows()
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} samples",
                    labels.len()
                )));
            }
            if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
                return Err(Error::Range(format!("label {l} at row {i} is not below k={k}")));
            }
        }
        Ok(Self {
            views,
            labels,
            k,
            name: name.into(),
        })
    }

    /// Builds a dataset from raw matrices, indexing views in order.
    pub fn from_arrays(
        name: impl Into<String>,
        views: Vec<Array2<f64>>,
        labels: Option<Vec<usize>>,
        k: usize,
    ) -> Result<Self> {
        let views = views
            .into_iter()
            .enumerate()
            .map(|(i, m)| ViewMatrix::new(m, i))
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, views, labels, k)
    }

    pub fn views(&self) -> &[ViewMatrix] {
        &self.views
    }

    pub fn view(&self, v: usize) -> &Array2<f64> {
        &self.views[v].data
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_samples(&self) -> usize {
        self.views[0].rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(ViewMatrix::dim).collect()
    }

    /// Copies the given rows of every view.
    pub fn select_rows(&self, v: usize, rows: &[usize]) -> Array2<f64> {
        self.views[v].data.select(Axis(0), rows)
    }

    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }

    /// Horizontal concatenation of all views.
    pub fn concatenated(&self) -> Array2<f64> {
        let parts: Vec<_> = self.views.iter().map(|v| v.data.view()).collect();
        ndarray::concatenate(Axis(1), &parts).expect("views share a row count")
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub num_views: usize,
    pub num_samples: usize,
    pub num_clusters: usize,
    pub view_dims: Vec<usize>,
    pub has_labels: bool,
}

fn view_file(i: usize) -> String {
    format!("view_{i}.csv")
}

fn read_file(root: &Path, file: &str) -> Result<String> {
    fs::read_to_string(root.join(file)).map_err(|source| Error::Load {
        file: file.to_string(),
        source,
    })
}

fn read_matrix(root: &Path, file: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let text = read_file(root, file)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            file: file.to_string(),
            row: r,
            col: 0,
            msg: e.to_string(),
        })?;
        if rec.len() != cols {
            return Err(Error::Shape(format!(
                "{file} row {r} has {} columns, expected {cols}",
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            let x: f64 = cell.parse().map_err(|_| Error::Parse {
                file: file.to_string(),
                row: r,
                col: c,
                msg: format!("not a number: {cell:?}"),
            })?;
            data.push(x);
        }
        n += 1;
    }
    if n != rows {
        return Err(Error::Shape(format!("{file} has {n} rows, expected {rows}")));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
}

fn read_labels(root: &Path, rows: usize) -> Result<Vec<usize>> {
    let file = "labels.csv";
    let text = read_file(root, file)?;
    let labels = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(r, l)| {
            l.parse::<usize>().map_err(|_| Error::Parse {
                file: file.to_string(),
                row: r,
                col: 0,
                msg: format!("not a non-negative integer: {l:?}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{file} has {} rows, expected {rows}",
            labels.len()
        )));
    }
    Ok(labels)
}

/// Loads and validates a dataset directory. Row order is preserved.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<MultiViewDataset> {
    let root = root.as_ref();
    let meta: DatasetMeta = serde_json::from_str(&read_file(root, "meta.json")?)?;
    if meta.view_dims.len() != meta.num_views {
        return Err(Error::Validation(format!(
            "meta.json lists {} view dims for {} views",
            meta.view_dims.len(),
            meta.num_views
        )));
    }
    let mut views = Vec::with_capacity(meta.num_views);
    let mut first_rows = None;
    for (i, &d) in meta.view_dims.iter().enumerate() {
        let file = view_file(i);
        let text = read_file(root, &file)?;
        // Count rows first so that disagreeing views surface as a shape error
        // rather than a complaint about one file.
        let rows = text.lines().filter(|l| !l.trim().is_empty()).count();
        match first_rows {
            None => first_rows = Some(rows),
            Some(r0) if r0 != rows => {
                return Err(Error::Shape(format!(
                    "{file} has {rows} rows but view_0.csv has {r0}"
                )))
            }
            _ => {}
        }
        let m = read_matrix(root, &file, rows, d)?;
        views.push(ViewMatrix::new(m, i)?);
    }
    let n = first_rows.unwrap_or(0);
    if n != meta.num_samples {
        return Err(Error::Shape(format!(
            "views have {n} rows but meta.json declares {} samples",
            meta.num_samples
        )));
    }
    let labels = if meta.has_labels {
        Some(read_labels(root, n)?)
    } else {
        None
    };
    MultiViewDataset::new(meta.name, views, labels, meta.num_clusters)
}

/// Writes `dataset` in the directory format read by [`load_dataset`].
///
/// Floats are written in shortest round-trip form, so loading the result
/// reproduces every matrix exactly.
pub fn write_dataset(dataset: &MultiViewDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let meta = DatasetMeta {
        name: dataset.name.clone(),
        num_views: dataset.n_views(),
        num_samples: dataset.n_samples(),
        num_clusters: dataset.k,
        view_dims: dataset.view_dims(),
        has_labels: dataset.labels.is_some(),
    };
    let path = root.join("meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))?;
    for (i, v) in dataset.views.iter().enumerate() {
        let path = root.join(view_file(i));
        fs::write(&path, matrix_to_csv(&v.data)).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(labels) = &dataset.labels {
        let path = root.join("labels.csv");
        let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// One row per line, shortest round-trip float formatting.
pub fn matrix_to_csv(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 12);
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Rescales every feature column to `[0, 1]`. Constant columns become 0.
pub fn normalize_minmax(dataset: &MultiViewDataset) -> MultiViewDataset {
    let mut out = dataset.clone();
    for view in &mut out.views {
        for mut col in view.data.columns_mut() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = hi - lo;
            if range > 0.0 {
                col.mapv_inplace(|x| ((x - lo) / range).clamp(0.0, 1.0));
            } else {
                col.fill(0.0);
            }
        }
    }
    out
}

/// Parameters of the synthetic shared-latent generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_per_cluster: usize,
    pub k: usize,
    pub view_dims: Vec<usize>,
    /// Distance between cluster means, in within-cluster standard deviations.
    pub cluster_separation: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_per_cluster: 200,
            k: 3,
            view_dims: vec![10, 12],
            cluster_separation: 6.0,
            noise_scale: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_cluster < 2 {
            return Err(Error::Validation("n_per_cluster must be at least 2".into()));
        }
        if self.k < 2 {
            return Err(Error::Validation("k must be at least 2".into()));
        }
        if self.view_dims.len() < 2 {
            return Err(Error::Validation("need at least 2 views".into()));
        }
        if self.view_dims.iter().any(|&d| d < 2) {
            return Err(Error::Validation("every view dimension must be at least 2".into()));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return Err(Error::Validation("cluster_separation must be positive".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Validation("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Draws a labelled multi-view dataset from a shared latent space.
///
/// Latent points come from `k` unit-variance Gaussians whose means sit on a
/// scaled simplex (`sep / sqrt(2) * e_m`), so every pair of means is exactly
/// `cluster_separation` apart. Each view multiplies the latent sample by its own
/// random Gaussian matrix and adds isotropic noise of scale `noise_scale`.
/// Samples are emitted in a seeded random order.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = seeded(sub_seed(spec.seed, SeedStream::Synth));
    let latent = spec.k;
    let n = spec.n_per_cluster * spec.k;
    let offset = spec.cluster_separation / std::f64::consts::SQRT_2;

    let mut labels: Vec<usize> = (0..n).map(|i| i / spec.n_per_cluster).collect();
    labels.shuffle(&mut rng);

    let mut z = Array2::<f64>::zeros((n, latent));
    for (mut row, &l) in z.rows_mut().into_iter().zip(&labels) {
        for (j, x) in row.iter_mut().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            *x = g + if j == l { offset } else { 0.0 };
        }
    }

    let scale = 1.0 / (latent as f64).sqrt();
    let mut views = Vec::with_capacity(spec.view_dims.len());
    for &d in &spec.view_dims {
        let proj = Array2::from_shape_simple_fn((latent, d), || {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        let mut x = z.dot(&proj);
        x.mapv_inplace(|v| v + spec.noise_scale * rng.sample::<f64, _>(StandardNormal));
        views.push(x);
    }
    MultiViewDataset::from_arrays(
        format!("synthetic-k{}-seed{}", spec.k, spec.seed),
        views,
        Some(labels),
        spec.k,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

/// Index batches for one epoch over `dataset`.
pub fn batch_iter(dataset: &MultiViewDataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batch_indices(dataset.n_samples(), plan, epoch)
}

/// Shuffles `0..n` with a generator seeded from `(shuffle_seed, epoch)` and
/// chunks the permutation.
///
/// A trailing batch of a single index has no negatives for the contrastive
/// losses; without `drop_last` it is merged into the preceding batch.
pub fn batch_indices(n: usize, plan: &BatchPlan, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if plan.batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be at least 2, got {}",
            plan.batch_size
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(epoch_seed(plan.shuffle_seed, epoch)));
    let mut batches: Vec<Vec<usize>> = order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.last() {
        if last.len() < plan.batch_size {
            if plan.drop_last {
                batches.pop();
            } else if last.len() < 2 && batches.len() > 1 {
                let tail = batches.pop().unwrap();
                batches.last_mut().unwrap().extend(tail);
            }
        }
    }
    batches.retain(|b| b.len() >= 2);
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> MultiViewDataset {
        MultiViewDataset::from_arrays(
            "tiny",
            vec![
                array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0], [0.5, 0.25, 0.125]],
                array![[1.0, -1.0], [2.0, -2.0], [3.0, -3.0], [4.0, -4.0]],
            ],
            Some(vec![0, 0, 1, 1]),
            2,
        )
        .unwrap()
    }

    #[test]
    fn write_then_load_reproduces_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.n_views(), 2);
        assert_eq!(back.n_samples(), 4);
    }

    #[test]
    fn missing_view_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join("view_1.csv")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("view_1.csv"), "{err}");
    }

    #[test]
    fn row_count_mismatch_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("view_1.csv"), "1,1\n2,2\n3,3\n4,4\n5,5\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("view_1.csv"), "1,1\n2,x\n3,3\n4,4\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { row, col, file, .. }) => {
                assert_eq!((row, col), (1, 1));
                assert_eq!(file, "view_1.csv");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&tiny(), dir.path()).unwrap();
        fs::write(dir.path().join("labels.csv"), "0\n1\n2\n0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Range(_))));
    }

    #[test]
    fn minmax_examples() {
        let ds = MultiViewDataset::from_arrays(
            "m",
            vec![
                array![[2.0, 5.0, 0.0], [4.0, 5.0, 0.5], [6.0, 5.0, 1.0]],
                array![[1.0], [2.0], [3.0]],
            ],
            None,
            2,
        )
        .unwrap();
        let out = normalize_minmax(&ds);
        let v = out.view(0);
        assert_eq!(v.column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(v.column(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert_eq!(v.column(2).to_vec(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            n_per_cluster: 100,
            k: 3,
            view_dims: vec![10, 12],
            cluster_separation: 6.0,
            noise_scale: 0.1,
            seed: 0,
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut counts = [0usize; 3];
        for &l in a.labels().unwrap() {
            counts[l] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
        assert_eq!(a.view_dims(), vec![10, 12]);
    }

    #[test]
    fn synth_rejects_invalid_spec() {
        let spec = SyntheticSpec {
            k: 1,
            ..SyntheticSpec::default()
        };
        assert!(matches!(synth_generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn batches_examples() {
        let plan = BatchPlan {
            batch_size: 2,
            shuffle_seed: 11,
            drop_last: false,
        };
        let b = batch_indices(4, &plan, 0).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert_eq!(b, batch_indices(4, &plan, 0).unwrap());

        let drop = BatchPlan { drop_last: true, ..plan };
        let b = batch_indices(5, &drop, 3).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 4);

        let b = batch_indices(5, &plan, 3).unwrap();
        assert!(b.iter().all(|x| x.len() >= 2));
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), 5);
    }

    #[test]
    fn batch_size_below_two_is_config_error() {
        let plan = BatchPlan {
            batch_size: 1,
            shuffle_seed: 0,
            drop_last: false,
        };
        assert!(matches!(batch_indices(4, &plan, 0), Err(Error::Config(_))));
    }
}
