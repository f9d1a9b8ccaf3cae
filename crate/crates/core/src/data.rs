//! Datasets, loaders, synthetic blobs, and label-noise injection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{validation, Error, Result};
use crate::rng::seeded;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Features plus one class id per sample. Sample ids are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 {
            return Err(validation("dataset is empty (N = 0)"));
        }
        if d == 0 {
            return Err(validation("dataset has no feature columns (D = 0)"));
        }
        if labels.len() != n {
            return Err(Error::Consistency(format!(
                "{} labels for {} feature rows",
                labels.len(),
                n
            )));
        }
        if num_classes == 0 {
            return Err(validation("num_classes must be positive"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(validation(format!(
                "label {y} of sample {i} is not below num_classes = {num_classes}"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(validation("features contain non-finite values"));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn ids(&self) -> Range<usize> {
        0..self.len()
    }

    /// Rows `ids`, renumbered 0..ids.len().
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(validation(format!("sample id {bad} out of range")));
        }
        let features = self.features.select(Axis(0), ids);
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.num_classes)
    }

    /// The first `n` samples (all of them when `n` is 0 or too large).
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.len() {
            return Ok(self.clone());
        }
        let ids: Vec<usize> = (0..n).collect();
        self.subset(&ids)
    }

    /// Random split into (train, test) with `round(test_fraction * N)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let (train, test) = split_ids(self.len(), test_fraction, seed)?;
        Ok((self.subset(&train)?, self.subset(&test)?))
    }
}

/// Sorted (train, test) id lists for a random split of `0..n`.
pub fn split_ids(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(validation(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seeded(seed));
    let n_test = ((n as f64) * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(validation("split leaves one side empty"));
    }
    let (test, train) = ids.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Row-stochastic C×C matrix; `T[i][j]` is the probability that an instance of
/// true class `i` is observed with label `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Array2<f64>,
}

impl TransitionMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        let (r, c) = rows.dim();
        if r != c || r == 0 {
            return Err(validation(format!("transition matrix must be square, got {r}x{c}")));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(validation(format!("row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(validation(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(Self { rows })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            rows: Array2::eye(num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn get(&self, true_class: usize, observed: usize) -> f64 {
        self.rows[[true_class, observed]]
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    Pairflip,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "pairflip" | "pair" => Ok(NoiseKind::Pairflip),
            "asymmetric" | "asym" => Ok(NoiseKind::Asymmetric),
            other => Err(validation(format!(
                "unknown noise kind `{other}` (expected symmetric, pairflip or asymmetric)"
            ))),
        }
    }
}

/// Source class to target class for asymmetric noise.
pub type ClassMap = BTreeMap<usize, usize>;

/// The usual CIFAR-10 asymmetric map: truck→automobile, bird→airplane,
/// deer→horse, cat↔dog.
pub fn cifar10_class_map() -> ClassMap {
    [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)].into_iter().collect()
}

/// Parses `src:dst,src:dst,...`, or the preset name `cifar10`.
pub fn parse_class_map(s: &str) -> Result<ClassMap> {
    if s.trim() == "cifar10" {
        return Ok(cifar10_class_map());
    }
    let mut map = ClassMap::new();
    for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (a, b) = pair
            .split_once(':')
            .ok_or_else(|| validation(format!("class map entry `{pair}` is not `src:dst`")))?;
        let a: usize = a
            .trim()
            .parse()
            .map_err(|_| validation(format!("bad class id `{a}` in class map")))?;
        let b: usize = b
            .trim()
            .parse()
            .map_err(|_| validation(format!("bad class id `{b}` in class map")))?;
        if map.insert(a, b).is_some() {
            return Err(validation(format!("class {a} mapped twice")));
        }
    }
    if map.is_empty() {
        return Err(validation("class map is empty"));
    }
    Ok(map)
}

pub fn make_transition(
    kind: NoiseKind,
    tau: f64,
    num_classes: usize,
    map: Option<&ClassMap>,
) -> Result<TransitionMatrix> {
    if !(0.0..1.0).contains(&tau) {
        return Err(validation(format!("noise rate tau = {tau} outside [0, 1)")));
    }
    if num_classes < 2 {
        return Err(validation("noise injection needs at least 2 classes"));
    }
    let c = num_classes;
    let mut t = Array2::<f64>::zeros((c, c));
    match kind {
        NoiseKind::Symmetric => {
            // self-flips excluded: the changed-label rate is exactly tau
            let off = tau / (c - 1) as f64;
            t.fill(off);
            for i in 0..c {
                t[[i, i]] = 1.0 - tau;
            }
        }
        NoiseKind::Pairflip => {
            for i in 0..c {
                t[[i, i]] = 1.0 - tau;
                t[[i, (i + 1) % c]] += tau;
            }
        }
        NoiseKind::Asymmetric => {
            let map = map.ok_or_else(|| {
                Error::Config(vec!["asymmetric noise requires a class map (noise.map)".into()])
            })?;
            for i in 0..c {
                t[[i, i]] = 1.0;
            }
            for (&src, &dst) in map {
                if src >= c || dst >= c {
                    return Err(validation(format!(
                        "class map entry {src}:{dst} outside 0..{c}"
                    )));
                }
                if src == dst {
                    continue;
                }
                t[[src, src]] = 1.0 - tau;
                t[[src, dst]] = tau;
            }
        }
    }
    TransitionMatrix::new(t)
}

/// A dataset whose training labels went through a noise channel. The true
/// labels are kept only for evaluation; training code sees [`TrainView`].
#[derive(Debug, Clone)]
pub struct NoisyDataset {
    base: Dataset,
    observed: Vec<usize>,
    transition: TransitionMatrix,
}

/// What the training loop is allowed to see: features and observed labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub features: &'a Array2<f64>,
    pub observed: &'a [usize],
    pub num_classes: usize,
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }
}

impl NoisyDataset {
    /// Wraps labels that were corrupted elsewhere (e.g. read back from CSV).
    pub fn from_parts(
        base: Dataset,
        observed: Vec<usize>,
        transition: TransitionMatrix,
    ) -> Result<Self> {
        if observed.len() != base.len() {
            return Err(Error::Consistency(format!(
                "{} observed labels for {} samples",
                observed.len(),
                base.len()
            )));
        }
        if transition.num_classes() != base.num_classes() {
            return Err(validation("transition matrix size differs from num_classes"));
        }
        if let Some(&y) = observed.iter().find(|&&y| y >= base.num_classes()) {
            return Err(validation(format!("observed label {y} out of range")));
        }
        Ok(Self {
            base,
            observed,
            transition,
        })
    }

    /// No corruption: observed labels equal the true labels.
    pub fn clean(base: Dataset) -> Self {
        let observed = base.labels().to_vec();
        let transition = TransitionMatrix::identity(base.num_classes());
        Self {
            base,
            observed,
            transition,
        }
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            features: self.base.features(),
            observed: &self.observed,
            num_classes: self.base.num_classes(),
        }
    }

    pub fn features(&self) -> &Array2<f64> {
        self.base.features()
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed
    }

    /// Evaluation only.
    pub fn true_labels(&self) -> &[usize] {
        self.base.labels()
    }

    pub fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.transition
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// `true` where the observed label is correct.
    pub fn clean_mask(&self) -> Vec<bool> {
        self.observed
            .iter()
            .zip(self.true_labels())
            .map(|(o, t)| o == t)
            .collect()
    }

    pub fn noise_fraction(&self) -> f64 {
        let flipped = self.clean_mask().iter().filter(|c| !**c).count();
        flipped as f64 / self.len() as f64
    }
}

pub fn inject_noise(d: &Dataset, t: &TransitionMatrix, seed: u64) -> Result<NoisyDataset> {
    if t.num_classes() != d.num_classes() {
        return Err(validation(format!(
            "transition matrix is {}x{} but dataset has {} classes",
            t.num_classes(),
            t.num_classes(),
            d.num_classes()
        )));
    }
    let mut rng = seeded(seed);
    let observed = d
        .labels()
        .iter()
        .map(|&y| sample_row(t.rows.row(y).as_slice().expect("standard layout"), rng.random()))
        .collect();
    Ok(NoisyDataset {
        base: d.clone(),
        observed,
        transition: t.clone(),
    })
}

fn sample_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_nonzero = j;
            if u < acc {
                return j;
            }
        }
    }
    last_nonzero
}

/// Row-normalized counts of (true, observed) pairs; rows with no samples stay zero.
pub fn empirical_transition(true_labels: &[usize], observed: &[usize], num_classes: usize) -> Array2<f64> {
    let mut counts = Array2::<f64>::zeros((num_classes, num_classes));
    for (&t, &o) in true_labels.iter().zip(observed) {
        counts[[t, o]] += 1.0;
    }
    for mut row in counts.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    counts
}

/// Isotropic Gaussian blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub samples_per_class: usize,
    pub class_center_scale: f64,
    pub cluster_std: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_classes == 0 {
            errs.push("blobs: num_classes must be positive".to_string());
        }
        if self.dims == 0 {
            errs.push("blobs: dims must be positive".to_string());
        }
        if self.samples_per_class == 0 {
            errs.push("blobs: samples_per_class must be positive".to_string());
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            errs.push(format!("blobs: cluster_std = {} must be > 0", self.cluster_std));
        }
        if !(self.class_center_scale >= 0.0 && self.class_center_scale.is_finite()) {
            errs.push(format!(
                "blobs: class_center_scale = {} must be >= 0",
                self.class_center_scale
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs.join("; ")))
        }
    }

    /// Class centers. With `num_classes <= dims` the directions are
    /// orthonormalized, so centers sit `scale * sqrt(2)` apart.
    pub fn centers(&self) -> Array2<f64> {
        let mut rng = seeded(self.seed);
        let (c, d) = (self.num_classes, self.dims);
        let mut dirs = Array2::<f64>::zeros((c, d));
        for mut row in dirs.outer_iter_mut() {
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        for i in 0..c {
            if c <= d {
                for j in 0..i {
                    let proj = dirs.row(i).dot(&dirs.row(j));
                    let prev = dirs.row(j).to_owned();
                    dirs.row_mut(i).scaled_add(-proj, &prev);
                }
            }
            let norm = dirs.row(i).dot(&dirs.row(i)).sqrt();
            dirs.row_mut(i).mapv_inplace(|v| v / norm);
        }
        dirs * self.class_center_scale
    }
}

pub fn gen_blobs(spec: &BlobSpec) -> Result<Dataset> {
    spec.validate()?;
    let centers = spec.centers();
    // samples come from a stream separate from the one that fixed the centers
    let mut rng = seeded(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = spec.num_classes * spec.samples_per_class;
    let mut features = Array2::<f64>::zeros((n, spec.dims));
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for k in 0..spec.samples_per_class {
            let i = c * spec.samples_per_class + k;
            for j in 0..spec.dims {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[[i, j]] = centers[[c, j]] + spec.cluster_std * z;
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, spec.num_classes)
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: format!("unreadable: {e}"),
        })?;
    Ok(buf)
}

fn be_u32(buf: &[u8], at: usize, path: &Path) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "truncated header".into(),
        })
}

/// Reads an IDX image file and its label file (optionally gzip-compressed).
/// Pixels are scaled to [0, 1]; C is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_all(images_path)?;
    let lab = read_all(labels_path)?;

    let magic = be_u32(&img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: format!("bad magic number {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let d = rows * cols;
    let pixels = &img[16..];
    if pixels.len() != n * d {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: format!("expected {} pixel bytes, found {}", n * d, pixels.len()),
        });
    }

    let magic = be_u32(&lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("bad magic number {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n_labels = be_u32(&lab, 4, labels_path)? as usize;
    let labels = &lab[8..];
    if labels.len() != n_labels {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("expected {} label bytes, found {}", n_labels, labels.len()),
        });
    }
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{} images in {} but {} labels in {}",
            n,
            images_path.display(),
            n_labels,
            labels_path.display()
        )));
    }
    if n == 0 {
        return Err(validation(format!("{} holds no images", images_path.display())));
    }
    if d == 0 {
        return Err(validation(format!("{} has zero-sized images", images_path.display())));
    }

    let features = Array2::from_shape_vec((n, d), pixels.iter().map(|&b| b as f64 / 255.0).collect())
        .expect("shape checked above");
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, num_classes)
}

/// Writes `d` as an IDX image/label pair. Features are mapped back to bytes
/// with `round(255 * x)`, so a dataset read by [`load_idx`] survives unchanged.
pub fn write_idx(d: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != d.dims() {
        return Err(validation(format!(
            "{rows}x{cols} images do not match {} feature columns",
            d.dims()
        )));
    }
    if let Some(&y) = d.labels().iter().find(|&&y| y > 255) {
        return Err(validation(format!("label {y} does not fit a byte")));
    }
    let n = d.len() as u32;
    let mut w = BufWriter::new(File::create(images_path)?);
    w.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    let bytes: Vec<u8> = d
        .features()
        .iter()
        .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(labels_path)?);
    w.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&n.to_be_bytes())?;
    let labels: Vec<u8> = d.labels().iter().map(|&y| y as u8).collect();
    w.write_all(&labels)?;
    w.flush()?;
    Ok(())
}

/// Contents of a tabular CSV dataset.
#[derive(Debug, Clone)]
pub struct CsvData {
    /// Features with the `label` column as labels.
    pub dataset: Dataset,
    /// The `true_label` column, when the file carries one.
    pub true_labels: Option<Vec<usize>>,
}

/// Reads a CSV with a header row, real feature columns, and a final integer
/// `label` column. An optional `true_label` column is split off, not treated
/// as a feature. C is one past the largest label seen in either column.
pub fn load_csv(path: &Path) -> Result<CsvData> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open_maybe_gz(path)?);
    let headers = rdr.headers()?.clone();
    if headers.iter().last() != Some("label") {
        return Err(fmt("last column must be `label`".into()));
    }
    let label_col = headers.len() - 1;
    let true_col = headers.iter().position(|h| h == "true_label");
    let feature_cols: Vec<usize> = (0..label_col).filter(|&c| Some(c) != true_col).collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut true_labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        for &c in &feature_cols {
            let v: f64 = rec[c]
                .parse()
                .map_err(|_| fmt(format!("line {row}: `{}` is not a number", &rec[c])))?;
            features.push(v);
        }
        let parse_label = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| fmt(format!("line {row}: `{s}` is not a class id")))
        };
        labels.push(parse_label(&rec[label_col])?);
        if let Some(tc) = true_col {
            true_labels.push(parse_label(&rec[tc])?);
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(validation(format!("{} holds no rows", path.display())));
    }
    let features = Array2::from_shape_vec((n, feature_cols.len()), features)
        .map_err(|e| fmt(e.to_string()))?;
    let num_classes = labels
        .iter()
        .chain(true_labels.iter())
        .max()
        .map_or(1, |m| m + 1);
    Ok(CsvData {
        dataset: Dataset::new(features, labels, num_classes)?,
        true_labels: true_col.map(|_| true_labels),
    })
}

/// Writes features `f0..f{D-1}`, an optional `true_label` column, and `label`.
pub fn write_csv(
    path: &Path,
    features: &Array2<f64>,
    labels: &[usize],
    true_labels: Option<&[usize]>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header: Vec<String> = (0..features.ncols()).map(|j| format!("f{j}")).collect();
    if true_labels.is_some() {
        header.push("true_label".into());
    }
    header.push("label".into());
    writeln!(w, "{}", header.join(","))?;
    for (i, row) in features.outer_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(t) = true_labels {
            fields.push(t[i].to_string());
        }
        fields.push(labels[i].to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
