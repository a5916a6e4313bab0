//! Datasets: synthetic generators, IDX and CSV ingestion, and the
//! semi-supervised split (validation first, then a fixed number of labels
//! per class, the remainder unlabeled).
//!
//! Ground-truth labels of the unlabeled pool are kept in [`SealedLabels`],
//! which exposes no accessor; they can only be used to score pseudo-labels.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::curriculum::{pl_accuracy, CurriculumError, PseudoLabelSet};
use crate::diffcore::{DiffError, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("sample {index}: label {label} outside [0, {classes})")]
    LabelOutOfRange {
        index: usize,
        label: i64,
        classes: usize,
    },
    #[error("csv row {row}: {got} fields, header has {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("csv: no column named `{0}`")]
    MissingColumn(String),
    #[error("csv row {row}, column `{column}`: cannot parse `{value}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("class {class} has {available} training samples, {requested} labels requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("invalid dataset request: {0}")]
    Config(String),
    #[error("label count {labels} does not match sample count {samples}")]
    LabelCount { samples: usize, labels: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Samples `[n, d]` with integer labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSamples {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledSamples {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if samples.rows() != labels.len() {
            return Err(DataError::LabelCount {
                samples: samples.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label: label as i64,
                classes,
            });
        }
        Ok(LabeledSamples {
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    fn select(&self, idx: &[usize]) -> LabeledSamples {
        LabeledSamples {
            samples: self.samples.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// Two interleaving half circles. Class 0 is the upper arc centred at the
/// origin, class 1 the lower arc centred at `(1, 0.5)`; both have radius 1.
pub fn gen_two_moons<R: Rng + ?Sized>(
    n: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<LabeledSamples, DataError> {
    if n < 2 {
        return Err(DataError::Config(format!(
            "two moons needs n >= 2 (got {n})"
        )));
    }
    if !(noise_std >= 0.0) {
        return Err(DataError::Config(format!(
            "noise_std must be non-negative (got {noise_std})"
        )));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n - n_upper;
    let angles = |k: usize, m: usize| {
        if m > 1 {
            PI * k as f64 / (m - 1) as f64
        } else {
            0.0
        }
    };

    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for k in 0..n_upper {
        let t = angles(k, n_upper);
        points.push(([t.cos(), t.sin()], 0));
    }
    for k in 0..n_lower {
        let t = angles(k, n_lower);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    points.shuffle(rng);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for (p, _) in points.iter_mut() {
            p[0] += normal.sample(rng);
            p[1] += normal.sample(rng);
        }
    }
    let data = points.iter().flat_map(|(p, _)| *p).collect();
    let labels = points.iter().map(|(_, l)| *l).collect();
    LabeledSamples::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Isotropic Gaussian clusters with covariance `cov_scale · I` around
/// `means`, `n_per_class` samples each, shuffled.
pub fn gen_gaussian_blobs<R: Rng + ?Sized>(
    classes: usize,
    n_per_class: usize,
    means: &[Vec<f64>],
    cov_scale: f64,
    rng: &mut R,
) -> Result<LabeledSamples, DataError> {
    if classes < 2 {
        return Err(DataError::Config(format!(
            "blobs need at least 2 classes (got {classes})"
        )));
    }
    if means.len() != classes {
        return Err(DataError::Config(format!(
            "{} means for {classes} classes",
            means.len()
        )));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d) {
        return Err(DataError::Config(
            "means must share one positive dimension".into(),
        ));
    }
    if !(cov_scale > 0.0) {
        return Err(DataError::Config(format!(
            "cov_scale must be positive (got {cov_scale})"
        )));
    }
    let normal = Normal::new(0.0, cov_scale.sqrt()).expect("finite std");
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(classes * n_per_class);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            rows.push((mu.iter().map(|m| m + normal.sample(rng)).collect(), c));
        }
    }
    rows.shuffle(rng);
    let n = rows.len();
    let data = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let labels = rows.iter().map(|(_, l)| *l).collect();
    LabeledSamples::new(Tensor::new(vec![n, d], data)?, labels, classes)
}

/// Exact class posterior for equal-prior isotropic blobs.
pub fn blobs_bayes_posterior(x: &[f64], means: &[Vec<f64>], cov_scale: f64) -> Vec<f64> {
    let logits: Vec<f64> = means
        .iter()
        .map(|mu| -0.5 * mu.iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum::<f64>() / cov_scale)
        .collect();
    let lse = crate::diffcore::logsumexp(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

/// Element type byte of an IDX header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxType {
    U8 = 0x08,
    I8 = 0x09,
    I16 = 0x0B,
    I32 = 0x0C,
    F32 = 0x0D,
    F64 = 0x0E,
}

impl IdxType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

/// Raw IDX array: dimensions and elements widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn read_idx_from<R: Read>(mut r: R) -> Result<IdxArray, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::MalformedHeader("file shorter than the 4-byte magic".into()))?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(DataError::MalformedHeader(format!(
            "magic {:02x}{:02x}{:02x}{:02x} must start with two zero bytes",
            magic[0], magic[1], magic[2], magic[3]
        )));
    }
    let dtype = IdxType::from_byte(magic[2]).ok_or_else(|| {
        DataError::MalformedHeader(format!("unknown element type 0x{:02x}", magic[2]))
    })?;
    let ndim = magic[3] as usize;
    if ndim == 0 {
        return Err(DataError::MalformedHeader("zero dimensions".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        let d = r
            .read_u32::<BigEndian>()
            .map_err(|_| DataError::MalformedHeader(format!("missing size of dimension {k}")))?;
        dims.push(d as usize);
    }
    let count: usize = dims.iter().product();
    let expected = count * dtype.width();
    let mut payload = Vec::with_capacity(expected);
    r.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut cur = &payload[..];
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(match dtype {
            IdxType::U8 => cur.read_u8()? as f64,
            IdxType::I8 => cur.read_i8()? as f64,
            IdxType::I16 => cur.read_i16::<BigEndian>()? as f64,
            IdxType::I32 => cur.read_i32::<BigEndian>()? as f64,
            IdxType::F32 => cur.read_f32::<BigEndian>()? as f64,
            IdxType::F64 => cur.read_f64::<BigEndian>()?,
        });
    }
    Ok(IdxArray { dtype, dims, data })
}

pub fn read_idx(path: &Path) -> Result<IdxArray, DataError> {
    read_idx_from(BufReader::new(File::open(path)?))
}

pub fn write_idx_to<W: Write>(
    mut w: W,
    dtype: IdxType,
    dims: &[usize],
    data: &[f64],
) -> Result<(), DataError> {
    if dims.is_empty() || dims.len() > 255 {
        return Err(DataError::Config(
            "IDX needs between 1 and 255 dimensions".into(),
        ));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(DataError::Config(
            "IDX dims do not match element count".into(),
        ));
    }
    w.write_all(&[0, 0, dtype as u8, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| DataError::Config(format!("dimension {d} exceeds u32")))?;
        w.write_u32::<BigEndian>(d)?;
    }
    for &v in data {
        match dtype {
            IdxType::U8 => w.write_u8(v as u8)?,
            IdxType::I8 => w.write_i8(v as i8)?,
            IdxType::I16 => w.write_i16::<BigEndian>(v as i16)?,
            IdxType::I32 => w.write_i32::<BigEndian>(v as i32)?,
            IdxType::F32 => w.write_f32::<BigEndian>(v as f32)?,
            IdxType::F64 => w.write_f64::<BigEndian>(v)?,
        }
    }
    Ok(())
}

pub fn write_idx(
    path: &Path,
    dtype: IdxType,
    dims: &[usize],
    data: &[f64],
) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_idx_to(&mut w, dtype, dims, data)?;
    w.flush()?;
    Ok(())
}

/// Image array (`n × …`) flattened per sample. `u8` pixels are scaled to
/// `[0, 1]`; other element types are passed through.
pub fn idx_images(array: &IdxArray) -> Result<Tensor, DataError> {
    let n = array.dims[0];
    let dim: usize = array.dims[1..].iter().product();
    let data = if array.dtype == IdxType::U8 {
        array.data.iter().map(|v| v / 255.0).collect()
    } else {
        array.data.clone()
    };
    Ok(Tensor::new(vec![n, dim.max(1)], data)?)
}

/// Images file plus labels file. `classes` defaults to `max label + 1`.
pub fn load_idx(
    images: &Path,
    labels: &Path,
    classes: Option<usize>,
) -> Result<LabeledSamples, DataError> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(DataError::MalformedHeader(format!(
            "label file must be one-dimensional, found dims {:?}",
            lab.dims
        )));
    }
    let samples = idx_images(&img)?;
    labels_from_values(samples, &lab.data, classes)
}

fn labels_from_values(
    samples: Tensor,
    values: &[f64],
    classes: Option<usize>,
) -> Result<LabeledSamples, DataError> {
    if samples.rows() != values.len() {
        return Err(DataError::LabelCount {
            samples: samples.rows(),
            labels: values.len(),
        });
    }
    let inferred = values.iter().fold(0.0f64, |m, &v| m.max(v)) as usize + 1;
    let classes = classes.unwrap_or(inferred);
    let mut labels = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 || v as usize >= classes {
            return Err(DataError::LabelOutOfRange {
                index,
                label: v as i64,
                classes,
            });
        }
        labels.push(v as usize);
    }
    LabeledSamples::new(samples, labels, classes)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    pub classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: "label".into(),
            classes: None,
        }
    }
}

pub fn read_csv_from<R: Read>(r: R, schema: &CsvSchema) -> Result<LabeledSamples, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let label_col = header
        .iter()
        .position(|h| h == &schema.label_column)
        .ok_or_else(|| DataError::MissingColumn(schema.label_column.clone()))?;
    let mut data = Vec::new();
    let mut values = Vec::new();
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(DataError::RowLength {
                row: row + 1,
                expected: header.len(),
                got: rec.len(),
            });
        }
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::Parse {
                row: row + 1,
                column: header[col].clone(),
                value: field.to_string(),
            })?;
            if col == label_col {
                values.push(v);
            } else {
                data.push(v);
            }
        }
        rows += 1;
    }
    let samples = Tensor::new(vec![rows, header.len() - 1], data)?;
    labels_from_values(samples, &values, schema.classes)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<LabeledSamples, DataError> {
    read_csv_from(BufReader::new(File::open(path)?), schema)
}

/// Features as `x0..x{d-1}`, then the label column.
pub fn write_csv_to<W: Write>(
    w: W,
    data: &LabeledSamples,
    label_column: &str,
) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push(label_column.to_string());
    wtr.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data
            .samples
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        rec.push(data.labels[i].to_string());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_csv(path: &Path, data: &LabeledSamples, label_column: &str) -> Result<(), DataError> {
    write_csv_to(BufWriter::new(File::create(path)?), data, label_column)
}

// ---------------------------------------------------------------------------
// Semi-supervised split
// ---------------------------------------------------------------------------

/// Per-feature affine map onto `[−1, 1]`, fitted on the training portion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn fit(samples: &Tensor) -> Self {
        let d = samples.cols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..samples.rows() {
            for (j, &v) in samples.row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let shift = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| if l.is_finite() { 0.5 * (l + h) } else { 0.0 })
            .collect();
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let s = 0.5 * (h - l);
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { shift, scale }
    }

    /// Maps onto `[−1, 1]`; values outside the fitted range are clamped.
    pub fn apply(&self, samples: &Tensor) -> Tensor {
        let mut out = samples.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = ((*v - self.shift[j]) / self.scale[j]).clamp(-1.0, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPartition {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    /// Row indices into the source data.
    pub origin: Vec<usize>,
}

impl LabeledPartition {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unlabeled samples; carries no labels by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledPool {
    pub samples: Tensor,
    pub origin: Vec<usize>,
}

impl UnlabeledPool {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }
}

/// Ground truth of the unlabeled pool, usable only to score pseudo-labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SealedLabels(Vec<usize>);

impl SealedLabels {
    pub fn score(&self, pl: &PseudoLabelSet) -> Result<f64, CurriculumError> {
        pl_accuracy(pl, &self.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub labels_per_class: usize,
    pub val_frac: f64,
    pub source_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiDataset {
    pub labeled: LabeledPartition,
    pub unlabeled: UnlabeledPool,
    unlabeled_truth: SealedLabels,
    pub validation: LabeledPartition,
    pub test: LabeledPartition,
    pub classes: usize,
    pub normalization: Normalization,
    pub provenance: Provenance,
}

fn partition(data: &LabeledSamples, idx: &[usize], norm: &Normalization) -> LabeledPartition {
    let sub = data.select(idx);
    LabeledPartition {
        samples: norm.apply(&sub.samples),
        labels: sub.labels,
        origin: idx.to_vec(),
    }
}

/// Isolates `round(val_frac · n)` samples for validation, then draws
/// `labels_per_class` labeled samples per class from the rest; everything
/// else is unlabeled. Normalization is fitted on the non-validation part.
pub fn make_semi_split<R: Rng + ?Sized>(
    data: &LabeledSamples,
    labels_per_class: usize,
    val_frac: f64,
    rng: &mut R,
) -> Result<SemiDataset, DataError> {
    if labels_per_class == 0 {
        return Err(DataError::Config(
            "labels_per_class must be at least 1".into(),
        ));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(DataError::Config(format!(
            "val_frac must lie in [0, 1) (got {val_frac})"
        )));
    }
    if data.classes < 2 {
        return Err(DataError::Config("need at least two classes".into()));
    }
    let n = data.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let n_val = (val_frac * n as f64).round() as usize;
    let (val_idx, train_idx) = perm.split_at(n_val);

    let mut labeled_idx = Vec::new();
    let mut taken = vec![false; n];
    for c in 0..data.classes {
        let of_class: Vec<usize> = train_idx
            .iter()
            .copied()
            .filter(|&i| data.labels[i] == c)
            .collect();
        if of_class.len() < labels_per_class {
            return Err(DataError::InsufficientSamples {
                class: c,
                available: of_class.len(),
                requested: labels_per_class,
            });
        }
        for &i in &of_class[..labels_per_class] {
            labeled_idx.push(i);
            taken[i] = true;
        }
    }
    let unlabeled_idx: Vec<usize> = train_idx.iter().copied().filter(|&i| !taken[i]).collect();

    let norm = Normalization::fit(&data.samples.select_rows(train_idx));
    let unl = partition(data, &unlabeled_idx, &norm);
    Ok(SemiDataset {
        labeled: partition(data, &labeled_idx, &norm),
        unlabeled: UnlabeledPool {
            samples: unl.samples,
            origin: unl.origin,
        },
        unlabeled_truth: SealedLabels(unl.labels),
        validation: partition(data, val_idx, &norm),
        test: LabeledPartition {
            samples: Tensor::zeros(&[0, data.dim()]),
            labels: Vec::new(),
            origin: Vec::new(),
        },
        classes: data.classes,
        normalization: norm,
        provenance: Provenance {
            source: "in-memory".into(),
            seed: 0,
            labels_per_class,
            val_frac,
            source_len: n,
        },
    })
}

impl SemiDataset {
    pub fn input_dim(&self) -> usize {
        self.labeled.samples.cols()
    }

    pub fn unlabeled_truth(&self) -> &SealedLabels {
        &self.unlabeled_truth
    }

    /// Attaches a held-out test set, normalized with the training fit.
    /// `origin` indexes into `test`, not the training source.
    pub fn with_test(mut self, test: &LabeledSamples) -> Result<Self, DataError> {
        if test.dim() != self.input_dim() && !test.is_empty() {
            return Err(DataError::Config(format!(
                "test set has {} features, training data {}",
                test.dim(),
                self.input_dim()
            )));
        }
        let idx: Vec<usize> = (0..test.len()).collect();
        self.test = partition(test, &idx, &self.normalization);
        Ok(self)
    }

    pub fn with_provenance(mut self, source: &str, seed: u64) -> Self {
        self.provenance.source = source.to_string();
        self.provenance.seed = seed;
        self
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the snapshot encoding, hex.
    pub fn digest(&self) -> Result<String, DataError> {
        let bytes = Sha256::digest(self.to_json()?.as_bytes());
        Ok(bytes.iter().map(|b| format!("{b:02x}")).collect())
    }
}
