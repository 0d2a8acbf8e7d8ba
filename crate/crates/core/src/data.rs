//! Dataset containers and their on-disk formats.
//!
//! Three artifacts are persisted:
//!
//! * feature sets, as CSV (`id,label,f0,...`) or as the `MFNT` binary layout,
//! * pseudo-label ensembles, as the `MFPL` binary layout,
//! * train/test splits, as a sectioned plain-text index list.
//!
//! Loading never repairs a file: any violation of a type invariant is an
//! error that names the offending row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
#[cfg(test)]
use std::path::PathBuf;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"MFNT";
const PSEUDO_MAGIC: &[u8; 4] = b"MFPL";
pub(crate) const FORMAT_VERSION: u32 = 1;
const UNLABELED: i32 = -1;

/// On-disk encoding of a [`FeatureSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl FeatureFormat {
    /// `.csv` files are CSV, everything else is the binary layout.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

/// `N` feature vectors of dimension `d`, each optionally carrying a class id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Array2<f64>,
    labels: Vec<Option<usize>>,
    n_classes: usize,
}

impl FeatureSet {
    /// Builds a feature set, checking every invariant.
    ///
    /// `n_classes == 0` means the set carries no labels at all, in which case
    /// every entry of `labels` must be `None`.
    pub fn new(features: Array2<f64>, labels: Vec<Option<usize>>, n_classes: usize) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!(
                "feature matrix must be non-empty, got {n}x{d}"
            )));
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: labels.len(),
            });
        }
        for (i, row) in features.outer_iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "sample {i}, component {j} is not finite"
                )));
            }
        }
        for (i, label) in labels.iter().enumerate() {
            if let Some(c) = label {
                if *c >= n_classes {
                    return Err(Error::InvalidData(format!(
                        "sample {i} has label {c} but only {n_classes} classes are declared"
                    )));
                }
            }
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    /// A feature set without any labels.
    pub fn unlabeled(features: Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        Self::new(features, vec![None; n], 0)
    }

    /// A fully labeled feature set; the class count is `max(label) + 1`
    /// unless `n_classes` is given.
    pub fn labeled(features: Array2<f64>, labels: &[usize], n_classes: Option<usize>) -> Result<Self> {
        let c = n_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels.iter().map(|&l| Some(l)).collect(), c)
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn has_labels(&self) -> bool {
        self.n_classes > 0
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Every label, or `None` if any sample is unlabeled.
    pub fn dense_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }

    pub fn into_features(self) -> Array2<f64> {
        self.features
    }

    /// The samples at `indices`, in that order, with their labels.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_samples()) {
            return Err(Error::InvalidData(format!(
                "index {bad} out of range for {} samples",
                self.n_samples()
            )));
        }
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.n_classes)
    }

    /// Same samples and labels, different feature vectors (e.g. embeddings).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.nrows() != self.n_samples() {
            return Err(Error::DimensionMismatch {
                expected: self.n_samples(),
                actual: features.nrows(),
            });
        }
        Self::new(features, self.labels.clone(), self.n_classes)
    }

    /// Loads a feature set, picking the format from the file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        load_features(path, FeatureFormat::from_path(path))
    }

    /// Saves a feature set, picking the format from the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_features(self, path, FeatureFormat::from_path(path))
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureSet> {
    match format {
        FeatureFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(&text, path)
        }
        FeatureFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_features(&bytes, path)
        }
    }
}

pub fn save_features(fs_: &FeatureSet, path: &Path, format: FeatureFormat) -> Result<()> {
    let bytes = match format {
        FeatureFormat::Csv => to_csv(fs_).into_bytes(),
        FeatureFormat::Binary => encode_features(fs_),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_csv(text: &str, path: &Path) -> Result<FeatureSet> {
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 3 || columns[0] != "id" || columns[1] != "label" {
        return Err(parse_err(1, format!("malformed header `{header}`")));
    }
    let d = columns.len() - 2;
    for (j, name) in columns[2..].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(1, format!("expected column `f{j}`, found `{name}`")));
        }
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let row = line_no + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(parse_err(
                row,
                format!("expected {} fields, found {}", d + 2, fields.len()),
            ));
        }
        let label = match fields[1] {
            "" | "-1" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| parse_err(row, format!("invalid label `{s}`")))?,
            ),
        };
        for (j, s) in fields[2..].iter().enumerate() {
            let v: f64 = s
                .parse()
                .map_err(|_| parse_err(row, format!("invalid value `{s}` in column f{j}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("non-finite value in column f{j}")));
            }
            values.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no samples".into()));
    }
    let n_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let features = Array2::from_shape_vec((labels.len(), d), values)
        .map_err(|e| Error::InvalidData(e.to_string()))?;
    FeatureSet::new(features, labels, n_classes)
}

fn to_csv(fs_: &FeatureSet) -> String {
    let d = fs_.dim();
    let mut out = String::from("id,label");
    for j in 0..d {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (i, row) in fs_.features.outer_iter().enumerate() {
        let _ = write!(out, "{i},");
        if let Some(c) = fs_.labels[i] {
            let _ = write!(out, "{c}");
        }
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn encode_features(fs_: &FeatureSet) -> Vec<u8> {
    let (n, d) = fs_.features.dim();
    let has_labels = fs_.has_labels();
    let mut out = Vec::with_capacity(25 + n * d * 4 + if has_labels { n * 4 } else { 0 });
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(u8::from(has_labels));
    out.extend_from_slice(&(fs_.n_classes as u32).to_le_bytes());
    for v in fs_.features.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if has_labels {
        for label in &fs_.labels {
            let raw = label.map_or(UNLABELED, |c| c as i32);
            out.extend_from_slice(&raw.to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor over a byte buffer that reports truncation.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(self.error(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(self.error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(found),
                String::from_utf8_lossy(expected)
            )));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(self.error(format!("unsupported version {version}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }

    pub(crate) fn error(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message,
        }
    }

    fn row_error(&self, row: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            row,
            message,
        }
    }
}

fn checked_len(r: &Reader<'_>, a: usize, b: usize, elem: usize) -> Result<usize> {
    a.checked_mul(b)
        .and_then(|x| x.checked_mul(elem))
        .filter(|&len| len <= r.remaining())
        .ok_or_else(|| r.error(format!("header declares {a}x{b} entries but the file is too short")))
}

fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes, path);
    r.magic(FEATURE_MAGIC)?;
    let n = usize::try_from(r.u64("N")?).map_err(|_| r.error("N does not fit in memory".into()))?;
    let d = r.u32("d")? as usize;
    let has_labels = match r.u8("has_labels")? {
        0 => false,
        1 => true,
        other => return Err(r.error(format!("has_labels must be 0 or 1, found {other}"))),
    };
    let n_classes = r.u32("C")? as usize;
    if n == 0 || d == 0 {
        return Err(r.error(format!("empty feature matrix {n}x{d}")));
    }
    if has_labels != (n_classes > 0) {
        return Err(r.error(format!(
            "has_labels = {} inconsistent with C = {n_classes}",
            u8::from(has_labels)
        )));
    }
    checked_len(&r, n, d, 4)?;
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let v = r.f32("features")?;
            if !v.is_finite() {
                return Err(r.row_error(i, format!("non-finite value in component {j}")));
            }
            values.push(f64::from(v));
        }
    }
    let mut labels = vec![None; n];
    if has_labels {
        checked_len(&r, n, 1, 4)?;
        for (i, slot) in labels.iter_mut().enumerate() {
            let raw = r.i32("labels")?;
            *slot = match raw {
                UNLABELED => None,
                c if c >= 0 && (c as usize) < n_classes => Some(c as usize),
                c => {
                    return Err(r.row_error(
                        i,
                        format!("label {c} outside 0..{n_classes} (and not -1)"),
                    ))
                }
            };
        }
    }
    r.finish()?;
    let features = Array2::from_shape_vec((n, d), values).expect("shape checked");
    FeatureSet::new(features, labels, n_classes)
}

/// The `N x T` matrix of pseudo-class ids produced by ensemble segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelEnsemble {
    labels: Array2<usize>,
    n_pseudo_classes: usize,
}

impl PseudoLabelEnsemble {
    pub fn new(labels: Array2<usize>, n_pseudo_classes: usize) -> Result<Self> {
        let (n, t) = labels.dim();
        if n == 0 || t == 0 {
            return Err(Error::InvalidData(format!("empty ensemble {n}x{t}")));
        }
        if let Some(((i, j), v)) = labels.indexed_iter().find(|(_, &v)| v >= n_pseudo_classes) {
            return Err(Error::InvalidData(format!(
                "entry ({i}, {j}) = {v} is not below Z = {n_pseudo_classes}"
            )));
        }
        Ok(Self {
            labels,
            n_pseudo_classes,
        })
    }

    /// Assembles an ensemble from per-trial label columns.
    pub fn from_columns(columns: &[Vec<usize>], n_pseudo_classes: usize) -> Result<Self> {
        let t = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidData("trial columns differ in length".into()));
        }
        let labels = Array2::from_shape_fn((n, t), |(i, j)| columns[j][i]);
        Self::new(labels, n_pseudo_classes)
    }

    pub fn n_samples(&self) -> usize {
        self.labels.nrows()
    }

    pub fn n_trials(&self) -> usize {
        self.labels.ncols()
    }

    pub fn n_pseudo_classes(&self) -> usize {
        self.n_pseudo_classes
    }

    /// Row-major `N x T` view: row `i` holds sample `i`'s label in every trial.
    pub fn labels(&self) -> ArrayView2<'_, usize> {
        self.labels.view()
    }

    pub fn trial(&self, t: usize) -> Vec<usize> {
        self.labels.column(t).to_vec()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, t) = self.labels.dim();
        let mut out = Vec::with_capacity(24 + n * t * 4);
        out.extend_from_slice(PSEUDO_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(t as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_pseudo_classes as u32).to_le_bytes());
        for v in self.labels.iter() {
            out.extend_from_slice(&(*v as i32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(PSEUDO_MAGIC)?;
        let n = usize::try_from(r.u64("N")?).map_err(|_| r.error("N does not fit in memory".into()))?;
        let t = r.u32("T")? as usize;
        let z = r.u32("Z")? as usize;
        if n == 0 || t == 0 {
            return Err(r.error(format!("empty ensemble {n}x{t}")));
        }
        checked_len(&r, n, t, 4)?;
        let mut values = Vec::with_capacity(n * t);
        for i in 0..n {
            for j in 0..t {
                let v = r.i32("labels")?;
                if v < 0 || v as usize >= z {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        message: format!("entry at (row {i}, trial {j}) = {v} is outside 0..{z}"),
                    });
                }
                values.push(v as usize);
            }
        }
        r.finish()?;
        Self::new(Array2::from_shape_vec((n, t), values).expect("shape checked"), z)
    }
}

/// Disjoint labeled / unlabeled / test index lists over one feature set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitSpec {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Checks disjointness and that every index is below `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut owner = vec![None; n];
        for (name, list) in self.sections() {
            for &i in list {
                if i >= n {
                    return Err(Error::InvalidData(format!(
                        "[{name}] index {i} out of range for {n} samples"
                    )));
                }
                if let Some(prev) = owner[i].replace(name) {
                    return Err(Error::InvalidData(format!(
                        "index {i} appears in both [{prev}] and [{name}]"
                    )));
                }
            }
        }
        Ok(())
    }

    fn sections(&self) -> [(&'static str, &Vec<usize>); 3] {
        [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("test", &self.test),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, list) in self.sections() {
            let _ = writeln!(out, "[{name}]");
            for i in list {
                let _ = writeln!(out, "{i}");
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut split = SplitSpec::default();
        let mut current: Option<&mut Vec<usize>> = None;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                row: line_no + 1,
                message,
            };
            current = match line {
                "[labeled]" => Some(&mut split.labeled),
                "[unlabeled]" => Some(&mut split.unlabeled),
                "[test]" => Some(&mut split.test),
                _ if line.starts_with('[') => return Err(err(format!("unknown section {line}"))),
                _ => {
                    let list = current.ok_or_else(|| err("index before any section".into()))?;
                    list.push(
                        line.parse()
                            .map_err(|_| err(format!("invalid index `{line}`")))?,
                    );
                    Some(list)
                }
            };
        }
        Ok(split)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
pub(crate) fn mem_path() -> PathBuf {
    PathBuf::from("<memory>")
}
