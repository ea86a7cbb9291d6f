//! On-disk formats.
//!
//! * word vectors: text, one `token v1 … vD` per line
//! * features: `ZSLF` binary (u32 version, rows, cols, then row-major f64,
//!   all little-endian), or CSV whose first line is `rows,cols`
//! * labels: `image_index<TAB>class_name[<TAB>train|test]` per line
//! * split: `seen:` and `unseen:` sections, one class name per line
//! * predicate / score tables: CSV, attribute names in the header, class
//!   name or image index in the first column
//! * margin table: CSV, `n_classes × n_classes`, optional header row
//! * checkpoints: versioned JSON

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ZslError};
use crate::label_embedding::JointModel;
use crate::tensor::Matrix;
use crate::transform_net::Margin;
use crate::wordspace::WordSpace;

pub const FEATURE_MAGIC: &[u8; 4] = b"ZSLF";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    /// Attribute weights come from the class-level predicate matrix.
    #[default]
    Pbt,
    /// Attribute weights are per-image attribute posteriors.
    Ibt,
}

impl std::str::FromStr for TrainingMode {
    type Err = ZslError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pbt" => Ok(TrainingMode::Pbt),
            "ibt" => Ok(TrainingMode::Ibt),
            other => Err(ZslError::Config(format!("unknown mode `{other}` (expected pbt or ibt)"))),
        }
    }
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainingMode::Pbt => "pbt",
            TrainingMode::Ibt => "ibt",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZslDataset {
    /// `n_images × visual_dim`
    pub features: Matrix,
    /// Class index (into `class_names`) of every image.
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    /// `n_images × n_attributes`, entries in `[0, 1]`.
    pub attribute_scores: Option<Matrix>,
    /// `n_classes × n_attributes`, entries in `[0, 1]`.
    pub predicate_matrix: Option<Matrix>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

impl ZslDataset {
    pub fn n_images(&self) -> usize {
        self.features.rows()
    }

    pub fn visual_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.binary_search(&class).is_ok()
    }

    /// Images labeled with a seen class, in index order.
    pub fn train_images(&self) -> Vec<usize> {
        (0..self.n_images()).filter(|&i| self.is_seen(self.labels[i])).collect()
    }

    /// Images labeled with an unseen class, in index order.
    pub fn test_images(&self) -> Vec<usize> {
        (0..self.n_images()).filter(|&i| !self.is_seen(self.labels[i])).collect()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n_classes = self.class_names.len();
        let n_attr = self.attribute_names.len();
        if self.labels.len() != self.n_images() {
            return Err(ZslError::Dataset(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                self.n_images()
            )));
        }
        for set in [&self.seen_classes, &self.unseen_classes] {
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ZslError::Dataset("class index sets must be sorted and unique".into()));
            }
            if set.iter().any(|&c| c >= n_classes) {
                return Err(ZslError::Dataset("class index out of range".into()));
            }
        }
        if let Some(c) = self.seen_classes.iter().find(|c| self.unseen_classes.binary_search(c).is_ok()) {
            return Err(ZslError::Dataset(format!(
                "class `{}` is both seen and unseen",
                self.class_names[*c]
            )));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= n_classes || (!self.is_seen(l) && self.unseen_classes.binary_search(&l).is_err()) {
                return Err(ZslError::Dataset(format!("image {i} has a label outside the split")));
            }
        }
        if self.attribute_scores.is_none() && self.predicate_matrix.is_none() {
            return Err(ZslError::Dataset(
                "either per-image attribute scores or a predicate matrix is required".into(),
            ));
        }
        if let Some(s) = &self.attribute_scores {
            check_table_shape(s, self.n_images(), n_attr, "attribute scores")?;
            check_unit_range(s, "attribute score", |r| r.to_string(), &self.attribute_names)?;
        }
        if let Some(p) = &self.predicate_matrix {
            check_table_shape(p, n_classes, n_attr, "predicate matrix")?;
            check_unit_range(p, "predicate", |r| self.class_names[r].clone(), &self.attribute_names)?;
        }
        Ok(())
    }
}

fn check_table_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(ZslError::Dataset(format!(
            "{what} has shape {:?}, expected {:?}",
            m.shape(),
            (rows, cols)
        )));
    }
    Ok(())
}

fn check_unit_range(m: &Matrix, what: &str, row_name: impl Fn(usize) -> String, cols: &[String]) -> Result<()> {
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(ZslError::Range {
                    what: what.to_string(),
                    row: row_name(r),
                    col: cols.get(c).cloned().unwrap_or_else(|| c.to_string()),
                    value: v,
                });
            }
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| ZslError::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| ZslError::io(path, e))
}

fn parse_f64(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .trim()
        .parse()
        .map_err(|_| ZslError::parse(path, line, format!("`{token}` is not a number")))?;
    if !v.is_finite() {
        return Err(ZslError::parse(path, line, format!("`{token}` is not finite")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// word vectors

/// Reads a whitespace-delimited word-vector file. Duplicate tokens keep the
/// last occurrence; the returned warnings name them.
pub fn load_word_vectors(path: &Path, expected_dim: usize) -> Result<(WordSpace, Vec<String>)> {
    let reader = open(path)?;
    let mut ws = WordSpace::new(expected_dim);
    let mut warnings = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ZslError::io(path, e))?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values = parts
            .map(|t| parse_f64(path, line_no, t))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != expected_dim {
            return Err(ZslError::parse(
                path,
                line_no,
                format!("token `{token}` has {} values, expected {expected_dim}", values.len()),
            ));
        }
        if ws.insert(token, values)?.is_some() {
            let w = format!("{}:{line_no}: duplicate token `{token}`, keeping the last one", path.display());
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    if ws.is_empty() {
        return Err(ZslError::parse(path, 0, "word-vector file is empty"));
    }
    Ok((ws, warnings))
}

pub fn write_word_vectors(ws: &WordSpace, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (token, v) in ws.tokens() {
        out.push_str(token);
        for x in v {
            out.push(' ');
            out.push_str(&x.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

// ---------------------------------------------------------------------------
// feature matrices

pub fn write_features(m: &Matrix, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + m.as_slice().len() * 8);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| ZslError::io(path, e))
}

/// Reads either the binary format or the CSV fallback.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| ZslError::io(path, e))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_features(path, &bytes)
    } else {
        read_features_csv(path, &bytes)
    }
}

fn decode_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| ZslError::parse(path, 0, "truncated feature header"))
    };
    let version = word(0)?;
    if version != FEATURE_VERSION {
        return Err(ZslError::parse(path, 0, format!("unsupported feature format version {version}")));
    }
    let rows = word(1)? as usize;
    let cols = word(2)? as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(ZslError::parse(
            path,
            0,
            format!("expected {} bytes of data for {rows}×{cols}, found {}", rows * cols * 8, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data).map_err(|_| ZslError::parse(path, 0, "non-finite feature value"))
}

fn read_features_csv(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let text = std::str::from_utf8(bytes).map_err(|_| ZslError::parse(path, 0, "neither ZSLF binary nor UTF-8 CSV"))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| ZslError::parse(path, 0, "empty feature file"))?;
    let dims: Vec<&str> = header.split(',').map(str::trim).collect();
    let declared = match dims.as_slice() {
        [r, c] => match (r.parse::<usize>(), c.parse::<usize>()) {
            (Ok(r), Ok(c)) => Some((r, c)),
            _ if r.eq_ignore_ascii_case("rows") && c.eq_ignore_ascii_case("cols") => None,
            _ => return Err(ZslError::parse(path, 1, "header must be `rows,cols`")),
        },
        _ => return Err(ZslError::parse(path, 1, "header must be `rows,cols`")),
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in lines {
        let row = line
            .split(',')
            .map(|t| parse_f64(path, idx + 1, t))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(ZslError::parse(path, idx + 1, format!("{} columns, expected {}", row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if let Some((r, c)) = declared {
        if r != rows.len() || (r > 0 && c != cols) {
            return Err(ZslError::parse(
                path,
                1,
                format!("header declares {r}×{c} but the body is {}×{cols}", rows.len()),
            ));
        }
        if r == 0 {
            return Ok(Matrix::zeros(0, c));
        }
    }
    Matrix::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// labels and split

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelEntry {
    pub image: usize,
    pub class_name: String,
    pub role: Option<ImageRole>,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelEntry>> {
    let reader = open(path)?;
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ZslError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(ZslError::parse(path, idx + 1, "expected `image_index<TAB>class_name[<TAB>train|test]`"));
        }
        let image = fields[0]
            .parse()
            .map_err(|_| ZslError::parse(path, idx + 1, format!("`{}` is not an image index", fields[0])))?;
        let role = match fields.get(2).map(|s| s.to_ascii_lowercase()) {
            None => None,
            Some(r) if r == "train" => Some(ImageRole::Train),
            Some(r) if r == "test" => Some(ImageRole::Test),
            Some(r) => return Err(ZslError::parse(path, idx + 1, format!("unknown image role `{r}`"))),
        };
        out.push(LabelEntry {
            image,
            class_name: fields[1].to_string(),
            role,
        });
    }
    Ok(out)
}

pub fn write_labels(labels: &[usize], class_names: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (i, &l) in labels.iter().enumerate() {
        out.push_str(&format!("{i}\t{}\n", class_names[l]));
    }
    fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

pub fn read_split(path: &Path) -> Result<ClassSplit> {
    let reader = open(path)?;
    let mut split = ClassSplit::default();
    let mut section: Option<bool> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ZslError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        match t.to_ascii_lowercase().as_str() {
            "seen:" => section = Some(true),
            "unseen:" => section = Some(false),
            _ => {
                let set = match section {
                    Some(true) => &mut split.seen,
                    Some(false) => &mut split.unseen,
                    None => return Err(ZslError::parse(path, idx + 1, "class name before any `seen:`/`unseen:` section")),
                };
                if !set.insert(t.to_string()) {
                    return Err(ZslError::parse(path, idx + 1, format!("class `{t}` listed twice")));
                }
            }
        }
    }
    if let Some(c) = split.seen.intersection(&split.unseen).next() {
        return Err(ZslError::Dataset(format!("class `{c}` is both seen and unseen")));
    }
    if split.seen.is_empty() || split.unseen.is_empty() {
        return Err(ZslError::Dataset(format!("{}: both seen and unseen classes are required", path.display())));
    }
    Ok(split)
}

pub fn write_split(seen: &[&str], unseen: &[&str], path: &Path) -> Result<()> {
    let mut out = String::from("seen:\n");
    for s in seen {
        out.push_str(s);
        out.push('\n');
    }
    out.push_str("unseen:\n");
    for s in unseen {
        out.push_str(s);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| ZslError::io(path, e))
}

// ---------------------------------------------------------------------------
// attribute tables

/// A CSV table keyed by its first column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable {
    pub attribute_names: Vec<String>,
    pub row_keys: Vec<String>,
    pub values: Matrix,
}

pub fn read_attribute_table(path: &Path) -> Result<AttributeTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.len() < 2 {
        return Err(ZslError::parse(path, 1, "header needs a key column and at least one attribute"));
    }
    let attribute_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_keys = Vec::new();
    let mut data = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = idx + 2;
        if record.len() != header.len() {
            return Err(ZslError::parse(path, line, format!("{} fields, expected {}", record.len(), header.len())));
        }
        let key = record[0].to_string();
        for (c, field) in record.iter().skip(1).enumerate() {
            let v = parse_f64(path, line, field)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(ZslError::Range {
                    what: format!("{}: attribute value", path.display()),
                    row: key,
                    col: attribute_names[c].clone(),
                    value: v,
                });
            }
            data.push(v);
        }
        row_keys.push(key);
    }
    let values = Matrix::new(row_keys.len(), attribute_names.len(), data)?;
    Ok(AttributeTable {
        attribute_names,
        row_keys,
        values,
    })
}

pub fn write_attribute_table(
    key_header: &str,
    row_keys: &[String],
    attribute_names: &[String],
    values: &Matrix,
    path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<&str> = std::iter::once(key_header)
        .chain(attribute_names.iter().map(String::as_str))
        .collect();
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (key, row) in row_keys.iter().zip(values.row_iter()) {
        let record: Vec<String> = std::iter::once(key.clone())
            .chain(row.iter().map(|v| v.to_string()))
            .collect();
        writer.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| ZslError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> ZslError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => ZslError::io(path, io),
        other => ZslError::parse(path, line, format!("{other:?}")),
    }
}

/// Reads an `n × n` margin table. A leading row that does not parse as
/// numbers is treated as a header.
pub fn read_margin_table(path: &Path) -> Result<Margin> {
    let text = fs::read_to_string(path).map_err(|e| ZslError::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if idx == 0 && fields.iter().any(|f| f.trim().parse::<f64>().is_err()) {
            continue;
        }
        rows.push(
            fields
                .iter()
                .map(|f| parse_f64(path, idx + 1, f))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Margin::table(Matrix::from_rows(&rows)?)
}

// ---------------------------------------------------------------------------
// dataset assembly

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub split: PathBuf,
    /// Class-level predicate matrix, or per-image binary annotations to be
    /// averaged per class.
    #[serde(default)]
    pub predicates: Option<PathBuf>,
    /// Per-image attribute posteriors.
    #[serde(default)]
    pub attribute_scores: Option<PathBuf>,
}

impl DatasetPaths {
    pub fn all(&self) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&self.features, &self.labels, &self.split];
        v.extend(self.predicates.as_deref());
        v.extend(self.attribute_scores.as_deref());
        v
    }
}

enum TableKeys {
    Classes(Vec<usize>),
    Images(Vec<usize>),
}

fn classify_keys(table: &AttributeTable, class_index: &BTreeMap<&str, usize>, n_images: usize, path: &Path) -> Result<TableKeys> {
    if let Some(idx) = table
        .row_keys
        .iter()
        .map(|k| class_index.get(k.as_str()).copied())
        .collect::<Option<Vec<_>>>()
    {
        return Ok(TableKeys::Classes(idx));
    }
    let mut images = Vec::with_capacity(table.row_keys.len());
    for key in &table.row_keys {
        match key.parse::<usize>() {
            Ok(i) if i < n_images => images.push(i),
            _ => {
                return Err(ZslError::Dataset(format!(
                    "{}: row key `{key}` is neither a known class nor an image index",
                    path.display()
                )))
            }
        }
    }
    Ok(TableKeys::Images(images))
}

fn reorder_attributes(table: &AttributeTable, names: &[String], path: &Path) -> Result<Matrix> {
    if table.attribute_names == names {
        return Ok(table.values.clone());
    }
    let pos: Vec<usize> = names
        .iter()
        .map(|n| {
            table
                .attribute_names
                .iter()
                .position(|a| a == n)
                .ok_or_else(|| ZslError::Dataset(format!("{}: attribute `{n}` is missing", path.display())))
        })
        .collect::<Result<_>>()?;
    if pos.len() != table.attribute_names.len() {
        return Err(ZslError::Dataset(format!("{}: attribute columns differ", path.display())));
    }
    let mut m = Matrix::zeros(table.values.rows(), names.len());
    for r in 0..m.rows() {
        for (c, &p) in pos.iter().enumerate() {
            m.set(r, c, table.values.get(r, p));
        }
    }
    Ok(m)
}

fn scatter_rows(path: &Path, keys: &[usize], values: &Matrix, n_rows: usize, what: &str) -> Result<Matrix> {
    let mut out = Matrix::zeros(n_rows, values.cols());
    let mut filled = vec![false; n_rows];
    for (src, &dst) in keys.iter().enumerate() {
        if std::mem::replace(&mut filled[dst], true) {
            return Err(ZslError::Dataset(format!("{}: duplicate row for {what} {dst}", path.display())));
        }
        out.row_mut(dst).copy_from_slice(values.row(src));
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(ZslError::Dataset(format!("{}: no row for {what} {missing}", path.display())));
    }
    Ok(out)
}

/// Per-class mean of image-level annotations.
pub fn class_means(scores: &Matrix, labels: &[usize], n_classes: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(n_classes, scores.cols());
    let mut counts = vec![0usize; n_classes];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, &v) in sums.row_mut(l).iter_mut().zip(scores.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(ZslError::Dataset(format!("class {c} has no images to average attributes over")));
        }
        sums.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Loads and validates a dataset. Returns the dataset and any warnings.
///
/// Class indices follow the sorted order of class names, so the result does
/// not depend on the order of the split file.
pub fn load_dataset(paths: &DatasetPaths, mode: TrainingMode) -> Result<(ZslDataset, Vec<String>)> {
    let mut warnings = Vec::new();
    let split = read_split(&paths.split)?;
    let class_names: Vec<String> = split.seen.union(&split.unseen).cloned().collect();
    let class_index: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let seen_classes: Vec<usize> = split.seen.iter().map(|n| class_index[n.as_str()]).collect::<BTreeSet<_>>().into_iter().collect();
    let unseen_classes: Vec<usize> = split.unseen.iter().map(|n| class_index[n.as_str()]).collect::<BTreeSet<_>>().into_iter().collect();

    let features = read_features(&paths.features)?;
    let n_images = features.rows();

    let mut labels = vec![usize::MAX; n_images];
    for entry in read_labels(&paths.labels)? {
        let class = *class_index.get(entry.class_name.as_str()).ok_or_else(|| {
            ZslError::Dataset(format!(
                "{}: image {} references unknown class `{}`",
                paths.labels.display(),
                entry.image,
                entry.class_name
            ))
        })?;
        if entry.image >= n_images {
            return Err(ZslError::Dataset(format!(
                "{}: image index {} out of range for {n_images} feature rows",
                paths.labels.display(),
                entry.image
            )));
        }
        if entry.role == Some(ImageRole::Train) && !split.seen.contains(&entry.class_name) {
            return Err(ZslError::Dataset(format!(
                "{}: training image {} is labeled with unseen class `{}`",
                paths.labels.display(),
                entry.image,
                entry.class_name
            )));
        }
        if labels[entry.image] != usize::MAX {
            return Err(ZslError::Dataset(format!("{}: image {} labeled twice", paths.labels.display(), entry.image)));
        }
        labels[entry.image] = class;
    }
    if let Some(i) = labels.iter().position(|&l| l == usize::MAX) {
        return Err(ZslError::Dataset(format!("{}: image {i} has no label", paths.labels.display())));
    }

    let mut attribute_names: Option<Vec<String>> = None;
    let mut predicate_matrix = None;
    let mut attribute_scores = None;

    if let Some(path) = &paths.attribute_scores {
        let table = read_attribute_table(path)?;
        let names = attribute_names.get_or_insert_with(|| table.attribute_names.clone()).clone();
        let values = reorder_attributes(&table, &names, path)?;
        match classify_keys(&table, &class_index, n_images, path)? {
            TableKeys::Images(keys) => attribute_scores = Some(scatter_rows(path, &keys, &values, n_images, "image")?),
            TableKeys::Classes(_) => {
                return Err(ZslError::Dataset(format!(
                    "{}: attribute scores must be keyed by image index",
                    path.display()
                )))
            }
        }
    }
    if let Some(path) = &paths.predicates {
        let table = read_attribute_table(path)?;
        let names = attribute_names.get_or_insert_with(|| table.attribute_names.clone()).clone();
        let values = reorder_attributes(&table, &names, path)?;
        match classify_keys(&table, &class_index, n_images, path)? {
            TableKeys::Classes(keys) => {
                predicate_matrix = Some(scatter_rows(path, &keys, &values, class_names.len(), "class")?)
            }
            TableKeys::Images(keys) => {
                let per_image = scatter_rows(path, &keys, &values, n_images, "image")?;
                predicate_matrix = Some(class_means(&per_image, &labels, class_names.len())?);
                let w = format!(
                    "{}: per-image annotations averaged per class to form the predicate matrix",
                    path.display()
                );
                log::warn!("{w}");
                warnings.push(w);
            }
        }
    }

    match mode {
        TrainingMode::Pbt if predicate_matrix.is_none() => {
            if let Some(scores) = &attribute_scores {
                predicate_matrix = Some(class_means(scores, &labels, class_names.len())?);
                let w = "predicate matrix derived as the per-class mean of image attribute scores".to_string();
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        TrainingMode::Ibt if attribute_scores.is_none() && predicate_matrix.is_some() => {
            let w = "no per-image attribute scores; they will be predicted by logistic attribute scorers".to_string();
            log::info!("{w}");
            warnings.push(w);
        }
        _ => {}
    }

    let dataset = ZslDataset {
        features,
        labels,
        class_names,
        attribute_names: attribute_names.unwrap_or_default(),
        attribute_scores,
        predicate_matrix,
        seen_classes,
        unseen_classes,
    };
    dataset.validate()?;
    Ok((dataset, warnings))
}

/// Writes a dataset in the on-disk formats. Returns the paths used.
pub fn write_dataset(dataset: &ZslDataset, dir: &Path) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| ZslError::io(dir, e))?;
    let paths = DatasetPaths {
        features: dir.join("features.zslf"),
        labels: dir.join("labels.tsv"),
        split: dir.join("split.txt"),
        predicates: dataset.predicate_matrix.as_ref().map(|_| dir.join("predicates.csv")),
        attribute_scores: dataset.attribute_scores.as_ref().map(|_| dir.join("attribute_scores.csv")),
    };
    write_features(&dataset.features, &paths.features)?;
    write_labels(&dataset.labels, &dataset.class_names, &paths.labels)?;
    let names = |set: &[usize]| set.iter().map(|&c| dataset.class_names[c].as_str()).collect::<Vec<_>>();
    write_split(&names(&dataset.seen_classes), &names(&dataset.unseen_classes), &paths.split)?;
    if let (Some(p), Some(path)) = (&dataset.predicate_matrix, &paths.predicates) {
        write_attribute_table("class", &dataset.class_names, &dataset.attribute_names, p, path)?;
    }
    if let (Some(s), Some(path)) = (&dataset.attribute_scores, &paths.attribute_scores) {
        let keys: Vec<String> = (0..s.rows()).map(|i| i.to_string()).collect();
        write_attribute_table("image", &keys, &dataset.attribute_names, s, path)?;
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: JointModel,
    /// Echo of the configuration that produced the model.
    pub config: serde_json::Value,
    pub word_space_fingerprint: String,
}

pub fn save_model(model: &JointModel, config: serde_json::Value, fingerprint: &str, path: &Path) -> Result<()> {
    let checkpoint = ModelCheckpoint {
        format_version: CHECKPOINT_VERSION,
        model: model.clone(),
        config,
        word_space_fingerprint: fingerprint.to_string(),
    };
    let text = serde_json::to_string_pretty(&checkpoint).map_err(|e| ZslError::Corrupt(e.to_string()))?;
    let mut f = create(path)?;
    f.write_all(text.as_bytes()).map_err(|e| ZslError::io(path, e))?;
    f.write_all(b"\n").map_err(|e| ZslError::io(path, e))
}

/// Loads a checkpoint. A fingerprint differing from `expected_fingerprint`
/// is reported as a warning, not an error.
pub fn load_model(path: &Path, expected_fingerprint: Option<&str>) -> Result<(ModelCheckpoint, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| ZslError::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| ZslError::Corrupt(format!("{}: {e}", path.display())))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ZslError::Corrupt(format!("{}: missing format_version", path.display())))?;
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(ZslError::Version {
            found: found as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let checkpoint: ModelCheckpoint =
        serde_json::from_value(value).map_err(|e| ZslError::Corrupt(format!("{}: {e}", path.display())))?;
    // re-validate shapes and finiteness
    let transform = crate::transform_net::TransformNet::from_layers(
        checkpoint.model.transform.layers().to_vec(),
        checkpoint.model.transform.leaky_slope(),
    )
    .map_err(|e| ZslError::Corrupt(e.to_string()))?;
    JointModel::new(transform, checkpoint.model.bilinear.clone()).map_err(|e| ZslError::Corrupt(e.to_string()))?;
    if checkpoint.model.params().iter().any(|p| !p.all_finite()) {
        return Err(ZslError::Corrupt("non-finite parameter".into()));
    }
    let mut warnings = Vec::new();
    if let Some(expected) = expected_fingerprint {
        if expected != checkpoint.word_space_fingerprint {
            let w = format!(
                "{}: word-space fingerprint {} does not match the current word space {}",
                path.display(),
                checkpoint.word_space_fingerprint,
                expected
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok((checkpoint, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::tempdir;

    #[test]
    fn word_vectors_read_back() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.txt");
        fs::write(&p, "cat 0.1 0.2 0.3\ndog 1 2 3\nbird -1 0 1e-3\n").unwrap();
        let (ws, warnings) = load_word_vectors(&p, 3).unwrap();
        assert_eq!(ws.lookup("cat"), Some(&[0.1, 0.2, 0.3][..]));
        assert_eq!(ws.len(), 3);
        assert!(warnings.is_empty());
    }

    #[test]
    fn word_vector_dimension_error_cites_line() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.txt");
        let short: Vec<String> = (0..299).map(|i| i.to_string()).collect();
        let full: Vec<String> = (0..300).map(|i| i.to_string()).collect();
        fs::write(&p, format!("a {}\nb {}\n", full.join(" "), short.join(" "))).unwrap();
        match load_word_vectors(&p, 300) {
            Err(ZslError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn word_vectors_empty_and_duplicates() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("w.txt");
        fs::write(&p, "").unwrap();
        assert!(load_word_vectors(&p, 2).is_err());
        fs::write(&p, "a 1 2\na 3 4\n").unwrap();
        let (ws, warnings) = load_word_vectors(&p, 2).unwrap();
        assert_eq!(ws.lookup("a"), Some(&[3.0, 4.0][..]));
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn features_binary_and_csv() {
        let dir = tempdir().unwrap();
        let m = Matrix::from_rows(&[[1.0, -2.5, 1e-300], [0.1, 0.2, 0.3]]).unwrap();
        let p = dir.path().join("f.zslf");
        write_features(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"ZSLF");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 6 * 8);
        assert_eq!(read_features(&p).unwrap(), m);

        fs::write(&p, &bytes[..30]).unwrap();
        assert!(read_features(&p).is_err());

        let c = dir.path().join("f.csv");
        fs::write(&c, "2,3\n1,-2.5,1e-300\n0.1,0.2,0.3\n").unwrap();
        assert_eq!(read_features(&c).unwrap(), m);
        fs::write(&c, "rows,cols\n1,2\n").unwrap();
        assert_eq!(read_features(&c).unwrap().shape(), (1, 2));
        fs::write(&c, "3,3\n1,2,3\n").unwrap();
        assert!(read_features(&c).is_err());
    }

    fn fixture(dir: &Path, labels: &str, predicates: &str) -> DatasetPaths {
        let features = Matrix::from_rows(&[[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.5, 0.5]]).unwrap();
        let paths = DatasetPaths {
            features: dir.join("f.zslf"),
            labels: dir.join("labels.tsv"),
            split: dir.join("split.txt"),
            predicates: Some(dir.join("pred.csv")),
            attribute_scores: None,
        };
        write_features(&features, &paths.features).unwrap();
        fs::write(&paths.labels, labels).unwrap();
        fs::write(&paths.split, "seen:\nzebra\nhorse\nunseen:\npersian+cat\n").unwrap();
        fs::write(paths.predicates.as_ref().unwrap(), predicates).unwrap();
        paths
    }

    const PRED: &str = "class,striped,furry\nzebra,1,0\nhorse,0,1\npersian+cat,0.5,1\n";

    #[test]
    fn loads_a_valid_dataset() {
        let dir = tempdir().unwrap();
        let paths = fixture(
            dir.path(),
            "0\tzebra\ttrain\n1\tzebra\n2\thorse\n3\tpersian+cat\ttest\n",
            PRED,
        );
        let (ds, _) = load_dataset(&paths, TrainingMode::Pbt).unwrap();
        assert_eq!(ds.seen_classes.len(), 2);
        assert_eq!(ds.unseen_classes.len(), 1);
        assert_eq!(ds.class_names, vec!["horse", "persian+cat", "zebra"]);
        assert_eq!(ds.labels, vec![2, 2, 0, 1]);
        let p = ds.predicate_matrix.as_ref().unwrap();
        assert_eq!(p.row(1), &[0.5, 1.0]);
        assert_eq!(ds.train_images(), vec![0, 1, 2]);
        assert_eq!(ds.test_images(), vec![3]);
    }

    #[test]
    fn split_order_does_not_matter() {
        let dir = tempdir().unwrap();
        let labels = "0\tzebra\n1\tzebra\n2\thorse\n3\tpersian+cat\n";
        let paths = fixture(dir.path(), labels, PRED);
        let (a, _) = load_dataset(&paths, TrainingMode::Pbt).unwrap();
        fs::write(&paths.split, "unseen:\npersian+cat\nseen:\nhorse\nzebra\n").unwrap();
        let (b, _) = load_dataset(&paths, TrainingMode::Pbt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unseen_training_image() {
        let dir = tempdir().unwrap();
        let paths = fixture(dir.path(), "0\tzebra\n1\tzebra\n2\thorse\n3\tpersian+cat\ttrain\n", PRED);
        let err = load_dataset(&paths, TrainingMode::Pbt).unwrap_err();
        assert!(err.to_string().contains("unseen"), "{err}");
    }

    #[test]
    fn rejects_unknown_class() {
        let dir = tempdir().unwrap();
        let paths = fixture(dir.path(), "0\tzebra\n1\tzebra\n2\tmoose\n3\tpersian+cat\n", PRED);
        assert!(load_dataset(&paths, TrainingMode::Pbt).unwrap_err().to_string().contains("moose"));
    }

    #[test]
    fn predicate_out_of_range_names_cell() {
        let dir = tempdir().unwrap();
        let paths = fixture(
            dir.path(),
            "0\tzebra\n1\tzebra\n2\thorse\n3\tpersian+cat\n",
            "class,striped,furry\nzebra,1,0\nhorse,1.5,1\npersian+cat,0.5,1\n",
        );
        match load_dataset(&paths, TrainingMode::Pbt) {
            Err(ZslError::Range { row, col, value, .. }) => {
                assert_eq!(row, "horse");
                assert_eq!(col, "striped");
                assert_eq!(value, 1.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn per_image_annotations_average_per_class() {
        let dir = tempdir().unwrap();
        let paths = fixture(
            dir.path(),
            "0\tzebra\n1\tzebra\n2\thorse\n3\tpersian+cat\n",
            "image,striped,furry\n0,1,0\n1,0,0\n2,0,1\n3,1,1\n",
        );
        let (ds, warnings) = load_dataset(&paths, TrainingMode::Pbt).unwrap();
        assert_eq!(ds.predicate_matrix.unwrap().row(2), &[0.5, 0.0]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn ibt_requires_image_keyed_scores() {
        let dir = tempdir().unwrap();
        let mut paths = fixture(dir.path(), "0\tzebra\n1\tzebra\n2\thorse\n3\tpersian+cat\n", PRED);
        paths.attribute_scores = paths.predicates.take();
        assert!(load_dataset(&paths, TrainingMode::Ibt).is_err());
    }

    #[test]
    fn margin_table_parsing() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, "a,b\n0,2\n1,0\n").unwrap();
        assert_eq!(read_margin_table(&p).unwrap().delta(0, 1), 2.0);
        fs::write(&p, "1,2\n1,0\n").unwrap();
        assert!(read_margin_table(&p).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_features(Path::new("/definitely/not/here.zslf")).unwrap_err();
        assert!(err.to_string().contains("/definitely/not/here.zslf"));
    }
}
