//! File formats, minibatch sampling, and checkpoints.
//!
//! Features come as CSV (`D` numeric columns, optional header) or as a binary
//! table:
//!
//! ```text
//! "SVGPFEAT" | u32 version | u64 N | u64 D | N·D f64 (row-major) | sha256(values)
//! ```
//!
//! Checkpoints use
//!
//! ```text
//! "SVGPCRCK" | u32 version | u64 payload length | bincode payload | sha256(payload)
//! ```
//!
//! with every integer and float little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crowd::AnnotationSet;
use crate::error::{Result, SvgpcrError};
use crate::trainer::Trainer;

pub const FEATURE_MAGIC: &[u8; 8] = b"SVGPFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVGPCRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Dense `N × D` feature matrix with finite entries. Instances are identified
/// by their row index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    values: DMatrix<f64>,
}

impl FeatureTable {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(SvgpcrError::EmptyDataset("feature table has no rows".into()));
        }
        if values.ncols() == 0 {
            return Err(SvgpcrError::Shape("feature table has no columns".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            let (row, col) = (i % values.nrows(), i / values.nrows());
            return Err(SvgpcrError::InvalidInput(format!("non-finite feature at row {row}, column {col}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CsvHeader {
    /// Treat the first row as a header when any of its cells is non-numeric.
    #[default]
    Auto,
    Present,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv(CsvHeader),
    Binary,
}

impl FeatureFormat {
    /// `.bin` / `.feat` files are binary, everything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("feat") => FeatureFormat::Binary,
            _ => FeatureFormat::Csv(CsvHeader::Auto),
        }
    }
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SvgpcrError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> SvgpcrError {
    match e.position() {
        Some(pos) => SvgpcrError::Parse {
            path: path_str(path),
            row: pos.line() as usize,
            column: 0,
            detail: e.to_string(),
        },
        None => SvgpcrError::Data(format!("{}: {e}", path.display())),
    }
}

fn csv_records(path: &Path) -> Result<Vec<(usize, csv::StringRecord)>> {
    let bytes = read_bytes(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let line = rec.position().map_or(out.len() + 1, |p| p.line() as usize);
        out.push((line, rec));
    }
    Ok(out)
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureTable> {
    match format {
        FeatureFormat::Csv(header) => load_features_csv(path, header),
        FeatureFormat::Binary => load_features_binary(path),
    }
}

fn load_features_csv(path: &Path, header: CsvHeader) -> Result<FeatureTable> {
    let mut rows = csv_records(path)?;
    let skip_first = match header {
        CsvHeader::Present => true,
        CsvHeader::Absent => false,
        CsvHeader::Auto => rows
            .first()
            .is_some_and(|(_, r)| r.iter().any(|f| f.parse::<f64>().is_err())),
    };
    if skip_first && !rows.is_empty() {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(SvgpcrError::EmptyDataset(format!("{} contains no feature rows", path.display())));
    }
    let d = rows[0].1.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for (line, rec) in &rows {
        if rec.len() != d {
            return Err(SvgpcrError::Shape(format!(
                "{} line {line} has {} columns, expected {d}",
                path.display(),
                rec.len()
            )));
        }
        for (c, field) in rec.iter().enumerate() {
            let parse_err = |detail: String| SvgpcrError::Parse {
                path: path_str(path),
                row: *line,
                column: c + 1,
                detail,
            };
            let v: f64 = field.parse().map_err(|_| parse_err(format!("'{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value '{field}'")));
            }
            data.push(v);
        }
    }
    FeatureTable::new(DMatrix::from_row_slice(rows.len(), d, &data))
}

fn integrity(path: &Path, detail: impl Into<String>) -> SvgpcrError {
    SvgpcrError::Integrity {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Splits `bytes` into (version, body) after checking the magic.
fn split_header<'a>(path: &Path, bytes: &'a [u8], magic: &[u8; 8]) -> Result<(u32, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(integrity(path, format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(integrity(path, "bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    Ok((version, &bytes[12..]))
}

fn read_u64(path: &Path, bytes: &[u8], at: usize) -> Result<u64> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| integrity(path, "truncated header"))
}

fn load_features_binary(path: &Path) -> Result<FeatureTable> {
    let bytes = read_bytes(path)?;
    if bytes.is_empty() {
        return Err(SvgpcrError::EmptyDataset(format!("{} is empty", path.display())));
    }
    let (version, body) = split_header(path, &bytes, FEATURE_MAGIC)?;
    if version != FEATURE_VERSION {
        return Err(SvgpcrError::VersionMismatch {
            found: version,
            expected: FEATURE_VERSION,
        });
    }
    let n = read_u64(path, body, 0)? as usize;
    let d = read_u64(path, body, 8)? as usize;
    let len = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| integrity(path, "declared size overflows"))?;
    let values = body.get(16..16 + len).ok_or_else(|| integrity(path, "truncated feature block"))?;
    let digest = body
        .get(16 + len..16 + len + 32)
        .ok_or_else(|| integrity(path, "missing checksum"))?;
    if body.len() != 16 + len + 32 {
        return Err(integrity(path, "trailing bytes after checksum"));
    }
    if Sha256::digest(values).as_slice() != digest {
        return Err(integrity(path, "checksum mismatch"));
    }
    let data: Vec<f64> = values
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if n == 0 {
        return Err(SvgpcrError::EmptyDataset(format!("{} declares zero rows", path.display())));
    }
    FeatureTable::new(DMatrix::from_row_slice(n, d, &data))
}

/// Writes to a sibling temporary file, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| SvgpcrError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| SvgpcrError::io(&tmp, e))?;
    f.sync_all().map_err(|e| SvgpcrError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| SvgpcrError::io(path, e))
}

pub fn write_features_binary(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut values = Vec::with_capacity(x.len() * 8);
    for i in 0..x.nrows() {
        for v in x.row(i).iter() {
            values.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(values.len() + 60);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(x.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.ncols() as u64).to_le_bytes());
    out.extend_from_slice(&values);
    out.extend_from_slice(&Sha256::digest(&values));
    write_atomic(path, &out)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| SvgpcrError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_row<W: Write>(w: &mut csv::Writer<W>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| csv_error(path, e))
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| SvgpcrError::io(path, e))
}

/// Floats are written with the shortest representation that round-trips.
fn fmt(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_features_csv(path: &Path, x: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = (0..x.ncols()).map(|d| format!("x{d}")).collect();
    write_row(&mut w, path, &header)?;
    for i in 0..x.nrows() {
        let row: Vec<String> = x.row(i).iter().map(|v| fmt(*v)).collect();
        write_row(&mut w, path, &row)?;
    }
    finish(w, path)
}

/// Reads `instance_id,annotator_id,label` rows. Columns are located by header
/// name when a header is present, positionally otherwise.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let mut rows = csv_records(path)?;
    let mut cols = [0usize, 1, 2];
    let has_header = rows
        .first()
        .is_some_and(|(_, r)| r.iter().any(|f| f.parse::<i64>().is_err()));
    if has_header {
        let (line, header) = rows.remove(0);
        for (slot, name) in cols.iter_mut().zip(["instance_id", "annotator_id", "label"]) {
            *slot = header.iter().position(|h| h == name).ok_or_else(|| SvgpcrError::Parse {
                path: path_str(path),
                row: line,
                column: 0,
                detail: format!("header lacks a '{name}' column"),
            })?;
        }
    }
    let mut triples = Vec::with_capacity(rows.len());
    for (line, rec) in &rows {
        let mut t = [0i64; 3];
        for (v, &c) in t.iter_mut().zip(&cols) {
            let field = rec.get(c).ok_or_else(|| SvgpcrError::Parse {
                path: path_str(path),
                row: *line,
                column: c + 1,
                detail: "missing field".into(),
            })?;
            *v = field.parse().map_err(|_| SvgpcrError::Parse {
                path: path_str(path),
                row: *line,
                column: c + 1,
                detail: format!("'{field}' is not an integer"),
            })?;
        }
        triples.push((t[0], t[1], t[2]));
    }
    AnnotationSet::from_triples(triples)
}

/// One row per annotation (records with count > 1 are repeated), using the
/// external annotator ids.
pub fn write_annotations(path: &Path, ann: &AnnotationSet) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &["instance_id".into(), "annotator_id".into(), "label".into()])?;
    let ids = ann.annotator_ids();
    for r in ann.records() {
        for _ in 0..r.count {
            write_row(&mut w, path, &[r.instance.to_string(), ids[r.annotator].to_string(), r.label.to_string()])?;
        }
    }
    finish(w, path)
}

/// `instance_id,label` with instance ids `0..n`.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(&mut w, path, &["instance_id".into(), "label".into()])?;
    for (i, l) in labels.iter().enumerate() {
        write_row(&mut w, path, &[i.to_string(), l.to_string()])?;
    }
    finish(w, path)
}

/// Reads `instance_id,label`; instance ids must be exactly `0..n` in some order.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut rows = csv_records(path)?;
    if rows.first().is_some_and(|(_, r)| r.iter().any(|f| f.parse::<i64>().is_err())) {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(SvgpcrError::EmptyDataset(format!("{} contains no labels", path.display())));
    }
    let mut labels = vec![None; rows.len()];
    for (line, rec) in &rows {
        let field = |c: usize| -> Result<usize> {
            let s = rec.get(c).unwrap_or("");
            s.parse().map_err(|_| SvgpcrError::Parse {
                path: path_str(path),
                row: *line,
                column: c + 1,
                detail: format!("'{s}' is not a nonnegative integer"),
            })
        };
        let (id, label) = (field(0)?, field(1)?);
        match labels.get_mut(id) {
            Some(slot @ None) => *slot = Some(label),
            Some(Some(_)) => return Err(SvgpcrError::Data(format!("{}: duplicate instance_id {id}", path.display()))),
            None => {
                return Err(SvgpcrError::Data(format!(
                    "{}: instance_id {id} out of range for {} rows",
                    path.display(),
                    rows.len()
                )))
            }
        }
    }
    Ok(labels.into_iter().map(|l| l.expect("every id seen once")).collect())
}

/// `instance_id,p_0,…,p_{K−1}`.
pub fn write_probabilities(path: &Path, probs: &DMatrix<f64>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["instance_id".to_string()];
    header.extend((0..probs.ncols()).map(|k| format!("p_{k}")));
    write_row(&mut w, path, &header)?;
    for i in 0..probs.nrows() {
        let mut row = vec![i.to_string()];
        row.extend(probs.row(i).iter().map(|v| fmt(*v)));
        write_row(&mut w, path, &row)?;
    }
    finish(w, path)
}

pub fn load_probabilities(path: &Path) -> Result<DMatrix<f64>> {
    let mut rows = csv_records(path)?;
    if rows.first().is_some_and(|(_, r)| r.iter().any(|f| f.parse::<f64>().is_err())) {
        rows.remove(0);
    }
    if rows.is_empty() {
        return Err(SvgpcrError::EmptyDataset(format!("{} contains no predictions", path.display())));
    }
    let width = rows[0].1.len();
    if width < 3 {
        return Err(SvgpcrError::Shape(format!("{} needs an id column and at least 2 classes", path.display())));
    }
    let n = rows.len();
    let mut out = DMatrix::zeros(n, width - 1);
    let mut seen = vec![false; n];
    for (line, rec) in &rows {
        if rec.len() != width {
            return Err(SvgpcrError::Shape(format!("{} line {line} has {} columns, expected {width}", path.display(), rec.len())));
        }
        let parse = |c: usize| -> Result<f64> {
            rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| SvgpcrError::Parse {
                path: path_str(path),
                row: *line,
                column: c + 1,
                detail: format!("'{}' is not a finite number", &rec[c]),
            })
        };
        let id = rec[0].parse::<usize>().ok().filter(|&i| i < n && !seen[i]).ok_or_else(|| SvgpcrError::Data(format!(
            "{} line {line}: instance_id '{}' is out of range or repeated",
            path.display(),
            &rec[0]
        )))?;
        seen[id] = true;
        for c in 1..width {
            out[(id, c - 1)] = parse(c)?;
        }
    }
    Ok(out)
}

/// Long-format confusion matrices: `annotator_id,true_class,label,<columns…>`,
/// one row per entry `(label, true_class)`, one value per supplied matrix set.
pub fn write_confusions(path: &Path, annotator_ids: &[i64], columns: &[(&str, &[DMatrix<f64>])]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["annotator_id".to_string(), "true_class".into(), "label".into()];
    header.extend(columns.iter().map(|(name, _)| name.to_string()));
    write_row(&mut w, path, &header)?;
    for (a, id) in annotator_ids.iter().enumerate() {
        let k = columns.first().map_or(0, |(_, m)| m[a].nrows());
        for j in 0..k {
            for i in 0..k {
                let mut row = vec![id.to_string(), j.to_string(), i.to_string()];
                row.extend(columns.iter().map(|(_, m)| fmt(m[a][(i, j)])));
                write_row(&mut w, path, &row)?;
            }
        }
    }
    finish(w, path)
}

/// Reads the first value column of a [`write_confusions`] file, returning
/// annotator ids (in order of appearance) and matrices.
pub fn load_confusions(path: &Path) -> Result<(Vec<i64>, Vec<DMatrix<f64>>)> {
    let mut rows = csv_records(path)?;
    if !rows.is_empty() {
        rows.remove(0);
    }
    let mut ids: Vec<i64> = Vec::new();
    let mut entries: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    for (line, rec) in &rows {
        let bad = |c: usize| SvgpcrError::Parse {
            path: path_str(path),
            row: *line,
            column: c + 1,
            detail: format!("unparsable field '{}'", rec.get(c).unwrap_or("")),
        };
        let id: i64 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad(0))?;
        let j: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad(1))?;
        let i: usize = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad(2))?;
        let v: f64 = rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad(3))?;
        let slot = match ids.iter().position(|&x| x == id) {
            Some(p) => p,
            None => {
                ids.push(id);
                entries.push(Vec::new());
                ids.len() - 1
            }
        };
        entries[slot].push((i, j, v));
    }
    let mut mats = Vec::with_capacity(ids.len());
    for (id, ent) in ids.iter().zip(&entries) {
        let k = ent.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
        if ent.len() != k * k {
            return Err(SvgpcrError::Shape(format!(
                "{}: annotator {id} has {} entries, expected {}",
                path.display(),
                ent.len(),
                k * k
            )));
        }
        let mut m = DMatrix::zeros(k, k);
        for &(i, j, v) in ent {
            m[(i, j)] = v;
        }
        mats.push(m);
    }
    Ok((ids, mats))
}

/// Shuffled index batches: each epoch is a fresh seeded permutation of `0..n`
/// cut into chunks of `batch_size` (the last may be short).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinibatchSampler {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epochs_started: usize,
}

impl MinibatchSampler {
    /// `batch_size` is clamped to `1..=n`.
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            n,
            batch_size: batch_size.clamp(1, n.max(1)),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            epochs_started: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    /// Epochs whose every batch has been handed out.
    pub fn epochs_completed(&self) -> usize {
        if self.cursor >= self.order.len() {
            self.epochs_started
        } else {
            self.epochs_started - 1
        }
    }

    /// Next batch together with its zero-based epoch index.
    pub fn next_batch(&mut self) -> (usize, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epochs_started += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        (self.epochs_started - 1, batch)
    }
}

impl Iterator for MinibatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.n == 0 {
            return None;
        }
        Some(self.next_batch().1)
    }
}

/// Everything needed to resume training or to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub trainer: Trainer,
    /// External annotator id of each internal annotator index.
    pub annotator_ids: Vec<i64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = bincode::serialize(self).map_err(|e| SvgpcrError::Data(format!("checkpoint encoding failed: {e}")))?;
        let mut out = Vec::with_capacity(payload.len() + 52);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        Ok(out)
    }

    /// `path` is used only in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (version, body) = split_header(path, bytes, CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION {
            return Err(SvgpcrError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = read_u64(path, body, 0)? as usize;
        let payload = body
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| integrity(path, "truncated payload"))?;
        let digest = body.get(8 + len..).filter(|d| d.len() == 32).ok_or_else(|| integrity(path, "missing or malformed checksum"))?;
        if Sha256::digest(payload).as_slice() != digest {
            return Err(integrity(path, "checksum mismatch"));
        }
        bincode::deserialize(payload).map_err(|e| integrity(path, format!("payload decoding failed: {e}")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?, path)
}
