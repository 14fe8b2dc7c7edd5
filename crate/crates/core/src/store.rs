//! Embedding data model and the GGFS container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GGFS" | version u32 = 1 | dim u32 | classes u32 | records u64
//! classes  x (name_len u16, utf-8 name)
//! provenance_len u16, utf-8 provenance
//! records  x (record_id u64, class_index u32, patches u16,
//!             (1 + patches) * dim f32)   // totality first
//! ```
//!
//! Values are held as `f64` in memory; the writer refuses any value that
//! would not survive the trip through `f32`, so a write/read pair is
//! lossless.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GgiuError, Result};

pub const MAGIC: [u8; 4] = *b"GGFS";
pub const VERSION: u32 = 1;

/// One embedding. Entries are unitless coordinates.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Rounds every entry to the nearest `f32`, making the vector storable.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.0 {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-length copy; `None` for the zero vector.
    pub fn l2_normalized(&self) -> Option<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(FeatureVector(self.0.iter().map(|v| v / n).collect()))
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        FeatureVector(values)
    }
}

impl<const N: usize> From<[f64; N]> for FeatureVector {
    fn from(values: [f64; N]) -> Self {
        FeatureVector(values.to_vec())
    }
}

/// A single image: its whole-image embedding plus embeddings of its crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub record_id: u64,
    pub class_index: u32,
    pub totality: FeatureVector,
    pub patches: Vec<FeatureVector>,
}

impl ImageRecord {
    fn check(&self, dim: usize, classes: usize) -> Result<()> {
        if self.class_index as usize >= classes {
            return Err(GgiuError::ClassIndexOutOfRange {
                record_id: self.record_id,
                class_index: self.class_index,
                classes,
            });
        }
        for (field, v) in self.vectors() {
            if v.dim() != dim {
                return Err(GgiuError::InvalidDataset(format!(
                    "record {}: {field} has dimension {}, dataset dimension is {dim}",
                    self.record_id,
                    v.dim()
                )));
            }
            if !v.is_finite() {
                return Err(GgiuError::NonFinite {
                    record_id: self.record_id,
                    field,
                });
            }
        }
        Ok(())
    }

    fn vectors(&self) -> impl Iterator<Item = (String, &FeatureVector)> {
        std::iter::once(("totality".to_string(), &self.totality)).chain(
            self.patches
                .iter()
                .enumerate()
                .map(|(i, p)| (format!("patch {i}"), p)),
        )
    }
}

/// A split of embedded images sharing one dimension and one class table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    pub dim: usize,
    pub class_names: Vec<String>,
    pub records: Vec<ImageRecord>,
    pub provenance: String,
}

impl EmbeddingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(GgiuError::InvalidDataset("dimension must be at least 1".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.record_id) {
                return Err(GgiuError::DuplicateRecordId(r.record_id));
            }
            r.check(self.dim, self.class_names.len())?;
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    /// Record positions grouped by class index, in file order.
    pub fn records_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_names.len()];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.class_index as usize].push(i);
        }
        by_class
    }

    pub fn min_patch_count(&self) -> usize {
        self.records.iter().map(|r| r.patches.len()).min().unwrap_or(0)
    }

    /// The same dataset with every patch dropped.
    pub fn without_patches(&self) -> Self {
        let mut stripped = self.clone();
        for r in &mut stripped.records {
            r.patches.clear();
        }
        stripped
    }
}

fn check_storable(r: &ImageRecord) -> Result<()> {
    for (field, v) in r.vectors() {
        if let Some(&value) = v.iter().find(|&&x| x as f32 as f64 != x) {
            return Err(GgiuError::NotRepresentable {
                record_id: r.record_id,
                field,
                value,
            });
        }
    }
    Ok(())
}

fn short_len(what: &'static str, len: usize) -> Result<u16> {
    u16::try_from(len).map_err(|_| GgiuError::FieldTooLong {
        what,
        len,
        max: u16::MAX as usize,
    })
}

/// Writes `dataset` in GGFS form and returns the number of bytes emitted.
pub fn write_dataset<W: Write>(dataset: &EmbeddingDataset, sink: W) -> Result<u64> {
    dataset.validate()?;
    for r in &dataset.records {
        check_storable(r)?;
        short_len("patch count", r.patches.len())?;
    }
    let dim = u32::try_from(dataset.dim).map_err(|_| GgiuError::FieldTooLong {
        what: "dimension",
        len: dataset.dim,
        max: u32::MAX as usize,
    })?;
    let classes = u32::try_from(dataset.class_names.len()).map_err(|_| GgiuError::FieldTooLong {
        what: "class table",
        len: dataset.class_names.len(),
        max: u32::MAX as usize,
    })?;

    let mut out = CountingWriter::new(BufWriter::new(sink));
    out.put(&MAGIC)?;
    out.put(&VERSION.to_le_bytes())?;
    out.put(&dim.to_le_bytes())?;
    out.put(&classes.to_le_bytes())?;
    out.put(&(dataset.records.len() as u64).to_le_bytes())?;
    for name in &dataset.class_names {
        out.put(&short_len("class name", name.len())?.to_le_bytes())?;
        out.put(name.as_bytes())?;
    }
    out.put(&short_len("provenance", dataset.provenance.len())?.to_le_bytes())?;
    out.put(dataset.provenance.as_bytes())?;
    for r in &dataset.records {
        out.put(&r.record_id.to_le_bytes())?;
        out.put(&r.class_index.to_le_bytes())?;
        out.put(&(r.patches.len() as u16).to_le_bytes())?;
        for v in std::iter::once(&r.totality).chain(&r.patches) {
            for &x in v.iter() {
                out.put(&(x as f32).to_le_bytes())?;
            }
        }
    }
    out.inner.flush()?;
    Ok(out.count)
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> CountingWriter<W> {
    fn new(inner: W) -> Self {
        CountingWriter { inner, count: 0 }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.count += bytes.len() as u64;
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(GgiuError::Truncated {
                offset: self.bytes.len() as u64,
                needed: (n - remaining) as u64,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| GgiuError::InvalidUtf8(what))
    }

    fn vector(&mut self, dim: usize, what: &'static str) -> Result<FeatureVector> {
        let raw = self.take(dim * 4, what)?;
        Ok(FeatureVector(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect(),
        ))
    }
}

/// Parses a complete GGFS stream.
pub fn read_dataset<R: Read>(mut source: R) -> Result<EmbeddingDataset> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

pub fn parse_dataset(bytes: &[u8]) -> Result<EmbeddingDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = match cur.array::<4>("magic") {
        Ok(m) => m,
        Err(e) if MAGIC.starts_with(bytes) => return Err(e),
        Err(_) => {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(GgiuError::BadMagic { found });
        }
    };
    if magic != MAGIC {
        return Err(GgiuError::BadMagic { found: magic });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(GgiuError::UnsupportedVersion(version));
    }
    let dim = cur.u32("dimension")? as usize;
    let classes = cur.u32("class count")? as usize;
    let record_count = cur.u64("record count")?;
    if dim == 0 {
        return Err(GgiuError::InvalidDataset("dimension must be at least 1".into()));
    }

    let mut class_names = Vec::with_capacity(classes.min(bytes.len() / 2));
    for _ in 0..classes {
        class_names.push(cur.string("class name")?);
    }
    let provenance = cur.string("provenance")?;

    // Smallest possible record: header plus the totality vector.
    let min_record = 14 + 4 * dim;
    let cap = (record_count as usize).min((bytes.len() - cur.pos) / min_record);
    let mut records = Vec::with_capacity(cap);
    let mut seen = HashSet::with_capacity(cap);
    for _ in 0..record_count {
        let record_id = cur.u64("record id")?;
        let class_index = cur.u32("class index")?;
        if class_index as usize >= classes {
            return Err(GgiuError::ClassIndexOutOfRange {
                record_id,
                class_index,
                classes,
            });
        }
        let m = cur.u16("patch count")? as usize;
        let totality = cur.vector(dim, "totality vector")?;
        let mut patches = Vec::with_capacity(m);
        for _ in 0..m {
            patches.push(cur.vector(dim, "patch vector")?);
        }
        if !seen.insert(record_id) {
            return Err(GgiuError::DuplicateRecordId(record_id));
        }
        let record = ImageRecord {
            record_id,
            class_index,
            totality,
            patches,
        };
        record.check(dim, classes)?;
        records.push(record);
    }
    if cur.pos != bytes.len() {
        return Err(GgiuError::TrailingBytes {
            offset: cur.pos as u64,
            count: (bytes.len() - cur.pos) as u64,
        });
    }
    Ok(EmbeddingDataset {
        dim,
        class_names,
        records,
        provenance,
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonClass {
    Index(u32),
    Name(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    record_id: u64,
    class: JsonClass,
    totality: Vec<f64>,
    #[serde(default)]
    patches: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    class_names: Vec<String>,
    #[serde(default)]
    provenance: Option<String>,
}

/// Reads the JSON-lines fixture format: one object per line with
/// `record_id`, `class` (index or name), `totality` and `patches`.
///
/// An optional first line `{"class_names": [...], "provenance": "..."}` fixes
/// the class table; otherwise it is derived from the records (names in
/// first-appearance order, or `class_<i>` for integer classes).
pub fn read_jsonl<R: BufRead>(source: R) -> Result<EmbeddingDataset> {
    let mut header: Option<JsonHeader> = None;
    let mut rows = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if rows.is_empty() && header.is_none() && line.contains("\"class_names\"") {
            header = Some(serde_json::from_str(&line).map_err(|e| GgiuError::JsonLine {
                line: lineno,
                message: e.to_string(),
            })?);
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| GgiuError::JsonLine {
            line: lineno,
            message: e.to_string(),
        })?;
        rows.push((lineno, rec));
    }

    let mut class_names = header.as_ref().map(|h| h.class_names.clone()).unwrap_or_default();
    let fixed_table = header.is_some();
    let mut name_index: BTreeMap<String, u32> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i as u32))
        .collect();
    let mut records = Vec::with_capacity(rows.len());
    let mut max_index: Option<u32> = None;
    let mut dim = None;
    for (lineno, rec) in rows {
        let class_index = match rec.class {
            JsonClass::Index(i) => {
                max_index = Some(max_index.map_or(i, |m: u32| m.max(i)));
                i
            }
            JsonClass::Name(name) => match name_index.get(&name) {
                Some(&i) => i,
                None if fixed_table => {
                    return Err(GgiuError::JsonLine {
                        line: lineno,
                        message: format!("class {name:?} not in header class_names"),
                    })
                }
                None => {
                    let i = class_names.len() as u32;
                    class_names.push(name.clone());
                    name_index.insert(name, i);
                    i
                }
            },
        };
        let d = *dim.get_or_insert(rec.totality.len());
        if rec.totality.len() != d {
            return Err(GgiuError::JsonLine {
                line: lineno,
                message: format!("totality has {} entries, expected {d}", rec.totality.len()),
            });
        }
        records.push(ImageRecord {
            record_id: rec.record_id,
            class_index,
            totality: rec.totality.into(),
            patches: rec.patches.into_iter().map(FeatureVector::from).collect(),
        });
    }
    if !fixed_table {
        if let Some(m) = max_index {
            if !class_names.is_empty() {
                return Err(GgiuError::InvalidDataset(
                    "jsonl mixes integer and named classes without a header".into(),
                ));
            }
            class_names = (0..=m).map(|i| format!("class_{i}")).collect();
        }
    }
    let dataset = EmbeddingDataset {
        dim: dim.unwrap_or(0),
        class_names,
        records,
        provenance: header
            .and_then(|h| h.provenance)
            .unwrap_or_else(|| "jsonl".to_string()),
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_jsonl<W: Write>(dataset: &EmbeddingDataset, sink: W) -> Result<()> {
    dataset.validate()?;
    let mut out = BufWriter::new(sink);
    let header = serde_json::json!({
        "class_names": dataset.class_names,
        "provenance": dataset.provenance,
    });
    writeln!(out, "{header}")?;
    for r in &dataset.records {
        let row = serde_json::json!({
            "record_id": r.record_id,
            "class": r.class_index,
            "totality": r.totality,
            "patches": r.patches,
        });
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a dataset from disk, sniffing GGFS by its magic and falling back to
/// JSON lines.
pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(&MAGIC) {
        return parse_dataset(&bytes);
    }
    let is_jsonl = path
        .extension()
        .is_some_and(|e| e == "jsonl" || e == "json");
    if is_jsonl {
        read_jsonl(BufReader::new(bytes.as_slice()))
    } else {
        parse_dataset(&bytes)
    }
}

pub fn save_dataset(dataset: &EmbeddingDataset, path: &Path) -> Result<u64> {
    write_dataset(dataset, File::create(path)?)
}

/// Draws `m` of the record's patches without replacement.
pub fn subsample_patches<'a, R: Rng + ?Sized>(
    record: &'a ImageRecord,
    m: usize,
    rng: &mut R,
) -> Result<Vec<&'a FeatureVector>> {
    let available = record.patches.len();
    if m == 0 || m > available {
        return Err(GgiuError::PatchBounds {
            requested: m,
            available,
        });
    }
    let mut order: Vec<usize> = (0..available).collect();
    let (picked, _) = order.partial_shuffle(rng, m);
    Ok(picked.iter().map(|&i| &record.patches[i]).collect())
}
