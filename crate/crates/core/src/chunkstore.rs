//! Chunked on-disk datasets: CSV chunk files with a manifest, streaming
//! map/reduce in manifest order, and random row access through a binary
//! cache.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbillError};
use crate::hash::{ContentHash, Fnv64};
use crate::model::Model;
use crate::stream::StreamKey;
use crate::subsample::{
    estimate_stratified, Contributions, ControlVariateCache, DrawEstimate, GradientEstimator,
    Stratum, SubsamplePlan,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
const CACHE_FILE: &str = "rows.bin";
const CACHE_INDEX: &str = "rows.idx";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    /// `y,x1,...,xp` with binary `y`.
    Logistic,
    /// `panel_id,t,y,x1,...,xp`, grouped by panel with ascending `t`.
    Panel,
    /// `y1,...,yd` real vectors.
    Gaussian,
}

impl Schema {
    /// Columns per row for `d` covariates (or coordinates).
    pub fn width(self, d: usize) -> usize {
        match self {
            Schema::Logistic => d + 1,
            Schema::Panel => d + 3,
            Schema::Gaussian => d,
        }
    }

    pub fn header(self, d: usize) -> Vec<String> {
        let xs = (1..=d).map(|j| format!("x{j}"));
        match self {
            Schema::Logistic => std::iter::once("y".to_string()).chain(xs).collect(),
            Schema::Panel => ["panel_id", "t", "y"].iter().map(|s| s.to_string()).chain(xs).collect(),
            Schema::Gaussian => (1..=d).map(|j| format!("y{j}")).collect(),
        }
    }

    fn check_row(self, row: &[f64], d: usize, context: &dyn Fn() -> String) -> Result<()> {
        if row.len() != self.width(d) {
            return Err(VbillError::Schema(format!(
                "{}: expected {} columns, found {}",
                context(),
                self.width(d),
                row.len()
            )));
        }
        if !row.iter().all(|v| v.is_finite()) {
            return Err(VbillError::Schema(format!("{}: non-finite value", context())));
        }
        let y = match self {
            Schema::Logistic => Some(row[0]),
            Schema::Panel => Some(row[2]),
            Schema::Gaussian => None,
        };
        if let Some(y) = y {
            if y != 0.0 && y != 1.0 {
                return Err(VbillError::Schema(format!("{}: response {y} is not 0 or 1", context())));
            }
        }
        if self == Schema::Panel && (row[0] < 0.0 || row[0].fract() != 0.0 || row[1].fract() != 0.0) {
            return Err(VbillError::Schema(format!("{}: panel id and t must be integers", context())));
        }
        Ok(())
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schema::Logistic => "LOGISTIC",
            Schema::Panel => "PANEL",
            Schema::Gaussian => "GAUSSIAN",
        })
    }
}

impl FromStr for Schema {
    type Err = VbillError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LOGISTIC" => Ok(Schema::Logistic),
            "PANEL" => Ok(Schema::Panel),
            "GAUSSIAN" => Ok(Schema::Gaussian),
            other => Err(VbillError::Schema(format!("unknown schema tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    /// Path relative to the manifest directory.
    pub path: String,
    pub rows: usize,
    /// Order-dependent hash of the chunk's rows.
    pub hash: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub schema: Schema,
    pub n: usize,
    /// Covariates (logistic, panel) or coordinates (gaussian) per row.
    pub d: usize,
    pub chunks: Vec<ChunkInfo>,
    /// Hash of the chunk hashes in order; changes when any chunk changes.
    pub fingerprint: u64,
    /// Order-independent hash of the row multiset; equal across chunkings
    /// and equal to the fingerprint of a model built from the rows.
    pub content: u64,
}

impl ChunkManifest {
    pub fn width(&self) -> usize {
        self.schema.width(self.d)
    }

    /// First global row index of each chunk.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.chunks
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.rows;
                o
            })
            .collect()
    }

    pub fn chunk_sizes(&self) -> Vec<usize> {
        self.chunks.iter().map(|c| c.rows).collect()
    }

    fn fingerprint_of(chunks: &[ChunkInfo]) -> u64 {
        let mut h = Fnv64::default();
        for c in chunks {
            h.write_u64(c.hash);
        }
        h.finish()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "schema={}\nn={}\nd={}\nfingerprint={:016x}\ncontent={:016x}\n",
            self.schema, self.n, self.d, self.fingerprint, self.content
        );
        for c in &self.chunks {
            s.push_str(&format!("chunk={},{},{:016x}\n", c.path, c.rows, c.hash));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| VbillError::Schema(format!("manifest: {what}"));
        let mut fields = HashMap::new();
        let mut chunks = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(&format!("malformed line `{line}`")))?;
            if k == "chunk" {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 3 {
                    return Err(bad(&format!("malformed chunk entry `{v}`")));
                }
                chunks.push(ChunkInfo {
                    path: parts[0].to_string(),
                    rows: parts[1].parse().map_err(|_| bad("chunk row count"))?,
                    hash: u64::from_str_radix(parts[2], 16).map_err(|_| bad("chunk hash"))?,
                });
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
        let hex = |k: &str| -> Result<u64> {
            u64::from_str_radix(get(k)?, 16).map_err(|_| bad(&format!("invalid `{k}`")))
        };
        let m = ChunkManifest {
            schema: get("schema")?.parse()?,
            n: get("n")?.parse().map_err(|_| bad("invalid `n`"))?,
            d: get("d")?.parse().map_err(|_| bad("invalid `d`"))?,
            fingerprint: hex("fingerprint")?,
            content: hex("content")?,
            chunks,
        };
        if m.chunks.iter().map(|c| c.rows).sum::<usize>() != m.n {
            return Err(bad("chunk rows do not sum to n"));
        }
        if Self::fingerprint_of(&m.chunks) != m.fingerprint {
            return Err(bad("fingerprint does not match the chunk hashes"));
        }
        Ok(m)
    }
}

/// Rows of one chunk, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkData {
    /// Global index of the first row.
    pub first_row: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ChunkData {
    pub fn len(&self) -> usize {
        self.values.len() / self.width.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.width.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkOptions {
    pub rows_per_chunk: usize,
    /// Randomly permute rows (whole panels for panel data) before chunking.
    pub shuffle: Option<u64>,
}

/// A chunked dataset on disk.
#[derive(Debug, Clone)]
pub struct ChunkStore {
    dir: PathBuf,
    manifest: ChunkManifest,
}

fn csv_err(path: &Path, e: csv::Error) -> VbillError {
    VbillError::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

impl ChunkStore {
    /// Writes `rows` into CSV chunks of `rows_per_chunk` rows under `dir`,
    /// plus the manifest. Panel chunks end on panel boundaries, so they may
    /// hold more rows than requested.
    pub fn write<I>(dir: &Path, schema: Schema, d: usize, rows: I, options: ChunkOptions) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        if options.rows_per_chunk == 0 {
            return Err(VbillError::InvalidParameter("rows per chunk must be positive".into()));
        }
        if schema == Schema::Gaussian && d == 0 {
            return Err(VbillError::InvalidParameter("gaussian rows need d >= 1".into()));
        }
        std::fs::create_dir_all(dir).map_err(|e| VbillError::io(dir, e))?;
        remove_cache(dir);
        let rows: Box<dyn Iterator<Item = Vec<f64>>> = match options.shuffle {
            None => Box::new(rows.into_iter()),
            Some(seed) => Box::new(shuffled(schema, rows.into_iter().collect(), seed).into_iter()),
        };

        let mut writer = ChunkWriter::new(dir, schema, d);
        let mut panels = PanelCheck::default();
        for (i, row) in rows.enumerate() {
            schema.check_row(&row, d, &|| format!("row {i}"))?;
            let boundary = schema != Schema::Panel || panels.starts_new(&row, i)?;
            if writer.rows_in_current() >= options.rows_per_chunk && boundary {
                writer.finish_chunk()?;
            }
            writer.push(&row)?;
        }
        writer.finish_chunk()?;
        let (chunks, content) = writer.done();
        let manifest = ChunkManifest {
            schema,
            n: chunks.iter().map(|c| c.rows).sum(),
            d,
            fingerprint: ChunkManifest::fingerprint_of(&chunks),
            content,
            chunks,
        };
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, manifest.to_text()).map_err(|e| VbillError::io(&mp, e))?;
        Ok(ChunkStore {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).map_err(|e| VbillError::io(&mp, e))?;
        Ok(ChunkStore {
            dir: dir.to_path_buf(),
            manifest: ChunkManifest::parse(&text)?,
        })
    }

    pub fn manifest(&self) -> &ChunkManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn n(&self) -> usize {
        self.manifest.n
    }

    /// Reads chunk `k`, validating the schema and the recorded hash.
    pub fn read_chunk(&self, k: usize) -> Result<ChunkData> {
        let info = self
            .manifest
            .chunks
            .get(k)
            .ok_or(VbillError::IndexOutOfRange {
                index: k,
                n: self.manifest.chunks.len(),
            })?;
        let path = self.dir.join(&info.path);
        let width = self.manifest.width();
        let file = std::fs::File::open(&path).map_err(|e| VbillError::io(&path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
        let header = reader.headers().map_err(|e| csv_err(&path, e))?;
        let expected = self.manifest.schema.header(self.manifest.d);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(VbillError::Schema(format!(
                "chunk {k} ({}): header `{}` does not match `{}`",
                info.path,
                header.iter().collect::<Vec<_>>().join(","),
                expected.join(",")
            )));
        }
        let mut values = Vec::with_capacity(info.rows * width);
        let mut record = csv::StringRecord::new();
        let mut hash = Fnv64::default();
        let mut r = 0;
        let mut row = Vec::with_capacity(width);
        while reader.read_record(&mut record).map_err(|e| csv_err(&path, e))? {
            row.clear();
            for field in record.iter() {
                row.push(field.trim().parse::<f64>().map_err(|_| {
                    VbillError::Schema(format!("chunk {k} row {r}: `{field}` is not a number"))
                })?);
            }
            self.manifest
                .schema
                .check_row(&row, self.manifest.d, &|| format!("chunk {k} row {r}"))?;
            hash.write_f64s(&row);
            values.extend_from_slice(&row);
            r += 1;
        }
        if r != info.rows || hash.finish() != info.hash {
            return Err(VbillError::Schema(format!(
                "chunk {k} ({}) does not match its manifest entry",
                info.path
            )));
        }
        Ok(ChunkData {
            first_row: self.manifest.offsets()[k],
            width,
            values,
        })
    }

    /// Calls `f` on each chunk in manifest order, holding one chunk at a time.
    pub fn map_chunks<T, F>(&self, mut f: F) -> Result<Vec<T>>
    where
        F: FnMut(&ChunkData) -> Result<T>,
    {
        (0..self.manifest.chunks.len())
            .map(|k| {
                let chunk = self.read_chunk(k)?;
                f(&chunk)
            })
            .collect()
    }

    /// Folds `map(global_index, row)` with `combine` inside each chunk, then
    /// combines the per-chunk partials in manifest order.
    pub fn stream_map_reduce<T, M, C>(&self, identity: T, map: M, combine: C) -> Result<T>
    where
        T: Clone,
        M: Fn(usize, &[f64]) -> T,
        C: Fn(T, T) -> T,
    {
        let partials = self.map_chunks(|chunk| {
            let mut acc = identity.clone();
            for (i, row) in chunk.rows().enumerate() {
                acc = combine(acc, map(chunk.first_row + i, row));
            }
            Ok(acc)
        })?;
        Ok(partials.into_iter().fold(identity, &combine))
    }

    /// All rows in order.
    pub fn read_all(&self) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.manifest.n);
        for chunk in self.map_chunks(|c| Ok(c.rows().map(<[f64]>::to_vec).collect::<Vec<_>>()))? {
            out.extend(chunk);
        }
        Ok(out)
    }

    /// Builds the binary row cache unless a valid one exists.
    pub fn ensure_cache(&self) -> Result<()> {
        let idx = self.dir.join(CACHE_INDEX);
        if let Ok(bytes) = std::fs::read(&idx) {
            if bytes.len() == 24 && bytes[..8] == (self.manifest.width() as u64).to_le_bytes()
                && bytes[8..16] == (self.manifest.n as u64).to_le_bytes()
                && bytes[16..24] == self.manifest.fingerprint.to_le_bytes()
            {
                return Ok(());
            }
        }
        // write to unique temporaries, then rename into place
        let tag = format!("{}.{:?}", std::process::id(), std::thread::current().id());
        let bin_tmp = self.dir.join(format!("{CACHE_FILE}.{tag}.tmp"));
        let idx_tmp = self.dir.join(format!("{CACHE_INDEX}.{tag}.tmp"));
        {
            let file = std::fs::File::create(&bin_tmp).map_err(|e| VbillError::io(&bin_tmp, e))?;
            let mut w = BufWriter::new(file);
            self.map_chunks(|chunk| {
                for v in &chunk.values {
                    w.write_all(&v.to_le_bytes()).map_err(|e| VbillError::io(&bin_tmp, e))?;
                }
                Ok(())
            })?;
            w.flush().map_err(|e| VbillError::io(&bin_tmp, e))?;
        }
        let mut header = Vec::with_capacity(24);
        header.extend_from_slice(&(self.manifest.width() as u64).to_le_bytes());
        header.extend_from_slice(&(self.manifest.n as u64).to_le_bytes());
        header.extend_from_slice(&self.manifest.fingerprint.to_le_bytes());
        std::fs::write(&idx_tmp, header).map_err(|e| VbillError::io(&idx_tmp, e))?;
        let bin = self.dir.join(CACHE_FILE);
        std::fs::rename(&bin_tmp, &bin).map_err(|e| VbillError::io(&bin, e))?;
        std::fs::rename(&idx_tmp, &idx).map_err(|e| VbillError::io(&idx, e))?;
        Ok(())
    }

    /// Rows at 0-based `indices`, in request order (duplicates allowed).
    pub fn fetch_rows(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = self.manifest.n;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(VbillError::IndexOutOfRange { index: bad, n });
        }
        self.ensure_cache()?;
        let width = self.manifest.width();
        let path = self.dir.join(CACHE_FILE);
        let mut file = std::fs::File::open(&path).map_err(|e| VbillError::io(&path, e))?;
        let mut order: Vec<usize> = (0..indices.len()).collect();
        order.sort_by_key(|&k| indices[k]);
        let mut out = vec![Vec::new(); indices.len()];
        let mut buf = vec![0u8; width * 8];
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let i = indices[k];
            if let Some((prev, pos)) = last {
                if prev == i {
                    out[k] = out[pos].clone();
                    continue;
                }
            }
            file.seek(SeekFrom::Start((i * width * 8) as u64))
                .and_then(|_| file.read_exact(&mut buf))
                .map_err(|e| VbillError::io(&path, e))?;
            out[k] = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            last = Some((i, k));
        }
        Ok(out)
    }
}

fn remove_cache(dir: &Path) {
    for f in [CACHE_FILE, CACHE_INDEX] {
        let _ = std::fs::remove_file(dir.join(f));
    }
}

fn shuffled(schema: Schema, rows: Vec<Vec<f64>>, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = StreamKey::new(seed).rng();
    if schema != Schema::Panel {
        let mut rows = rows;
        rows.shuffle(&mut rng);
        return rows;
    }
    let mut groups: Vec<Vec<Vec<f64>>> = Vec::new();
    for row in rows {
        match groups.last_mut() {
            Some(g) if g[0][0] == row[0] => g.push(row),
            _ => groups.push(vec![row]),
        }
    }
    groups.shuffle(&mut rng);
    groups.into_iter().flatten().collect()
}

#[derive(Default)]
struct PanelCheck {
    current: Option<(f64, f64)>,
    closed: HashSet<u64>,
}

impl PanelCheck {
    /// True when `row` opens a new panel; errors on interleaved panels or
    /// non-ascending `t`.
    fn starts_new(&mut self, row: &[f64], i: usize) -> Result<bool> {
        let (id, t) = (row[0], row[1]);
        match self.current {
            Some((cid, ct)) if cid == id => {
                if t <= ct {
                    return Err(VbillError::Schema(format!("row {i}: t must ascend within panel {id}")));
                }
                self.current = Some((id, t));
                Ok(false)
            }
            prev => {
                if let Some((cid, _)) = prev {
                    self.closed.insert(cid as u64);
                }
                if self.closed.contains(&(id as u64)) {
                    return Err(VbillError::Schema(format!("row {i}: panel {id} is not contiguous")));
                }
                self.current = Some((id, t));
                Ok(true)
            }
        }
    }
}

struct ChunkWriter<'a> {
    dir: &'a Path,
    schema: Schema,
    d: usize,
    current: Option<(csv::Writer<BufWriter<std::fs::File>>, PathBuf, usize, Fnv64)>,
    chunks: Vec<ChunkInfo>,
    content: ContentHash,
}

impl<'a> ChunkWriter<'a> {
    fn new(dir: &'a Path, schema: Schema, d: usize) -> Self {
        ChunkWriter {
            dir,
            schema,
            d,
            current: None,
            chunks: Vec::new(),
            content: ContentHash::default(),
        }
    }

    fn rows_in_current(&self) -> usize {
        self.current.as_ref().map_or(0, |c| c.2)
    }

    fn open(&mut self) -> Result<()> {
        let name = format!("chunk_{:05}.csv", self.chunks.len());
        let path = self.dir.join(&name);
        let file = std::fs::File::create(&path).map_err(|e| VbillError::io(&path, e))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        w.write_record(self.schema.header(self.d)).map_err(|e| csv_err(&path, e))?;
        self.current = Some((w, path, 0, Fnv64::default()));
        Ok(())
    }

    fn push(&mut self, row: &[f64]) -> Result<()> {
        if self.current.is_none() {
            self.open()?;
        }
        let (w, path, count, hash) = self.current.as_mut().expect("chunk is open");
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
        hash.write_f64s(row);
        *count += 1;
        self.content.add_row(row);
        Ok(())
    }

    fn finish_chunk(&mut self) -> Result<()> {
        if self.current.is_none() && self.chunks.is_empty() {
            // an empty dataset still gets one chunk with a header
            self.open()?;
        }
        if let Some((mut w, path, rows, hash)) = self.current.take() {
            w.flush().map_err(|e| VbillError::io(&path, e))?;
            let name = path.file_name().expect("chunk file name").to_string_lossy().into_owned();
            self.chunks.push(ChunkInfo {
                path: name,
                rows,
                hash: hash.finish(),
            });
        }
        Ok(())
    }

    fn done(self) -> (Vec<ChunkInfo>, u64) {
        (self.chunks, self.content.finish())
    }
}

/// Records in the logistic layout `(y, x)`.
pub fn logistic_records(rows: &[(f64, Vec<f64>)]) -> impl Iterator<Item = Vec<f64>> + '_ {
    rows.iter().map(|(y, x)| std::iter::once(*y).chain(x.iter().copied()).collect())
}

/// Records in the panel layout `(panel_id, t, y, x)` with 0-based ids and t.
pub fn panel_records(panels: &[Vec<(f64, Vec<f64>)>]) -> impl Iterator<Item = Vec<f64>> + '_ {
    panels.iter().enumerate().flat_map(|(i, panel)| {
        panel.iter().enumerate().map(move |(t, (y, x))| {
            [i as f64, t as f64, *y].into_iter().chain(x.iter().copied()).collect()
        })
    })
}

/// Splits logistic records into `(y, x)` pairs.
pub fn split_logistic(rows: &[Vec<f64>]) -> Vec<(f64, Vec<f64>)> {
    rows.iter().map(|r| (r[0], r[1..].to_vec())).collect()
}

/// Groups panel records by panel id; panels are renumbered in order of
/// appearance.
pub fn split_panels(rows: &[Vec<f64>]) -> Vec<Vec<(f64, Vec<f64>)>> {
    let mut out: Vec<Vec<(f64, Vec<f64>)>> = Vec::new();
    let mut current = None;
    for r in rows {
        if current != Some(r[0]) {
            out.push(Vec::new());
            current = Some(r[0]);
        }
        out.last_mut().expect("panel opened").push((r[2], r[3..].to_vec()));
    }
    out
}

/// Reads a single CSV file with a `schema` header. Returns the number of
/// covariates (or coordinates) implied by the header, and the rows.
pub fn read_csv(path: &Path, schema: Schema) -> Result<(usize, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| VbillError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    let fixed = schema.width(0);
    if header.len() < fixed || (schema == Schema::Gaussian && header.is_empty()) {
        return Err(VbillError::Schema(format!(
            "{}: {} header needs at least {} columns",
            path.display(),
            schema,
            fixed.max(1)
        )));
    }
    let d = header.len() - fixed;
    let expected = schema.header(d);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(VbillError::Schema(format!(
            "{}: header `{}` does not match `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(","),
            expected.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let row = record
            .iter()
            .map(|field| {
                field
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| VbillError::Schema(format!("row {r}: `{field}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        schema.check_row(&row, d, &|| format!("{} row {r}", path.display()))?;
        rows.push(row);
    }
    Ok((d, rows))
}

/// Contributions of the rows fetched for one plan, addressed by global
/// index and reporting the full dataset's size and fingerprint.
pub struct FetchedRows<M> {
    local: M,
    position: HashMap<usize, usize>,
    n: usize,
    fingerprint: u64,
}

impl<M: Model> FetchedRows<M> {
    fn local_index(&self, i: usize) -> Result<usize> {
        self.position
            .get(&i)
            .copied()
            .ok_or(VbillError::IndexOutOfRange { index: i, n: self.n })
    }
}

impl<M: Model> Contributions for FetchedRows<M> {
    fn dim(&self) -> usize {
        self.local.dim()
    }

    fn n_obs(&self) -> usize {
        self.n
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn value_and_grad(&self, i: usize, theta: &[f64], key: StreamKey, grad: &mut [f64]) -> Result<f64> {
        self.local.value_and_grad(self.local_index(i)?, theta, key, grad)
    }

    fn center_terms(
        &self,
        i: usize,
        theta_bar: &[f64],
        delta: &[f64],
        grad: &mut [f64],
        h_delta: &mut [f64],
    ) -> Result<f64> {
        self.local.center_terms(self.local_index(i)?, theta_bar, delta, grad, h_delta)
    }

    fn center_hessian(&self, i: usize, theta_bar: &[f64], hess: &mut [f64]) -> Result<()> {
        self.local.center_hessian(self.local_index(i)?, theta_bar, hess)
    }
}

/// Subsampled difference estimator reading only the subsampled rows from a
/// chunk store. Uses the same plan and random streams as the in-memory
/// estimator, so both return identical estimates.
pub struct ChunkedEstimator<'a, B> {
    pub store: &'a ChunkStore,
    pub cache: ControlVariateCache,
    pub m: usize,
    /// Builds a model from fetched rows.
    pub build: B,
}

impl<'a, B, M> ChunkedEstimator<'a, B>
where
    B: Fn(&[Vec<f64>]) -> Result<M> + Send + Sync,
    M: Model,
{
    pub fn new(store: &'a ChunkStore, cache: ControlVariateCache, m: usize, build: B) -> Result<Self> {
        cache.check_fingerprint(store.manifest().content)?;
        if cache.n != store.n() {
            return Err(VbillError::DimensionMismatch {
                expected: store.n(),
                found: cache.n,
            });
        }
        if m == 0 {
            return Err(VbillError::InvalidParameter("subsample size must be positive".into()));
        }
        Ok(ChunkedEstimator { store, cache, m, build })
    }

    pub fn fetch(&self, indices: &[usize]) -> Result<FetchedRows<M>> {
        let mut unique: Vec<usize> = indices.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let rows = self.store.fetch_rows(&unique)?;
        Ok(FetchedRows {
            local: (self.build)(&rows)?,
            position: unique.iter().enumerate().map(|(k, &i)| (i, k)).collect(),
            n: self.store.n(),
            fingerprint: self.store.manifest().content,
        })
    }
}

impl<B, M> GradientEstimator for ChunkedEstimator<'_, B>
where
    B: Fn(&[Vec<f64>]) -> Result<M> + Send + Sync,
    M: Model,
{
    fn dim(&self) -> usize {
        self.cache.dim()
    }

    fn n_obs(&self) -> usize {
        self.cache.n
    }

    fn estimate(&self, theta: &[f64], key: StreamKey) -> Result<DrawEstimate> {
        let plan = SubsamplePlan::draw(self.cache.n, self.m, key.child(0))?;
        let contrib = self.fetch(&plan.indices)?;
        let strata = [Stratum {
            size: self.cache.n,
            indices: plan.indices,
        }];
        estimate_stratified(&contrib, theta, &self.cache, &strata, key.child(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogisticRegressionModel;
    use crate::subsample::{build_control_variates, CenterSums, SubsampledEstimator};

    fn logistic_data(n: usize) -> Vec<Vec<f64>> {
        let rows = crate::simulate::logistic_rows(n, &crate::simulate::LOGISTIC_BETA, StreamKey::new(5)).unwrap();
        logistic_records(&rows).collect()
    }

    fn opts(rows_per_chunk: usize) -> ChunkOptions {
        ChunkOptions {
            rows_per_chunk,
            shuffle: None,
        }
    }

    #[test]
    fn chunk_sizes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = logistic_data(10);
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, rows.clone(), opts(4)).unwrap();
        assert_eq!(store.manifest().chunk_sizes(), vec![4, 4, 2]);
        assert_eq!(store.read_all().unwrap(), rows);
        let reopened = ChunkStore::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest(), store.manifest());
        let model = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows)).unwrap();
        assert_eq!(Model::fingerprint(&model), store.manifest().content);
    }

    #[test]
    fn rechunking_keeps_content_hash() {
        let rows = logistic_data(50);
        let a_dir = tempfile::tempdir().unwrap();
        let b_dir = tempfile::tempdir().unwrap();
        let a = ChunkStore::write(a_dir.path(), Schema::Logistic, 3, rows.clone(), opts(7)).unwrap();
        let b = ChunkStore::write(b_dir.path(), Schema::Logistic, 3, rows.clone(), opts(16)).unwrap();
        assert_ne!(a.manifest(), b.manifest());
        assert_ne!(a.manifest().fingerprint, b.manifest().fingerprint);
        assert_eq!(a.manifest().content, b.manifest().content);

        let c_dir = tempfile::tempdir().unwrap();
        let shuffled = ChunkOptions {
            rows_per_chunk: 16,
            shuffle: Some(3),
        };
        let c = ChunkStore::write(c_dir.path(), Schema::Logistic, 3, rows.clone(), shuffled).unwrap();
        assert_eq!(c.manifest().content, a.manifest().content);
        assert_ne!(c.read_all().unwrap(), rows);
    }

    #[test]
    fn tampered_chunk_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, logistic_data(10), opts(4)).unwrap();
        let path = dir.path().join(&store.manifest().chunks[1].path);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replacen(',', ",1", 1);
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(store.read_chunk(1), Err(VbillError::Schema(_))));
        assert!(store.read_chunk(0).is_ok());
    }

    #[test]
    fn schema_violations_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_y = vec![vec![2.0, 0.0, 1.0, 0.5]];
        assert!(ChunkStore::write(dir.path(), Schema::Logistic, 3, bad_y, opts(4)).is_err());
        let ragged = vec![vec![1.0, 0.0, 1.0]];
        assert!(ChunkStore::write(dir.path(), Schema::Logistic, 3, ragged, opts(4)).is_err());
        let interleaved = vec![
            vec![0.0, 0.0, 1.0, 0.2],
            vec![1.0, 0.0, 0.0, 0.3],
            vec![0.0, 1.0, 1.0, 0.4],
        ];
        assert!(ChunkStore::write(dir.path(), Schema::Panel, 1, interleaved, opts(4)).is_err());

        // ragged CSV on disk
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, logistic_data(3), opts(4)).unwrap();
        let path = dir.path().join(&store.manifest().chunks[0].path);
        std::fs::write(&path, "y,x1,x2,x3\n1,0,1\n").unwrap();
        assert!(store.read_chunk(0).is_err());
    }

    #[test]
    fn empty_dataset_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, Vec::new(), opts(4)).unwrap();
        assert_eq!(store.n(), 0);
        let text = std::fs::read_to_string(dir.path().join(&store.manifest().chunks[0].path)).unwrap();
        assert_eq!(text.trim(), "y,x1,x2,x3");
        assert!(store.read_all().unwrap().is_empty());
    }

    #[test]
    fn panel_chunks_end_on_panel_boundaries() {
        let panels = crate::simulate::panel_rows(7, 3, &[0.0, 1.0], 0.0, StreamKey::new(1)).unwrap();
        let rows: Vec<Vec<f64>> = panel_records(&panels).collect();
        let dir = tempfile::tempdir().unwrap();
        let store = ChunkStore::write(dir.path(), Schema::Panel, 1, rows.clone(), opts(4)).unwrap();
        assert!(store.manifest().chunk_sizes().iter().all(|r| r % 3 == 0));
        assert_eq!(split_panels(&store.read_all().unwrap()), panels);
        let shuffled_dir = tempfile::tempdir().unwrap();
        let shuffled = ChunkStore::write(
            shuffled_dir.path(),
            Schema::Panel,
            1,
            rows,
            ChunkOptions {
                rows_per_chunk: 4,
                shuffle: Some(9),
            },
        )
        .unwrap();
        let mut back = split_panels(&shuffled.read_all().unwrap());
        assert_eq!(back.len(), 7);
        back.sort_by(|a, b| a[0].1[0].total_cmp(&b[0].1[0]));
        let mut orig = panels.clone();
        orig.sort_by(|a, b| a[0].1[0].total_cmp(&b[0].1[0]));
        assert_eq!(back, orig);
    }

    #[test]
    fn fetch_rows_examples() {
        let dir = tempfile::tempdir().unwrap();
        let rows = logistic_data(25);
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, rows.clone(), opts(6)).unwrap();
        assert_eq!(store.fetch_rows(&[0]).unwrap(), vec![rows[0].clone()]);
        let all: Vec<usize> = (0..25).collect();
        assert_eq!(store.fetch_rows(&all).unwrap(), rows);
        assert_eq!(
            store.fetch_rows(&[7, 3, 7, 24]).unwrap(),
            vec![rows[7].clone(), rows[3].clone(), rows[7].clone(), rows[24].clone()]
        );
        assert!(matches!(
            store.fetch_rows(&[25]),
            Err(VbillError::IndexOutOfRange { index: 25, n: 25 })
        ));
    }

    #[test]
    fn map_reduce_counts_and_matches_memory() {
        let rows = logistic_data(10_000);
        let model = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows)).unwrap();
        let theta_bar = [-1.5, -0.1, 0.1, 0.7];
        let reference = build_control_variates(&model, &theta_bar).unwrap();
        let mut grads = Vec::new();
        for chunks in [1usize, 8] {
            let dir = tempfile::tempdir().unwrap();
            let store =
                ChunkStore::write(dir.path(), Schema::Logistic, 3, rows.clone(), opts(10_000usize.div_ceil(chunks)))
                    .unwrap();
            assert_eq!(store.manifest().chunks.len(), chunks);
            let count = store.stream_map_reduce(0usize, |_, _| 1, |a, b| a + b).unwrap();
            assert_eq!(count, 10_000);
            let grad = store
                .stream_map_reduce(
                    vec![0.0; 4],
                    |i, _| model.grad_contrib(i, &theta_bar).unwrap(),
                    |mut a, b| {
                        crate::linalg::axpy(1.0, &b, &mut a);
                        a
                    },
                )
                .unwrap();
            for (a, b) in grad.iter().zip(&reference.grad_bar) {
                assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
            grads.push(grad);
            // per-chunk models reproduce the full sums
            let sums = store
                .map_chunks(|c| {
                    let rows: Vec<Vec<f64>> = c.rows().map(<[f64]>::to_vec).collect();
                    let m = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows))?;
                    CenterSums::accumulate(&m, 0..rows.len(), &theta_bar)
                })
                .unwrap();
            let mut total = CenterSums::zero(4);
            sums.iter().for_each(|s| total.merge(s));
            assert!((total.loglik - reference.loglik_bar).abs() < 1e-12 * reference.loglik_bar.abs());
        }
        for (a, b) in grads[0].iter().zip(&grads[1]) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]

        #[test]
        fn aggregates_ignore_chunking(
            n in 1usize..400,
            per_chunk in 1usize..200,
            shuffle in proptest::option::of(0u64..100),
        ) {
            let rows = logistic_data(n);
            let model = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows)).unwrap();
            let theta = [-1.0, 0.3, -0.2, 0.5];
            let one = tempfile::tempdir().unwrap();
            let many = tempfile::tempdir().unwrap();
            let a = ChunkStore::write(one.path(), Schema::Logistic, 3, rows.clone(), opts(n)).unwrap();
            let options = ChunkOptions { rows_per_chunk: per_chunk, shuffle };
            let b = ChunkStore::write(many.path(), Schema::Logistic, 3, rows, options).unwrap();
            proptest::prop_assert_eq!(a.manifest().content, b.manifest().content);
            let total = |s: &ChunkStore| {
                let sums = s
                    .map_chunks(|c| {
                        let rows: Vec<Vec<f64>> = c.rows().map(<[f64]>::to_vec).collect();
                        let m = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows))?;
                        CenterSums::accumulate(&m, 0..rows.len(), &theta)
                    })
                    .unwrap();
                let mut t = CenterSums::zero(4);
                sums.iter().for_each(|x| t.merge(x));
                t
            };
            let (x, y) = (total(&a), total(&b));
            let reference = build_control_variates(&model, &theta).unwrap();
            proptest::prop_assert!((x.loglik - y.loglik).abs() <= 1e-12 * x.loglik.abs().max(1.0));
            proptest::prop_assert!((x.loglik - reference.loglik_bar).abs() <= 1e-12 * x.loglik.abs().max(1.0));
        }
    }

    #[test]
    fn chunked_estimator_matches_in_memory() {
        let rows = logistic_data(2_000);
        let model = LogisticRegressionModel::from_covariates(3, &split_logistic(&rows)).unwrap();
        let theta_bar = [-1.5, -0.1, 0.1, 0.7];
        let cache = build_control_variates(&model, &theta_bar).unwrap();
        let memory = SubsampledEstimator::new(&model, cache.clone(), 40).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let store = ChunkStore::write(dir.path(), Schema::Logistic, 3, rows, opts(300)).unwrap();
        let chunked = ChunkedEstimator::new(&store, cache, 40, |r: &[Vec<f64>]| {
            LogisticRegressionModel::from_covariates(3, &split_logistic(r))
        })
        .unwrap();
        let theta = [-1.4, -0.2, 0.0, 0.9];
        for s in 0..5 {
            let key = StreamKey::new(21).child(s);
            let a = memory.estimate(&theta, key).unwrap();
            let b = chunked.estimate(&theta, key).unwrap();
            assert_eq!(a.gradient.value, b.gradient.value);
            assert_eq!(a.loglik, b.loglik);
        }
    }

    #[test]
    fn csv_import_infers_width() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        std::fs::write(&path, "y,x1,x2\n1,0.5,1\n0,0.25,0\n").unwrap();
        let (d, rows) = read_csv(&path, Schema::Logistic).unwrap();
        assert_eq!(d, 2);
        assert_eq!(rows, vec![vec![1.0, 0.5, 1.0], vec![0.0, 0.25, 0.0]]);
        std::fs::write(&path, "y,x1,x3\n1,0.5,1\n").unwrap();
        assert!(matches!(read_csv(&path, Schema::Logistic), Err(VbillError::Schema(_))));
        std::fs::write(&path, "y,x1\n2,0.5\n").unwrap();
        assert!(matches!(read_csv(&path, Schema::Logistic), Err(VbillError::Schema(_))));
        std::fs::write(&path, "panel_id,t,y\n0,0,1\n").unwrap();
        assert_eq!(read_csv(&path, Schema::Panel).unwrap(), (0, vec![vec![0.0, 0.0, 1.0]]));
    }

    #[test]
    fn manifest_parse_rejects_inconsistency() {
        let dir = tempfile::tempdir().unwrap();
        let store = ChunkStore::write(dir.path(), Schema::Gaussian, 2, vec![vec![0.5, 1.5]; 5], opts(2)).unwrap();
        let text = store.manifest().to_text();
        assert_eq!(ChunkManifest::parse(&text).unwrap(), *store.manifest());
        assert!(ChunkManifest::parse(&text.replace("n=5", "n=6")).is_err());
        assert!(ChunkManifest::parse(&text.replace("schema=GAUSSIAN", "schema=OTHER")).is_err());
    }
}
