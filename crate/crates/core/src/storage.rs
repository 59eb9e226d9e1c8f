//! Little-endian binary containers.
//!
//! * `AEDT`: one tensor (`f32` or `u8` payload).
//! * `AEDW`: named `f32` tensors holding autoencoder weights.
//! * `AEDI`: a product-quantization codebook plus its bit-packed codes.
//!
//! Scores travel as plain `index,score` CSV lines.
//!
//! Writers go through a temporary file in the destination directory and
//! rename it into place, so a failed write never leaves a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::pq::{PqCodebook, PqCodes, PqConfig, MAX_CODE_BITS};
use crate::tensor::{checked_volume, Tensor, MAX_RANK};

pub const TENSOR_MAGIC: &[u8; 4] = b"AEDT";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"AEDW";
pub const INDEX_MAGIC: &[u8; 4] = b"AEDI";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// A `u8` tensor, used for label vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteTensor {
    dims: Vec<usize>,
    data: Vec<u8>,
}

impl ByteTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let volume = checked_volume(&dims)?;
        if volume != data.len() {
            return Err(Error::InvalidDims {
                dims,
                reason: format!("expected {volume} elements, got {}", data.len()),
            });
        }
        Ok(ByteTensor { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Contents of an `AEDT` file.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor),
    U8(ByteTensor),
}

impl StoredTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.dims(),
            StoredTensor::U8(t) => t.dims(),
        }
    }

    /// Widen to `f32`; `u8` payloads convert value by value.
    pub fn into_f32(self) -> Tensor {
        match self {
            StoredTensor::F32(t) => t,
            StoredTensor::U8(t) => {
                let data = t.data.iter().map(|&b| b as f32).collect();
                Tensor::new(t.dims, data).expect("dims already validated")
            }
        }
    }
}

/// Named tensors in insertion order. Names are unique.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    entries: IndexMap<String, Tensor>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f32) -> Result<()> {
        self.insert(name, Tensor::vector(vec![v])?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingWeight(name.to_owned()))
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        let t = self.require(name)?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "weights",
                format!("`{name}` should be a scalar, has dims {:?}", t.dims()),
            )),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.shift_remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names from `required` that are absent, in the given order.
    pub fn missing<'a>(&self, required: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        required
            .into_iter()
            .filter(|n| !self.entries.contains_key(*n))
            .map(str::to_owned)
            .collect()
    }
}

/// Write `bytes` to `path` via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct Cursor<'a> {
    format: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(format: &'static str, buf: &'a [u8]) -> Self {
        Cursor { format, buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.format,
                    format!("truncated: need {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn to_usize(&self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::format(self.format, format!("{what} {v} too large")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4).map_err(|_| Error::format(self.format, "missing magic"))?;
        if got != magic {
            return Err(Error::format(
                self.format,
                format!("bad magic {:?}", String::from_utf8_lossy(got)),
            ));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                self.format,
                format!("unsupported version {version}"),
            ));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<(Vec<usize>, usize)> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(self.format, format!("rank {rank} out of range")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u64()?;
            dims.push(self.to_usize(d, "dim")?);
        }
        let volume =
            checked_volume(&dims).map_err(|e| Error::format(self.format, e.to_string()))?;
        Ok((dims, volume))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.format, "payload size overflows"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.format,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &StoredTensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    match t {
        StoredTensor::F32(t) => {
            out.push(DTYPE_F32);
            put_dims(&mut out, t.dims());
            put_f32s(&mut out, t.data());
        }
        StoredTensor::U8(t) => {
            out.push(DTYPE_U8);
            put_dims(&mut out, t.dims());
            out.extend_from_slice(t.data());
        }
    }
    out
}

pub fn decode_tensor(buf: &[u8]) -> Result<StoredTensor> {
    let mut cur = Cursor::new("AEDT", buf);
    cur.header(TENSOR_MAGIC)?;
    let dtype = cur.u8()?;
    let (dims, volume) = cur.dims()?;
    let t = match dtype {
        DTYPE_F32 => StoredTensor::F32(Tensor::new(dims, cur.f32s(volume)?)?),
        DTYPE_U8 => StoredTensor::U8(ByteTensor::new(dims, cur.take(volume)?.to_vec())?),
        other => return Err(Error::format("AEDT", format!("unknown dtype {other}"))),
    };
    cur.finish()?;
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(&StoredTensor::F32(t.clone())))
}

pub fn write_byte_tensor(path: impl AsRef<Path>, t: &ByteTensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(&StoredTensor::U8(t.clone())))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_weights(w: &WeightContainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(w.len())
        .map_err(|_| Error::InvalidParam("too many weight entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in w.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidParam(format!("weight name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_dims(&mut out, t.dims());
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_weights(buf: &[u8]) -> Result<WeightContainer> {
    let mut cur = Cursor::new("AEDW", buf);
    cur.header(WEIGHTS_MAGIC)?;
    let count = cur.u32()?;
    let mut w = WeightContainer::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::format("AEDW", "entry name is not UTF-8"))?
            .to_owned();
        let (dims, volume) = cur.dims()?;
        let t = Tensor::new(dims, cur.f32s(volume)?)?;
        w.insert(name, t)?;
    }
    cur.finish()?;
    Ok(w)
}

pub fn write_weights(path: impl AsRef<Path>, w: &WeightContainer) -> Result<()> {
    write_atomic(path.as_ref(), &encode_weights(w)?)
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    decode_weights(&fs::read(path)?)
}

/// Bytes per packed code row.
pub fn packed_row_bytes(m: usize, c_bits: u32) -> usize {
    (m * c_bits as usize).div_ceil(8)
}

fn pack_row(codes: &[u16], c_bits: u32, out: &mut [u8]) {
    let mut bit = 0usize;
    for &code in codes {
        for b in 0..c_bits {
            if (code >> b) & 1 == 1 {
                out[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
}

fn unpack_row(bytes: &[u8], m: usize, c_bits: u32, out: &mut Vec<u16>) {
    let mut bit = 0usize;
    for _ in 0..m {
        let mut code = 0u16;
        for b in 0..c_bits {
            if (bytes[bit / 8] >> (bit % 8)) & 1 == 1 {
                code |= 1 << b;
            }
            bit += 1;
        }
        out.push(code);
    }
}

pub fn encode_index(cb: &PqCodebook, codes: &PqCodes) -> Result<Vec<u8>> {
    if codes.m() != cb.m() || codes.c_bits() != cb.config().c_bits {
        return Err(Error::InvalidParam(format!(
            "codes (m={}, c={}) do not match codebook (m={}, c={})",
            codes.m(),
            codes.c_bits(),
            cb.m(),
            cb.config().c_bits
        )));
    }
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidParam(format!("{what} {v} exceeds u32")))
    };
    let c_bits = cb.config().c_bits;
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&narrow(cb.dim(), "dim")?.to_le_bytes());
    out.extend_from_slice(&narrow(cb.m(), "m")?.to_le_bytes());
    out.push(c_bits as u8);
    out.extend_from_slice(&(codes.len() as u64).to_le_bytes());
    for j in 0..cb.m() {
        put_f32s(&mut out, cb.table(j));
    }
    let row_bytes = packed_row_bytes(cb.m(), c_bits);
    let start = out.len();
    out.resize(start + row_bytes * codes.len(), 0);
    for (i, dst) in out[start..].chunks_exact_mut(row_bytes).enumerate() {
        pack_row(&codes.row(i), c_bits, dst);
    }
    Ok(out)
}

pub fn decode_index(buf: &[u8]) -> Result<(PqCodebook, PqCodes)> {
    let mut cur = Cursor::new("AEDI", buf);
    cur.header(INDEX_MAGIC)?;
    let dim = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let c_bits = cur.u8()? as u32;
    let n64 = cur.u64()?;
    let n = cur.to_usize(n64, "row count")?;
    if m == 0 || dim == 0 || !dim.is_multiple_of(m) {
        return Err(Error::format("AEDI", format!("dim {dim} and m {m} are inconsistent")));
    }
    if !(1..=MAX_CODE_BITS).contains(&c_bits) {
        return Err(Error::format("AEDI", format!("c_bits {c_bits} out of range")));
    }
    let table_len = (1usize << c_bits) * (dim / m);
    let mut tables = Vec::with_capacity(m);
    for _ in 0..m {
        tables.push(cur.f32s(table_len)?);
    }
    let row_bytes = packed_row_bytes(m, c_bits);
    let payload = n
        .checked_mul(row_bytes)
        .ok_or_else(|| Error::format("AEDI", "code payload size overflows"))?;
    let packed = cur.take(payload)?;
    cur.finish()?;

    let mut flat = Vec::with_capacity(n * m);
    for row in packed.chunks_exact(row_bytes.max(1)).take(n) {
        unpack_row(row, m, c_bits, &mut flat);
    }
    let config = PqConfig::new(m, c_bits);
    let cb = PqCodebook::from_tables(config, dim, tables)
        .map_err(|e| Error::format("AEDI", e.to_string()))?;
    let codes = PqCodes::from_codes(n, m, c_bits, &flat)
        .map_err(|e| Error::format("AEDI", e.to_string()))?;
    Ok((cb, codes))
}

pub fn write_index(path: impl AsRef<Path>, cb: &PqCodebook, codes: &PqCodes) -> Result<()> {
    write_atomic(path.as_ref(), &encode_index(cb, codes)?)
}

pub fn read_index(path: impl AsRef<Path>) -> Result<(PqCodebook, PqCodes)> {
    decode_index(&fs::read(path)?)
}

/// One `index,score` line per example, no header.
pub fn encode_scores(scores: &[f32]) -> String {
    let mut out = String::with_capacity(scores.len() * 16);
    for (i, s) in scores.iter().enumerate() {
        out.push_str(&format!("{i},{s}\n"));
    }
    out
}

/// Parse `index,score` lines. Indices must run `0, 1, 2, ...`; an
/// `index,score` header line and blank lines are skipped.
pub fn decode_scores(text: &str) -> Result<Vec<f64>> {
    let bad = |line: usize, why: String| Error::format("scores CSV", format!("line {line}: {why}"));
    let mut scores = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (ln == 0 && line.eq_ignore_ascii_case("index,score")) {
            continue;
        }
        let (idx, score) = line
            .split_once(',')
            .ok_or_else(|| bad(ln + 1, "expected `index,score`".into()))?;
        let idx: usize = idx.trim().parse().map_err(|e| bad(ln + 1, format!("index: {e}")))?;
        if idx != scores.len() {
            return Err(bad(ln + 1, format!("index {idx} out of order, expected {}", scores.len())));
        }
        let score: f64 = score.trim().parse().map_err(|e| bad(ln + 1, format!("score: {e}")))?;
        if score.is_nan() {
            return Err(bad(ln + 1, "score is NaN".into()));
        }
        scores.push(score);
    }
    Ok(scores)
}

pub fn write_scores(path: impl AsRef<Path>, scores: &[f32]) -> Result<()> {
    write_atomic(path.as_ref(), encode_scores(scores).as_bytes())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    decode_scores(&fs::read_to_string(path)?)
}
