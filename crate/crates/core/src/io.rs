//! Bit-exact serialization: a tensor container, a named-weights archive, and
//! the JSON model config.
//!
//! Both binary formats are little-endian with explicit magic and version
//! bytes; round trips are identities at byte level. There is no compression
//! or checksumming.
//!
//! Tensor record layout:
//! `"STTC" | version u32 | dtype u8 (0=f32, 1=f64) | ndim u8 | ndim x u64 dims | payload`.
//! Archive layout:
//! `"STTA" | version u32 | entry count u32 | entries`, each entry being
//! `name_len u16 | UTF-8 name | tensor record`.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, FormatErrorKind, Result};
use crate::num::{Dtype, Element};
use crate::params::ParamBundle;
use crate::pipeline::{MambaMiaConfig, Rational};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"STTC";
pub const ARCHIVE_MAGIC: [u8; 4] = *b"STTA";
pub const FORMAT_VERSION: u32 = 1;
pub const MAX_DIMS: usize = 8;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, kind: FormatErrorKind) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format { kind, offset: self.pos });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, FormatErrorKind::Truncated)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2, FormatErrorKind::Truncated)?;
        Ok(u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4, FormatErrorKind::Truncated)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8, FormatErrorKind::Truncated)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parsed tensor-record header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorFileHeader {
    pub dtype: Dtype,
    pub dims: Vec<u64>,
}

impl TensorFileHeader {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn payload_len(&self) -> usize {
        self.element_count() * self.dtype.size()
    }
}

/// A tensor of either supported width, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

fn write_tensor_record<T: Element>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &dim in t.shape() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_header(r: &mut Reader, expect_magic: [u8; 4]) -> Result<TensorFileHeader> {
    let magic_at = r.pos;
    let magic = r.take(4, FormatErrorKind::Truncated)?;
    if magic != expect_magic {
        return Err(Error::Format { kind: FormatErrorKind::BadMagic, offset: magic_at });
    }
    let version_at = r.pos;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            kind: FormatErrorKind::UnsupportedVersion,
            offset: version_at,
        });
    }
    let dtype_at = r.pos;
    let dtype = Dtype::from_code(r.u8()?)
        .ok_or(Error::Format { kind: FormatErrorKind::UnknownDtype, offset: dtype_at })?;
    let ndim_at = r.pos;
    let ndim = r.u8()? as usize;
    if ndim > MAX_DIMS {
        return Err(Error::Format { kind: FormatErrorKind::TooManyDims, offset: ndim_at });
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u64()?);
    }
    Ok(TensorFileHeader { dtype, dims })
}

fn read_tensor_record(r: &mut Reader) -> Result<AnyTensor> {
    let header = read_header(r, TENSOR_MAGIC)?;
    let payload = r.take(header.payload_len(), FormatErrorKind::Truncated)?;
    let shape: Vec<usize> = header.dims.iter().map(|&d| d as usize).collect();
    Ok(match header.dtype {
        Dtype::F32 => {
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            AnyTensor::F32(Tensor::new(shape, data).expect("payload sized by header"))
        }
        Dtype::F64 => {
            let data = payload.chunks_exact(8).map(f64::read_le).collect();
            AnyTensor::F64(Tensor::new(shape, data).expect("payload sized by header"))
        }
    })
}

pub fn tensor_write<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.len() * T::DTYPE.size());
    write_tensor_record(&mut out, t);
    fs::write(path, out)?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    let t = read_tensor_record(&mut r)?;
    if !r.done() {
        return Err(Error::Format { kind: FormatErrorKind::Truncated, offset: r.pos });
    }
    Ok(t)
}

/// Reads just the header, without touching the payload. Verifies the file is
/// at least as long as the header claims it should be.
pub fn tensor_read_header(path: impl AsRef<Path>) -> Result<TensorFileHeader> {
    use std::io::Read;
    let mut f = fs::File::open(path)?;
    // magic + version + dtype + ndim + at most MAX_DIMS dims
    let mut buf = [0u8; 10 + 8 * MAX_DIMS];
    let mut filled = 0usize;
    loop {
        let n = f.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
        if filled == buf.len() {
            break;
        }
    }
    let mut r = Reader::new(&buf[..filled]);
    read_header(&mut r, TENSOR_MAGIC)
}

/// Writes named tensors in the given order. Names must be unique.
pub fn weights_archive_write<T: Element>(
    path: impl AsRef<Path>,
    entries: &[(String, &Tensor<T>)],
) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::DuplicateName(name.clone()));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Format { kind: FormatErrorKind::BadName, offset: 0 });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&ARCHIVE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor_record(&mut out, tensor);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads all entries in file order.
pub fn weights_archive_read(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    let magic_at = r.pos;
    if r.take(4, FormatErrorKind::Truncated)? != ARCHIVE_MAGIC {
        return Err(Error::Format { kind: FormatErrorKind::BadMagic, offset: magic_at });
    }
    let version_at = r.pos;
    if r.u32()? != FORMAT_VERSION {
        return Err(Error::Format {
            kind: FormatErrorKind::UnsupportedVersion,
            offset: version_at,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_at = r.pos;
        let name_bytes = r.take(name_len, FormatErrorKind::Truncated)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format { kind: FormatErrorKind::BadName, offset: name_at })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let tensor = read_tensor_record(&mut r)?;
        entries.push((name, tensor));
    }
    if !r.done() {
        return Err(Error::Format { kind: FormatErrorKind::Truncated, offset: r.pos });
    }
    Ok(entries)
}

/// Saves a parameter bundle under its canonical names.
pub fn save_bundle<T: Element, B: ParamBundle<T>>(
    path: impl AsRef<Path>,
    bundle: &B,
) -> Result<()> {
    weights_archive_write(path, &bundle.params())
}

/// Loads an archive into an existing bundle. The archive's name set must
/// match the bundle's exactly; shapes and dtype must agree.
pub fn load_bundle<T: Element, B: ParamBundle<T>>(
    path: impl AsRef<Path>,
    bundle: &mut B,
) -> Result<()> {
    let entries = weights_archive_read(path)?;
    let mut by_name: std::collections::BTreeMap<String, AnyTensor> = entries.into_iter().collect();
    let mut missing = Vec::new();
    for (name, slot) in bundle.params_mut() {
        match by_name.remove(&name) {
            None => missing.push(name),
            Some(any) => {
                let loaded: Tensor<T> = match (T::DTYPE, any) {
                    (Dtype::F32, AnyTensor::F32(t)) => Tensor::from_f64_tensor(&t.to_f64()),
                    (Dtype::F64, AnyTensor::F64(t)) => Tensor::from_f64_tensor(&t.to_f64()),
                    (want, got) => {
                        return Err(Error::Config(format!(
                            "entry {name:?} has dtype {}, model expects {}",
                            got.dtype().name(),
                            want.name()
                        )))
                    }
                };
                if loaded.shape() != slot.shape() {
                    return Err(Error::Config(format!(
                        "entry {name:?} has shape {:?}, model expects {:?}",
                        loaded.shape(),
                        slot.shape()
                    )));
                }
                *slot = loaded;
            }
        }
    }
    let extra: Vec<String> = by_name.into_keys().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::NameMismatch { missing, extra });
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    d: Option<usize>,
    d_state: Option<usize>,
    expand: Option<usize>,
    w_conv: Option<usize>,
    layers: Option<usize>,
    k: Option<usize>,
    s: Option<String>,
    n_patches: Option<usize>,
    m_max: Option<usize>,
}

/// Strict JSON config: unknown keys are rejected, `d` is required, every
/// other field falls back to its documented default, and `s` is parsed as an
/// exact rational string.
pub fn parse_config(text: &str) -> Result<MambaMiaConfig> {
    let file: ConfigFile =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let d = file
        .d
        .ok_or_else(|| Error::Config("missing required field \"d\"".to_string()))?;
    let mut cfg = MambaMiaConfig::with_defaults(d);
    if let Some(v) = file.d_state {
        cfg.d_state = v;
    }
    if let Some(v) = file.expand {
        cfg.expand = v;
    }
    if let Some(v) = file.w_conv {
        cfg.w_conv = v;
    }
    if let Some(v) = file.layers {
        cfg.layers = v;
    }
    if let Some(v) = file.k {
        cfg.k = v;
    }
    if let Some(v) = file.s {
        cfg.s = Rational::parse(&v)?;
    }
    if let Some(v) = file.n_patches {
        cfg.n_patches = v;
    }
    if let Some(v) = file.m_max {
        cfg.m_max = v;
    }
    cfg.validate()?;
    Ok(cfg)
}
