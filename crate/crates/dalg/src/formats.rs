//! Little-endian binary files: parameter checkpoints (`DALG`) and gallery
//! indexes (`DIDX`).
//!
//! ```text
//! checkpoint: "DALG" u32:version u32:count
//!             count x { u16:len name  u8:rank  rank x u64:extent  f64 values }
//! index:      "DIDX" u32:version u32:C u64:N
//!             N x { u16:len id  C x f32 }
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use dalg_core::retrieval::{GalleryIndex, NORM_TOLERANCE};
use dalg_core::{ParamStore, Tensor};

use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DALG";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_MAGIC: [u8; 4] = *b"DIDX";
pub const INDEX_VERSION: u32 = 1;

type FResult<T> = std::result::Result<T, FormatError>;

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &'static str) -> FResult<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| eof(e, what))?;
        Ok(buf)
    }

    fn u8(&mut self, what: &'static str) -> FResult<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> FResult<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &'static str) -> FResult<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &'static str) -> FResult<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn string(&mut self, what: &'static str) -> FResult<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|e| eof(e, what))?;
        String::from_utf8(buf).map_err(|_| FormatError::InvalidUtf8(what))
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> FResult<()> {
        let found = self.bytes::<4>("magic")?;
        if found != magic {
            return Err(FormatError::BadMagic { expected: magic, found });
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(FormatError::UnsupportedVersion {
                found: v,
                supported: version,
            });
        }
        Ok(())
    }

    fn finish(mut self) -> FResult<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(FormatError::Invalid("trailing bytes after the last record".into())),
        }
    }
}

fn eof(e: io::Error, what: &'static str) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated(what)
    } else {
        FormatError::Io(e)
    }
}

fn write_name<W: Write>(w: &mut W, s: &str) -> FResult<()> {
    let len = u16::try_from(s.len()).map_err(|_| FormatError::Invalid(format!("name too long: {s}")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(w: &mut W, store: &ParamStore) -> FResult<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(store.len()).map_err(|_| FormatError::Invalid("too many parameters".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (_, p) in store.iter() {
        write_name(w, &p.name)?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| FormatError::Invalid(format!("rank of {}", p.name)))?;
        w.write_all(&[rank])?;
        for &e in shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Named tensors in file order.
pub fn read_checkpoint<R: Read>(r: R) -> FResult<Vec<(String, Tensor)>> {
    let mut r = Reader { inner: r };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u32("parameter count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u8("rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let e = usize::try_from(r.u64("extent")?).map_err(|_| FormatError::Invalid("extent overflow".into()))?;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| FormatError::Invalid(format!("`{name}` is too large")))?;
            shape.push(e);
        }
        let mut data = Vec::with_capacity(numel.min(1 << 20));
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.bytes("parameter values")?));
        }
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(format!("`{name}`: {e}")))?;
        out.push((name, t));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_index<W: Write>(w: &mut W, index: &GalleryIndex) -> FResult<()> {
    w.write_all(&INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    let c = u32::try_from(index.dim()).map_err(|_| FormatError::Invalid("descriptor too wide".into()))?;
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&(index.len() as u64).to_le_bytes())?;
    for (i, id) in index.ids().iter().enumerate() {
        write_name(w, id)?;
        for v in index.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(r: R) -> FResult<GalleryIndex> {
    let mut r = Reader { inner: r };
    r.header(INDEX_MAGIC, INDEX_VERSION)?;
    let c = r.u32("descriptor width")? as usize;
    let n = r.u64("record count")?;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for _ in 0..n {
        let id = r.string("record id")?;
        let start = rows.len();
        for _ in 0..c {
            rows.push(f32::from_le_bytes(r.bytes("descriptor values")?));
        }
        let norm = rows[start..].iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(FormatError::NormViolation { id, norm });
        }
        ids.push(id);
    }
    r.finish()?;
    GalleryIndex::from_rows(ids, c, rows).map_err(|e| FormatError::Invalid(e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(Error::io(path))?))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(&mut w, store).map_err(Error::format(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_checkpoint(open(path)?).map_err(Error::format(path))
}

/// Loads `path` into `store`; names and shapes must match exactly.
pub fn restore_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let values = load_checkpoint(path)?;
    store.load_values(values.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(())
}

pub fn save_index(path: &Path, index: &GalleryIndex) -> Result<()> {
    let mut w = create(path)?;
    write_index(&mut w, index).map_err(Error::format(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn load_index(path: &Path) -> Result<GalleryIndex> {
    read_index(open(path)?).map_err(Error::format(path))
}
