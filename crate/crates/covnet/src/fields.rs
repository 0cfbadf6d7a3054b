//! Binary field files: magic `CVNF`, u32 version, u32 d, d x u32 sizes,
//! u64 N, then N*D little-endian f64 values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use covnet_core::{FieldMatrix, Grid};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVNF";
pub const VERSION: u32 = 1;

pub fn encode_fields(f: &FieldMatrix) -> Vec<u8> {
    let grid = f.grid();
    let mut out = Vec::with_capacity(24 + 4 * grid.dim() + 8 * f.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    for &k in grid.sizes() {
        out.extend_from_slice(&(k as u32).to_le_bytes());
    }
    out.extend_from_slice(&(f.n() as u64).to_le_bytes());
    for v in f.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_fields(path: &Path, f: &FieldMatrix) -> Result<()> {
    let bytes = encode_fields(f);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_fields(path: &Path, bytes: &[u8]) -> Result<FieldMatrix> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"CVNF\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let d = r.u32("dimension")? as usize;
    if d == 0 {
        return Err(Error::format(path, 8, "dimension must be at least 1"));
    }
    let mut sizes = Vec::with_capacity(d.min(64));
    for axis in 0..d {
        let at = r.pos as u64;
        let k = r.u32("grid sizes")? as usize;
        if k == 0 {
            return Err(Error::format(
                path,
                at,
                format!("grid size of axis {axis} is zero"),
            ));
        }
        sizes.push(k);
    }
    let grid = Grid::new(d, &sizes).map_err(|e| Error::format(path, 12, e.to_string()))?;
    let n = r.u64("sample count")? as usize;
    let payload_at = r.pos;
    let count = n
        .checked_mul(grid.len())
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| Error::format(path, payload_at as u64 - 8, "sample count overflows"))?;
    let data = r.take(count * 8, "values")?;
    let mut values = Vec::with_capacity(count);
    for (i, chunk) in data.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                (payload_at + 8 * i) as u64,
                "non-finite value",
            ));
        }
        values.push(v);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            "trailing bytes after payload",
        ));
    }
    FieldMatrix::new(grid, n, values)
        .map_err(|e| Error::format(path, payload_at as u64, e.to_string()))
}

pub fn read_fields(path: &Path) -> Result<FieldMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fields(path, &bytes)
}
