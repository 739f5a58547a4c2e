//! Minimal uncompressed volume format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LVOL"
//! 4       4     version (u32, = 1)
//! 8       1     dtype (1 = f64, 2 = u8)
//! 9       4     number of axes (u32, = 3)
//! 13      24    dims, 3 × u64
//! 37      ...   row-major payload
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use super::volume::Grid3;
use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic, Reader};

pub const MAGIC: &[u8; 4] = b"LVOL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 37;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LvolDtype {
    F64,
    U8,
}

impl LvolDtype {
    fn code(self) -> u8 {
        match self {
            LvolDtype::F64 => 1,
            LvolDtype::U8 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            LvolDtype::F64 => 8,
            LvolDtype::U8 => 1,
        }
    }
}

/// Encodes `grid`. With [`LvolDtype::U8`] every value must be an integer in
/// `0..=255`.
pub fn lvol_to_bytes(grid: &Grid3, dtype: LvolDtype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in grid.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        LvolDtype::F64 => {
            for v in grid.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        LvolDtype::U8 => {
            for (i, &v) in grid.data().iter().enumerate() {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::Data(format!(
                        "value {v} at flat index {i} is not representable as u8"
                    )));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn lvol_from_bytes(bytes: &[u8]) -> Result<Grid3> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("magic", format!("expected \"LVOL\", found {magic:?}")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let dtype = match r.u8("dtype")? {
        1 => LvolDtype::F64,
        2 => LvolDtype::U8,
        other => return Err(Error::format("dtype", format!("unknown dtype code {other}"))),
    };
    let ndim = r.u32("ndim")?;
    if ndim != 3 {
        return Err(Error::format("ndim", format!("expected 3 axes, found {ndim}")));
    }
    let mut dims = [0usize; 3];
    for (axis, d) in dims.iter_mut().enumerate() {
        let v = r.u64("dims")?;
        if v == 0 {
            return Err(Error::format("dims", format!("axis {axis} has zero extent")));
        }
        *d = usize::try_from(v).map_err(|_| Error::format("dims", "extent too large"))?;
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("dims", "volume too large"))?;
    let need = n
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::format("dims", "volume too large"))?;
    if r.remaining() != need {
        return Err(Error::format(
            "payload",
            format!("expected {need} bytes for dims {dims:?}, found {}", r.remaining()),
        ));
    }
    let data = match dtype {
        LvolDtype::F64 => r.f64s(n, "payload")?,
        LvolDtype::U8 => r.take(n, "payload")?.iter().map(|&b| f64::from(b)).collect(),
    };
    Grid3::new(dims, data)
}

pub fn save_lvol(grid: &Grid3, dtype: LvolDtype, path: &Path) -> Result<()> {
    write_atomic(path, &lvol_to_bytes(grid, dtype)?)
}

pub fn load_lvol(path: &Path) -> Result<Grid3> {
    lvol_from_bytes(&read_file(path)?).map_err(|e| e.at_path(path))
}
