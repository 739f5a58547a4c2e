//! Uncompressed NIfTI-1 reading and writing.
//!
//! Only `dim`, `datatype`, `bitpix`, `vox_offset`, `scl_slope` and
//! `scl_inter` are interpreted. Files store x fastest; grids are returned with
//! dims `(dim[1], dim[2], dim[3])` in row-major order, so `grid[(i, j, k)]` is
//! the file voxel at `i + j*dim[1] + k*dim[1]*dim[2]`.

use std::path::{Path, PathBuf};

use super::volume::Grid3;
use crate::error::{Error, Result};
use crate::fsutil::{read_file, write_atomic};

pub const HEADER_LEN: usize = 348;
/// Data offset used by the writer: header plus the 4-byte extension flag.
pub const SINGLE_FILE_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NiftiDtype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl NiftiDtype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDtype::U8 => 2,
            NiftiDtype::I16 => 4,
            NiftiDtype::I32 => 8,
            NiftiDtype::F32 => 16,
            NiftiDtype::F64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => NiftiDtype::U8,
            4 => NiftiDtype::I16,
            8 => NiftiDtype::I32,
            16 => NiftiDtype::F32,
            64 => NiftiDtype::F64,
            _ => return None,
        })
    }

    pub fn bits(self) -> i16 {
        match self {
            NiftiDtype::U8 => 8,
            NiftiDtype::I16 => 16,
            NiftiDtype::I32 | NiftiDtype::F32 => 32,
            NiftiDtype::F64 => 64,
        }
    }

    fn width(self) -> usize {
        self.bits() as usize / 8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub dtype: NiftiDtype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
    /// `true` for `"ni1"` header/image pairs.
    pub paired: bool,
}

struct Fields<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn raw<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().unwrap();
        if self.big {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.raw(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.raw(at))
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("truncated: {} bytes, need {HEADER_LEN}", bytes.len()),
        ));
    }
    let sizeof = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let big = if i32::from_le_bytes(sizeof) == 348 {
        false
    } else if i32::from_be_bytes(sizeof) == 348 {
        true
    } else {
        return Err(Error::format("sizeof_hdr", "expected 348 in either byte order"));
    };
    let f = Fields { bytes, big };

    let paired = match &bytes[344..348] {
        b"n+1\0" => false,
        b"ni1\0" => true,
        other => {
            return Err(Error::format(
                "magic",
                format!("expected \"n+1\\0\" or \"ni1\\0\", found {other:?}"),
            ))
        }
    };

    let ndim = f.i16(40);
    let dim: Vec<i16> = (1..8).map(|i| f.i16(40 + 2 * i)).collect();
    let ok = match ndim {
        3 => true,
        4 => dim[3] == 1,
        _ => false,
    };
    if !ok {
        return Err(Error::format(
            "dim",
            format!("need a 3D volume, found dim[0] = {ndim} with extents {:?}", &dim[..4]),
        ));
    }
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        if dim[axis] <= 0 {
            return Err(Error::format(
                "dim",
                format!("dim[{}] = {} is not positive", axis + 1, dim[axis]),
            ));
        }
        dims[axis] = dim[axis] as usize;
    }

    let code = f.i16(70);
    let dtype = NiftiDtype::from_code(code).ok_or_else(|| {
        Error::format(
            "datatype",
            format!("unsupported datatype code {code} (supported: 2, 4, 8, 16, 64)"),
        )
    })?;
    let bitpix = f.i16(72);
    if bitpix != dtype.bits() {
        return Err(Error::format(
            "bitpix",
            format!("{bitpix} does not match datatype {code} ({} bits)", dtype.bits()),
        ));
    }

    let vox = f.f32(108);
    if !vox.is_finite() || vox < 0.0 || vox.fract() != 0.0 {
        return Err(Error::format("vox_offset", format!("invalid offset {vox}")));
    }
    let vox_offset = vox as usize;
    if !paired && vox_offset < HEADER_LEN {
        return Err(Error::format(
            "vox_offset",
            format!("{vox_offset} lies inside the header"),
        ));
    }

    Ok(NiftiHeader {
        dims,
        dtype,
        vox_offset,
        scl_slope: f.f32(112),
        scl_inter: f.f32(116),
        big_endian: big,
        paired,
    })
}

fn decode(header: &NiftiHeader, payload: &[u8]) -> Result<Grid3> {
    let [d1, d2, d3] = header.dims;
    let n = d1 * d2 * d3;
    let w = header.dtype.width();
    if payload.len() < n * w {
        return Err(Error::format(
            "payload",
            format!("truncated: need {} bytes, found {}", n * w, payload.len()),
        ));
    }
    let big = header.big_endian;
    let value = |idx: usize| -> f64 {
        let b = &payload[idx * w..idx * w + w];
        macro_rules! num {
            ($t:ty) => {{
                let arr = b.try_into().unwrap();
                f64::from(if big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) })
            }};
        }
        match header.dtype {
            NiftiDtype::U8 => f64::from(b[0]),
            NiftiDtype::I16 => num!(i16),
            NiftiDtype::I32 => num!(i32),
            NiftiDtype::F32 => num!(f32),
            NiftiDtype::F64 => num!(f64),
        }
    };
    let slope = f64::from(header.scl_slope);
    let inter = f64::from(header.scl_inter);
    let scale = slope != 0.0 && slope.is_finite();
    let mut data = vec![0.0; n];
    for i in 0..d1 {
        for j in 0..d2 {
            for k in 0..d3 {
                let v = value(i + j * d1 + k * d1 * d2);
                data[(i * d2 + j) * d3 + k] = if scale { v * slope + inter } else { v };
            }
        }
    }
    Grid3::new(header.dims, data)
}

/// Decodes a single-file (`n+1`) image held in memory.
pub fn nifti_from_bytes(bytes: &[u8]) -> Result<Grid3> {
    let header = parse_header(bytes)?;
    if header.paired {
        return Err(Error::format(
            "magic",
            "header/image pair needs the companion .img file; load it from disk",
        ));
    }
    let payload = bytes.get(header.vox_offset..).unwrap_or(&[]);
    decode(&header, payload)
}

/// Loads a `.nii` file, or a `.hdr` whose image lives in the sibling `.img`.
pub fn load_nifti(path: &Path) -> Result<Grid3> {
    if path.to_string_lossy().ends_with(".gz") {
        return Err(Error::format(
            "file",
            "compressed NIfTI is not supported; decompress it first",
        )
        .at_path(path));
    }
    let bytes = read_file(path)?;
    let header = parse_header(&bytes).map_err(|e| e.at_path(path))?;
    if header.paired {
        let img: PathBuf = path.with_extension("img");
        let data = read_file(&img)?;
        let payload = data.get(header.vox_offset..).unwrap_or(&[]);
        decode(&header, payload).map_err(|e| e.at_path(&img))
    } else {
        let payload = bytes.get(header.vox_offset..).unwrap_or(&[]);
        decode(&header, payload).map_err(|e| e.at_path(path))
    }
}

/// Encodes `stored` as a little-endian single-file NIfTI-1 image.
///
/// Values are written as-is; a reader applying `scl_slope`/`scl_inter` sees
/// `stored * slope + inter`. Integer dtypes require integral, in-range values.
pub fn nifti_to_bytes(
    stored: &Grid3,
    dtype: NiftiDtype,
    scl_slope: f32,
    scl_inter: f32,
) -> Result<Vec<u8>> {
    let [d1, d2, d3] = stored.dims();
    for (axis, d) in [d1, d2, d3].into_iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::Shape(format!("axis {axis} extent {d} exceeds NIfTI-1 limit")));
        }
    }
    let mut h = vec![0u8; SINGLE_FILE_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dim: [i16; 8] = [3, d1 as i16, d2 as i16, d3 as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&dtype.code().to_le_bytes());
    h[72..74].copy_from_slice(&dtype.bits().to_le_bytes());
    for i in 0..4 {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(SINGLE_FILE_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&scl_slope.to_le_bytes());
    h[116..120].copy_from_slice(&scl_inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");

    let n = d1 * d2 * d3;
    let mut out = h;
    out.reserve(n * dtype.width());
    let int_check = |v: f64, lo: f64, hi: f64, idx: usize| -> Result<()> {
        if v.fract() != 0.0 || v < lo || v > hi {
            return Err(Error::Data(format!(
                "value {v} at file index {idx} does not fit datatype {}",
                dtype.code()
            )));
        }
        Ok(())
    };
    for k in 0..d3 {
        for j in 0..d2 {
            for i in 0..d1 {
                let v = stored.data()[(i * d2 + j) * d3 + k];
                let idx = i + j * d1 + k * d1 * d2;
                match dtype {
                    NiftiDtype::U8 => {
                        int_check(v, 0.0, 255.0, idx)?;
                        out.push(v as u8);
                    }
                    NiftiDtype::I16 => {
                        int_check(v, i16::MIN.into(), i16::MAX.into(), idx)?;
                        out.extend_from_slice(&(v as i16).to_le_bytes());
                    }
                    NiftiDtype::I32 => {
                        int_check(v, i32::MIN.into(), i32::MAX.into(), idx)?;
                        out.extend_from_slice(&(v as i32).to_le_bytes());
                    }
                    NiftiDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    NiftiDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    Ok(out)
}

pub fn save_nifti(stored: &Grid3, dtype: NiftiDtype, path: &Path) -> Result<()> {
    write_atomic(path, &nifti_to_bytes(stored, dtype, 0.0, 0.0)?)
}
