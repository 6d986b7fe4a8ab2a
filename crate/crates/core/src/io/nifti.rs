//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Only uncompressed files without extensions are supported. Reading accepts
//! either byte order and datatypes uint8/int16/int32/float32/float64; writing
//! always produces little-endian float32 or float64 with a 352-byte offset.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume4D;

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Output sample type for [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NiftiDtype {
    /// Narrowed with `as f32` (round to nearest).
    Float32,
    #[default]
    Float64,
}

impl NiftiDtype {
    fn code(self) -> i16 {
        match self {
            NiftiDtype::Float32 => DT_FLOAT32,
            NiftiDtype::Float64 => DT_FLOAT64,
        }
    }

    fn bytes(self) -> usize {
        match self {
            NiftiDtype::Float32 => 4,
            NiftiDtype::Float64 => 8,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.bytes(off))
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume4D> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes)
}

/// Decodes an in-memory `.nii` file.
pub fn parse_nifti(bytes: &[u8]) -> Result<Volume4D> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("{} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::Format(format!("sizeof_hdr is {le}, expected 348"))),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[344..348])));
    }
    let r = Reader { buf: bytes, big_endian };

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 4];
    for i in 1..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(Error::Format(format!("dim[{i}] = {d}")));
        }
        if i <= 4 {
            dims[i - 1] = d as usize;
        } else if d != 1 {
            return Err(Error::Unsupported(format!("dimension {i} of size {d}")));
        }
    }

    let datatype = r.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 => 4,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Unsupported(format!("NIfTI datatype {other}"))),
    };

    let mut voxel_size = [1.0; 3];
    for (i, v) in voxel_size.iter_mut().enumerate() {
        let p = r.f32(80 + 4 * i).abs() as f64;
        if p.is_finite() && p > 0.0 {
            *v = p;
        }
    }

    let offset = r.f32(108);
    if !(offset >= HEADER_SIZE as f32) || offset.fract() != 0.0 {
        return Err(Error::Format(format!("vox_offset {offset}")));
    }
    let offset = offset as usize;
    let n: usize = dims.iter().product();
    let payload = bytes.len().saturating_sub(offset);
    if bytes.len() < offset || payload != n * width {
        return Err(Error::Format(format!(
            "dims {dims:?} of {width}-byte samples need {} payload bytes, file has {payload}",
            n * width
        )));
    }

    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    let scale = slope != 0.0 && slope.is_finite() && inter.is_finite();
    let data_reader = Reader { buf: &bytes[offset..], big_endian };
    let data: Vec<f64> = (0..n)
        .map(|i| {
            let o = i * width;
            let raw = match datatype {
                DT_UINT8 => data_reader.buf[o] as f64,
                DT_INT16 => data_reader.i16(o) as f64,
                DT_INT32 => data_reader.i32(o) as f64,
                DT_FLOAT32 => data_reader.f32(o) as f64,
                _ => data_reader.f64(o),
            };
            if scale {
                raw * slope + inter
            } else {
                raw
            }
        })
        .collect();

    Ok(Volume4D::new(dims, data)?.with_voxel_size(voxel_size))
}

pub fn write_nifti(vol: &Volume4D, path: impl AsRef<Path>, dtype: NiftiDtype) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_nifti(vol, dtype)?).map_err(|e| Error::io(path, e))
}

/// Encodes a volume as a little-endian `.nii` byte buffer.
pub fn encode_nifti(vol: &Volume4D, dtype: NiftiDtype) -> Result<Vec<u8>> {
    let dims = vol.dims();
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Unsupported(format!("dims {dims:?} exceed the NIfTI-1 limit")));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let ndim: i16 = if dims[3] > 1 { 4 } else { 3 };
    put_i16(&mut h, 40, ndim);
    for i in 0..8 {
        let d = if i < 4 { dims[i] as i16 } else { 1 };
        put_i16(&mut h, 42 + 2 * i, d);
    }
    put_i16(&mut h, 70, dtype.code());
    put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
    let vs = vol.voxel_size();
    put_f32(&mut h, 76, 1.0);
    for i in 0..3 {
        put_f32(&mut h, 80 + 4 * i, vs[i] as f32);
    }
    put_f32(&mut h, 92, 1.0);
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    // xyzt_units: mm, seconds
    h[123] = 2 | 8;
    let descrip = b"sdndti";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform = scaling by voxel size
    put_i16(&mut h, 254, 1);
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        put_f32(&mut h, off + 4 * row, vs[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.reserve(vol.data().len() * dtype.bytes());
    match dtype {
        NiftiDtype::Float32 => {
            for &v in vol.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        NiftiDtype::Float64 => {
            for &v in vol.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}
