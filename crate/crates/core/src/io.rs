//! Binary file formats.
//!
//! All multi-byte values are little-endian and volumes are x-fastest.
//!
//! * V3D: `"V3D1"`, dtype `u8` (0 = f32, 1 = u8, 2 = i32), dims `3 x u32`,
//!   spacing `3 x f32`, then the samples.
//! * D3F: `"D3F1"`, dims `3 x u32`, spacing `3 x f32`, then the dx, dy and dz
//!   blocks as f32.
//! * NET1: `"NET1"`, K and H as u32, then f32 arrays `w1` (H x 30 row-major),
//!   `b1` (H), `w2` (K x H row-major), `b2` (K).
//!
//! Values are held as f64 in memory and stored as f32, so a round trip is
//! exact for data that is representable in f32.
//!
//! NIfTI-1 single-file images (`n+1`) can be read with datatypes uint8,
//! int16 and float32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmenter::{VoxelNet, FEATURES};
use crate::volume::{Dims, DisplacementField, LabelVolume, Spacing, Volume};

const V3D_MAGIC: &[u8; 4] = b"V3D1";
const D3F_MAGIC: &[u8; 4] = b"D3F1";
const NET_MAGIC: &[u8; 4] = b"NET1";

/// Sample type of a V3D file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum V3dType {
    F32 = 0,
    U8 = 1,
    I32 = 2,
}

impl V3dType {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Self::F32),
            1 => Ok(Self::U8),
            2 => Ok(Self::I32),
            other => Err(Error::UnsupportedDatatype(other as i32)),
        }
    }

    fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::F32 | Self::I32 => 4,
        }
    }
}

/// Decoded V3D contents; samples widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct V3d {
    pub dtype: V3dType,
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f64>,
}

/// Byte cursor that reports truncation.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Truncated { needed: end, available: self.buf.len() });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(m).into_owned(),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_block(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::InvalidHeader("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    fn dims(&mut self) -> Result<Dims> {
        let d = Dims::new(self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        d.validate().map_err(|_| Error::InvalidHeader(format!("invalid dimensions {d}")))?;
        Ok(d)
    }

    fn spacing(&mut self) -> Result<Spacing> {
        Ok([self.f32()? as f64, self.f32()? as f64, self.f32()? as f64])
    }
}

fn put_header(out: &mut Vec<u8>, dims: Dims, spacing: Spacing) {
    for n in dims.as_array() {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&(s as f32).to_le_bytes());
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(4 * data.len());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_v3d(v: &V3d) -> Result<Vec<u8>> {
    if v.data.len() != v.dims.len() {
        return Err(Error::LengthMismatch(v.dims.len(), v.data.len()));
    }
    let mut out = Vec::with_capacity(32 + v.dims.len() * v.dtype.size());
    out.extend_from_slice(V3D_MAGIC);
    out.push(v.dtype as u8);
    put_header(&mut out, v.dims, v.spacing);
    match v.dtype {
        V3dType::F32 => put_f32s(&mut out, &v.data),
        V3dType::U8 => {
            for &x in &v.data {
                if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                    return Err(Error::invalid(format!("value {x} does not fit uint8")));
                }
                out.push(x as u8);
            }
        }
        V3dType::I32 => {
            for &x in &v.data {
                if x.fract() != 0.0 || x < i32::MIN as f64 || x > i32::MAX as f64 {
                    return Err(Error::invalid(format!("value {x} does not fit int32")));
                }
                out.extend_from_slice(&(x as i32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_v3d(buf: &[u8]) -> Result<V3d> {
    let mut r = Reader::new(buf);
    r.magic(V3D_MAGIC)?;
    let dtype = V3dType::from_code(r.u8()?)?;
    let dims = r.dims()?;
    let spacing = r.spacing()?;
    let n = dims.len();
    let data = match dtype {
        V3dType::F32 => r.f32_block(n)?,
        V3dType::U8 => r.take(n)?.iter().map(|&b| b as f64).collect(),
        V3dType::I32 => r.take(4 * n)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
    };
    Ok(V3d { dtype, dims, spacing, data })
}

pub fn read_v3d(path: impl AsRef<Path>) -> Result<V3d> {
    decode_v3d(&fs::read(path)?)
}

pub fn write_v3d(path: impl AsRef<Path>, v: &V3d) -> Result<()> {
    fs::write(path, encode_v3d(v)?)?;
    Ok(())
}

/// Scalar volume stored as f32.
pub fn write_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    write_v3d(path, &V3d { dtype: V3dType::F32, dims: vol.dims(), spacing: vol.spacing(), data: vol.data().to_vec() })
}

/// Scalar volume of any V3D sample type.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let v = read_v3d(path)?;
    Volume::new(v.dims, v.spacing, v.data)
}

/// Labels stored as uint8 when they fit, else int32.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelVolume) -> Result<()> {
    let dtype = if labels.num_classes() <= 256 { V3dType::U8 } else { V3dType::I32 };
    let data = labels.data().iter().map(|&l| l as f64).collect();
    write_v3d(path, &V3d { dtype, dims: labels.dims(), spacing: labels.spacing(), data })
}

/// Read labels; `num_classes` defaults to one more than the largest label
/// (at least 2).
pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelVolume> {
    let v = read_v3d(path)?;
    let mut labels = Vec::with_capacity(v.data.len());
    for x in &v.data {
        if *x < 0.0 || x.fract() != 0.0 || *x > u16::MAX as f64 {
            return Err(Error::invalid(format!("{x} is not a class label")));
        }
        labels.push(*x as u16);
    }
    let k = num_classes.unwrap_or_else(|| (labels.iter().copied().max().unwrap_or(0) as usize + 1).max(2));
    LabelVolume::new(v.dims, v.spacing, k, labels)
}

pub fn encode_d3f(phi: &DisplacementField) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 12 * phi.dims().len());
    out.extend_from_slice(D3F_MAGIC);
    put_header(&mut out, phi.dims(), phi.spacing());
    for c in phi.components() {
        put_f32s(&mut out, c);
    }
    out
}

pub fn decode_d3f(buf: &[u8]) -> Result<DisplacementField> {
    let mut r = Reader::new(buf);
    r.magic(D3F_MAGIC)?;
    let dims = r.dims()?;
    let spacing = r.spacing()?;
    let n = dims.len();
    let comps = [r.f32_block(n)?, r.f32_block(n)?, r.f32_block(n)?];
    DisplacementField::new(dims, spacing, comps)
}

pub fn write_field(path: impl AsRef<Path>, phi: &DisplacementField) -> Result<()> {
    fs::write(path, encode_d3f(phi))?;
    Ok(())
}

pub fn read_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    decode_d3f(&fs::read(path)?)
}

pub fn encode_net(net: &VoxelNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&(net.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(net.hidden() as u32).to_le_bytes());
    for block in [net.w1(), net.b1(), net.w2(), net.b2()] {
        put_f32s(&mut out, block);
    }
    out
}

pub fn decode_net(buf: &[u8]) -> Result<VoxelNet> {
    let mut r = Reader::new(buf);
    r.magic(NET_MAGIC)?;
    let k = r.u32()? as usize;
    let h = r.u32()? as usize;
    if k < 2 || h == 0 || k > 1 << 16 || h > 1 << 20 {
        return Err(Error::InvalidHeader(format!("implausible network shape K={k}, H={h}")));
    }
    let w1 = r.f32_block(h * FEATURES)?;
    let b1 = r.f32_block(h)?;
    let w2 = r.f32_block(k * h)?;
    let b2 = r.f32_block(k)?;
    VoxelNet::from_parts(k, h, w1, b1, w2, b2)
}

pub fn write_net(path: impl AsRef<Path>, net: &VoxelNet) -> Result<()> {
    fs::write(path, encode_net(net))?;
    Ok(())
}

pub fn read_net(path: impl AsRef<Path>) -> Result<VoxelNet> {
    decode_net(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// NIfTI-1

pub const NIFTI_HEADER_SIZE: usize = 348;

/// Parse a single-file NIfTI-1 image. The first three axes become x, y, z;
/// any further axes must be singleton. Scaling is applied when
/// `scl_slope != 0`.
pub fn decode_nifti(buf: &[u8]) -> Result<Volume> {
    if buf.len() < NIFTI_HEADER_SIZE {
        return Err(Error::Truncated { needed: NIFTI_HEADER_SIZE, available: buf.len() });
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes"));
    let be = i32::from_be_bytes(buf[0..4].try_into().expect("4 bytes"));
    let little = match (le, be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(Error::InvalidHeader(format!("sizeof_hdr is {le}, expected 348"))),
    };
    let i16_at = |o: usize| {
        let b: [u8; 2] = buf[o..o + 2].try_into().expect("2 bytes");
        if little {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = buf[o..o + 4].try_into().expect("4 bytes");
        if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    };
    let magic = &buf[344..348];
    if magic != b"n+1\0" {
        return Err(Error::BadMagic { expected: "n+1".into(), found: String::from_utf8_lossy(&magic[..3]).into_owned() });
    }
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut extent = [1usize; 3];
    for a in 0..ndim as usize {
        let n = i16_at(42 + 2 * a);
        if n < 1 {
            return Err(Error::InvalidHeader(format!("dim[{}] = {n}", a + 1)));
        }
        if a < 3 {
            extent[a] = n as usize;
        } else if n != 1 {
            return Err(Error::InvalidHeader(format!("only 3D images are supported, dim[{}] = {n}", a + 1)));
        }
    }
    let dims = Dims::new(extent[0], extent[1], extent[2]);
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = f32_at(80 + 4 * a).abs() as f64;
        if v > 0.0 && v.is_finite() {
            *s = v;
        }
    }
    let datatype = i16_at(70) as i32;
    let size = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let offset = f32_at(108);
    if !offset.is_finite() || offset < NIFTI_HEADER_SIZE as f32 {
        return Err(Error::InvalidHeader(format!("vox_offset {offset} precedes the end of the header")));
    }
    let start = offset as usize;
    let end = start + size * dims.len();
    if buf.len() < end {
        return Err(Error::Truncated { needed: end, available: buf.len() });
    }
    let raw = &buf[start..end];
    let mut data: Vec<f64> = match datatype {
        2 => raw.iter().map(|&b| b as f64).collect(),
        4 => raw
            .chunks_exact(2)
            .map(|c| {
                let b: [u8; 2] = c.try_into().expect("2 bytes");
                (if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f64
            })
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().expect("4 bytes");
                (if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .collect(),
    };
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    if slope != 0.0 && slope.is_finite() {
        data.iter_mut().for_each(|v| *v = slope * *v + inter);
    }
    Volume::new(dims, spacing, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    decode_nifti(&fs::read(path)?)
}

/// Read a scalar volume, choosing the parser by extension (`.nii` or V3D).
pub fn read_any_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let p = path.as_ref();
    match p.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti(p),
        _ => read_volume(p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn v3d_round_trip_bytes() {
        let dims = Dims::new(3, 2, 2);
        let v = V3d { dtype: V3dType::F32, dims, spacing: [1.0, 0.5, 2.0], data: (0..12).map(|i| i as f64 * 0.25).collect() };
        let bytes = encode_v3d(&v).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 12 + 12 + 48);
        assert_eq!(decode_v3d(&bytes).unwrap(), v);
    }

    #[test]
    fn distinct_errors() {
        assert!(matches!(decode_v3d(b"V3D2\0"), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_v3d(b"V3D1\0\x02\0\0\0"), Err(Error::Truncated { .. })));
        assert!(matches!(decode_v3d(b"V3D1\x07"), Err(Error::UnsupportedDatatype(7))));
    }

    #[test]
    fn u8_range_checked() {
        let v = V3d { dtype: V3dType::U8, dims: Dims::new(1, 1, 1), spacing: [1.0; 3], data: vec![300.0] };
        assert!(encode_v3d(&v).is_err());
    }
}
