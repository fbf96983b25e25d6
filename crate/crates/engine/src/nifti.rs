//! NIfTI-1 reading and writing (single-file `.nii`, gzip `.nii.gz`, and
//! `.hdr`/`.img` pairs on read).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use kipa_core::volume::{Class, LabelRemap, LabelVolume, Mat3, ScalarVolume, VolumeHeader};
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::fsutil::write_atomic;

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const DATA_OFFSET: usize = 352;

const MAGIC_OFFSET: usize = 344;

/// Which spatial transform wins when both are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormPriority {
    #[default]
    SformWhenValid,
    Qform,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReadOptions {
    pub form_priority: FormPriority,
    /// Raw label value to class mapping; identity on `0..=4` when unset.
    pub label_remap: Option<LabelRemap>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        Ok(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            other => return Err(EngineError::UnsupportedDatatype(other)),
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(self, Datatype::U8 | Datatype::I16 | Datatype::I32)
    }
}

/// A parsed file: geometry plus scaled voxel values.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiVolume {
    pub header: VolumeHeader,
    pub datatype: Datatype,
    /// `stored · slope + intercept`, x-fastest.
    pub values: Vec<f64>,
}

impl NiftiVolume {
    pub fn into_scalar(self) -> Result<ScalarVolume> {
        let data: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        Ok(ScalarVolume::scalar(self.header, data)?)
    }

    /// Interprets the values as class codes through `remap` (identity when `None`).
    pub fn into_labels(self, remap: Option<&LabelRemap>) -> Result<LabelVolume> {
        let mut codes = Vec::with_capacity(self.values.len());
        for (index, &v) in self.values.iter().enumerate() {
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(kipa_core::Error::InvalidLabel { value: v as i64, index }.into());
            }
            let raw = v as i64;
            let class = match remap {
                Some(r) => r.lookup(raw),
                None => u8::try_from(raw).ok().and_then(Class::from_code),
            };
            let class = class.ok_or(kipa_core::Error::InvalidLabel { value: raw, index })?;
            codes.push(class.code());
        }
        let mut header = self.header;
        header.intensity_scale = 1.0;
        header.intensity_offset = 0.0;
        Ok(LabelVolume::labels(header, codes)?)
    }
}

fn gunzip_if_needed(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| EngineError::Parse {
                offset: 0,
                message: format!("gzip stream: {e}"),
            })?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

struct Fields<'a> {
    h: &'a [u8],
    big: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        if self.big {
            BigEndian::read_i16(&self.h[off..])
        } else {
            LittleEndian::read_i16(&self.h[off..])
        }
    }

    fn f32(&self, off: usize) -> f64 {
        let v = if self.big {
            BigEndian::read_f32(&self.h[off..])
        } else {
            LittleEndian::read_f32(&self.h[off..])
        };
        v as f64
    }
}

/// Rotation from the qform quaternion, with `qfac` applied to the third column.
fn quaternion_to_matrix(b: f64, c: f64, d: f64, qfac: f64) -> Mat3 {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let mut r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    for row in &mut r {
        row[2] *= qfac;
    }
    r
}

/// Quaternion `(b, c, d)` and `qfac` of an orthonormal matrix.
fn matrix_to_quaternion(m: &Mat3) -> ([f64; 3], f64) {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let qfac = if det < 0.0 { -1.0 } else { 1.0 };
    let mut r = *m;
    for row in &mut r {
        row[2] *= qfac;
    }
    let trace = r[0][0] + r[1][1] + r[2][2] + 1.0;
    let (a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r[2][1] - r[1][2]) / a;
        c = 0.25 * (r[0][2] - r[2][0]) / a;
        d = 0.25 * (r[1][0] - r[0][1]) / a;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
        }
    }
    ([b, c, d], qfac)
}

fn sform_geometry(f: &Fields<'_>) -> Option<([f64; 3], Mat3, [f64; 3])> {
    let rows: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| f.f32(280 + 16 * r + 4 * c)));
    let mut spacing = [0.0; 3];
    let mut dir = [[0.0; 3]; 3];
    for c in 0..3 {
        let norm = (0..3).map(|r| rows[r][c] * rows[r][c]).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        spacing[c] = norm;
        for r in 0..3 {
            dir[r][c] = rows[r][c] / norm;
        }
    }
    if !(kipa_core::volume::orthonormal_deviation(&dir) < kipa_core::volume::ORTHONORMAL_TOL) {
        return None;
    }
    Some((spacing, dir, [rows[0][3], rows[1][3], rows[2][3]]))
}

/// Parses a single-file NIfTI-1 stream, gzip-compressed or not.
pub fn parse_nifti(bytes: &[u8], opts: &ReadOptions) -> Result<NiftiVolume> {
    let bytes = gunzip_if_needed(bytes)?;
    parse_parts(&bytes, None, opts)
}

/// Parses a `.hdr`/`.img` pair.
pub fn parse_nifti_pair(hdr: &[u8], img: &[u8], opts: &ReadOptions) -> Result<NiftiVolume> {
    let hdr = gunzip_if_needed(hdr)?;
    let img = gunzip_if_needed(img)?;
    parse_parts(&hdr, Some(&img), opts)
}

fn parse_parts(bytes: &[u8], pair_data: Option<&[u8]>, opts: &ReadOptions) -> Result<NiftiVolume> {
    if bytes.len() < HEADER_SIZE {
        return Err(EngineError::Parse {
            offset: bytes.len(),
            message: format!("file is {} bytes, shorter than the {HEADER_SIZE}-byte header", bytes.len()),
        });
    }
    let big = match (LittleEndian::read_i32(bytes), BigEndian::read_i32(bytes)) {
        (348, _) => false,
        (_, 348) => true,
        (v, _) => {
            return Err(EngineError::Parse {
                offset: 0,
                message: format!("sizeof_hdr is {v}, expected 348"),
            })
        }
    };
    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    let single = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => {
            return Err(EngineError::Parse {
                offset: MAGIC_OFFSET,
                message: format!("bad magic {magic:?}, expected \"n+1\\0\" or \"ni1\\0\""),
            })
        }
    };
    let f = Fields { h: bytes, big };
    let dim0 = f.i16(40);
    if dim0 != 3 {
        return Err(EngineError::Dimensionality(dim0));
    }
    let mut shape = [0usize; 3];
    for (a, s) in shape.iter_mut().enumerate() {
        let d = f.i16(42 + 2 * a);
        if d < 1 {
            return Err(EngineError::Parse {
                offset: 42 + 2 * a,
                message: format!("dim[{}] = {d} must be >= 1", a + 1),
            });
        }
        *s = d as usize;
    }
    let datatype = Datatype::from_code(f.i16(70))?;

    let pixdim: [f64; 4] = std::array::from_fn(|i| f.f32(76 + 4 * i));
    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    let qform = || {
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let dir = quaternion_to_matrix(f.f32(256), f.f32(260), f.f32(264), qfac);
        let spacing = [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()];
        (spacing, dir, [f.f32(268), f.f32(272), f.f32(276)])
    };
    let sform = if sform_code > 0 { sform_geometry(&f) } else { None };
    let (spacing, direction, origin) = match (opts.form_priority, sform) {
        (FormPriority::Qform, _) if qform_code > 0 => qform(),
        (_, Some(s)) => s,
        _ if qform_code > 0 => qform(),
        _ => (
            [pixdim[1].abs(), pixdim[2].abs(), pixdim[3].abs()],
            kipa_core::volume::IDENTITY,
            [0.0; 3],
        ),
    };

    let (mut slope, mut inter) = (f.f32(112), f.f32(116));
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    if !inter.is_finite() {
        inter = 0.0;
    }

    let header = VolumeHeader {
        shape,
        spacing,
        origin,
        direction,
        intensity_scale: slope,
        intensity_offset: inter,
    };
    header.validate()?;

    let n = header.voxel_count();
    let (data, start) = match (single, pair_data) {
        (_, Some(img)) => (img, 0usize),
        (true, None) => {
            let vox = f.f32(108);
            let start = if vox >= DATA_OFFSET as f64 { vox as usize } else { DATA_OFFSET };
            (bytes, start)
        }
        (false, None) => {
            return Err(EngineError::Parse {
                offset: MAGIC_OFFSET,
                message: "header-only file (magic \"ni1\"); voxel data lives in the .img file".into(),
            })
        }
    };
    let need = n * datatype.size();
    if data.len() < start + need {
        return Err(EngineError::Parse {
            offset: data.len(),
            message: format!("voxel data truncated: need {need} bytes from offset {start}"),
        });
    }
    let raw = &data[start..start + need];
    let mut values = Vec::with_capacity(n);
    macro_rules! decode {
        ($size:expr, $read:ident) => {
            for chunk in raw.chunks_exact($size) {
                let v = if big { BigEndian::$read(chunk) as f64 } else { LittleEndian::$read(chunk) as f64 };
                values.push(v * slope + inter);
            }
        };
    }
    match datatype {
        Datatype::U8 => values.extend(raw.iter().map(|&b| b as f64 * slope + inter)),
        Datatype::I16 => decode!(2, read_i16),
        Datatype::I32 => decode!(4, read_i32),
        Datatype::F32 => decode!(4, read_f32),
        Datatype::F64 => decode!(8, read_f64),
    }
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(kipa_core::Error::NonFinite { count: bad }.into());
    }
    Ok(NiftiVolume {
        header,
        datatype,
        values,
    })
}

fn encode_header(header: &VolumeHeader, datatype: Datatype) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = [3, header.shape[0], header.shape[1], header.shape[2], 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d as i16);
    }
    LittleEndian::write_i16(&mut h[70..], datatype.code());
    LittleEndian::write_i16(&mut h[72..], (datatype.size() * 8) as i16);
    let ([b, c, d], qfac) = matrix_to_quaternion(&header.direction);
    let pixdim = [qfac, header.spacing[0], header.spacing[1], header.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    // mm and seconds
    h[123] = 2 | 8;
    let descrip = b"kipa";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    for (i, q) in [b, c, d].iter().enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * i..], *q as f32);
    }
    for (i, o) in header.origin.iter().enumerate() {
        LittleEndian::write_f32(&mut h[268 + 4 * i..], *o as f32);
    }
    for r in 0..3 {
        for c in 0..3 {
            let v = header.direction[r][c] * header.spacing[c];
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], v as f32);
        }
        LittleEndian::write_f32(&mut h[280 + 16 * r + 12..], header.origin[r] as f32);
    }
    h[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");
    h
}

fn finish(mut bytes: Vec<u8>, gzip: bool) -> Vec<u8> {
    if !gzip {
        return bytes;
    }
    let mut enc = GzEncoder::new(Vec::with_capacity(bytes.len() / 4), Compression::new(6));
    enc.write_all(&bytes).expect("in-memory gzip");
    bytes.clear();
    enc.finish().expect("in-memory gzip")
}

/// Float32 file with unit slope and zero intercept (values are stored scaled).
pub fn encode_scalar(volume: &ScalarVolume, gzip: bool) -> Vec<u8> {
    let mut bytes = encode_header(volume.header(), Datatype::F32);
    bytes.reserve(volume.len() * 4);
    for &v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    finish(bytes, gzip)
}

/// Uint8 label file.
pub fn encode_labels(volume: &LabelVolume, gzip: bool) -> Vec<u8> {
    let mut bytes = encode_header(volume.header(), Datatype::U8);
    bytes.extend_from_slice(volume.data());
    finish(bytes, gzip)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn read_nifti(path: &Path, opts: &ReadOptions) -> Result<NiftiVolume> {
    let bytes = std::fs::read(path).map_err(EngineError::io(path))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".hdr") || name.ends_with(".hdr.gz") {
        let img_path = path.with_file_name(name.replacen(".hdr", ".img", 1));
        let img = std::fs::read(&img_path).map_err(EngineError::io(&img_path))?;
        return parse_nifti_pair(&bytes, &img, opts);
    }
    parse_nifti(&bytes, opts)
}

pub fn read_scalar(path: &Path, opts: &ReadOptions) -> Result<ScalarVolume> {
    read_nifti(path, opts)?.into_scalar()
}

pub fn read_labels(path: &Path, opts: &ReadOptions) -> Result<LabelVolume> {
    read_nifti(path, opts)?.into_labels(opts.label_remap.as_ref())
}

/// Writes atomically; gzip when the name ends in `.gz`.
pub fn write_scalar(path: &Path, volume: &ScalarVolume) -> Result<()> {
    write_atomic(path, &encode_scalar(volume, is_gz(path)))
}

pub fn write_labels(path: &Path, volume: &LabelVolume) -> Result<()> {
    write_atomic(path, &encode_labels(volume, is_gz(path)))
}
