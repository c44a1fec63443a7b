//! Minimal NIfTI-1 reader/writer.
//!
//! Deliberately a strict subset: single `.nii` files only (magic "n+1\0"),
//! no gzip, datatypes uint8 / int16 / float32, dim[0] in {2,3}. Anything
//! else fails loudly rather than producing silently wrong geometry. The
//! byte order is detected from the header-size field; scl_slope/scl_inter
//! are applied when scl_slope is nonzero; qform/sform fields are recorded
//! as metadata only.

use std::path::Path;

use crate::error::{Error, Result};

use super::Volume;

const HEADER_SIZE: usize = 348;
const MIN_VOX_OFFSET: f32 = 352.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
}

impl NiftiDatatype {
    fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
        }
    }
    fn bitpix(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 8,
            NiftiDatatype::Int16 => 16,
            NiftiDatatype::Float32 => 32,
        }
    }
    fn byte_size(self) -> usize {
        (self.bitpix() / 8) as usize
    }
    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            other => Err(Error::format(format!(
                "unsupported NIfTI datatype code {other} (supported: 2 uint8, 4 int16, 16 float32)"
            ))),
        }
    }
}

/// Orientation fields kept as metadata; never used for resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiMeta {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl<'a> Cursor<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }
    fn f32_at(&self, off: usize) -> f32 {
        let b = [
            self.bytes[off],
            self.bytes[off + 1],
            self.bytes[off + 2],
            self.bytes[off + 3],
        ];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(Error::UnsupportedEncoding(format!(
            "{} is gzip-compressed; decompress it first (e.g. `gunzip`) — only plain .nii is supported",
            path.display()
        )));
    }
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::format(format!(
            "{} is too short to hold a NIfTI-1 header",
            path.display()
        )));
    }

    let le_size = i32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let be_size = i32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let big_endian = match (le_size, be_size) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::format(format!(
                "{}: header size field is {le_size}, expected 348",
                path.display()
            )))
        }
    };
    let cur = Cursor {
        bytes: &bytes,
        big_endian,
    };

    let magic = &bytes[344..348];
    if magic == b"ni1\0" {
        return Err(Error::format(format!(
            "{}: detached .hdr/.img pairs (magic \"ni1\") are not supported",
            path.display()
        )));
    }
    if magic != b"n+1\0" {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected \"n+1\"",
            path.display(),
            &magic[..3]
        )));
    }

    let ndim = cur.i16_at(40);
    if ndim != 2 && ndim != 3 {
        return Err(Error::format(format!(
            "{}: dim[0] = {ndim}, only 2-d and 3-d volumes are supported",
            path.display()
        )));
    }
    let dx = cur.i16_at(42).max(1) as usize;
    let dy = cur.i16_at(44).max(1) as usize;
    let dz = if ndim == 3 { cur.i16_at(46).max(1) as usize } else { 1 };
    let n = dx * dy * dz;

    let datatype = NiftiDatatype::from_code(cur.i16_at(70))?;
    let vox_offset = cur.f32_at(108);
    if vox_offset < MIN_VOX_OFFSET {
        return Err(Error::format(format!(
            "{}: vox_offset {vox_offset} below the single-file minimum 352",
            path.display()
        )));
    }
    let data_start = vox_offset as usize;
    let need = data_start + n * datatype.byte_size();
    if bytes.len() < need {
        return Err(Error::format(format!(
            "{}: truncated data section, need {need} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }

    let mut spacing = [0.0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = cur.f32_at(76 + 4 * (i + 1));
        *s = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }

    let scl_slope = cur.f32_at(112);
    let scl_inter = cur.f32_at(116);
    let apply_scaling = scl_slope != 0.0 && !(scl_slope == 1.0 && scl_inter == 0.0);

    let raw = &bytes[data_start..need];
    let mut data = Vec::with_capacity(n);
    match datatype {
        NiftiDatatype::Uint8 => data.extend(raw.iter().map(|&v| v as f32)),
        NiftiDatatype::Int16 => {
            for chunk in raw.chunks_exact(2) {
                let b = [chunk[0], chunk[1]];
                let v = if big_endian {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                };
                data.push(v as f32);
            }
        }
        NiftiDatatype::Float32 => {
            for chunk in raw.chunks_exact(4) {
                let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
                let v = if big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                };
                data.push(v);
            }
        }
    }
    if apply_scaling {
        for v in &mut data {
            *v = *v * scl_slope + scl_inter;
        }
    }

    let meta = NiftiMeta {
        qform_code: cur.i16_at(252),
        sform_code: cur.i16_at(254),
        quatern: [
            cur.f32_at(256),
            cur.f32_at(260),
            cur.f32_at(264),
            cur.f32_at(268),
            cur.f32_at(272),
            cur.f32_at(276),
        ],
        srow: [
            [cur.f32_at(280), cur.f32_at(284), cur.f32_at(288), cur.f32_at(292)],
            [cur.f32_at(296), cur.f32_at(300), cur.f32_at(304), cur.f32_at(308)],
            [cur.f32_at(312), cur.f32_at(316), cur.f32_at(320), cur.f32_at(324)],
        ],
    };

    let mut vol = Volume::new([dx, dy, dz], spacing, data).map_err(|e| match e {
        Error::Validation(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    vol.subject_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    vol.meta = Some(meta);
    Ok(vol)
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

/// Write a volume as a little-endian single-file NIfTI-1. Images should use
/// `Float32`; label maps `Uint8` (values above 255 are a range error).
pub fn write_nifti(volume: &Volume, path: &Path, datatype: NiftiDatatype) -> Result<()> {
    let n = volume.numel();
    let mut header = vec![0u8; HEADER_SIZE];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut header, 40, 3);
    put_i16(&mut header, 42, volume.dims[0] as i16);
    put_i16(&mut header, 44, volume.dims[1] as i16);
    put_i16(&mut header, 46, volume.dims[2] as i16);
    for d in 4..8 {
        put_i16(&mut header, 40 + 2 * d, 1);
    }
    put_i16(&mut header, 70, datatype.code());
    put_i16(&mut header, 72, datatype.bitpix());
    put_f32(&mut header, 76, 1.0); // qfac
    for (i, &s) in volume.spacing.iter().enumerate() {
        put_f32(&mut header, 76 + 4 * (i + 1), s);
    }
    put_f32(&mut header, 108, MIN_VOX_OFFSET);
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_f32(&mut header, 116, 0.0); // scl_inter
    header[344..348].copy_from_slice(b"n+1\0");

    let mut payload: Vec<u8> = Vec::with_capacity(n * datatype.byte_size());
    match datatype {
        NiftiDatatype::Float32 => {
            for &v in &volume.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        NiftiDatatype::Uint8 => {
            for (i, &v) in volume.data.iter().enumerate() {
                if !v.is_finite() || v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::validation(format!(
                        "voxel {i} holds {v}, not representable as uint8 label"
                    )));
                }
                payload.push(v as u8);
            }
        }
        NiftiDatatype::Int16 => {
            return Err(Error::validation(
                "int16 output is not part of the writer subset (read-only datatype)".to_string(),
            ))
        }
    }

    let mut bytes = header;
    bytes.extend_from_slice(&[0u8; 4]); // extension indicator: none
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dmrs-nifti-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let data: Vec<f32> = (0..8).map(|v| v as f32 * 0.37 - 1.0).collect();
        let vol = Volume::new([2, 2, 2], [0.5, 0.5, 3.0], data.clone()).unwrap();
        let path = tmpfile("roundtrip_f32.nii");
        write_nifti(&vol, &path, NiftiDatatype::Float32).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.dims, [2, 2, 2]);
        assert_eq!(back.spacing, [0.5, 0.5, 3.0]);
        assert!(back
            .data
            .iter()
            .zip(&data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn label_alphabet_survives_uint8_round_trip() {
        let data: Vec<f32> = (0..27).map(|v| (v % 15) as f32).collect();
        let vol = Volume::new([3, 3, 3], [1.0, 1.0, 1.0], data.clone()).unwrap();
        let path = tmpfile("roundtrip_u8.nii");
        write_nifti(&vol, &path, NiftiDatatype::Uint8).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.label_alphabet().unwrap(), (1u8..=14).collect::<Vec<_>>());
    }

    #[test]
    fn uint8_rejects_out_of_range_labels() {
        let vol = Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 300.0]).unwrap();
        let path = tmpfile("bad_u8.nii");
        assert!(matches!(
            write_nifti(&vol, &path, NiftiDatatype::Uint8),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn detached_header_magic_is_rejected() {
        let vol = Volume::new([1, 1, 1], [1.0; 3], vec![0.5]).unwrap();
        let path = tmpfile("detached.nii");
        write_nifti(&vol, &path, NiftiDatatype::Float32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[344..348].copy_from_slice(b"ni1\0");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("detached"));
    }

    #[test]
    fn gzip_stream_names_the_remedy() {
        let path = tmpfile("gz.nii");
        std::fs::write(&path, [0x1f, 0x8b, 0x08, 0x00]).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(matches!(err, Error::UnsupportedEncoding(_)), "{err}");
        assert!(err.to_string().contains("gunzip"));
    }

    #[test]
    fn int16_applies_slope_and_intercept() {
        // stored 3 with slope 2, inter 1 -> 7
        let vol = Volume::new([1, 1, 1], [1.0; 3], vec![3.0]).unwrap();
        let path = tmpfile("scaled_i16.nii");
        write_nifti(&vol, &path, NiftiDatatype::Float32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        put_i16(&mut bytes, 70, 4); // int16
        put_i16(&mut bytes, 72, 16);
        put_f32(&mut bytes, 112, 2.0);
        put_f32(&mut bytes, 116, 1.0);
        bytes.truncate(352);
        bytes.extend_from_slice(&3i16.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.data, vec![7.0]);
    }

    #[test]
    fn big_endian_headers_are_detected() {
        let vol = Volume::new([2, 1, 1], [1.0; 3], vec![1.5, -2.5]).unwrap();
        let path = tmpfile("be.nii");
        write_nifti(&vol, &path, NiftiDatatype::Float32).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // Byte-swap the whole header's known fields and the payload.
        let mut be = vec![0u8; bytes.len()];
        be[0..4].copy_from_slice(&348i32.to_be_bytes());
        for &off in &[40usize, 42, 44, 46, 48, 50, 52, 54, 70, 72] {
            let v = i16::from_le_bytes([bytes[off], bytes[off + 1]]);
            be[off..off + 2].copy_from_slice(&v.to_be_bytes());
        }
        for &off in &[76usize, 80, 84, 88, 108, 112, 116] {
            let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
            be[off..off + 4].copy_from_slice(&v.to_be_bytes());
        }
        be[344..348].copy_from_slice(b"n+1\0");
        for (i, chunk) in bytes[352..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            be[352 + 4 * i..352 + 4 * i + 4].copy_from_slice(&v.to_be_bytes());
        }
        std::fs::write(&path, &be).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.data, vec![1.5, -2.5]);
    }
}
