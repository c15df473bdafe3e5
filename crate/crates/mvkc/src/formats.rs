//! Binary tensor formats.
//!
//! All three formats share the layout: 4 magic bytes, a little-endian u32
//! version (currently 1), little-endian u32 dimensions, then the payload
//! as little-endian 32-bit floats.
//!
//! - `DMAP`: descriptor map, dims (h, w, d), data row-major (y, x, channel).
//! - `FGRD`: feature grid, same layout as DMAP with c in place of d.
//! - `CSET`: correspondence set, dims (m, N, h, w), data view-major, then
//!   keypoint-major, then row-major.
//!
//! Values are stored at f32 precision; in-memory computation is f64.
//! Writing is value-preserving for data that originated from a file, so
//! write -> read -> write round-trips byte-identically.

use crate::correspondence::{
    CorrespondenceError, CorrespondenceMap, CorrespondenceSet, MultiViewCorrespondenceSet,
};
use crate::descriptor::{DescriptorError, DescriptorMap, FeatureGrid};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("header declares {0} values, which overflows")]
    SizeOverflow(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

const DMAP_MAGIC: [u8; 4] = *b"DMAP";
const FGRD_MAGIC: [u8; 4] = *b"FGRD";
const CSET_MAGIC: [u8; 4] = *b"CSET";

fn write_header(
    out: &mut impl Write,
    magic: &[u8; 4],
    dims: &[u32],
) -> Result<(), FormatError> {
    out.write_all(magic)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    for d in dims {
        out.write_u32::<LittleEndian>(*d)?;
    }
    Ok(())
}

fn read_header<const N: usize>(
    input: &mut impl Read,
    magic: &[u8; 4],
) -> Result<[u32; N], FormatError> {
    let mut found = [0u8; 4];
    input.read_exact(&mut found)?;
    if &found != magic {
        return Err(FormatError::BadMagic {
            expected: *magic,
            found,
        });
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut dims = [0u32; N];
    for d in dims.iter_mut() {
        *d = input.read_u32::<LittleEndian>()?;
    }
    Ok(dims)
}

fn write_values(out: &mut impl Write, values: &[f64]) -> Result<(), FormatError> {
    for v in values {
        out.write_f32::<LittleEndian>(*v as f32)?;
    }
    Ok(())
}

fn read_values(input: &mut impl Read, count: usize) -> Result<Vec<f64>, FormatError> {
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let v = input.read_f32::<LittleEndian>()?;
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        values.push(v as f64);
    }
    Ok(values)
}

fn checked_len(dims: &[u32]) -> Result<usize, FormatError> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize).ok_or_else(|| {
            FormatError::SizeOverflow(format!("{dims:?}"))
        })
    })
}

pub fn write_descriptor_map(
    map: &DescriptorMap,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(
        &mut out,
        &DMAP_MAGIC,
        &[map.height() as u32, map.width() as u32, map.dim() as u32],
    )?;
    write_values(&mut out, map.data())?;
    out.flush()?;
    Ok(())
}

pub fn read_descriptor_map(path: impl AsRef<Path>) -> Result<DescriptorMap, FormatError> {
    let mut input = BufReader::new(File::open(path)?);
    let [h, w, d] = read_header::<3>(&mut input, &DMAP_MAGIC)?;
    let values = read_values(&mut input, checked_len(&[h, w, d])?)?;
    Ok(DescriptorMap::from_unit_data(
        h as usize, w as usize, d as usize, values,
    )?)
}

pub fn write_feature_grid(
    grid: &FeatureGrid,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(
        &mut out,
        &FGRD_MAGIC,
        &[
            grid.height() as u32,
            grid.width() as u32,
            grid.channels() as u32,
        ],
    )?;
    write_values(&mut out, grid.data())?;
    out.flush()?;
    Ok(())
}

pub fn read_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid, FormatError> {
    let mut input = BufReader::new(File::open(path)?);
    let [h, w, c] = read_header::<3>(&mut input, &FGRD_MAGIC)?;
    let values = read_values(&mut input, checked_len(&[h, w, c])?)?;
    Ok(FeatureGrid::new(h as usize, w as usize, c as usize, values)?)
}

pub fn write_correspondence_set(
    set: &MultiViewCorrespondenceSet,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(
        &mut out,
        &CSET_MAGIC,
        &[
            set.views() as u32,
            set.keypoints_per_view() as u32,
            set.height() as u32,
            set.width() as u32,
        ],
    )?;
    for map in set.maps() {
        write_values(&mut out, map.data())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_correspondence_set(
    path: impl AsRef<Path>,
) -> Result<MultiViewCorrespondenceSet, FormatError> {
    let mut input = BufReader::new(File::open(path)?);
    let [m, n, h, w] = read_header::<4>(&mut input, &CSET_MAGIC)?;
    let per_map = checked_len(&[h, w])?;
    checked_len(&[m, n, h, w])?;
    let mut maps = Vec::with_capacity((m * n) as usize);
    for channel in 0..(m * n) as usize {
        let values = read_values(&mut input, per_map)?;
        maps.push(CorrespondenceMap::new(
            channel % n as usize,
            h as usize,
            w as usize,
            values,
        )?);
    }
    Ok(MultiViewCorrespondenceSet::from_parts(
        m as usize, n as usize, maps,
    )?)
}

/// Writes a single-view correspondence set as a CSET with m = 1.
pub fn write_single_view_set(
    set: &CorrespondenceSet,
    path: impl AsRef<Path>,
) -> Result<(), FormatError> {
    let mv = MultiViewCorrespondenceSet::from_parts(1, set.len(), set.maps().to_vec())?;
    write_correspondence_set(&mv, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::softmax_map;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dmap_roundtrip_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..5 {
            let (h, w, d) = (
                rng.gen_range(1..8),
                rng.gen_range(1..8),
                rng.gen_range(1..6),
            );
            let data: Vec<f64> = (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let map = DescriptorMap::normalize(h, w, d, data).unwrap();
            let p1 = dir.path().join(format!("a{i}.dmap"));
            let p2 = dir.path().join(format!("b{i}.dmap"));
            write_descriptor_map(&map, &p1).unwrap();
            let back = read_descriptor_map(&p1).unwrap();
            write_descriptor_map(&back, &p2).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
    }

    #[test]
    fn fgrd_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = tempfile::tempdir().unwrap();
        let grid = FeatureGrid::new(
            3,
            4,
            2,
            (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let p1 = dir.path().join("a.fgrd");
        let p2 = dir.path().join("b.fgrd");
        write_feature_grid(&grid, &p1).unwrap();
        let back = read_feature_grid(&p1).unwrap();
        write_feature_grid(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.height(), 3);
        assert_eq!(back.width(), 4);
        assert_eq!(back.channels(), 2);
    }

    #[test]
    fn cset_roundtrip_and_header() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = tempfile::tempdir().unwrap();
        let maps: Vec<_> = (0..6)
            .map(|i| {
                let grid: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
                softmax_map(i % 3, 4, 5, &grid).unwrap()
            })
            .collect();
        let set = MultiViewCorrespondenceSet::from_parts(2, 3, maps).unwrap();
        let p1 = dir.path().join("a.cset");
        let p2 = dir.path().join("b.cset");
        write_correspondence_set(&set, &p1).unwrap();
        let back = read_correspondence_set(&p1).unwrap();
        assert_eq!(back.views(), 2);
        assert_eq!(back.keypoints_per_view(), 3);
        assert_eq!(back.height(), 4);
        assert_eq!(back.width(), 5);
        write_correspondence_set(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.dmap");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            read_descriptor_map(&path),
            Err(FormatError::BadMagic { .. })
        ));
    }

    #[test]
    fn wrong_version_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v2.dmap");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DMAP");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_descriptor_map(&path),
            Err(FormatError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.dmap");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"DMAP");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes()); // 3 values missing
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_descriptor_map(&path),
            Err(FormatError::Io(_))
        ));
    }
}
