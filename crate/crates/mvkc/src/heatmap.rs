//! Heatmap rasters from correspondence maps.
//!
//! Maps are min-max normalized to [0, 255] per map and written as binary
//! portable pixmaps: grayscale PGM (P5, maxval 255) or, in color mode, a
//! PPM (P6) using a three-stop ramp black -> red -> yellow with linear
//! interpolation between stops. A constant map has zero range and
//! normalizes to all zeros.

use crate::correspondence::CorrespondenceMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatmapError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Min-max normalization to byte range; constant input maps to 0.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range <= 0.0 || !range.is_finite() {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|v| (255.0 * (v - min) / range).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Three-stop color ramp: (0,0,0) at 0, (255,0,0) at 128, (255,255,0)
/// at 255.
fn ramp(byte: u8) -> [u8; 3] {
    if byte < 128 {
        let t = byte as f64 / 127.0;
        [(255.0 * t).round() as u8, 0, 0]
    } else {
        let t = (byte - 128) as f64 / 127.0;
        [255, (255.0 * t).round() as u8, 0]
    }
}

/// Encodes a map as a binary PGM (P5).
pub fn encode_pgm(map: &CorrespondenceMap) -> Vec<u8> {
    let bytes = normalize_to_bytes(map.data());
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(&bytes);
    out
}

/// Encodes a map as a binary color-ramped PPM (P6).
pub fn encode_ppm(map: &CorrespondenceMap) -> Vec<u8> {
    let bytes = normalize_to_bytes(map.data());
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    for b in bytes {
        out.extend_from_slice(&ramp(b));
    }
    out
}

pub fn write_pgm(map: &CorrespondenceMap, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_pgm(map))?;
    Ok(())
}

pub fn write_ppm(map: &CorrespondenceMap, path: impl AsRef<Path>) -> Result<(), HeatmapError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_ppm(map))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::softmax_map;

    #[test]
    fn uniform_map_renders_constant() {
        let map = softmax_map(0, 3, 4, &[0.0; 12]).unwrap();
        let pgm = encode_pgm(&map);
        assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
        let pixels = &pgm[pgm.len() - 12..];
        assert!(pixels.iter().all(|b| *b == 0));
    }

    #[test]
    fn one_hot_map_has_single_bright_pixel() {
        let mut grid = vec![0.0; 12];
        grid[7] = 10.0;
        let map = softmax_map(0, 3, 4, &grid).unwrap();
        let pgm = encode_pgm(&map);
        let pixels = &pgm[pgm.len() - 12..];
        assert_eq!(pixels[7], 255);
        assert_eq!(pixels.iter().filter(|b| **b == 255).count(), 1);
    }

    #[test]
    fn ppm_header_and_length() {
        let map = softmax_map(0, 2, 2, &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let ppm = encode_ppm(&map);
        assert!(ppm.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(ppm.len(), b"P6\n2 2\n255\n".len() + 12);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0), [0, 0, 0]);
        assert_eq!(ramp(127), [255, 0, 0]);
        assert_eq!(ramp(255), [255, 255, 0]);
    }
}
