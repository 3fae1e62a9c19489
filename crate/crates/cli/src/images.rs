//! Uncompressed PGM/PPM writers for mask previews and pool dumps; chosen so
//! golden-file tests stay codec-free and bit-exact.

use std::io::Write;
use std::path::Path;

use muse_core::error::Result;

/// Linearly scale values to 0..=255; a zero-range input maps to mid-gray.
fn scale_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return vec![128u8; values.len()];
    }
    let scale = 255.0 / (hi - lo);
    values.iter().map(|&v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8).collect()
}

/// Binary PGM (P5) of an h-by-w grid.
pub fn write_pgm(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(&scale_to_bytes(values))?;
    Ok(())
}

/// Binary PPM (P6) of a (3, h, w) planar image, min-max scaled per image.
pub fn write_ppm(path: &Path, planes: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(planes.len(), 3 * h * w);
    let bytes = scale_to_bytes(planes);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    // planar (c, h, w) to interleaved rgb
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push(bytes[c * h * w + p]);
        }
    }
    f.write_all(&out)?;
    Ok(())
}

/// Plain-text grid, one row per line, 4 decimal places.
pub fn text_grid(values: &[f64], h: usize, w: usize) -> String {
    assert_eq!(values.len(), h * w);
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = values[r * w..(r + 1) * w].iter().map(|v| format!("{v:.4}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_range_maps_to_mid_gray() {
        let bytes = scale_to_bytes(&[0.75; 12]);
        assert!(bytes.iter().all(|&b| b == 128));
    }

    #[test]
    fn scaling_covers_full_range() {
        let bytes = scale_to_bytes(&[-1.0, 0.0, 1.0]);
        assert_eq!(bytes, vec![0, 128, 255]);
    }

    #[test]
    fn ppm_header_and_payload_size() {
        let dir = std::env::temp_dir().join(format!("muse_img_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let planes = vec![0.5f32; 3 * 2 * 4];
        write_ppm(&path, &planes, 2, 4).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), b"P6\n4 2\n255\n".len() + 3 * 2 * 4);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn text_grid_formatting() {
        let g = text_grid(&[1.0, 0.5, 0.77880078, 0.0], 2, 2);
        assert_eq!(g, "1.0000 0.5000\n0.7788 0.0000\n");
    }
}
