//! Rasterize grids to 8-bit RGBA (and PNG with the `cli` feature).
//!
//! The engine's data domain is [-1, 1]; rendering clamps to that range,
//! maps it affinely onto [0, 255], and rounds half away from zero (so 0.0
//! lands on 128). One-channel grids render as gray, three-channel grids as
//! RGB; anything else is an error.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// Map one sample to its 8-bit value.
pub fn to_byte(v: f64) -> u8 {
    let c = v.clamp(-1.0, 1.0);
    ((c + 1.0) * 0.5 * 255.0).round() as u8
}

/// Convert a 1- or 3-channel grid to tightly packed RGBA bytes
/// (alpha = 255). Returns (bytes, width, height).
pub fn to_rgba8(g: &ImageGrid) -> Result<(Vec<u8>, usize, usize)> {
    let (h, w, d) = g.shape();
    if d != 1 && d != 3 {
        return Err(Error::Range(format!(
            "rendering supports 1 or 3 channels, got {d}"
        )));
    }
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let (r, gch, b) = if d == 1 {
                let v = to_byte(g.get(y, x, 0));
                (v, v, v)
            } else {
                (
                    to_byte(g.get(y, x, 0)),
                    to_byte(g.get(y, x, 1)),
                    to_byte(g.get(y, x, 2)),
                )
            };
            out.extend_from_slice(&[r, gch, b, 255]);
        }
    }
    Ok((out, w, h))
}

/// Encode a grid as PNG bytes.
#[cfg(feature = "cli")]
pub fn render_png(g: &ImageGrid) -> Result<Vec<u8>> {
    let (rgba, w, h) = to_rgba8(g)?;
    let img: image::RgbaImage =
        image::ImageBuffer::from_raw(w as u32, h as u32, rgba).expect("buffer sized to fit");
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Format { path: "<png>".into(), message: e.to_string() })?;
    Ok(bytes.into_inner())
}

#[cfg(feature = "cli")]
pub fn save_png(path: &std::path::Path, g: &ImageGrid) -> Result<()> {
    let bytes = render_png(g)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_hits_the_pinned_values() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128); // 127.5 rounds half away from zero
        assert_eq!(to_byte(-3.0), 0); // clamped
        assert_eq!(to_byte(7.5), 255); // clamped
    }

    #[test]
    fn byte_mapping_is_monotone() {
        let mut prev = 0u8;
        for i in 0..=200 {
            let v = -1.0 + 2.0 * i as f64 / 200.0;
            let b = to_byte(v);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn gray_replicates_and_rgb_passes_through() {
        let g = ImageGrid::from_vec(1, 2, 1, vec![-1.0, 0.0]).unwrap();
        let (bytes, w, h) = to_rgba8(&g).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(bytes, vec![0, 0, 0, 255, 128, 128, 128, 255]);
        let g = ImageGrid::from_vec(1, 1, 3, vec![-1.0, 0.0, 1.0]).unwrap();
        let (bytes, _, _) = to_rgba8(&g).unwrap();
        assert_eq!(bytes, vec![0, 128, 255, 255]);
    }

    #[test]
    fn unsupported_channel_counts_error() {
        let g = ImageGrid::zeros(1, 1, 4);
        assert!(to_rgba8(&g).is_err());
        let g = ImageGrid::zeros(1, 1, 2);
        assert!(to_rgba8(&g).is_err());
    }

    #[cfg(feature = "cli")]
    #[test]
    fn png_bytes_start_with_the_png_signature() {
        let g = ImageGrid::from_vec(2, 2, 3, vec![0.0; 12]).unwrap();
        let bytes = render_png(&g).unwrap();
        assert_eq!(&bytes[..8], &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
        let g4 = ImageGrid::zeros(1, 1, 4);
        assert!(render_png(&g4).is_err());
    }
}
