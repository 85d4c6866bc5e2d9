//! Grayscale images and binary PGM (P5, maxval 255) I/O.
//!
//! 8-bit quantization is part of the on-disk format: every pixel written
//! is `round(clamp(v) * 255)`, and reading maps byte b back to b/255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// H x W grayscale image, pixels row-major in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count mismatch");
        GrayImage {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn clamp01(&mut self) {
        for p in self.pixels.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Quantize to the 8-bit values the PGM writer would emit.
    pub fn quantized(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Write a binary PGM. An optional `comment` goes into a `#` header line
/// (used to record the rescaling factor of score heatmaps).
pub fn write_pgm(path: &Path, img: &GrayImage, comment: Option<&str>) -> Result<()> {
    let mut buf = Vec::with_capacity(img.pixels.len() + 64);
    buf.extend_from_slice(b"P5\n");
    if let Some(c) = comment {
        debug_assert!(!c.contains('\n'));
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    buf.extend_from_slice(format!("{} {}\n255\n", img.width, img.height).as_bytes());
    buf.extend_from_slice(&img.quantized());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|detail| Error::PgmParse {
        path: path.to_path_buf(),
        detail,
    })
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut pos = 0;

    // Whitespace-separated header tokens; '#' starts a comment to end of line.
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("magic is {magic:?}, expected P5"));
    }
    let width: usize = next_token(&mut pos)?
        .parse()
        .map_err(|_| "bad width".to_string())?;
    let height: usize = next_token(&mut pos)?
        .parse()
        .map_err(|_| "bad height".to_string())?;
    let maxval: usize = next_token(&mut pos)?
        .parse()
        .map_err(|_| "bad maxval".to_string())?;
    if maxval != 255 {
        return Err(format!("maxval {maxval}, this format pins 255"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!(
            "pixel payload truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let pixels = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn pgm_roundtrip_is_8bit_exact() {
        let mut rng = Rng::new(5);
        let mut img = GrayImage::new(17, 9);
        for p in img.pixels.iter_mut() {
            *p = rng.f64();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&path, &img, Some("test image")).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.width, 17);
        assert_eq!(back.height, 9);
        assert_eq!(back.quantized(), img.quantized());
        // A second write of the loaded image is byte-stable.
        let path2 = dir.path().join("t2.pgm");
        write_pgm(&path2, &back, Some("test image")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn rejects_non_p5() {
        assert!(parse_pgm(b"P2\n2 2\n255\n0 0 0 0").is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        assert!(parse_pgm(b"P5\n4 4\n255\nabc").is_err());
    }

    #[test]
    fn missing_file_reports_path() {
        let err = read_pgm(Path::new("/nonexistent/zzz.pgm")).unwrap_err();
        assert!(err.to_string().contains("zzz.pgm"));
    }
}
