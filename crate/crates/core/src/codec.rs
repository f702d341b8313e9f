//! PNG and base64 encodings used on disk and over the wire.

use std::io::Cursor;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::domain::{BinaryMask, ImageSample};
use crate::error::{Error, Result};

fn png_error(e: impl std::fmt::Display) -> Error {
    Error::Codec(e.to_string())
}

fn encode_png(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, rows: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(png_error)?;
        writer.write_image_data(rows).map_err(png_error)?;
        writer.finish().map_err(png_error)?;
    }
    Ok(out)
}

/// 8-bit grayscale (C=1) or RGB (C=3), value = round(255·pixel).
pub fn image_to_png(image: &ImageSample) -> Result<Vec<u8>> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let px = image.pixels();
    let mut bytes = Vec::with_capacity(h * w * c);
    for i in 0..h * w {
        for ch in 0..c {
            bytes.push((px[ch * h * w + i] * 255.0).round() as u8);
        }
    }
    let color = if c == 3 { png::ColorType::Rgb } else { png::ColorType::Grayscale };
    encode_png(w, h, color, png::BitDepth::Eight, &bytes)
}

/// 1-bit grayscale PNG.
pub fn mask_to_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let (h, w) = mask.shape();
    let stride = w.div_ceil(8);
    let mut rows = vec![0u8; stride * h];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                rows[r * stride + c / 8] |= 0x80 >> (c % 8);
            }
        }
    }
    encode_png(w, h, png::ColorType::Grayscale, png::BitDepth::One, &rows)
}

/// 8-bit grayscale PNG of vote fractions, value = round(255·vote).
pub fn votes_to_png(votes: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if votes.len() != height * width {
        return Err(Error::Shape(format!("{} votes for a {height}×{width} grid", votes.len())));
    }
    let bytes: Vec<u8> = votes.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

fn decode(bytes: &[u8]) -> Result<image::DynamicImage> {
    image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png)
        .decode()
        .map_err(png_error)
}

/// Decodes an 8-bit PNG into `[0,1]` pixels. Alpha is dropped; gray stays single-channel.
pub fn image_from_png(case_id: &str, bytes: &[u8]) -> Result<ImageSample> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let raw = rgb.as_raw();
        let mut px = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for ch in 0..3 {
                px[ch * h * w + i] = f64::from(raw[i * 3 + ch]) / 255.0;
            }
        }
        ImageSample::new(case_id, h, w, 3, px)
    } else {
        let px = img.to_luma8().as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        ImageSample::new(case_id, h, w, 1, px)
    }
}

/// Decodes a grayscale mask PNG; 0 → 0 and the maximum value (1 at 1-bit, 255 at 8-bit) → 1.
pub fn mask_from_png(bytes: &[u8]) -> Result<BinaryMask> {
    let img = decode(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let luma = img.to_luma8();
    let data = luma
        .as_raw()
        .iter()
        .map(|&b| match b {
            0 => Ok(0),
            255 => Ok(1),
            v => Err(Error::Codec(format!("mask value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(h, w, data)
}

pub fn f64s_to_base64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn f64s_from_base64(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD.decode(s).map_err(|e| Error::Codec(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Codec(format!("{} bytes is not a whole number of f64 values", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn to_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn from_base64(s: &str) -> Result<Vec<u8>> {
    STANDARD.decode(s).map_err(|e| Error::Codec(format!("base64: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let m = BinaryMask::from_fn(19, 23, |r, c| (r * 7 + c * 3) % 5 == 0);
        assert_eq!(mask_from_png(&mask_to_png(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn eight_bit_mask_png_maps_255_to_one() {
        let png = votes_to_png(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert_eq!(mask_from_png(&png).unwrap().data(), &[0, 1, 1, 0]);
        let grey = votes_to_png(&[0.0, 0.5, 1.0, 0.0], 2, 2).unwrap();
        assert!(mask_from_png(&grey).is_err());
    }

    #[test]
    fn image_png_round_trip_on_8bit_grid() {
        let px: Vec<f64> = (0..16 * 16).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = ImageSample::new("c", 16, 16, 1, px).unwrap();
        let back = image_from_png("c", &image_to_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let rgb: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 7) % 256) as f64 / 255.0).collect();
        let img = ImageSample::new("r", 16, 16, 3, rgb).unwrap();
        assert_eq!(image_from_png("r", &image_to_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn votes_png_rounds() {
        let png = votes_to_png(&[0.0, 0.5, 2.0 / 3.0, 1.0], 2, 2).unwrap();
        let img = decode(&png).unwrap().to_luma8();
        assert_eq!(img.as_raw(), &[0, 128, 170, 255]);
    }

    #[test]
    fn base64_floats_are_exact() {
        let v = vec![0.1, -2.5e-300, f64::MAX, 1.0 / 3.0];
        assert_eq!(f64s_from_base64(&f64s_to_base64(&v)).unwrap(), v);
        assert!(f64s_from_base64("AAAA").is_err());
    }
}
