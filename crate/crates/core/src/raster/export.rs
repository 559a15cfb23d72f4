use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureImage, RgbImage};
use crate::error::{Error, Result};

/// Magic of the raw feature dump; the last byte is the format version.
const FEATURE_MAGIC: [u8; 4] = *b"FIM\x01";

/// 8-bit RGB PNG, values clamped to `[0, 1]` and rounded.
pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}

/// Flat dump: 16-byte header (magic, width, height, Z as u32 LE) then
/// `H·W·Z` little-endian f64 values.
pub fn write_feature_dump(path: &Path, img: &FeatureImage) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(16 + img.data.len() * 8);
    buf.extend_from_slice(&FEATURE_MAGIC);
    for d in [img.width, img.height, img.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dump written by [`write_feature_dump`]. Alpha is not stored and comes back as zero.
pub fn read_feature_dump(path: &Path) -> Result<FeatureImage> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || bytes[..3] != FEATURE_MAGIC[..3] {
        return Err(Error::format(path, "not a feature dump"));
    }
    if bytes[3] != FEATURE_MAGIC[3] {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: bytes[3] as u32,
            expected: FEATURE_MAGIC[3] as u32,
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, z) = (dim(0), dim(1), dim(2));
    let n = w * h * z;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureImage {
        width: w,
        height: h,
        channels: z,
        data,
        alpha: vec![0.0; w * h],
    })
}
