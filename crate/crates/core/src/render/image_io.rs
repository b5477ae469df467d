//! 8-bit PNG and raw float image files.
//!
//! Raw dump layout (little-endian): magic `"PDSIMG\0\0"`, `u32` height,
//! `u32` width, `u32` channels, then `f64` values in `[H, W, C]` row-major
//! order.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{write_f64s, Reader};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 8] = b"PDSIMG\0\0";

fn hwc(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(contract(format!("expected an [H, W, C] image, got {:?}", img.shape()))),
    }
}

pub fn to_rgb8(img: &Tensor) -> Result<Vec<u8>> {
    let (_, _, c) = hwc(img)?;
    if c != 3 {
        return Err(contract("PNG output needs 3 channels"));
    }
    Ok(img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

pub fn save_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, _) = hwc(img)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_rgb8(img)?)
        .ok_or_else(|| contract("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Tensor::new(&[h as usize, w as usize, 3], data))
}

pub fn write_raw(img: &Tensor, mut w: impl Write) -> Result<()> {
    let (h, wd, c) = hwc(img)?;
    w.write_all(RAW_MAGIC)?;
    for v in [h, wd, c] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    write_f64s(&mut w, img.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_raw(r: impl Read) -> Result<Tensor> {
    let mut r = Reader(r);
    if r.bytes(8)? != RAW_MAGIC {
        return Err(Error::Format("not a raw image dump (bad magic)".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let c = r.u32()? as usize;
    Ok(Tensor::new(&[h, w, c], r.f64s(h * w * c)?))
}

pub fn save_raw(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_raw(img, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    read_raw(std::io::BufReader::new(std::fs::File::open(path)?))
}
