//! Lossless image/mask files and checksums.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};

/// Maps an 8-bit value to `[-1, 1]`.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::unreadable(path, e))
}

/// Loads a grayscale or color image normalized to `[-1, 1]`. Alpha is dropped.
pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = byte_to_unit(p.0[c]);
            }
        }
        ImageTensor::new(3, h, w, data)
    } else {
        let data = img.to_luma8().into_raw().into_iter().map(byte_to_unit).collect();
        ImageTensor::new(1, h, w, data)
    }
}

/// Loads a mask; luma values of 128 and above become 1.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::new(h, w, img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect())
}

pub fn image_to_dynamic(image: &ImageTensor) -> Result<DynamicImage> {
    let (c, h, w) = image.shape();
    match c {
        1 => {
            let raw = image.data().iter().map(|&v| unit_to_byte(v)).collect();
            let buf: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("sized buffer");
            Ok(DynamicImage::ImageLuma8(buf))
        }
        3 => {
            let mut raw = vec![0u8; 3 * h * w];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        raw[(y * w + x) * 3 + ch] = unit_to_byte(image.get(ch, y, x));
                    }
                }
            }
            let buf: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("sized buffer");
            Ok(DynamicImage::ImageRgb8(buf))
        }
        _ => Err(Error::Unsupported(format!("cannot encode a {c}-channel image"))),
    }
}

fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Io(std::io::Error::other(e)))
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    save_png(&image_to_dynamic(image)?, path)
}

/// Writes a mask as single-channel `{0, 255}`.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let raw = mask.data().iter().map(|&v| v * 255).collect();
    let buf: GrayImage =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw).expect("sized buffer");
    save_png(&DynamicImage::ImageLuma8(buf), path)
}

/// Rounds an image to the 8-bit grid used on disk, so in-memory values match
/// what a reload would see.
pub fn quantize(image: &ImageTensor) -> ImageTensor {
    let (c, h, w) = image.shape();
    let data = image.data().iter().map(|&v| byte_to_unit(unit_to_byte(v))).collect();
    ImageTensor::new(c, h, w, data).expect("same shape")
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::unreadable(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
