//! Binary PPM (P6) and PGM (P5) files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType};

use crate::error::{Error, Result};

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn encode(path: &Path, subtype: PnmSubtype, write: impl FnOnce(&mut PnmEncoder<&mut BufWriter<File>>) -> image::ImageResult<()>) -> Result<()> {
    let mut out = create(path)?;
    let mut enc = PnmEncoder::new(&mut out).with_subtype(subtype);
    write(&mut enc).map_err(|e| Error::format(path, e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// P6, maxval 255, interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    debug_assert_eq!(rgb.len(), 3 * width * height);
    encode(path, PnmSubtype::Pixmap(SampleEncoding::Binary), |e| {
        e.encode(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
    })
}

/// P5, maxval 255.
pub fn write_pgm8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    encode(path, PnmSubtype::Graymap(SampleEncoding::Binary), |e| {
        e.encode(gray, width as u32, height as u32, ExtendedColorType::L8)
    })
}

/// P5, maxval 65535, big-endian samples.
///
/// Written directly: the image crate's PNM encoder has no 16-bit path.
pub fn write_pgm16(path: &Path, width: usize, height: usize, gray: &[u16]) -> Result<()> {
    debug_assert_eq!(gray.len(), width * height);
    let mut out = create(path)?;
    let mut bytes = format!("P5\n{width} {height} 65535\n").into_bytes();
    bytes.extend(gray.iter().flat_map(|v| v.to_be_bytes()));
    out.write_all(&bytes)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))?;
    DynamicImage::from_decoder(dec).map_err(|e| Error::format(path, e.to_string()))
}

pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub fn read_ppm(path: &Path) -> Result<Image<u8>> {
    let img = decode(path)?;
    let DynamicImage::ImageRgb8(rgb) = img else {
        return Err(Error::format(path, "expected an 8-bit RGB pixmap"));
    };
    Ok(Image {
        width: rgb.width() as usize,
        height: rgb.height() as usize,
        data: rgb.into_raw(),
    })
}

pub fn read_pgm8(path: &Path) -> Result<Image<u8>> {
    let img = decode(path)?;
    let DynamicImage::ImageLuma8(g) = img else {
        return Err(Error::format(path, "expected an 8-bit graymap"));
    };
    Ok(Image {
        width: g.width() as usize,
        height: g.height() as usize,
        data: g.into_raw(),
    })
}

pub fn read_pgm16(path: &Path) -> Result<Image<u16>> {
    let img = decode(path)?;
    let DynamicImage::ImageLuma16(g) = img else {
        return Err(Error::format(path, "expected a 16-bit graymap"));
    };
    Ok(Image {
        width: g.width() as usize,
        height: g.height() as usize,
        data: g.into_raw(),
    })
}
