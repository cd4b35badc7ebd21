//! Window a 16-bit DICOM image into 8-bit grayscale and save it as PNG.
//!
//! cargo run --example dicom_windowing -- [input.dcm] [output.png]
//! Without an input, a synthetic gradient image is generated.

use std::fs;

use groundcxr::ingest::{encode_dicom, encode_png, normalize_pixels, read_dicom_tags, Photometric, RawImage};
use groundcxr::ImageDims;

fn synthetic() -> Result<Vec<u8>, Box<dyn std::error::Error>> {
    let (w, h) = (256u32, 64u32);
    let pixels = (0..w * h).map(|i| ((i % w) * 16) as u16).collect();
    let image = RawImage::new(pixels, ImageDims::new(w, h)?, 12, Photometric::Monochrome1, Some(2048.0), Some(4096.0))?;
    Ok(encode_dicom(&image))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let bytes = match args.next() {
        Some(path) => fs::read(path)?,
        None => synthetic()?,
    };
    let out = args.next().unwrap_or_else(|| std::env::temp_dir().join("windowed.png").display().to_string());

    let raw = read_dicom_tags(&bytes)?;
    println!(
        "{}x{} {} bits, {}, window {:?}",
        raw.dims().width,
        raw.dims().height,
        raw.bits_stored(),
        raw.photometric().as_str(),
        raw.window()
    );
    let gray = normalize_pixels(&raw);
    let row: Vec<u8> = gray.data.iter().step_by(32).take(8).copied().collect();
    println!("first row, every 32nd pixel: {row:?}");
    fs::write(&out, encode_png(&gray)?)?;
    println!("wrote {out}");
    Ok(())
}
