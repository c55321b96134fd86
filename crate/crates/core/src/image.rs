use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// A `channels × height × width` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}×{height}×{width} image",
                pixels.len()
            )));
        }
        Ok(Self { channels, height, width, pixels })
    }

    pub fn gray(size: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::new(1, size, size, pixels)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    pub fn replicate_channels(&self, channels: usize) -> Image {
        assert_eq!(self.channels, 1, "only grayscale images are replicated");
        let mut pixels = Vec::with_capacity(self.pixels.len() * channels);
        for _ in 0..channels {
            pixels.extend_from_slice(&self.pixels);
        }
        Image { channels, height: self.height, width: self.width, pixels }
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    /// 8-bit quantization used for PNG export.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.pixels[..self.height * self.width]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_gray8()).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let io_err = |e: png::DecodingError| Error::io(path, std::io::Error::other(e));
        let mut reader = decoder.read_info().map_err(io_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(io_err)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::invalid(format!("{}: expected 8-bit grayscale", path.display())));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let pixels = buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect();
        Image::new(1, h, w, pixels)
    }
}
