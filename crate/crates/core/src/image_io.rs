//! PNG input/output and conversions between 8-bit rasters and tensors.

use std::io::Cursor;
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageFormat, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::loss::EXTRACTOR_STRIDE;
use crate::tensor::Tensor;

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 || width == 0 || height == 0 {
            return Err(Error::Image(format!("{} bytes for a {width}x{height} RGB image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("length checked on construction");
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode_png(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// `[1, 3, h, w]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| self.data[(y * w + x) * 3 + c] as f32 / 255.0)
    }

    /// Clamps to `[0, 1]` and rounds to the nearest 8-bit level. Takes batch item 0.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [_, c, h, w] = t.dims();
        if c != 3 {
            return Err(Error::Image(format!("expected 3 channels, got {c}")));
        }
        let mut data = vec![0u8; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = t.at(0, ch, y, x);
                    // NaN clamps to 0.
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    data[(y * w + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        Self::new(w, h, data)
    }
}

/// Bilinear resize of every batch item and channel.
pub fn resize(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = t.dims();
    if height == 0 || width == 0 {
        return Err(Error::Image("resize to an empty image".into()));
    }
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros([n, c, height, width]);
    for b in 0..n {
        for ch in 0..c {
            // Pack one plane into the red channel; the filter treats channels independently.
            let mut plane = Rgb32FImage::new(w as u32, h as u32);
            for (i, px) in plane.pixels_mut().enumerate() {
                px.0[0] = t.at(b, ch, i / w, i % w);
            }
            let small = image::imageops::resize(&plane, width as u32, height as u32, FilterType::Triangle);
            for (i, px) in small.pixels().enumerate() {
                out.set(b, ch, i / width, i % width, px.0[0]);
            }
        }
    }
    Ok(out)
}

/// Scales so the long side is `long_side`, then rounds each side to the
/// nearest positive multiple of the extractor stride.
pub fn fit_long_side(t: &Tensor<f32>, long_side: usize) -> Result<Tensor<f32>> {
    let [_, _, h, w] = t.dims();
    let scale = long_side as f64 / h.max(w) as f64;
    let snap = |v: usize| {
        let s = EXTRACTOR_STRIDE as f64;
        (((v as f64 * scale) / s).round() as usize).max(1) * EXTRACTOR_STRIDE
    };
    resize(t, snap(h), snap(w))
}

/// Label map as an 8-bit grayscale PNG.
pub fn encode_labels(labels: &[usize], width: usize, height: usize) -> Result<Vec<u8>> {
    if labels.len() != width * height {
        return Err(Error::Image(format!("{} labels for a {width}x{height} map", labels.len())));
    }
    let bytes = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Image(format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    let img = GrayImage::from_raw(width as u32, height as u32, bytes).expect("length checked");
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Reads an 8-bit label map. Gray PNGs are taken as-is; RGB(A) maps are
/// accepted only when every pixel is gray.
pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<usize>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(usize::from).collect(),
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            rgb.pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    if r == g && g == b {
                        Ok(usize::from(r))
                    } else {
                        Err(Error::Image("label map pixels must be gray".into()))
                    }
                })
                .collect::<Result<Vec<_>>>()?
        }
        other => return Err(Error::Image(format!("unsupported label map color type {:?}", other.color()))),
    };
    Ok((labels, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = ImageBuffer::new(5, 3, data).unwrap();
        let back = ImageBuffer::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);
        assert_eq!(ImageBuffer::from_tensor(&img.to_tensor()).unwrap(), img);
    }

    #[test]
    fn tensor_export_clamps() {
        let t = Tensor::from_fn([1, 3, 1, 2], |_, _, _, x| if x == 0 { -0.5 } else { 1.7 });
        assert_eq!(ImageBuffer::from_tensor(&t).unwrap().data(), &[0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn fit_long_side_snaps_to_stride() {
        let t = Tensor::zeros([1, 3, 30, 100]);
        assert_eq!(fit_long_side(&t, 128).unwrap().dims(), [1, 3, 40, 128]);
    }

    #[test]
    fn label_round_trip() {
        let labels = vec![0, 1, 2, 3, 255, 7];
        let png = encode_labels(&labels, 3, 2).unwrap();
        assert_eq!(decode_labels(&png).unwrap(), (labels, 3, 2));
        assert!(encode_labels(&[256], 1, 1).is_err());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(ImageBuffer::decode_png(b"not a png").is_err());
        assert!(decode_labels(b"nope").is_err());
    }
}
