//! Grayscale image loading, saving, and range conversion.
//!
//! Images are kept as `f64` intensities. Loading from integer formats
//! guarantees [0,1]; corruption can push values outside that range, which
//! is deliberate — clamping happens only when writing pixels back to disk.
//!
//! Color inputs are reduced to luminance with the ITU-R BT.601 weights
//! (Y = 0.299 R + 0.587 G + 0.114 B on [0,1] channels); chroma is
//! discarded. Network code sees intensities shifted to [-0.5, 0.5] via
//! [`to_net_range`].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel image with `f64` intensities, nominally in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    source: Option<String>,
    bit_depth: u8,
}

impl GrayImage {
    /// Wraps raw intensities; values may lie outside [0,1] (noisy data).
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArg("image extent must be >= 1".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(
                "GrayImage::new",
                format!("{} pixels for {height}x{width}", pixels.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            pixels,
            source: None,
            bit_depth: 8,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    /// Path the image was loaded from, if any.
    pub fn source(&self) -> Option<&str> {
        self.source.as_deref()
    }

    /// Integer depth of the original file (8 or 16); 8 for synthesized images.
    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// File stem used to tie evaluation noise streams to this image.
    pub fn id(&self) -> String {
        match &self.source {
            Some(s) => Path::new(s)
                .file_stem()
                .map(|v| v.to_string_lossy().into_owned())
                .unwrap_or_else(|| s.clone()),
            None => format!("mem-{}x{}", self.height, self.width),
        }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Loads a PNG or binary PGM as grayscale.
///
/// Color inputs collapse to BT.601 luma; alpha, if present, is ignored.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::ImageFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            detail: "zero-size image".into(),
        });
    }
    let (pixels, bit_depth) = match &decoded {
        DynamicImage::ImageLuma8(img) => {
            (img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 8)
        }
        DynamicImage::ImageLumaA8(img) => {
            (img.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), 8)
        }
        DynamicImage::ImageLuma16(img) => {
            (img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(), 16)
        }
        DynamicImage::ImageRgb8(img) => (
            img.pixels()
                .map(|p| {
                    (LUMA_R * p.0[0] as f64 + LUMA_G * p.0[1] as f64 + LUMA_B * p.0[2] as f64)
                        / 255.0
                })
                .collect(),
            8,
        ),
        DynamicImage::ImageRgba8(img) => (
            img.pixels()
                .map(|p| {
                    (LUMA_R * p.0[0] as f64 + LUMA_G * p.0[1] as f64 + LUMA_B * p.0[2] as f64)
                        / 255.0
                })
                .collect(),
            8,
        ),
        other => {
            return Err(Error::ImageFormat {
                path: path.to_path_buf(),
                detail: format!("unsupported color type {:?}", other.color()),
            })
        }
    };
    Ok(GrayImage {
        height: h,
        width: w,
        pixels,
        source: Some(path.display().to_string()),
        bit_depth,
    })
}

/// Clamps to [0,1], quantizes to 8 bits (round half away from zero), and
/// writes PNG or binary PGM depending on the extension.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(bad) = img.pixels.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArg(format!(
            "cannot save non-finite pixel value {bad}"
        )));
    }
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" => {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_raw(img.width as u32, img.height as u32, bytes)
                    .expect("buffer sized from image extents");
            buf.save(path).map_err(|e| Error::ImageFormat {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
        }
        "pgm" => {
            // Binary P5, written directly: header then one byte per pixel.
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&bytes);
            std::fs::write(path, out).map_err(|e| Error::io(path, e))
        }
        other => Err(Error::InvalidArg(format!(
            "unsupported output extension {other:?}; use .png or .pgm"
        ))),
    }
}

/// Loads every PNG/PGM in a directory, sorted by file name so corpus
/// order (and everything seeded by it) is stable across machines.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<GrayImage>> {
    let dir = dir.as_ref();
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && matches!(
                    p.extension()
                        .map(|e| e.to_string_lossy().to_ascii_lowercase())
                        .as_deref(),
                    Some("png") | Some("pgm")
                )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no .png or .pgm images in {}",
            dir.display()
        )));
    }
    paths.iter().map(load_image).collect()
}

/// Shifts intensities to the network's [-0.5, 0.5] range as a
/// `(1, h, w, 1)` tensor.
pub fn to_net_range(img: &GrayImage) -> Tensor {
    let data = img.pixels.iter().map(|&v| v - 0.5).collect();
    Tensor::from_vec(1, img.height, img.width, 1, data)
        .expect("pixel count matches image extents")
}

/// Inverse of [`to_net_range`]: shifts back and clamps to [0,1].
pub fn from_net_range(t: &Tensor) -> Result<GrayImage> {
    let (n, h, w, c) = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(
            "from_net_range",
            format!("expected (1,h,w,1), got {:?}", t.shape()),
        ));
    }
    let pixels = t.data().iter().map(|&v| (v + 0.5).clamp(0.0, 1.0)).collect();
    GrayImage::new(h, w, pixels)
}
