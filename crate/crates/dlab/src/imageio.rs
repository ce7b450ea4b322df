//! Grayscale image writing (binary PGM, optional PNG) and tile montages.

use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;

/// Row-major grayscale raster with values in [0, 1].
#[derive(Debug, Clone)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    /// View a [1, H, W] tensor as an image.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [1, H, W], got {s:?}");
        assert_eq!(s[0], 1, "expected single channel, got {s:?}");
        GrayImage {
            width: s[2],
            height: s[1],
            data: t.data().to_vec(),
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(img: &GrayImage, path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.to_bytes())?;
    f.flush()
}

pub fn write_png(img: &GrayImage, path: &Path) -> Result<(), image::ImageError> {
    let buf =
        image::GrayImage::from_raw(img.width as u32, img.height as u32, img.to_bytes())
            .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
}

/// Lay out equally sized tiles in a grid with `sep`-pixel separators.
/// Missing tiles (when `tiles.len() < rows * cols`) stay background.
pub fn montage(tiles: &[GrayImage], cols: usize, sep: usize, sep_value: f64) -> GrayImage {
    assert!(!tiles.is_empty());
    let (tw, th) = (tiles[0].width, tiles[0].height);
    assert!(tiles.iter().all(|t| t.width == tw && t.height == th));
    let rows = tiles.len().div_ceil(cols);
    let width = cols * tw + (cols - 1) * sep;
    let height = rows * th + (rows - 1) * sep;
    let mut out = GrayImage::new(width, height);
    for v in out.data.iter_mut() {
        *v = sep_value;
    }
    for (idx, tile) in tiles.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        let (y0, x0) = (r * (th + sep), c * (tw + sep));
        for y in 0..th {
            let dst = (y0 + y) * width + x0;
            out.data[dst..dst + tw].copy_from_slice(&tile.data[y * tw..(y + 1) * tw]);
        }
    }
    // clear any unused trailing cells back to background
    for idx in tiles.len()..rows * cols {
        let (r, c) = (idx / cols, idx % cols);
        let (y0, x0) = (r * (th + sep), c * (tw + sep));
        for y in 0..th {
            let dst = (y0 + y) * width + x0;
            out.data[dst..dst + tw].fill(0.0);
        }
    }
    out
}
