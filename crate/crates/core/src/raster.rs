//! Channel-interleaved `f64` images and the crop/resize used for templates
//! and search regions.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Height × width × channels, channels interleaved, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// A square crop window in pixel coordinates of a source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropRegion {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropRegion {
    pub fn x0(&self) -> f64 {
        self.cx - self.side / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.side / 2.0
    }

    /// Maps a pixel-space `[cx, cy, w, h]` box into normalized crop coordinates.
    pub fn to_crop(&self, b: [f64; 4]) -> [f64; 4] {
        [(b[0] - self.x0()) / self.side, (b[1] - self.y0()) / self.side, b[2] / self.side, b[3] / self.side]
    }

    /// Inverse of [`CropRegion::to_crop`].
    pub fn from_crop(&self, b: [f64; 4]) -> [f64; 4] {
        [self.x0() + b[0] * self.side, self.y0() + b[1] * self.side, b[2] * self.side, b[3] * self.side]
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "image buffer size mismatch");
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    pub fn scale(&self, a: f64) -> Image {
        Image { data: self.data.iter().map(|v| v * a).collect(), ..self.clone() }
    }

    /// Bilinear sample at continuous pixel coordinates, where pixel `(i, j)`
    /// has its centre at `(j, i)`. Outside the image reads as zero.
    fn sample(&self, y: f64, x: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
                let w = wy * wx;
                if w == 0.0 {
                    continue;
                }
                let yy = y0 as isize + dy;
                let xx = x0 as isize + dx;
                if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                    continue;
                }
                let base = (yy as usize * self.width + xx as usize) * self.channels;
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * self.data[base + c];
                }
            }
        }
    }

    /// Resamples `region` to an `out × out` image; the area outside the
    /// source is zero-padded.
    pub fn crop_resize(&self, region: &CropRegion, out: usize) -> Image {
        let mut dst = Image::new(out, out, self.channels);
        let step = region.side / out as f64;
        let mut px = vec![0.0; self.channels];
        for i in 0..out {
            let y = region.y0() + (i as f64 + 0.5) * step - 0.5;
            for j in 0..out {
                let x = region.x0() + (j as f64 + 0.5) * step - 0.5;
                self.sample(y, x, &mut px);
                dst.pixel_mut(i, j).copy_from_slice(&px);
            }
        }
        dst
    }

    /// Flattens non-overlapping `patch × patch` tiles into rows, tiles in
    /// row-major grid order and each row ordered `(py, px, c)`.
    pub fn to_patches(&self, patch: usize) -> Result<Matrix> {
        if !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}px patches",
                self.height, self.width
            )));
        }
        let (gh, gw) = (self.height / patch, self.width / patch);
        let cols = patch * patch * self.channels;
        let mut m = Matrix::zeros(gh * gw, cols);
        for gi in 0..gh {
            for gj in 0..gw {
                let row = m.row_mut(gi * gw + gj);
                let mut k = 0;
                for py in 0..patch {
                    let y = gi * patch + py;
                    let start = (y * self.width + gj * patch) * self.channels;
                    let len = patch * self.channels;
                    row[k..k + len].copy_from_slice(&self.data[start..start + len]);
                    k += len;
                }
            }
        }
        Ok(m)
    }

    /// Reads an 8-bit PNG as RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Ok(Image::from_vec(h as usize, w as usize, 3, data))
    }

    /// Writes a 1- or 3-channel image as an 8-bit PNG (values clamped to `[0, 1]`).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("buffer size").save(path),
            1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("buffer size").save(path),
            c => return Err(Error::Shape(format!("cannot write a {c}-channel image as PNG"))),
        };
        res.map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Rounds every value to the nearest 8-bit level, as a PNG round trip would.
    pub fn quantized(&self) -> Image {
        Image { data: self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect(), ..self.clone() }
    }
}
