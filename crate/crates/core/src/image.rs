//! Grayscale images, pyramids with precomputed gradients, bilinear sampling
//! and candidate-pixel selection.

use nalgebra::Vector2;
use thiserror::Error;

use crate::geometry::CameraModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImageError {
    #[error("pixel buffer has {got} values, expected {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("image contains a non-finite intensity")]
    NonFinite,
    #[error("{width}x{height} image is too small for {levels} pyramid levels")]
    TooSmall {
        width: usize,
        height: usize,
        levels: usize,
    },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("sample at ({0}, {1}) is outside the image")]
    OutOfBounds(f64, f64),
    #[error("gradient at ({0}, {1}) is too close to the image border")]
    NearBorder(f64, f64),
}

/// Row-major floating point intensities, nominally in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite);
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }

    /// 8-bit sources are mapped to floats without rescaling.
    pub fn from_luma8(width: usize, height: usize, pixels: &[u8]) -> Result<Self, ImageError> {
        GrayImage::new(width, height, pixels.iter().map(|&v| v as f32).collect())
    }

    /// Rounds and clamps to 8 bits.
    pub fn to_luma8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// 2x2 box average; odd trailing rows and columns are dropped.
    pub fn downsample(&self) -> GrayImage {
        let (w, h) = (self.width / 2, self.height / 2);
        GrayImage::from_fn(w, h, |x, y| {
            let (x0, y0) = (2 * x, 2 * y);
            0.25 * (self.get(x0, y0)
                + self.get(x0 + 1, y0)
                + self.get(x0, y0 + 1)
                + self.get(x0 + 1, y0 + 1))
        })
    }

    pub fn sample_bilinear(&self, u: &Vector2<f64>) -> Result<f64, ImageError> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(u.x >= 0.0 && u.y >= 0.0 && u.x <= max_x && u.y <= max_y) {
            return Err(ImageError::OutOfBounds(u.x, u.y));
        }
        Ok(bilinear(&self.data, self.width, self.height, u.x, u.y))
    }

    /// Central differences at integer pixels, bilinearly interpolated.
    pub fn gradient_at(&self, u: &Vector2<f64>) -> Result<Vector2<f64>, ImageError> {
        let max_x = (self.width as f64) - 2.0;
        let max_y = (self.height as f64) - 2.0;
        if !(u.x >= 1.0 && u.y >= 1.0 && u.x <= max_x && u.y <= max_y) {
            return Err(ImageError::NearBorder(u.x, u.y));
        }
        let x0 = (u.x.floor() as usize).min(self.width - 3);
        let y0 = (u.y.floor() as usize).min(self.height - 3);
        let fx = u.x - x0 as f64;
        let fy = u.y - y0 as f64;
        let g = |x: usize, y: usize| -> (f64, f64) {
            (
                0.5 * (self.get(x + 1, y) as f64 - self.get(x - 1, y) as f64),
                0.5 * (self.get(x, y + 1) as f64 - self.get(x, y - 1) as f64),
            )
        };
        let (g00, g10, g01, g11) = (g(x0, y0), g(x0 + 1, y0), g(x0, y0 + 1), g(x0 + 1, y0 + 1));
        let blend = |a: f64, b: f64, c: f64, d: f64| {
            (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
        };
        Ok(Vector2::new(
            blend(g00.0, g10.0, g01.0, g11.0),
            blend(g00.1, g10.1, g01.1, g11.1),
        ))
    }

    /// Central-difference gradient magnitude at an interior integer pixel.
    pub fn gradient_magnitude(&self, x: usize, y: usize) -> f64 {
        let gx = 0.5 * (self.get(x + 1, y) as f64 - self.get(x - 1, y) as f64);
        let gy = 0.5 * (self.get(x, y + 1) as f64 - self.get(x, y - 1) as f64);
        (gx * gx + gy * gy).sqrt()
    }
}

#[inline]
fn bilinear(data: &[f32], width: usize, height: usize, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(width - 2);
    let y0 = (y.floor() as usize).min(height - 2);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let i = y0 * width + x0;
    let (a, b) = (data[i] as f64, data[i + 1] as f64);
    let (c, d) = (data[i + width] as f64, data[i + width + 1] as f64);
    (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * c + fx * d)
}

/// One pyramid level: intensities, central-difference gradients and the
/// intrinsics at that resolution.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub image: GrayImage,
    grad_x: Vec<f32>,
    grad_y: Vec<f32>,
    pub camera: CameraModel,
}

/// Intensity and gradient at a subpixel location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub intensity: f64,
    pub gradient: Vector2<f64>,
}

impl PyramidLevel {
    pub fn new(image: GrayImage, camera: CameraModel) -> Self {
        let (w, h) = (image.width(), image.height());
        let mut grad_x = vec![0.0f32; w * h];
        let mut grad_y = vec![0.0f32; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                grad_x[i] = 0.5 * (image.data[i + 1] - image.data[i - 1]);
                grad_y[i] = 0.5 * (image.data[i + w] - image.data[i - w]);
            }
        }
        PyramidLevel {
            image,
            grad_x,
            grad_y,
            camera,
        }
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    /// `true` when `u` is at least `margin` pixels inside every border.
    #[inline]
    pub fn is_inside(&self, u: &Vector2<f64>, margin: f64) -> bool {
        u.x >= margin
            && u.y >= margin
            && u.x <= (self.width() as f64) - 1.0 - margin
            && u.y <= (self.height() as f64) - 1.0 - margin
    }

    /// Bilinear intensity and gradient. Requires `u` to be at least one pixel
    /// inside the image so that the gradient support is defined.
    #[inline]
    pub fn sample(&self, u: &Vector2<f64>) -> Option<Sample> {
        if !self.is_inside(u, 1.0) {
            return None;
        }
        let (w, h) = (self.width(), self.height());
        Some(Sample {
            intensity: bilinear(&self.image.data, w, h, u.x, u.y),
            gradient: Vector2::new(
                bilinear(&self.grad_x, w, h, u.x, u.y),
                bilinear(&self.grad_y, w, h, u.x, u.y),
            ),
        })
    }

    #[inline]
    pub fn intensity(&self, u: &Vector2<f64>) -> Option<f64> {
        if !self.is_inside(u, 0.0) {
            return None;
        }
        Some(bilinear(&self.image.data, self.width(), self.height(), u.x, u.y))
    }
}

/// Coarse-to-fine image pyramid, level 0 finest.
#[derive(Debug, Clone)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn build(image: GrayImage, camera: CameraModel, n_levels: usize) -> Result<Self, ImageError> {
        if n_levels == 0 {
            return Err(ImageError::NoLevels);
        }
        let need = 1usize << (n_levels - 1);
        if image.width() < need.max(3) || image.height() < need.max(3) {
            return Err(ImageError::TooSmall {
                width: image.width(),
                height: image.height(),
                levels: n_levels,
            });
        }
        let mut levels = Vec::with_capacity(n_levels);
        let mut current = image;
        let mut cam = camera;
        for level in 0..n_levels {
            let next = (level + 1 < n_levels).then(|| current.downsample());
            levels.push(PyramidLevel::new(current, cam));
            cam = cam.downscaled();
            match next {
                Some(img) => current = img,
                None => break,
            }
        }
        Ok(Pyramid { levels })
    }

    /// Largest level count (up to `max_levels`) whose coarsest level is at
    /// least `min_size` pixels on each side.
    pub fn max_levels_for(width: usize, height: usize, max_levels: usize, min_size: usize) -> usize {
        let mut n = 1;
        let (mut w, mut h) = (width / 2, height / 2);
        while n < max_levels && w >= min_size && h >= min_size {
            n += 1;
            w /= 2;
            h /= 2;
        }
        n
    }

    pub fn level(&self, level: usize) -> &PyramidLevel {
        &self.levels[level]
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn camera(&self) -> &CameraModel {
        &self.levels[0].camera
    }

    pub fn image(&self) -> &GrayImage {
        &self.levels[0].image
    }
}

/// Scales a level-0 pixel coordinate to `level` under 2x2 box averaging.
#[inline]
pub fn scale_to_level(u: &Vector2<f64>, level: usize) -> Vector2<f64> {
    if level == 0 {
        return *u;
    }
    let s = 1.0 / (1u32 << level) as f64;
    (u.add_scalar(0.5) * s).add_scalar(-0.5)
}

/// Residual pattern: eight offsets around the point's central pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchPattern {
    pub offsets: [(i32, i32); 8],
}

pub const PATCH_SIZE: usize = 8;

impl PatchPattern {
    pub const SPREAD: PatchPattern = PatchPattern {
        offsets: [
            (0, 0),
            (-2, 0),
            (2, 0),
            (0, -2),
            (0, 2),
            (-1, -1),
            (1, -1),
            (-1, 1),
        ],
    };

    pub fn iter(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        self.offsets
            .iter()
            .map(|&(dx, dy)| Vector2::new(dx as f64, dy as f64))
    }

    /// Largest absolute coordinate among the offsets.
    pub fn radius(&self) -> i32 {
        self.offsets
            .iter()
            .map(|&(x, y)| x.abs().max(y.abs()))
            .max()
            .unwrap_or(0)
    }
}

impl Default for PatchPattern {
    fn default() -> Self {
        PatchPattern::SPREAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateSelection {
    /// Side of the square selection blocks, in level-0 pixels.
    pub block_size: usize,
    /// Added to the block's median gradient magnitude to form its threshold.
    pub threshold_margin: f64,
    /// Pixels closer than this to any border are never selected.
    pub border: usize,
}

impl Default for CandidateSelection {
    fn default() -> Self {
        CandidateSelection {
            block_size: 16,
            threshold_margin: 7.0,
            border: 8,
        }
    }
}

/// Candidate pixel with its gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub x: usize,
    pub y: usize,
    pub gradient: f64,
}

/// Picks at most one pixel per block: the block's gradient-magnitude maximum,
/// kept only if it beats the block median by the configured margin. When more
/// blocks qualify than `target_count`, the strongest are kept.
pub fn select_candidates(
    image: &GrayImage,
    target_count: usize,
    params: &CandidateSelection,
) -> Vec<Candidate> {
    let border = params.border.max(1);
    let (w, h) = (image.width(), image.height());
    if w <= 2 * border || h <= 2 * border || params.block_size == 0 {
        return Vec::new();
    }
    let bs = params.block_size;
    let mut winners = Vec::new();
    let mut mags = Vec::with_capacity(bs * bs);
    let mut by = border;
    while by < h - border {
        let y_end = (by + bs).min(h - border);
        let mut bx = border;
        while bx < w - border {
            let x_end = (bx + bs).min(w - border);
            mags.clear();
            let mut best: Option<Candidate> = None;
            for y in by..y_end {
                for x in bx..x_end {
                    let m = image.gradient_magnitude(x, y);
                    mags.push(m);
                    if best.map_or(true, |b| m > b.gradient) {
                        best = Some(Candidate { x, y, gradient: m });
                    }
                }
            }
            if let Some(best) = best {
                let threshold = median(&mut mags) + params.threshold_margin;
                if best.gradient > threshold {
                    winners.push(best);
                }
            }
            bx += bs;
        }
        by += bs;
    }
    if winners.len() > target_count {
        // Stable sort keeps row-major order among equal magnitudes.
        winners.sort_by(|a, b| b.gradient.total_cmp(&a.gradient));
        winners.truncate(target_count);
        winners.sort_by_key(|c| (c.y, c.x));
    }
    winners
}

fn median(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
