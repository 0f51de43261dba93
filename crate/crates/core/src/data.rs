//! Image files, noise synthesis and the training stream.
//!
//! Pixels are stored as `f32` on `[0, 1]` in `(C, H, W)` order. Noise levels
//! are always given on the 0–255 scale.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub source_path: Option<PathBuf>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            pixels,
            source_path: None,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.pixels[(c * self.height + h) * self.width + w]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// A `(1, C, H, W)` tensor.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let shape = Shape::new(1, self.channels, self.height, self.width);
        let data = self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect();
        Tensor::from_vec(shape, data).expect("pixel count matches")
    }

    /// Batch item `n` of `t`.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let item = t.batch_item(n)?;
        let s = item.shape();
        Self::new(s.c, s.h, s.w, item.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// The `size × size` block whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            for h in top..top + height {
                let start = (c * self.height + h) * self.width + left;
                pixels.extend_from_slice(&self.pixels[start..start + width]);
            }
        }
        let mut out = Self::new(self.channels, height, width, pixels)?;
        out.source_path = self.source_path.clone();
        Ok(out)
    }
}

/// A deterministic test scene on `[0, 1]`: a shaded background with a few
/// discs and rectangles and a band of texture. Useful wherever a clean image
/// with both flat regions and edges is needed.
pub fn synthetic_image(channels: usize, height: usize, width: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint: Vec<f64> = (0..channels).map(|_| rng.random_range(0.7..1.0)).collect();
    let discs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.25),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    let rect = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4), rng.random_range(0.0..1.0));
    let freq = rng.random_range(0.5..1.5);
    let (hf, wf) = (height as f64, width as f64);
    let mut pixels = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let (u, v) = (y as f64 / hf, x as f64 / wf);
                let mut val = 0.25 + 0.35 * u + 0.15 * v;
                if u > rect.0 && u < rect.0 + 0.3 && v > rect.1 && v < rect.1 + 0.45 {
                    val = rect.2;
                }
                for &(cy, cx, r, level) in &discs {
                    if (u - cy).powi(2) + (v - cx).powi(2) < r * r {
                        val = level;
                    }
                }
                if u > 0.8 {
                    val += 0.15 * (freq * x as f64).sin();
                }
                pixels.push((val * tint[c]).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(channels, height, width, pixels)
}

fn format_for(path: &Path) -> Option<ImageFormat> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "png" => Some(ImageFormat::Png),
        "pgm" | "ppm" | "pnm" | "pbm" => Some(ImageFormat::Pnm),
        _ => None,
    }
}

/// Reads an 8-bit PNG, PGM or PPM file. Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    // The format comes from the file's signature, never its extension.
    let format = match image::guess_format(&bytes) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Pnm)) => f,
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    let decoded = image::load_from_memory_with_format(&bytes, format).map_err(|e| match e {
        image::ImageError::Unsupported(_) => Error::UnsupportedFormat(path.to_path_buf()),
        // The bytes are already in memory, so a read error means truncated data.
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (channels, width, height, bytes) = match decoded {
        DynamicImage::ImageLuma8(b) => (1, b.width(), b.height(), b.into_raw()),
        DynamicImage::ImageLumaA8(_) => {
            let b = decoded.to_luma8();
            (1, b.width(), b.height(), b.into_raw())
        }
        DynamicImage::ImageRgb8(b) => (3, b.width(), b.height(), b.into_raw()),
        DynamicImage::ImageRgba8(_) => {
            let b = decoded.to_rgb8();
            (3, b.width(), b.height(), b.into_raw())
        }
        _ => return Err(Error::UnsupportedFormat(path.to_path_buf())),
    };
    let (h, w) = (height as usize, width as usize);
    let mut pixels = vec![0.0f32; channels * h * w];
    for (i, &b) in bytes.iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        pixels[c * h * w + p] = b as f32 / 255.0;
    }
    let mut img = Image::new(channels, h, w, pixels)?;
    img.source_path = Some(path.to_path_buf());
    Ok(img)
}

/// `round(clamp(v, 0, 1) · 255)`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `img` clamped and quantized to 8 bits. The format follows the
/// extension: `.png`, `.pgm` (grayscale) or `.ppm` (color).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = format_for(path).ok_or_else(|| Error::UnsupportedFormat(path.to_path_buf()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if (ext == "pgm" && img.channels != 1) || (ext == "ppm" && img.channels != 3) {
        return Err(Error::Config(format!(
            "cannot write a {}-channel image as .{ext}",
            img.channels
        )));
    }
    let plane = img.height * img.width;
    let mut bytes = vec![0u8; img.pixels.len()];
    for c in 0..img.channels {
        for p in 0..plane {
            bytes[p * img.channels + c] = quantize(img.pixels[c * plane + p]);
        }
    }
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &bytes, img.width as u32, img.height as u32, color, format).map_err(
        |e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Config(format!("cannot write {}: {other}", path.display())),
        },
    )
}

/// BT.601 luma: `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::shape("image is already grayscale"));
    }
    let plane = img.height * img.width;
    let (r, rest) = img.pixels.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let pixels = (0..plane)
        .map(|i| (0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64) as f32)
        .collect();
    let mut out = Image::new(1, img.height, img.width, pixels)?;
    out.source_path = img.source_path.clone();
    Ok(out)
}

/// Adds i.i.d. `N(0, (sigma/255)²)` noise to every element, without clipping.
pub fn add_awgn<R: Rng>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be a non-negative number, got {sigma}")));
    }
    let mut out = img.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("positive finite std");
    for v in &mut out.pixels {
        *v = (*v as f64 + normal.sample(rng)) as f32;
    }
    Ok(out)
}

/// Top-left corners of `count` uniformly random `size × size` crops.
pub fn patch_corners<R: Rng>(height: usize, width: usize, size: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if size == 0 || size > height || size > width {
        return Err(Error::shape(format!(
            "patch size {size} does not fit a {height}x{width} image"
        )));
    }
    Ok((0..count)
        .map(|_| (rng.random_range(0..=height - size), rng.random_range(0..=width - size)))
        .collect())
}

pub fn extract_patches<R: Rng>(img: &Image, size: usize, count: usize, rng: &mut R) -> Result<Vec<Image>> {
    patch_corners(img.height, img.width, size, count, rng)?
        .into_iter()
        .map(|(top, left)| img.crop(top, left, size, size))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma_min: 0.0,
            sigma_max: 50.0,
        }
    }
}

impl NoiseSpec {
    pub fn fixed(sigma: f64) -> Self {
        NoiseSpec {
            sigma_min: sigma,
            sigma_max: sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.sigma_min && self.sigma_min <= self.sigma_max && self.sigma_max <= 100.0) {
            return Err(Error::Config(format!(
                "noise range [{}, {}] must satisfy 0 <= min <= max <= 100",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sigma_min == self.sigma_max {
            self.sigma_min
        } else {
            rng.random_range(self.sigma_min..=self.sigma_max)
        }
    }
}

/// Every file under `dir`, recursively, in sorted path order.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub patch: usize,
    pub batch: usize,
    pub noise: NoiseSpec,
    /// Convert color files to one channel; otherwise every file must be color.
    pub grayscale: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            patch: 128,
            batch: 4,
            noise: NoiseSpec::default(),
            grayscale: true,
        }
    }
}

/// A pair of `(N, C, P, P)` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

/// Deterministic stream of noisy/clean patch batches.
///
/// Item `g` of the stream (batch `g / batch`, slot `g % batch`) comes from
/// file `perm_e[g mod n]` where `e = g / n` is the epoch and `perm_e` is a
/// shuffle seeded by `(seed, e)`. Its crop position and noise come from a
/// generator seeded by `(seed, g)`, so any batch can be produced on its own.
#[derive(Clone, Debug)]
pub struct TrainingStream {
    images: Vec<Image>,
    config: StreamConfig,
    seed: u64,
    next_batch: u64,
}

const ITEM_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1;

fn derived_rng(seed: u64, kind: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2).wrapping_add(kind));
    rng
}

impl TrainingStream {
    /// Loads every usable image under `dir`. Unreadable files and images
    /// smaller than the patch are skipped with a warning.
    pub fn open(dir: impl AsRef<Path>, config: StreamConfig, seed: u64) -> Result<Self> {
        let dir = dir.as_ref();
        let files = list_files(dir)?;
        let mut images = Vec::new();
        for path in &files {
            match load_image(path) {
                Ok(img) => match Self::prepare(img, &config) {
                    Ok(img) => images.push(img),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                },
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::EmptyDataset(dir.to_path_buf()));
        }
        log::info!("loaded {} of {} files from {}", images.len(), files.len(), dir.display());
        Self::from_images(images, config, seed)
    }

    fn prepare(img: Image, config: &StreamConfig) -> Result<Image> {
        let img = match (config.grayscale, img.channels) {
            (true, 3) => to_grayscale(&img)?,
            (false, 1) => return Err(Error::shape("grayscale file in a color stream")),
            _ => img,
        };
        if img.height < config.patch || img.width < config.patch {
            return Err(Error::shape(format!(
                "{}x{} is smaller than the {} patch",
                img.height, img.width, config.patch
            )));
        }
        Ok(img)
    }

    pub fn from_images(images: Vec<Image>, config: StreamConfig, seed: u64) -> Result<Self> {
        config.noise.validate()?;
        if config.batch == 0 || config.patch == 0 {
            return Err(Error::Config("batch and patch size must be positive".into()));
        }
        if images.is_empty() {
            return Err(Error::Config("a training stream needs at least one image".into()));
        }
        let images = images
            .into_iter()
            .map(|img| Self::prepare(img, &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingStream {
            images,
            config,
            seed,
            next_batch: 0,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len_images(&self) -> usize {
        self.images.len()
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels
    }

    /// Index of the batch the iterator yields next.
    pub fn position(&self) -> u64 {
        self.next_batch
    }

    pub fn seek(&mut self, batch_index: u64) {
        self.next_batch = batch_index;
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut derived_rng(self.seed, EPOCH_STREAM, epoch));
        order
    }

    /// Source image, crop corner, noise level and noise for item `g`.
    fn item(&self, g: u64, order_cache: &mut Option<(u64, Vec<usize>)>) -> (Image, Image) {
        let n = self.images.len() as u64;
        let epoch = g / n;
        if order_cache.as_ref().is_none_or(|(e, _)| *e != epoch) {
            *order_cache = Some((epoch, self.epoch_order(epoch)));
        }
        let file = order_cache.as_ref().expect("just filled").1[(g % n) as usize];
        let img = &self.images[file];
        let mut rng = derived_rng(self.seed, ITEM_STREAM, g);
        let p = self.config.patch;
        let (top, left) = patch_corners(img.height, img.width, p, 1, &mut rng).expect("size checked at load")[0];
        let clean = img.crop(top, left, p, p).expect("corner in range");
        let sigma = self.config.noise.sample(&mut rng);
        let noisy = add_awgn(&clean, sigma, &mut rng).expect("validated sigma");
        (noisy, clean)
    }

    /// Batch number `index`, independent of the iterator position.
    pub fn batch(&self, index: u64) -> Batch {
        let b = self.config.batch as u64;
        let mut cache = None;
        let (noisy, clean): (Vec<_>, Vec<_>) = (index * b..(index + 1) * b)
            .map(|g| {
                let (y, x) = self.item(g, &mut cache);
                (y.to_tensor::<f32>(), x.to_tensor::<f32>())
            })
            .unzip();
        Batch {
            noisy: Tensor::stack(&noisy).expect("equal patch shapes"),
            clean: Tensor::stack(&clean).expect("equal patch shapes"),
        }
    }
}

impl Iterator for TrainingStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let b = self.batch(self.next_batch);
        self.next_batch += 1;
        Some(b)
    }
}
