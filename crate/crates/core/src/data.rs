//! Synthetic inharmonious images, dataset storage and the iHarmony4
//! adapter.
//!
//! A sample is a procedurally generated base image whose pixels inside a
//! random region (ellipse or star polygon, under half the image) receive a
//! color shift: hue rotation about the gray axis, then per-channel gain and
//! bias, then gamma, then clamping to `[0, 1]`. Each sample is a pure
//! function of `(master seed, index, config)`.
//!
//! On disk a dataset directory holds
//!
//! ```text
//! images/<id>.png   8-bit RGB
//! masks/<id>.png    8-bit gray, 0 or 255
//! meta/<id>.toml    seed, shift and region of synthetic samples
//! split.txt         "train <id>" / "test <id>" lines
//! ```
//!
//! An iHarmony4-style directory (`composite_images/`, `masks/`) is also
//! accepted: `composite_images/<name>_<k>_<v>.jpg` pairs with
//! `masks/<name>_<k>.png`, and the split comes from `*_train.txt` /
//! `*_test.txt` listing composite paths when present.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng, Rng};
use crate::types::{FeatureMap, MaskMap};

/// Generation settings for synthetic datasets.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub size: usize,
    pub min_area: f64,
    pub max_area: f64,
    /// Minimum mean absolute per-channel change over the region.
    pub min_shift_delta: f32,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            size: 64,
            min_area: 0.02,
            max_area: 0.5,
            min_shift_delta: 0.08,
            train_fraction: 0.8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidArgument(format!("image size {} too small", self.size)));
        }
        if !(0.0 < self.min_area && self.min_area < self.max_area && self.max_area <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "area bounds need 0 < min_area < max_area <= 0.5, got {} and {}",
                self.min_area, self.max_area
            )));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidArgument("train_fraction outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Color shift applied inside the region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub gamma: f32,
    pub hue_degrees: f32,
}

impl ShiftParams {
    pub const IDENTITY: ShiftParams = ShiftParams {
        gain: [1.0; 3],
        bias: [0.0; 3],
        gamma: 1.0,
        hue_degrees: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let finite = self.gain.iter().chain(&self.bias).chain([&self.gamma, &self.hue_degrees]).all(|v| v.is_finite());
        if !finite || self.gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid shift {self:?}")));
        }
        Ok(())
    }

    fn sample(rng: &mut Rng) -> Self {
        let mut gain = [0.0; 3];
        let mut bias = [0.0; 3];
        for c in 0..3 {
            gain[c] = rng.random_range(0.6..1.4);
            bias[c] = rng.random_range(-0.15..0.15);
        }
        ShiftParams {
            gain,
            bias,
            gamma: rng.random_range(-0.5f32..0.5).exp(),
            hue_degrees: rng.random_range(-60.0..60.0),
        }
    }

    /// Rotation about the gray axis `(1,1,1)/√3`, row-major.
    fn hue_matrix(&self) -> [[f32; 3]; 3] {
        let t = (self.hue_degrees as f64).to_radians();
        let (c, s) = (t.cos(), t.sin());
        let k = 1.0 / 3.0;
        let r = (1.0 / 3.0f64).sqrt();
        let a = (c + (1.0 - c) * k) as f32;
        let b = ((1.0 - c) * k - s * r) as f32;
        let d = ((1.0 - c) * k + s * r) as f32;
        [[a, b, d], [d, a, b], [b, d, a]]
    }

    fn apply_pixel(&self, rgb: [f32; 3], hue: Option<&[[f32; 3]; 3]>) -> [f32; 3] {
        let mut v = rgb;
        if let Some(m) = hue {
            v = [0, 1, 2].map(|i| m[i][0] * rgb[0] + m[i][1] * rgb[1] + m[i][2] * rgb[2]);
        }
        for c in 0..3 {
            v[c] = v[c] * self.gain[c] + self.bias[c];
            if self.gamma != 1.0 {
                v[c] = v[c].clamp(0.0, 1.0).powf(self.gamma);
            }
            v[c] = v[c].clamp(0.0, 1.0);
        }
        v
    }
}

/// Shape of a generated region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionDescriptor {
    Ellipse {
        center: [f32; 2],
        radii: [f32; 2],
        angle_degrees: f32,
    },
    Polygon {
        center: [f32; 2],
        /// `(y, x)` vertices in pixel units.
        vertices: Vec<[f32; 2]>,
    },
}

/// Record stored in `meta/<id>.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub area_fraction: f64,
    pub shift: ShiftParams,
    pub region: RegionDescriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `3×h×w`, values in `[0, 1]`.
    pub image: FeatureMap,
    /// Binary ground truth.
    pub mask: MaskMap,
    pub meta: Option<SampleMeta>,
}

fn smooth_noise(rng: &mut Rng, size: usize, blobs: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..size as f32);
        let cx = rng.random_range(0.0..size as f32);
        let sigma = rng.random_range(0.05..0.3) * size as f32;
        let amp = rng.random_range(-1.0f32..1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                out[y * size + x] += amp * (-d2 * inv).exp();
            }
        }
    }
    out
}

/// Smooth gradient plus blurred color blobs plus mild noise.
pub fn generate_base_image(rng: &mut Rng, size: usize) -> FeatureMap {
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let base: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(0.2..0.8));
    let slope: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.35..0.35));
    let n_blobs = rng.random_range(4..9);
    let blobs = smooth_noise(rng, size, n_blobs);
    let tint: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-0.3..0.3));
    for y in 0..size {
        for x in 0..size {
            let t = ((y as f32 * dy + x as f32 * dx) / size as f32) - 0.5;
            let p = y * size + x;
            for c in 0..3 {
                let noise = rng.random_range(-0.02..0.02);
                data[c * plane + p] = (base[c] + slope[c] * t + tint[c] * blobs[p] + noise).clamp(0.0, 1.0);
            }
        }
    }
    FeatureMap::new(3, size, size, data).expect("finite by construction")
}

fn point_in_polygon(py: f32, px: f32, verts: &[[f32; 2]]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let ([yi, xi], [yj, xj]) = (verts[i], verts[j]);
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Keeps only the largest 4-connected component.
fn largest_component(fill: &[bool], size: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; fill.len()];
    let mut best = (0usize, usize::MAX);
    let mut stack = Vec::new();
    let mut next = 0;
    for start in 0..fill.len() {
        if !fill[start] || label[start] != usize::MAX {
            continue;
        }
        let mut count = 0;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            count += 1;
            let (y, x) = (p / size, p % size);
            let mut visit = |q: usize| {
                if fill[q] && label[q] == usize::MAX {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - size);
            }
            if y + 1 < size {
                visit(p + size);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < size {
                visit(p + 1);
            }
        }
        if count > best.0 {
            best = (count, next);
        }
        next += 1;
    }
    label.iter().map(|&l| l == best.1).collect()
}

fn draw_region(rng: &mut Rng, size: usize) -> (Vec<bool>, RegionDescriptor) {
    let s = size as f32;
    let center = [rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s)];
    if rng.random_bool(0.5) {
        let radii = [rng.random_range(0.08 * s..0.4 * s), rng.random_range(0.08 * s..0.4 * s)];
        let angle_degrees: f32 = rng.random_range(0.0..180.0);
        let (sin, cos) = angle_degrees.to_radians().sin_cos();
        let mut fill = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f32 + 0.5 - center[0], x as f32 + 0.5 - center[1]);
                let u = px * cos + py * sin;
                let v = -px * sin + py * cos;
                fill[y * size + x] = (u / radii[1]).powi(2) + (v / radii[0]).powi(2) <= 1.0;
            }
        }
        (
            fill,
            RegionDescriptor::Ellipse {
                center,
                radii,
                angle_degrees,
            },
        )
    } else {
        let n = rng.random_range(5..10);
        let outer = rng.random_range(0.12 * s..0.4 * s);
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        let vertices: Vec<[f32; 2]> = (0..n)
            .map(|i| {
                let a = phase + i as f32 * std::f32::consts::TAU / n as f32;
                let r = outer * rng.random_range(0.45..1.0);
                [center[0] + r * a.sin(), center[1] + r * a.cos()]
            })
            .collect();
        let mut fill = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                fill[y * size + x] = point_in_polygon(y as f32 + 0.5, x as f32 + 0.5, &vertices);
            }
        }
        (fill, RegionDescriptor::Polygon { center, vertices })
    }
}

const MAX_ATTEMPTS: usize = 1000;

/// A single filled, 4-connected region with area fraction in
/// `[min_area, max_area)`.
pub fn generate_region_mask(rng: &mut Rng, size: usize, min_area: f64, max_area: f64) -> Result<(MaskMap, RegionDescriptor)> {
    if !(0.0 < min_area && min_area < max_area && max_area <= 0.5) {
        return Err(Error::InvalidArgument(format!("area bounds {min_area}..{max_area} invalid")));
    }
    for _ in 0..MAX_ATTEMPTS {
        let (fill, region) = draw_region(rng, size);
        let fill = largest_component(&fill, size);
        let area = fill.iter().filter(|&&f| f).count() as f64 / (size * size) as f64;
        if area >= min_area && area < max_area {
            let values = fill.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
            return Ok((MaskMap::new(size, size, values)?, region));
        }
    }
    Err(Error::Dataset(format!(
        "no region with area in [{min_area}, {max_area}) after {MAX_ATTEMPTS} attempts"
    )))
}

/// Applies `shift` where the mask is 1; every other pixel is copied
/// unchanged.
pub fn apply_shift(image: &FeatureMap, mask: &MaskMap, shift: &ShiftParams) -> Result<FeatureMap> {
    shift.validate()?;
    if image.channels() != 3 || image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::shape(
            "apply_shift",
            format!("3x{}x{}", mask.height(), mask.width()),
            format!("{}x{}x{}", image.channels(), image.height(), image.width()),
        ));
    }
    if *shift == ShiftParams::IDENTITY {
        return Ok(image.clone());
    }
    let hue = (shift.hue_degrees != 0.0).then(|| shift.hue_matrix());
    let plane = mask.len();
    let mut data = image.values().to_vec();
    for (p, &m) in mask.values().iter().enumerate() {
        if m < 0.5 {
            continue;
        }
        let rgb = [data[p], data[plane + p], data[2 * plane + p]];
        let out = shift.apply_pixel(rgb, hue.as_ref());
        for c in 0..3 {
            data[c * plane + p] = out[c];
        }
    }
    FeatureMap::new(3, image.height(), image.width(), data)
}

fn region_delta(a: &FeatureMap, b: &FeatureMap, mask: &MaskMap) -> f32 {
    let plane = mask.len();
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (p, &m) in mask.values().iter().enumerate() {
        if m >= 0.5 {
            for c in 0..3 {
                total += (a.values()[c * plane + p] - b.values()[c * plane + p]).abs() as f64;
            }
            n += 3;
        }
    }
    (total / n.max(1) as f64) as f32
}

pub fn sample_id(index: usize) -> String {
    format!("s{index:05}")
}

/// Sample `index` of the dataset with master seed `seed`.
pub fn generate_sample(seed: u64, index: usize, cfg: &DataConfig) -> Result<SamplePair> {
    cfg.validate()?;
    let sample_seed = derive_seed(seed, index as u64);
    let mut rng = seeded_rng(sample_seed);
    let base = generate_base_image(&mut rng, cfg.size);
    let (mask, region) = generate_region_mask(&mut rng, cfg.size, cfg.min_area, cfg.max_area)?;
    for _ in 0..MAX_ATTEMPTS {
        let shift = ShiftParams::sample(&mut rng);
        let image = apply_shift(&base, &mask, &shift)?;
        if region_delta(&base, &image, &mask) >= cfg.min_shift_delta {
            return Ok(SamplePair {
                id: sample_id(index),
                image,
                meta: Some(SampleMeta {
                    seed: sample_seed,
                    area_fraction: mask.foreground_fraction(),
                    shift,
                    region,
                }),
                mask,
            });
        }
    }
    Err(Error::Dataset(format!("no shift above the minimum delta for sample {index}")))
}

/// `n` samples, each quantized to 8-bit precision so in-memory data equals
/// what a save/load round trip returns.
pub fn make_dataset(seed: u64, n: usize, cfg: &DataConfig) -> Result<Vec<SamplePair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    (0..n)
        .map(|i| generate_sample(seed, i, cfg).map(|s| s.quantized()))
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl SamplePair {
    /// Rounds the image to 8-bit levels.
    pub fn quantized(mut self) -> Self {
        let values = self.image.values().iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        self.image = FeatureMap::new(3, self.image.height(), self.image.width(), values).expect("valid");
        self
    }

    /// Resizes image (bilinear) and mask (nearest) to `size`×`size`.
    pub fn resized(&self, size: usize) -> Result<SamplePair> {
        if self.mask.height() == size && self.mask.width() == size {
            return Ok(self.clone());
        }
        let rgb = image::imageops::resize(&to_rgb(&self.image), size as u32, size as u32, image::imageops::FilterType::Triangle);
        let gray = image::imageops::resize(&to_gray(&self.mask), size as u32, size as u32, image::imageops::FilterType::Nearest);
        Ok(SamplePair {
            id: self.id.clone(),
            image: from_rgb(&rgb)?,
            mask: from_gray(&gray)?,
            meta: self.meta.clone(),
        })
    }
}

/// Bilinear resize of an RGB image to `size`×`size`.
pub fn resize_image(image: &FeatureMap, size: usize) -> Result<FeatureMap> {
    if image.channels() != 3 {
        return Err(Error::shape("resize_image", 3, image.channels()));
    }
    if image.height() == size && image.width() == size {
        return Ok(image.clone());
    }
    from_rgb(&image::imageops::resize(&to_rgb(image), size as u32, size as u32, image::imageops::FilterType::Triangle))
}

fn to_rgb(img: &FeatureMap) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let v = img.values();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb([to_u8(v[p]), to_u8(v[plane + p]), to_u8(v[2 * plane + p])])
    })
}

fn from_rgb(img: &RgbImage) -> Result<FeatureMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    FeatureMap::new(3, h, w, data)
}

fn to_gray(mask: &MaskMap) -> GrayImage {
    let w = mask.width();
    GrayImage::from_fn(w as u32, mask.height() as u32, |x, y| {
        image::Luma([to_u8(mask.values()[y as usize * w + x as usize])])
    })
}

fn from_gray(img: &GrayImage) -> Result<MaskMap> {
    MaskMap::new(
        img.height() as usize,
        img.width() as usize,
        img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
    )
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn save_png(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an RGB image as `3×h×w` values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<FeatureMap> {
    from_rgb(&open_image(path)?.to_rgb8())
}

pub fn save_image(path: &Path, image: &FeatureMap) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("save_image", 3, image.channels()));
    }
    let rgb = to_rgb(image);
    save_png(|p| rgb.save_with_format(p, image::ImageFormat::Png), path)
}

/// Reads a grayscale mask; values become `v / 255`.
pub fn load_mask(path: &Path) -> Result<MaskMap> {
    from_gray(&open_image(path)?.to_luma8())
}

/// Writes a mask as 8-bit grayscale PNG.
pub fn save_mask(path: &Path, mask: &MaskMap) -> Result<()> {
    let gray = to_gray(mask);
    save_png(|p| gray.save_with_format(p, image::ImageFormat::Png), path)
}

/// Binarizes a loaded ground-truth mask at 0.5.
fn binarize(mask: MaskMap) -> Result<MaskMap> {
    let values = mask.values().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    MaskMap::new(mask.height(), mask.width(), values)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then the first `round(train_fraction · n)` ids train.
pub fn split_ids(ids: &[String], train_fraction: f64, seed: u64) -> Split {
    let mut order = ids.to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded_rng(seed));
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let test = order.split_off(n_train.min(order.len()));
    Split { train: order, test }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<SamplePair>,
    pub split: Split,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(root: PathBuf, samples: Vec<SamplePair>, split: Split) -> Result<Self> {
        let index: HashMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        if index.len() != samples.len() {
            return Err(Error::Dataset("duplicate sample ids".into()));
        }
        for id in split.train.iter().chain(&split.test) {
            if !index.contains_key(id) {
                return Err(Error::Dataset(format!("split names unknown sample {id}")));
            }
        }
        Ok(Dataset {
            root,
            samples,
            split,
            index,
        })
    }

    pub fn get(&self, id: &str) -> Option<&SamplePair> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    /// Samples with the given ids, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<SamplePair>> {
        ids.iter()
            .map(|id| self.get(id).cloned().ok_or_else(|| Error::Dataset(format!("unknown sample {id}"))))
            .collect()
    }

    pub fn train(&self) -> Vec<SamplePair> {
        self.select(&self.split.train).expect("split checked at construction")
    }

    pub fn test(&self) -> Vec<SamplePair> {
        self.select(&self.split.test).expect("split checked at construction")
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(dir: &Path, samples: &[SamplePair], split: &Split) -> Result<()> {
    for s in samples {
        save_image(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        save_mask(&dir.join("masks").join(format!("{}.png", s.id)), &s.mask)?;
        if let Some(meta) = &s.meta {
            let text = toml::to_string(meta).map_err(|e| Error::Dataset(e.to_string()))?;
            write_text(&dir.join("meta").join(format!("{}.toml", s.id)), &text)?;
        }
    }
    let mut text = String::new();
    for id in &split.train {
        writeln!(text, "train {id}").expect("string write");
    }
    for id in &split.test {
        writeln!(text, "test {id}").expect("string write");
    }
    write_text(&dir.join("split.txt"), &text)
}

fn list_stems(dir: &Path, ext: &[&str]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let matches = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ext.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if matches {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn load_native(dir: &Path) -> Result<Dataset> {
    let image_ids = list_stems(&dir.join("images"), &["png"])?;
    let mask_ids = list_stems(&dir.join("masks"), &["png"])?;
    if let Some(id) = image_ids.iter().find(|id| mask_ids.binary_search(id).is_err()) {
        return Err(Error::Dataset(format!("image {id} has no mask")));
    }
    if let Some(id) = mask_ids.iter().find(|id| image_ids.binary_search(id).is_err()) {
        return Err(Error::Dataset(format!("mask {id} has no image")));
    }
    let mut samples = Vec::with_capacity(image_ids.len());
    for id in &image_ids {
        let image = load_image(&dir.join("images").join(format!("{id}.png")))?;
        let mask = binarize(load_mask(&dir.join("masks").join(format!("{id}.png")))?)?;
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::Dataset(format!("image and mask of {id} differ in size")));
        }
        let meta_path = dir.join("meta").join(format!("{id}.toml"));
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            Some(toml::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", meta_path.display())))?)
        } else {
            None
        };
        samples.push(SamplePair {
            id: id.clone(),
            image,
            mask,
            meta,
        });
    }
    let split_path = dir.join("split.txt");
    let split = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let mut split = Split::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match line.split_once(' ') {
                Some(("train", id)) => split.train.push(id.to_string()),
                Some(("test", id)) => split.test.push(id.to_string()),
                _ => return Err(Error::Dataset(format!("bad split line `{line}`"))),
            }
        }
        split
    } else {
        split_ids(&image_ids, DataConfig::default().train_fraction, 0)
    };
    Dataset::new(dir.to_path_buf(), samples, split)
}

/// Mask stem for an iHarmony4 composite stem `<name>_<k>_<v>`.
pub fn iharmony_mask_stem(composite: &str) -> Option<&str> {
    let (rest, variant) = composite.rsplit_once('_')?;
    (!variant.is_empty() && variant.chars().all(|c| c.is_ascii_digit())).then_some(rest)
}

fn load_iharmony(dir: &Path) -> Result<Dataset> {
    let comp_dir = dir.join("composite_images");
    let stems = list_stems(&comp_dir, &["jpg", "jpeg", "png"])?;
    let mut samples = Vec::with_capacity(stems.len());
    for stem in &stems {
        let mask_stem = iharmony_mask_stem(stem)
            .ok_or_else(|| Error::Dataset(format!("composite {stem} does not follow <name>_<k>_<v>")))?;
        let mask_path = dir.join("masks").join(format!("{mask_stem}.png"));
        if !mask_path.exists() {
            return Err(Error::Dataset(format!("composite {stem} has no mask {}", mask_path.display())));
        }
        let image_path = ["jpg", "jpeg", "png"]
            .iter()
            .map(|e| comp_dir.join(format!("{stem}.{e}")))
            .find(|p| p.exists())
            .expect("listed above");
        let image = load_image(&image_path)?;
        let mask = binarize(load_mask(&mask_path)?)?;
        if mask.height() != image.height() || mask.width() != image.width() {
            return Err(Error::Dataset(format!("image and mask of {stem} differ in size")));
        }
        samples.push(SamplePair {
            id: stem.clone(),
            image,
            mask,
            meta: None,
        });
    }
    let mut split = Split::default();
    let mut found_lists = false;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        let target = if name.ends_with("_train.txt") {
            &mut split.train
        } else if name.ends_with("_test.txt") {
            &mut split.test
        } else {
            continue;
        };
        found_lists = true;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let stem = Path::new(line).file_stem().and_then(|s| s.to_str()).unwrap_or(line);
            target.push(stem.to_string());
        }
    }
    if !found_lists {
        split = split_ids(&stems, DataConfig::default().train_fraction, 0);
    }
    split.train.sort();
    split.test.sort();
    Dataset::new(dir.to_path_buf(), samples, split)
}

/// Loads a dataset directory in either the native or the iHarmony4 layout.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    if dir.join("composite_images").is_dir() {
        load_iharmony(dir)
    } else {
        load_native(dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn count_components(mask: &MaskMap) -> usize {
        let size = mask.width();
        let fill: Vec<bool> = mask.values().iter().map(|&v| v >= 0.5).collect();
        let mut seen = vec![false; fill.len()];
        let mut n = 0;
        for s in 0..fill.len() {
            if !fill[s] || seen[s] {
                continue;
            }
            n += 1;
            let mut queue = std::collections::VecDeque::from([s]);
            seen[s] = true;
            while let Some(p) = queue.pop_front() {
                let (y, x) = ((p / size) as isize, (p % size) as isize);
                for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                        let q = yy as usize * size + xx as usize;
                        if fill[q] && !seen[q] {
                            seen[q] = true;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn base_images_are_deterministic_and_varied() {
        let a = generate_base_image(&mut seeded_rng(1), 32);
        let b = generate_base_image(&mut seeded_rng(1), 32);
        let c = generate_base_image(&mut seeded_rng(2), 32);
        assert_eq!(a, b);
        for ch in 0..3 {
            let v = a.channel(ch);
            let mean = v.iter().sum::<f32>() / v.len() as f32;
            assert!(v.iter().map(|x| (x - mean).powi(2)).sum::<f32>() > 0.0);
        }
        let mad = a.values().iter().zip(c.values()).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.values().len() as f32;
        assert!(mad > 0.01);
    }

    #[test]
    fn region_masks_obey_area_and_connectivity() {
        let mut rng = seeded_rng(3);
        for _ in 0..1000 {
            let (m, _) = generate_region_mask(&mut rng, 32, 0.02, 0.5).unwrap();
            let f = m.foreground_fraction();
            assert!((0.02..0.5).contains(&f), "{f}");
        }
        for _ in 0..100 {
            let (m, _) = generate_region_mask(&mut rng, 32, 0.02, 0.5).unwrap();
            assert_eq!(count_components(&m), 1);
        }
        assert!(generate_region_mask(&mut rng, 32, 0.3, 0.6).is_err());
    }

    #[test]
    fn shift_examples() {
        let img = generate_base_image(&mut seeded_rng(4), 16);
        let (mask, _) = generate_region_mask(&mut seeded_rng(5), 16, 0.02, 0.5).unwrap();
        assert_eq!(apply_shift(&img, &mask, &ShiftParams::IDENTITY).unwrap(), img);
        let strong = ShiftParams {
            gain: [1.3, 0.7, 1.1],
            bias: [0.1, -0.1, 0.0],
            gamma: 1.4,
            hue_degrees: 25.0,
        };
        assert_eq!(apply_shift(&img, &MaskMap::zeros(16, 16), &strong).unwrap(), img);

        let gray = FeatureMap::new(3, 1, 1, vec![0.5; 3]).unwrap();
        let gain = ShiftParams {
            gain: [1.3, 0.9, 0.9],
            ..ShiftParams::IDENTITY
        };
        let out = apply_shift(&gray, &MaskMap::constant(1, 1, 1.0), &gain).unwrap();
        for (v, e) in out.values().iter().zip([0.65, 0.45, 0.45]) {
            assert!((v - e).abs() < 1e-6);
        }
        // A gray pixel lies on the rotation axis.
        let hue = ShiftParams {
            hue_degrees: 40.0,
            ..ShiftParams::IDENTITY
        };
        let out = apply_shift(&gray, &MaskMap::constant(1, 1, 1.0), &hue).unwrap();
        assert!(out.values().iter().all(|v| (v - 0.5).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shift_leaves_background_untouched(seed in 0u64..10_000) {
            let mut rng = seeded_rng(seed);
            let img = generate_base_image(&mut rng, 16);
            let (mask, _) = generate_region_mask(&mut rng, 16, 0.02, 0.5).unwrap();
            let shift = ShiftParams::sample(&mut rng);
            let out = apply_shift(&img, &mask, &shift).unwrap();
            for c in 0..3 {
                for (p, &m) in mask.values().iter().enumerate() {
                    let (a, b) = (img.channel(c)[p], out.channel(c)[p]);
                    if m < 0.5 {
                        prop_assert_eq!(a.to_bits(), b.to_bits());
                    }
                    prop_assert!((0.0..=1.0).contains(&b));
                }
            }
        }
    }

    #[test]
    fn samples_respect_invariants() {
        let cfg = DataConfig {
            size: 32,
            ..DataConfig::default()
        };
        let samples = make_dataset(9, 20, &cfg).unwrap();
        for s in &samples {
            assert!(s.mask.foreground_fraction() < 0.5);
            assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
            let meta = s.meta.as_ref().unwrap();
            assert_eq!(meta.area_fraction, s.mask.foreground_fraction());
        }
        assert_eq!(make_dataset(9, 20, &cfg).unwrap(), samples);
        assert!(make_dataset(9, 0, &cfg).is_err());
        // Sample i does not depend on how many samples are generated.
        assert_eq!(make_dataset(9, 5, &cfg).unwrap()[..], samples[..5]);
    }

    #[test]
    fn split_is_deterministic() {
        let ids: Vec<String> = (0..100).map(sample_id).collect();
        let a = split_ids(&ids, 0.8, 42);
        assert_eq!(a, split_ids(&ids, 0.8, 42));
        assert_eq!((a.train.len(), a.test.len()), (80, 20));
        assert_ne!(a, split_ids(&ids, 0.8, 43));
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = DataConfig {
            size: 16,
            ..DataConfig::default()
        };
        let samples = make_dataset(11, 6, &cfg).unwrap();
        let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
        let split = split_ids(&ids, 0.5, 1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &samples, &split).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples, samples);
        assert_eq!(ds.split, split);

        std::fs::remove_file(dir.path().join("masks").join(format!("{}.png", ids[2]))).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&ids[2]), "{err}");
    }

    #[test]
    fn iharmony_layout_is_adapted() {
        assert_eq!(iharmony_mask_stem("a0001_1_3"), Some("a0001_1"));
        assert_eq!(iharmony_mask_stem("plain"), None);
        let dir = tempfile::tempdir().unwrap();
        let img = generate_base_image(&mut seeded_rng(12), 16);
        let (mask, _) = generate_region_mask(&mut seeded_rng(13), 16, 0.02, 0.5).unwrap();
        let rgb = to_rgb(&img);
        let comp = dir.path().join("composite_images");
        std::fs::create_dir_all(&comp).unwrap();
        rgb.save_with_format(comp.join("a0001_1_1.jpg"), image::ImageFormat::Jpeg).unwrap();
        rgb.save_with_format(comp.join("a0001_1_2.jpg"), image::ImageFormat::Jpeg).unwrap();
        save_mask(&dir.path().join("masks").join("a0001_1.png"), &mask).unwrap();
        std::fs::write(dir.path().join("Hsub_train.txt"), "composite_images/a0001_1_1.jpg\n").unwrap();
        std::fs::write(dir.path().join("Hsub_test.txt"), "composite_images/a0001_1_2.jpg\n").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 2);
        assert_eq!(ds.split.train, vec!["a0001_1_1".to_string()]);
        assert_eq!(ds.split.test, vec!["a0001_1_2".to_string()]);
        assert_eq!(ds.get("a0001_1_2").unwrap().mask, mask);
    }

    #[test]
    fn resize_keeps_mask_binary() {
        let s = generate_sample(1, 0, &DataConfig::default()).unwrap();
        let r = s.resized(32).unwrap();
        assert_eq!((r.mask.height(), r.image.height()), (32, 32));
        assert!(r.mask.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
