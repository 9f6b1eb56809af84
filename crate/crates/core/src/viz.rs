//! PNG dumps of the intermediate maps of one forward pass.
//!
//! Similarity maps use a diverging colormap fixed to `[-1, 1]` (blue at -1,
//! white at 0, red at 1) so that maps from different iterations are
//! directly comparable. Coarse maps are enlarged with nearest-neighbour
//! sampling.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::save_png;
use crate::error::{Error, Result};
use crate::pipeline::ForwardOutput;
use crate::types::MaskMap;

/// Similarity scales rendered as heatmaps: the pixel-level and the widest.
pub const HEATMAP_SCALES: [usize; 2] = [0, 3];

/// Gap in pixels between tiles of a strip.
const GAP: u32 = 2;

/// Maps `v` (clamped to `[-1, 1]`) to blue-white-red.
pub fn diverging_color(v: f32) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    let fade = |t: f32| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        [255, fade(v), fade(v)]
    } else {
        [fade(-v), fade(-v), 255]
    }
}

/// Colors an `h×w` map of values in `[-1, 1]`, enlarged `upscale` times.
pub fn similarity_image(values: &[f32], h: usize, w: usize, upscale: usize) -> RgbImage {
    let u = upscale.max(1);
    RgbImage::from_fn((w * u) as u32, (h * u) as u32, |x, y| {
        Rgb(diverging_color(values[(y as usize / u) * w + x as usize / u]))
    })
}

/// Gray image of a mask, enlarged `upscale` times.
pub fn mask_image(mask: &MaskMap, upscale: usize) -> GrayImage {
    let u = upscale.max(1);
    let w = mask.width();
    GrayImage::from_fn((w * u) as u32, (mask.height() * u) as u32, |x, y| {
        let v = mask.get(y as usize / u, x as usize / u);
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Places equally sized tiles side by side on a white background.
pub fn strip(tiles: &[GrayImage]) -> GrayImage {
    let Some(first) = tiles.first() else {
        return GrayImage::new(0, 0);
    };
    let (tw, th) = first.dimensions();
    let n = tiles.len() as u32;
    let mut out = GrayImage::from_pixel(n * tw + (n - 1) * GAP, th, Luma([255]));
    for (i, t) in tiles.iter().enumerate() {
        image::imageops::replace(&mut out, t, (i as u32 * (tw + GAP)) as i64, 0);
    }
    out
}

fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    save_png(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Writes one PNG per iteration mask, heatmaps of the [`HEATMAP_SCALES`]
/// similarity channels per iteration, a strip of
/// the iteration masks, and the fusion panel (recurrent mask, decoder mask,
/// gate, final mask, ground truth). Without `gt` the last tile is black.
/// Returns the written paths.
pub fn write_visualization(dir: &Path, out: &ForwardOutput, gt: Option<&MaskMap>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = out.m_fnl.height();
    let mut written = Vec::new();
    let mut tiles = Vec::new();
    for (k, m) in out.history.iter().enumerate() {
        let path = dir.join(format!("iter_mask_{:02}.png", k + 1));
        let img = mask_image(m, 1);
        write_gray(&path, &img)?;
        written.push(path);
        tiles.push(img);
    }
    if !tiles.is_empty() {
        let path = dir.join("mask_strip.png");
        write_gray(&path, &strip(&tiles))?;
        written.push(path);
    }
    for (k, sim) in out.similarities.iter().enumerate() {
        let Some(sim) = sim else { continue };
        let v = sim.values();
        let (h, w) = (v.height(), v.width());
        for (c, &l) in sim.scales().iter().enumerate() {
            if !HEATMAP_SCALES.contains(&l) {
                continue;
            }
            let path = dir.join(format!("sim_l{l}_iter_{:02}.png", k + 1));
            let img = similarity_image(v.channel(c), h, w, size / h.max(1));
            save_png(|p| img.save_with_format(p, image::ImageFormat::Png), &path)?;
            written.push(path);
        }
    }
    let blank = MaskMap::zeros(size, size);
    let panel = [&out.m_rsr_up, &out.m_dec, &out.g, &out.m_fnl, gt.unwrap_or(&blank)].map(|m| mask_image(m, 1));
    let path = dir.join("fusion_panel.png");
    write_gray(&path, &strip(&panel))?;
    written.push(path);
    Ok(written)
}
