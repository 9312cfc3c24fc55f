//! One composite image per category: a name header over a grid of up to 50
//! randomly chosen, randomly arranged thumbnails. These PNGs are what the
//! agents see of the training data.

use std::io::Cursor;
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Category, ImageRef, TrainingDataset};
use crate::digest::{mix64, sha256_hex};
use crate::font::{glyph, GLYPH_H, GLYPH_W};

pub const MAX_THUMBNAILS: usize = 50;
pub const GRID_COLUMNS: u32 = 10;
pub const THUMB_SIZE: u32 = 96;
pub const HEADER_HEIGHT: u32 = 48;
pub const MONTAGE_WIDTH: u32 = GRID_COLUMNS * THUMB_SIZE;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const LETTERBOX: Rgb<u8> = Rgb([224, 224, 224]);
const HEADER_BG: Rgb<u8> = Rgb([40, 40, 40]);
const HEADER_FG: Rgb<u8> = Rgb([255, 255, 255]);
const GLYPH_SCALE: u32 = 3;
const HEADER_MARGIN: u32 = 12;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MontageError {
    #[error("category {0:?} has no images")]
    EmptyCategory(String),
    #[error("image {0} could not be read back")]
    MissingImage(String),
    #[error("image {id} failed to decode: {reason}")]
    Decode { id: String, reason: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct Montage {
    pub category_name: String,
    /// Chosen images in grid order (row-major).
    pub selected: Vec<ImageRef>,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub png: Arc<Vec<u8>>,
    pub digest: String,
}

/// Indices of the images to show, already in display order.
///
/// Uniform without replacement when `count` exceeds the cap; always shuffled.
pub fn select_indices(count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = if count > MAX_THUMBNAILS {
        rand::seq::index::sample(&mut rng, count, MAX_THUMBNAILS).into_vec()
    } else {
        (0..count).collect()
    };
    chosen.shuffle(&mut rng);
    chosen
}

/// Seed used for the category at `position` when rendering a whole dataset.
pub fn category_seed(seed: u64, position: usize) -> u64 {
    mix64(seed ^ (position as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn render_montage(
    category: &Category,
    dataset: &TrainingDataset,
    seed: u64,
) -> Result<Montage, MontageError> {
    if category.images.is_empty() {
        return Err(MontageError::EmptyCategory(category.name.clone()));
    }
    let order = select_indices(category.images.len(), seed);
    let selected: Vec<ImageRef> = order.iter().map(|&i| category.images[i].clone()).collect();

    let rows = (selected.len() as u32).div_ceil(GRID_COLUMNS);
    let height = HEADER_HEIGHT + rows * THUMB_SIZE;
    let mut canvas = RgbImage::from_pixel(MONTAGE_WIDTH, height, BACKGROUND);
    draw_header(&mut canvas, &category.name);

    for (slot, image_ref) in selected.iter().enumerate() {
        let bytes = dataset
            .image_bytes(&image_ref.id)
            .ok_or_else(|| MontageError::MissingImage(image_ref.id.clone()))?;
        let img = image::load_from_memory(&bytes).map_err(|e| MontageError::Decode {
            id: image_ref.id.clone(),
            reason: e.to_string(),
        })?;
        let thumb = letterbox(&img.to_rgb8());
        let col = slot as u32 % GRID_COLUMNS;
        let row = slot as u32 / GRID_COLUMNS;
        imageops::replace(
            &mut canvas,
            &thumb,
            (col * THUMB_SIZE) as i64,
            (HEADER_HEIGHT + row * THUMB_SIZE) as i64,
        );
    }

    let mut png = Vec::new();
    canvas
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    Ok(Montage {
        category_name: category.name.clone(),
        selected,
        seed,
        width: MONTAGE_WIDTH,
        height,
        digest: sha256_hex(&png),
        png: Arc::new(png),
    })
}

/// One montage per non-empty category, in dataset order.
pub fn render_all(dataset: &TrainingDataset, seed: u64) -> Result<Vec<Montage>, MontageError> {
    dataset
        .categories()
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_empty())
        .map(|(i, c)| render_montage(c, dataset, category_seed(seed, i)))
        .collect()
}

fn letterbox(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let scale = THUMB_SIZE as f64 / w.max(h) as f64;
    let tw = ((w as f64 * scale).round() as u32).clamp(1, THUMB_SIZE);
    let th = ((h as f64 * scale).round() as u32).clamp(1, THUMB_SIZE);
    let resized = imageops::resize(img, tw, th, FilterType::Triangle);
    let mut cell = RgbImage::from_pixel(THUMB_SIZE, THUMB_SIZE, LETTERBOX);
    imageops::replace(
        &mut cell,
        &resized,
        ((THUMB_SIZE - tw) / 2) as i64,
        ((THUMB_SIZE - th) / 2) as i64,
    );
    cell
}

fn header_text(name: &str) -> String {
    let advance = (GLYPH_W + 1) * GLYPH_SCALE;
    let max_chars = ((MONTAGE_WIDTH - 2 * HEADER_MARGIN) / advance) as usize;
    if name.chars().count() <= max_chars {
        name.to_string()
    } else {
        let mut s: String = name.chars().take(max_chars - 3).collect();
        s.push_str("...");
        s
    }
}

fn draw_header(canvas: &mut RgbImage, name: &str) {
    for y in 0..HEADER_HEIGHT {
        for x in 0..MONTAGE_WIDTH {
            canvas.put_pixel(x, y, HEADER_BG);
        }
    }
    let top = (HEADER_HEIGHT - GLYPH_H * GLYPH_SCALE) / 2;
    let advance = (GLYPH_W + 1) * GLYPH_SCALE;
    for (i, c) in header_text(name).chars().enumerate() {
        let left = HEADER_MARGIN + i as u32 * advance;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (1 << (GLYPH_W - 1 - col)) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        canvas.put_pixel(
                            left + col * GLYPH_SCALE + dx,
                            top + row as u32 * GLYPH_SCALE + dy,
                            HEADER_FG,
                        );
                    }
                }
            }
        }
    }
}
