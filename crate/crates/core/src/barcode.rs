//! Sliding-window barcode localization with a one-class region scorer, plus a
//! synthetic fixture generator.

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::crop;
use crate::stages::features::{extract_histogram_features, FeatureVector};
use crate::stages::one_class::{score_one_class, train_one_class_centroid, OneClassModel};

pub const BACKGROUND_MIN: u8 = 96;
pub const BACKGROUND_MAX: u8 = 160;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub score: f64,
}

impl Window {
    pub fn at(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h, score: 0.0 }
    }
}

/// Pixel-rectangle intersection over union.
pub fn iou(a: &Window, b: &Window) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x)) as u64;
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y)) as u64;
    let inter = ix * iy;
    let union = a.w as u64 * a.h as u64 + b.w as u64 * b.h as u64 - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

fn axis_positions(extent: u32, size: u32, stride: u32) -> Vec<u32> {
    let mut out: Vec<u32> = (0..).map(|i| i * stride).take_while(|p| p + size <= extent).collect();
    let last = *out.last().expect("size <= extent");
    if last + size < extent {
        out.push(extent - size);
    }
    out
}

/// Row-major window grid at multiples of `stride`, plus one window flush with
/// the far edge on each axis the grid does not reach.
pub fn generate_windows(width: u32, height: u32, w: u32, h: u32, stride: u32) -> Result<Vec<Window>> {
    if w > width || h > height || w == 0 || h == 0 {
        return Err(Error::WindowLargerThanImage { window_w: w, window_h: h, image_w: width, image_h: height });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let xs = axis_positions(width, w, stride);
    let ys = axis_positions(height, h, stride);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| Window::at(x, y, w, h))).collect())
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub image: GrayImage,
    pub truth: Window,
}

/// Fills `image` inside `region` with vertical stripes of random width 1–4
/// alternating between 0 and 255.
fn paint_stripes(image: &mut GrayImage, region: &Window, rng: &mut ChaCha8Rng) {
    let mut value = if rng.random::<bool>() { 0u8 } else { 255u8 };
    let mut x = region.x;
    while x < region.x + region.w {
        let width = rng.random_range(1..=4u32);
        for dx in x..(x + width).min(region.x + region.w) {
            for dy in region.y..region.y + region.h {
                image.put_pixel(dx, dy, Luma([value]));
            }
        }
        value = 255 - value;
        x += width;
    }
}

fn noise(width: u32, height: u32, rng: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::from_fn(width, height, |_, _| Luma([rng.random_range(BACKGROUND_MIN..=BACKGROUND_MAX)]))
}

/// Noise background with one striped region placed uniformly at random.
pub fn synthesize_barcode_image(seed: u64, width: u32, height: u32, region_w: u32, region_h: u32) -> Result<Synthetic> {
    if region_w > width || region_h > height || region_w == 0 || region_h == 0 {
        return Err(Error::RegionTooLarge { region_w, region_h, image_w: width, image_h: height });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = noise(width, height, &mut rng);
    let truth = Window::at(
        rng.random_range(0..=width - region_w),
        rng.random_range(0..=height - region_h),
        region_w,
        region_h,
    );
    paint_stripes(&mut image, &truth, &mut rng);
    Ok(Synthetic { image, truth })
}

/// `n` striped crops (positives) of the given size.
pub fn striped_crops(seed: u64, n: usize, w: u32, h: u32) -> Vec<GrayImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut img = noise(w, h, &mut rng);
            paint_stripes(&mut img, &Window::at(0, 0, w, h), &mut rng);
            img
        })
        .collect()
}

/// `n` background-only crops (negatives) of the given size.
pub fn background_crops(seed: u64, n: usize, w: u32, h: u32) -> Vec<GrayImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| noise(w, h, &mut rng)).collect()
}

pub fn train_region_model(crops: &[GrayImage]) -> Result<OneClassModel> {
    let features = crops.iter().map(extract_histogram_features).collect::<Result<Vec<FeatureVector>>>()?;
    train_one_class_centroid(&features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub best: Window,
    pub all_scores: Vec<Window>,
}

/// Scores every window with `score` and returns the highest, the earliest in
/// row-major order on ties.
pub fn localize_with<F>(image: &GrayImage, w: u32, h: u32, stride: u32, mut score: F) -> Result<Localization>
where
    F: FnMut(&GrayImage) -> Result<f64>,
{
    let mut all = generate_windows(image.width(), image.height(), w, h, stride)?;
    for win in &mut all {
        win.score = score(&crop(image, win.x, win.y, win.w, win.h))?;
    }
    let mut best = all[0];
    for win in &all[1..] {
        if win.score > best.score {
            best = *win;
        }
    }
    Ok(Localization { best, all_scores: all })
}

/// Localizes with a one-class model over histogram features.
pub fn localize_barcode(image: &GrayImage, model: &OneClassModel, window: u32, stride: u32) -> Result<Localization> {
    localize_with(image, window, window, stride, |c| {
        score_one_class(extract_histogram_features(c)?.as_slice(), model)
    })
}
