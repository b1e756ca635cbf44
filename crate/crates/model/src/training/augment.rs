use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

use super::config::AugmentConfig;

/// One random view of `image`, returned at `size` x `size`.
pub fn augment(image: &RgbImage, size: u32, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = image.dimensions();
    let area = f64::from(w) * f64::from(h);
    let (lo, hi) = cfg.crop_scale;
    let mut view = None;
    for _ in 0..10 {
        let target = area * rng.random_range(lo.min(hi)..=hi.max(lo));
        let log_ratio = rng.random_range((3f64 / 4.0).ln()..=(4f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as u32;
        let ch = (target / ratio).sqrt().round() as u32;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x = rng.random_range(0..=w - cw);
            let y = rng.random_range(0..=h - ch);
            view = Some(imageops::crop_imm(image, x, y, cw, ch).to_image());
            break;
        }
    }
    let mut img = imageops::resize(view.as_ref().unwrap_or(image), size, size, FilterType::Triangle);
    if rng.random_bool(cfg.flip_probability) {
        imageops::flip_horizontal_in_place(&mut img);
    }
    if rng.random_bool(cfg.jitter_probability) {
        let s = cfg.jitter_strength;
        let mut factor = || rng.random_range((1.0 - s).max(0.0)..=1.0 + s);
        jitter(&mut img, factor(), factor(), factor());
    }
    if rng.random_bool(cfg.grayscale_probability) {
        for px in img.pixels_mut() {
            let l = luma(px.0);
            px.0 = [l.round() as u8; 3];
        }
    }
    if rng.random_bool(cfg.blur_probability) {
        let (a, b) = cfg.blur_sigma;
        let sigma = rng.random_range(a.min(b)..=b.max(a)) * f64::from(size);
        if sigma > 0.05 {
            img = imageops::blur(&img, sigma as f32);
        }
    }
    img
}

fn luma(p: [u8; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

fn jitter(img: &mut RgbImage, brightness: f64, contrast: f64, saturation: f64) {
    let n = f64::from(img.width() * img.height()).max(1.0);
    let mean = img.pixels().map(|p| luma(p.0)).sum::<f64>() / n * brightness;
    for px in img.pixels_mut() {
        let mut c = px.0.map(|v| f64::from(v) * brightness);
        c = c.map(|v| (v - mean) * contrast + mean);
        let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        c = c.map(|v| (v - l) * saturation + l);
        px.0 = c.map(|v| v.clamp(0.0, 255.0).round() as u8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskmatch_core::rng::seeded;

    #[test]
    fn views_have_the_requested_size_and_are_seeded() {
        let img = RgbImage::from_fn(40, 30, |x, y| image::Rgb([x as u8 * 6, y as u8 * 8, 100]));
        let cfg = AugmentConfig::default();
        let a = augment(&img, 16, &cfg, &mut seeded(3));
        let b = augment(&img, 16, &cfg, &mut seeded(3));
        assert_eq!(a.dimensions(), (16, 16));
        assert_eq!(a, b);
        let c = augment(&img, 16, &cfg, &mut seeded(4));
        assert_ne!(a, c);
    }
}
