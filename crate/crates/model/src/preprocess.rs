use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

/// Per-channel normalisation applied after scaling pixels to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }
}

/// Resizes to `resolution` x `resolution` and returns normalised CHW floats.
pub fn preprocess(image: &RgbImage, resolution: u32, norm: &Normalization) -> Vec<f32> {
    let resized;
    let img = if image.dimensions() == (resolution, resolution) {
        image
    } else {
        resized = imageops::resize(image, resolution, resolution, FilterType::Triangle);
        &resized
    };
    let plane = (resolution * resolution) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = ((f64::from(px.0[c]) / 255.0 - norm.mean[c]) / norm.std[c]) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn channel_planes_and_normalisation() {
        let mut img = RgbImage::new(2, 2);
        img.put_pixel(1, 0, Rgb([255, 0, 51]));
        let v = preprocess(&img, 2, &Normalization::identity());
        assert_eq!(v.len(), 12);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[4 + 1], 0.0);
        assert!((v[8 + 1] - 0.2).abs() < 1e-6);
        let n = Normalization { mean: [0.5; 3], std: [0.25; 3] };
        assert_eq!(preprocess(&img, 2, &n)[0], -2.0);
        assert_eq!(preprocess(&img, 4, &n).len(), 48);
    }
}
