use image::{Rgb, RgbImage};

use super::{MaskPolygon, Point};

/// A pixel is covered when its centre lies inside or on the polygon.
pub fn pixel_covered(polygon: &MaskPolygon, x: u32, y: u32) -> bool {
    polygon.contains(Point::new(f64::from(x) + 0.5, f64::from(y) + 0.5))
}

/// Coordinates of every covered pixel, row-major.
pub fn covered_pixels(polygon: &MaskPolygon, width: u32, height: u32) -> Vec<(u32, u32)> {
    let Some((x0, y0, x1, y1)) = polygon.pixel_bounds(width, height) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if pixel_covered(polygon, x, y) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Paints the polygon with its fill colour. Pixels whose centres fall
/// outside the polygon are left untouched; parts beyond the image are
/// clipped.
pub fn apply_mask(image: &RgbImage, polygon: &MaskPolygon) -> RgbImage {
    let mut out = image.clone();
    let fill = Rgb(polygon.fill_color);
    for (x, y) in covered_pixels(polygon, image.width(), image.height()) {
        out.put_pixel(x, y, fill);
    }
    out
}
