//! Classical frontal-face detector: skin-tone segmentation in YCbCr, blob
//! analysis, and an eye-pair check on bright low-chroma (sclera) clusters.
//!
//! Good enough for studio-style frontal portraits and the synthetic corpora
//! in [`crate::synth`]. Real-world corpora should plug a trained model in
//! through [`FaceDetector`].

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{FaceBox, FaceDetector, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkinToneDetectorConfig {
    pub cb_range: (f64, f64),
    pub cr_range: (f64, f64),
    pub min_luma: f64,
    /// Minimum blob area as a fraction of the image area.
    pub min_area_fraction: f64,
    pub min_face_side: u32,
    pub aspect_range: (f64, f64),
    pub min_fill: f64,
    pub sclera_min_luma: f64,
    pub sclera_max_chroma: f64,
}

impl Default for SkinToneDetectorConfig {
    fn default() -> Self {
        Self {
            cb_range: (77.0, 127.0),
            cr_range: (133.0, 173.0),
            min_luma: 40.0,
            min_area_fraction: 0.004,
            min_face_side: 12,
            aspect_range: (0.35, 2.5),
            min_fill: 0.3,
            sclera_min_luma: 150.0,
            sclera_max_chroma: 14.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SkinToneDetector {
    pub config: SkinToneDetectorConfig,
}

pub(crate) fn ycbcr(px: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(px[0]), f64::from(px[1]), f64::from(px[2]));
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

/// Row-major boolean raster.
#[derive(Debug, Clone)]
pub(crate) struct BitMask {
    pub width: u32,
    pub height: u32,
    bits: Vec<bool>,
}

impl BitMask {
    fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u32) < self.width
            && (y as u32) < self.height
            && self.bits[(y as u32 * self.width + x as u32) as usize]
    }

    fn morph(&self, want_all: bool) -> Self {
        BitMask::from_fn(self.width, self.height, |x, y| {
            let mut acc = want_all;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let v = self.get(i64::from(x) + dx, i64::from(y) + dy);
                    if want_all {
                        acc &= v;
                    } else {
                        acc |= v;
                    }
                }
            }
            acc
        })
    }

    fn erode(&self) -> Self {
        self.morph(true)
    }

    fn dilate(&self) -> Self {
        self.morph(false)
    }

    /// Connected components as lists of pixel coordinates, in scan order of
    /// their first pixel.
    fn components(&self, eight: bool) -> Vec<Vec<(u32, u32)>> {
        let mut label = vec![false; self.bits.len()];
        let mut out = Vec::new();
        let offsets: &[(i64, i64)] = if eight {
            &[(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)]
        } else {
            &[(0, -1), (-1, 0), (1, 0), (0, 1)]
        };
        for start in 0..self.bits.len() {
            if !self.bits[start] || label[start] {
                continue;
            }
            label[start] = true;
            let mut stack = vec![start];
            let mut comp = Vec::new();
            while let Some(i) = stack.pop() {
                let (x, y) = ((i as u32) % self.width, (i as u32) / self.width);
                comp.push((x, y));
                for &(dx, dy) in offsets {
                    let (nx, ny) = (i64::from(x) + dx, i64::from(y) + dy);
                    if self.get(nx, ny) {
                        let j = (ny as u32 * self.width + nx as u32) as usize;
                        if !label[j] {
                            label[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EyePair {
    /// Image-left eye (the subject's right eye).
    pub left: Point,
    pub right: Point,
    pub cost: f64,
}

impl SkinToneDetector {
    pub fn new(config: SkinToneDetectorConfig) -> Self {
        Self { config }
    }

    pub(crate) fn skin_mask(&self, image: &RgbImage) -> BitMask {
        let c = &self.config;
        BitMask::from_fn(image.width(), image.height(), |x, y| {
            let (l, cb, cr) = ycbcr(image.get_pixel(x, y).0);
            l >= c.min_luma && cb >= c.cb_range.0 && cb <= c.cb_range.1 && cr >= c.cr_range.0 && cr <= c.cr_range.1
        })
    }

    fn sclera_mask(&self, image: &RgbImage, skin: &BitMask) -> BitMask {
        let c = &self.config;
        BitMask::from_fn(image.width(), image.height(), |x, y| {
            let (l, cb, cr) = ycbcr(image.get_pixel(x, y).0);
            !skin.get(i64::from(x), i64::from(y))
                && l >= c.sclera_min_luma
                && (cb - 128.0).abs() <= c.sclera_max_chroma
                && (cr - 128.0).abs() <= c.sclera_max_chroma
        })
    }

    /// Best eye pair inside `region`, if any.
    pub(crate) fn find_eye_pair(&self, image: &RgbImage, region: &FaceBox) -> Option<EyePair> {
        let skin = self.skin_mask(image);
        self.eye_pair_with_skin(image, &skin, region)
    }

    fn eye_pair_with_skin(&self, image: &RgbImage, skin: &BitMask, region: &FaceBox) -> Option<EyePair> {
        let sclera = self.sclera_mask(image, skin);
        let inside = |x: u32, y: u32| x >= region.x && x < region.right() && y >= region.y && y < region.bottom();
        let raw = BitMask::from_fn(image.width(), image.height(), |x, y| {
            inside(x, y) && sclera.get(i64::from(x), i64::from(y))
        });
        let grown = raw.dilate();
        let w = f64::from(region.width);
        let h = f64::from(region.height);
        let half_reach = (w * 0.5).ceil() as i64;

        struct Blob {
            c: Point,
            n: usize,
        }
        let mut blobs = Vec::new();
        for comp in grown.components(true) {
            let pts: Vec<_> = comp
                .into_iter()
                .filter(|&(x, y)| raw.get(i64::from(x), i64::from(y)))
                .collect();
            if pts.len() < 2 {
                continue;
            }
            let n = pts.len();
            let cx = pts.iter().map(|p| f64::from(p.0) + 0.5).sum::<f64>() / n as f64;
            let cy = pts.iter().map(|p| f64::from(p.1) + 0.5).sum::<f64>() / n as f64;
            let (ix, iy) = (cx.floor() as i64, cy.floor() as i64);
            // Must sit inside the face: skin on both sides along its row.
            let skin_left = (1..=half_reach).any(|d| skin.get(ix - d, iy) && inside((ix - d).max(0) as u32, iy as u32));
            let skin_right = (1..=half_reach).any(|d| skin.get(ix + d, iy) && inside((ix + d) as u32, iy as u32));
            if skin_left && skin_right {
                blobs.push(Blob { c: Point::new(cx, cy), n });
            }
        }

        let center_x = f64::from(region.x) + w / 2.0;
        let max_y = f64::from(region.y) + 0.8 * h;
        let mut best: Option<EyePair> = None;
        for a in &blobs {
            for b in &blobs {
                if a.c.x >= b.c.x {
                    continue;
                }
                let dx = b.c.x - a.c.x;
                let dy = (b.c.y - a.c.y).abs();
                let mid = Point::new((a.c.x + b.c.x) / 2.0, (a.c.y + b.c.y) / 2.0);
                if dx < 0.2 * w || dx > 0.8 * w || dy > 0.3 * dx || (mid.x - center_x).abs() > 0.2 * w || mid.y > max_y {
                    continue;
                }
                let cost = (mid.x - center_x).abs() / w
                    + dy / dx
                    + (a.n as f64 - b.n as f64).abs() / (a.n + b.n) as f64;
                if best.is_none_or(|e| cost < e.cost) {
                    best = Some(EyePair { left: a.c, right: b.c, cost });
                }
            }
        }
        best
    }
}

/// A skin component or the union of two neighbouring ones.
#[derive(Debug, Clone, Copy)]
struct Blob {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    size: usize,
}

impl Blob {
    fn of(comp: &[(u32, u32)]) -> Self {
        let mut b = Blob { x0: u32::MAX, y0: u32::MAX, x1: 0, y1: 0, size: comp.len() };
        for &(x, y) in comp {
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
        b
    }

    fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    /// Two halves of one face split by an occluder: side by side, mostly
    /// overlapping vertically, separated by a narrow gap.
    fn adjacent(&self, o: &Blob) -> bool {
        let gap = i64::from(self.x0.max(o.x0)) - i64::from(self.x1.min(o.x1)) - 1;
        let overlap = i64::from(self.y1.min(o.y1)) - i64::from(self.y0.max(o.y0)) + 1;
        let min_w = i64::from(self.width().min(o.width()));
        let min_h = i64::from(self.height().min(o.height()));
        gap <= min_w / 2 && 2 * overlap >= min_h
    }

    fn union(&self, o: &Blob) -> Blob {
        Blob {
            x0: self.x0.min(o.x0),
            y0: self.y0.min(o.y0),
            x1: self.x1.max(o.x1),
            y1: self.y1.max(o.y1),
            size: self.size + o.size,
        }
    }
}

impl FaceDetector for SkinToneDetector {
    /// Skin components (and unions of adjacent pairs, so faces split by an
    /// occluder still register) that pass the shape checks and contain an
    /// eye pair. Overlapping candidates keep only the largest.
    fn detect_all(&self, image: &RgbImage) -> Vec<FaceBox> {
        let c = &self.config;
        let (iw, ih) = (image.width(), image.height());
        if iw == 0 || ih == 0 {
            return Vec::new();
        }
        let skin = self.skin_mask(image);
        let opened = skin.erode().dilate();
        let min_area = (c.min_area_fraction * f64::from(iw) * f64::from(ih)).max(48.0) as usize;
        let parts: Vec<Blob> = opened
            .components(false)
            .iter()
            .filter(|comp| comp.len() * 4 >= min_area)
            .map(|comp| Blob::of(comp))
            .collect();
        let mut candidates: Vec<Blob> = parts.clone();
        for (i, a) in parts.iter().enumerate() {
            for b in &parts[i + 1..] {
                if a.adjacent(b) {
                    candidates.push(a.union(b));
                }
            }
        }

        let mut faces: Vec<FaceBox> = Vec::new();
        for blob in candidates {
            let (bw, bh) = (blob.width(), blob.height());
            if blob.size < min_area || bw < c.min_face_side || bh < c.min_face_side {
                continue;
            }
            let aspect = f64::from(bh) / f64::from(bw);
            let fill = blob.size as f64 / (f64::from(bw) * f64::from(bh));
            if aspect < c.aspect_range.0 || aspect > c.aspect_range.1 || fill < c.min_fill {
                continue;
            }
            let region = FaceBox { x: blob.x0, y: blob.y0, width: bw, height: bh, confidence: 0.0 };
            if let Some(eyes) = self.eye_pair_with_skin(image, &skin, &region) {
                let confidence = (fill * (1.0 - eyes.cost)).clamp(0.0, 1.0) as f32;
                faces.push(FaceBox { confidence, ..region });
            }
        }
        // Largest first; drop anything substantially overlapping a kept box.
        faces.sort_by(|a, b| b.area().cmp(&a.area()).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
        let mut kept: Vec<FaceBox> = Vec::new();
        for f in faces {
            if kept.iter().all(|k| k.iou(&f) < 0.3 && !contains(k, &f)) {
                kept.push(f);
            }
        }
        kept
    }
}

fn contains(outer: &FaceBox, inner: &FaceBox) -> bool {
    inner.x >= outer.x && inner.y >= outer.y && inner.right() <= outer.right() && inner.bottom() <= outer.bottom()
}
