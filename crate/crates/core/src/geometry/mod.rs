//! Face localisation, 68-point landmarks and convex-hull synthetic masks.
//!
//! The masking pipeline is: detect the primary face, predict landmarks inside
//! its box, take the convex hull of a configurable landmark subset, fill the
//! hull with a flat colour and finally check that the masked image is still
//! face-detectable. Images that fail any step are discarded.

pub(crate) mod detect;
mod hull;
pub(crate) mod landmarks;
mod pipeline;
mod raster;

use image::{DynamicImage, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use detect::{SkinToneDetector, SkinToneDetectorConfig};
pub use hull::{convex_hull, is_convex_ccw, point_in_convex_polygon, signed_area};
pub use landmarks::{mean_shape, shape_points, EyeAnchoredPredictor, ShapeParams, MIRROR_PERMUTATION};
pub use pipeline::{
    mask_dataset, mask_image, masked_image_id, read_masking_report, verify_maskability, write_masking_report,
    MaskConfig, MaskOutcome, MaskStatus, MaskingEntry, MaskingReport, MaskingTools,
};
pub use raster::{apply_mask, covered_pixels, pixel_covered};

/// Number of points in the standard facial annotation scheme.
pub const LANDMARK_COUNT: usize = 68;

/// Jaw points 2..=14 plus nose-bridge point 28 give a nose-to-chin cover.
pub const DEFAULT_MASK_INDICES: [usize; 14] = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 28];

pub const DEFAULT_MASK_COLOR: [u8; 3] = [110, 140, 200];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("no face found")]
    NoFaceFound,
    #[error("landmark prediction failed: {0}")]
    LandmarkFailure(String),
    #[error("selected landmarks are collinear; hull is degenerate")]
    DegenerateHull,
    #[error("landmark index {0} is outside 0..68")]
    IndexOutOfRange(usize),
    #[error("landmark index set is empty")]
    EmptyIndexSet,
    #[error("invalid landmark set: {0}")]
    InvalidLandmarks(String),
    #[error("image has no pixels")]
    EmptyImage,
}

/// A 2-D point in continuous pixel coordinates: pixel `(i, j)` covers
/// `[i, i+1) x [j, j+1)` and its centre sits at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned face box in integer pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub confidence: f32,
}

impl FaceBox {
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    pub fn right(&self) -> u32 {
        self.x + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.height
    }

    pub fn center(&self) -> Point {
        Point::new(
            f64::from(self.x) + f64::from(self.width) / 2.0,
            f64::from(self.y) + f64::from(self.height) / 2.0,
        )
    }

    /// Intersection over union with another box.
    pub fn iou(&self, other: &FaceBox) -> f64 {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            return 0.0;
        }
        let inter = (u64::from(x1 - x0) * u64::from(y1 - y0)) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }

    /// True when the box is non-empty and lies inside a `width x height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.width > 0 && self.height > 0 && self.right() <= width && self.bottom() <= height
    }
}

/// 68 landmarks in the standard ordering (jaw 0-16, brows 17-26, nose 27-35,
/// eyes 36-47, mouth 48-67).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self, GeometryError> {
        if points.len() != LANDMARK_COUNT {
            return Err(GeometryError::InvalidLandmarks(format!(
                "expected {LANDMARK_COUNT} points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::InvalidLandmarks(format!("point {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn get(&self, index: usize) -> Option<Point> {
        self.points.get(index).copied()
    }

    /// Landmarks of the horizontally mirrored image of width `image_width`,
    /// re-indexed so that the result follows the standard ordering again.
    pub fn mirrored(&self, image_width: u32) -> LandmarkSet {
        let w = f64::from(image_width);
        let points = MIRROR_PERMUTATION
            .iter()
            .map(|&src| {
                let p = self.points[src];
                Point::new(w - p.x, p.y)
            })
            .collect();
        LandmarkSet { points }
    }
}

/// Convex mask polygon, vertices counter-clockwise in the (x, y) coordinate
/// frame (positive signed area).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPolygon {
    vertices: Vec<Point>,
    pub fill_color: [u8; 3],
}

impl MaskPolygon {
    /// Wraps already-convex counter-clockwise vertices.
    pub fn from_vertices(vertices: Vec<Point>, fill_color: [u8; 3]) -> Result<Self, GeometryError> {
        if vertices.len() < 3 || !is_convex_ccw(&vertices) {
            return Err(GeometryError::DegenerateHull);
        }
        Ok(Self { vertices, fill_color })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn contains(&self, p: Point) -> bool {
        point_in_convex_polygon(&self.vertices, p)
    }

    /// Integer pixel bounds `(x0, y0, x1, y1)` (exclusive upper) clipped to
    /// the image; `None` when the polygon misses the image entirely.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            x0 = x0.min(v.x);
            y0 = y0.min(v.y);
            x1 = x1.max(v.x);
            y1 = y1.max(v.y);
        }
        let clamp = |v: f64, hi: u32| v.max(0.0).min(f64::from(hi)) as u32;
        let bx0 = clamp(x0.floor(), width);
        let by0 = clamp(y0.floor(), height);
        let bx1 = clamp(x1.ceil() + 1.0, width);
        let by1 = clamp(y1.ceil() + 1.0, height);
        (bx0 < bx1 && by0 < by1).then_some((bx0, by0, bx1, by1))
    }
}

/// Builds the mask polygon as the convex hull of the selected landmarks.
pub fn build_mask_polygon(
    landmarks: &LandmarkSet,
    index_set: &[usize],
    color: [u8; 3],
) -> Result<MaskPolygon, GeometryError> {
    if index_set.is_empty() {
        return Err(GeometryError::EmptyIndexSet);
    }
    let mut selected = Vec::with_capacity(index_set.len());
    for &i in index_set {
        selected.push(landmarks.get(i).ok_or(GeometryError::IndexOutOfRange(i))?);
    }
    let vertices = convex_hull(&selected);
    if vertices.len() < 3 {
        return Err(GeometryError::DegenerateHull);
    }
    Ok(MaskPolygon { vertices, fill_color: color })
}

/// Locates the dominant face in an image.
pub trait FaceDetector: Send + Sync {
    /// All candidate faces, in no particular order.
    fn detect_all(&self, image: &RgbImage) -> Vec<FaceBox>;

    /// The largest-area detection.
    fn detect_primary_face(&self, image: &RgbImage) -> Result<FaceBox, GeometryError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(GeometryError::EmptyImage);
        }
        self.detect_all(image)
            .into_iter()
            .fold(None, |best: Option<FaceBox>, b| match best {
                Some(cur) if cur.area() >= b.area() => Some(cur),
                _ => Some(b),
            })
            .ok_or(GeometryError::NoFaceFound)
    }
}

/// Predicts the 68 landmarks of the face inside a box.
pub trait LandmarkPredictor: Send + Sync {
    fn predict_landmarks(&self, image: &RgbImage, face: &FaceBox) -> Result<LandmarkSet, GeometryError>;
}

/// Converts any decoded image to 3-channel RGB; single-channel inputs are
/// replicated across the three channels.
pub fn to_rgb(image: &DynamicImage) -> RgbImage {
    image.to_rgb8()
}
