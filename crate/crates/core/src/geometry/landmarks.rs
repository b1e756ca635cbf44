//! Mean 68-point face shape and an eye-anchored shape fitter.

use image::RgbImage;

use super::detect::SkinToneDetector;
use super::{FaceBox, GeometryError, LandmarkPredictor, LandmarkSet, Point, LANDMARK_COUNT};

/// Index of the mirrored counterpart of every landmark.
pub const MIRROR_PERMUTATION: [usize; LANDMARK_COUNT] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, // jaw
    26, 25, 24, 23, 22, 21, 20, 19, 18, 17, // brows
    27, 28, 29, 30, 35, 34, 33, 32, 31, // nose
    45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, // eyes
    54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55, // outer lip
    64, 63, 62, 61, 60, 67, 66, 65, // inner lip
];

/// Vertical position of the eye line in face units.
pub(crate) const EYE_LINE_V: f64 = -0.17;
/// Half the inter-ocular distance in face units.
pub(crate) const EYE_HALF_SPACING: f64 = 0.38;

/// Shape parameters for rendering or fitting a face in normalised face
/// coordinates: `u` spans the face width on [-1, 1], `v` the height on
/// [-1, 1] (downwards), the face outline is the unit circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub eye_half_spacing: f64,
    pub eye_line: f64,
    pub eye_rx: f64,
    pub eye_ry: f64,
    pub brow_lift: f64,
    pub mouth_half_width: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            eye_half_spacing: EYE_HALF_SPACING,
            eye_line: EYE_LINE_V,
            eye_rx: 0.17,
            eye_ry: 0.08,
            brow_lift: 0.0,
            mouth_half_width: 0.30,
        }
    }
}

/// 68 points in face units for the given shape parameters.
pub fn shape_points(params: &ShapeParams) -> Vec<Point> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    // Jaw: from the eye line on the image-left, round the chin, back up.
    let t0 = params.eye_line.asin();
    for i in 0..17 {
        let t = t0 + f64::from(i) * (std::f64::consts::PI - 2.0 * t0) / 16.0;
        pts.push(Point::new(-t.cos(), t.sin()));
    }
    let brow_u = [-0.62, -0.50, -0.38, -0.26, -0.14];
    let brow_v = [-0.30, -0.37, -0.39, -0.37, -0.33];
    let scale_u = params.eye_half_spacing / EYE_HALF_SPACING;
    let dv = params.eye_line - EYE_LINE_V - params.brow_lift;
    for i in 0..5 {
        pts.push(Point::new(brow_u[i] * scale_u, brow_v[i] + dv));
    }
    for i in (0..5).rev() {
        pts.push(Point::new(-brow_u[i] * scale_u, brow_v[i] + dv));
    }
    for v in [params.eye_line, -0.06, 0.05, 0.16] {
        pts.push(Point::new(0.0, v));
    }
    for (u, v) in [(-0.16, 0.24), (-0.08, 0.27), (0.0, 0.29), (0.08, 0.27), (0.16, 0.24)] {
        pts.push(Point::new(u, v));
    }
    let (e, ev, rx, ry) = (params.eye_half_spacing, params.eye_line, params.eye_rx, params.eye_ry);
    for c in [-e, e] {
        // Image-left eye starts at its outer corner, image-right eye at its inner corner.
        let s = if c < 0.0 { -1.0 } else { 1.0 };
        let outer_first = c < 0.0;
        let first = if outer_first { c + s * rx } else { c - s * rx };
        let ring = [
            (first, ev),
            (c - rx / 3.0, ev - ry),
            (c + rx / 3.0, ev - ry),
            (if outer_first { c - s * rx } else { c + s * rx }, ev),
            (c + rx / 3.0, ev + ry),
            (c - rx / 3.0, ev + ry),
        ];
        for (u, v) in ring {
            pts.push(Point::new(u, v));
        }
    }
    let m = params.mouth_half_width / 0.30;
    for (u, v) in [
        (-0.30, 0.55),
        (-0.20, 0.49),
        (-0.08, 0.46),
        (0.0, 0.48),
        (0.08, 0.46),
        (0.20, 0.49),
        (0.30, 0.55),
        (0.20, 0.61),
        (0.08, 0.65),
        (0.0, 0.66),
        (-0.08, 0.65),
        (-0.20, 0.61),
        (-0.24, 0.55),
        (-0.08, 0.52),
        (0.0, 0.53),
        (0.08, 0.52),
        (0.24, 0.55),
        (0.08, 0.58),
        (0.0, 0.59),
        (-0.08, 0.58),
    ] {
        pts.push(Point::new(u * m, v));
    }
    pts
}

/// The mean shape in face units.
pub fn mean_shape() -> Vec<Point> {
    shape_points(&ShapeParams::default())
}

/// Fits the mean shape to a face from its two eye centres and the box
/// bottom (taken as the chin).
///
/// Eye centres come from sclera clusters inside the box. The horizontal
/// face scale follows from the inter-ocular distance, the vertical one
/// from the eye-to-chin distance. Fails when no eye pair is visible or the
/// box is too small to hold one.
#[derive(Debug, Clone, Default)]
pub struct EyeAnchoredPredictor {
    pub eyes: SkinToneDetector,
}

impl EyeAnchoredPredictor {
    const MIN_SIDE: u32 = 8;
}

impl LandmarkPredictor for EyeAnchoredPredictor {
    fn predict_landmarks(&self, image: &RgbImage, face: &FaceBox) -> Result<LandmarkSet, GeometryError> {
        if face.width < Self::MIN_SIDE || face.height < Self::MIN_SIDE {
            return Err(GeometryError::LandmarkFailure(format!(
                "box {}x{} is too small",
                face.width, face.height
            )));
        }
        if !face.fits(image.width(), image.height()) {
            return Err(GeometryError::LandmarkFailure("box exceeds image bounds".into()));
        }
        let eyes = self
            .eyes
            .find_eye_pair(image, face)
            .ok_or_else(|| GeometryError::LandmarkFailure("no eye pair inside the box".into()))?;
        let (l, r) = (eyes.left, eyes.right);
        let mid = Point::new((l.x + r.x) / 2.0, (l.y + r.y) / 2.0);
        let dist = l.distance(&r);
        let (cos, sin) = ((r.x - l.x) / dist, (r.y - l.y) / dist);
        let unit_u = dist / (2.0 * EYE_HALF_SPACING);
        let unit_v = (f64::from(face.bottom()) - mid.y) / (1.0 - EYE_LINE_V);
        if unit_v <= 0.0 || !unit_u.is_finite() {
            return Err(GeometryError::LandmarkFailure("eye line below the box bottom".into()));
        }
        let points = mean_shape()
            .into_iter()
            .map(|p| {
                let du = p.x * unit_u;
                let dv = (p.y - EYE_LINE_V) * unit_v;
                Point::new(mid.x + du * cos - dv * sin, mid.y + du * sin + dv * cos)
            })
            .collect();
        LandmarkSet::new(points)
    }
}
