//! Procedural frontal portraits with known ground truth.
//!
//! Each identity draws a fixed set of appearance parameters (skin tone,
//! hair colour and line, eye geometry, brows, face proportions); each image
//! of that identity then draws nuisance factors (placement, scale, in-plane
//! rotation, background, lighting, sensor noise). The renderer works in the
//! same normalised face frame as the landmark template, so every image comes
//! with its face box and 68 landmarks.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::landmarks::{shape_points, ShapeParams};
use crate::geometry::{FaceBox, LandmarkSet, Point};
use crate::registry::{DatasetIndex, ImageRecord, Variant};
use crate::rng::{self, Rng};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
}

/// Appearance shared by all images of one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
    /// Depth of the fringe below the crown, in face-height units.
    pub hair_depth: f64,
    pub fringe_tilt: f64,
    /// Face half-width over half-height.
    pub aspect: f64,
    pub brow_thickness: f64,
    pub shape: ShapeParams,
}

/// Per-image capture conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    /// Face centre as a fraction of the canvas.
    pub center: (f64, f64),
    /// Face half-height as a fraction of the canvas height.
    pub half_height: f64,
    pub rotation: f64,
    pub background: [f64; 3],
    pub brightness: f64,
    pub gradient: f64,
    pub noise_sigma: f64,
}

impl Capture {
    /// A centred, evenly lit capture.
    pub fn neutral() -> Self {
        Self {
            center: (0.5, 0.5),
            half_height: 0.31,
            rotation: 0.0,
            background: [60.0, 90.0, 70.0],
            brightness: 1.0,
            gradient: 0.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFace {
    pub image: RgbImage,
    /// Bounding box of the face outline.
    pub face_box: FaceBox,
    pub landmarks: LandmarkSet,
}

fn ycbcr(c: [f64; 3]) -> (f64, f64, f64) {
    let px = [c[0].clamp(0.0, 255.0), c[1].clamp(0.0, 255.0), c[2].clamp(0.0, 255.0)];
    crate::geometry::detect::ycbcr([px[0] as u8, px[1] as u8, px[2] as u8])
}

fn scaled(c: [f64; 3], k: f64) -> [f64; 3] {
    [c[0] * k, c[1] * k, c[2] * k]
}

const LIGHT_RANGE: (f64, f64) = (0.85, 1.1);

/// Colour stays on the skin side of the chroma rule under every lighting.
fn robust_skin(c: [f64; 3]) -> bool {
    [LIGHT_RANGE.0, 1.0, LIGHT_RANGE.1].iter().all(|&k| {
        let (y, cb, cr) = ycbcr(scaled(c, k));
        y >= 50.0 && (82.0..=122.0).contains(&cb) && (138.0..=168.0).contains(&cr)
    })
}

/// Colour reads as neither skin nor bright-neutral under every lighting.
fn robust_non_skin(c: [f64; 3]) -> bool {
    [LIGHT_RANGE.0 * 0.9, 1.0, LIGHT_RANGE.1 * 1.1].iter().all(|&k| {
        let (y, cb, cr) = ycbcr(scaled(c, k));
        let skin_like = y >= 30.0 && (70.0..=134.0).contains(&cb) && (126.0..=180.0).contains(&cr);
        let sclera_like = y >= 130.0 && (cb - 128.0).abs() <= 24.0 && (cr - 128.0).abs() <= 24.0;
        !skin_like && !sclera_like
    })
}

fn sample_color(r: &mut Rng, accept: impl Fn([f64; 3]) -> bool, draw: impl Fn(&mut Rng) -> [f64; 3]) -> [f64; 3] {
    loop {
        let c = draw(r);
        if accept(c) {
            return c;
        }
    }
}

impl IdentityParams {
    pub fn random(r: &mut Rng) -> Self {
        let light = [240.0, 200.0, 160.0];
        let dark = [141.0, 85.0, 36.0];
        let skin = sample_color(r, robust_skin, |r| {
            let t: f64 = r.random();
            let j = |r: &mut Rng| r.random_range(-8.0..8.0);
            [
                light[0] + t * (dark[0] - light[0]) + j(r),
                light[1] + t * (dark[1] - light[1]) + j(r),
                light[2] + t * (dark[2] - light[2]) + j(r),
            ]
        });
        let hair = sample_color(r, robust_non_skin, |r| {
            [r.random_range(10.0..160.0), r.random_range(10.0..160.0), r.random_range(10.0..170.0)]
        });
        let irises = [[70.0, 45.0, 25.0], [60.0, 100.0, 160.0], [60.0, 120.0, 70.0], [100.0, 110.0, 120.0]];
        let iris = irises[r.random_range(0..irises.len())];
        let lips = [r.random_range(150.0..200.0), r.random_range(50.0..90.0), r.random_range(70.0..110.0)];
        let eye_rx = r.random_range(0.14..0.19);
        let shape = ShapeParams {
            eye_half_spacing: r.random_range(0.33..0.42),
            eye_line: -0.17,
            eye_rx,
            eye_ry: eye_rx * r.random_range(0.45..0.6),
            brow_lift: r.random_range(0.0..0.05),
            mouth_half_width: r.random_range(0.25..0.33),
        };
        Self {
            skin,
            hair,
            iris,
            lips,
            hair_depth: r.random_range(0.28..0.45),
            fringe_tilt: r.random_range(-0.08..0.08),
            aspect: r.random_range(0.7..0.84),
            brow_thickness: r.random_range(0.035..0.08),
            shape,
        }
    }
}

impl Capture {
    pub fn random(r: &mut Rng) -> Self {
        let background = sample_color(r, |c| robust_non_skin(c) && ycbcr(c).0 <= 140.0, |r| {
            [r.random_range(0.0..200.0), r.random_range(0.0..200.0), r.random_range(0.0..200.0)]
        });
        Self {
            center: (r.random_range(0.44..0.56), r.random_range(0.46..0.56)),
            half_height: r.random_range(0.28..0.33),
            rotation: r.random_range(-0.06..0.06),
            background,
            brightness: r.random_range(LIGHT_RANGE.0..LIGHT_RANGE.1),
            gradient: r.random_range(-0.06..0.06),
            noise_sigma: 3.0,
        }
    }
}

/// Placement of one face on a canvas, in pixels.
#[derive(Debug, Clone, Copy)]
struct Frame {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Frame {
    fn new(identity: &IdentityParams, capture: &Capture, width: u32, height: u32) -> Self {
        let b = capture.half_height * f64::from(height);
        Self {
            cx: capture.center.0 * f64::from(width),
            cy: capture.center.1 * f64::from(height),
            a: b * identity.aspect,
            b,
            cos: capture.rotation.cos(),
            sin: capture.rotation.sin(),
        }
    }

    fn to_face(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let rx = dx * self.cos + dy * self.sin;
        let ry = -dx * self.sin + dy * self.cos;
        (rx / self.a, ry / self.b)
    }

    fn to_pixel(&self, u: f64, v: f64) -> Point {
        let (px, py) = (u * self.a, v * self.b);
        Point::new(self.cx + px * self.cos - py * self.sin, self.cy + px * self.sin + py * self.cos)
    }

    fn face_box(&self, width: u32, height: u32) -> FaceBox {
        let hw = ((self.a * self.cos).powi(2) + (self.b * self.sin).powi(2)).sqrt();
        let hh = ((self.a * self.sin).powi(2) + (self.b * self.cos).powi(2)).sqrt();
        let x0 = (self.cx - hw).max(0.0).floor() as u32;
        let y0 = (self.cy - hh).max(0.0).floor() as u32;
        let x1 = ((self.cx + hw).ceil() as u32).min(width);
        let y1 = ((self.cy + hh).ceil() as u32).min(height);
        FaceBox { x: x0, y: y0, width: x1 - x0, height: y1 - y0, confidence: 1.0 }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Colour of the face layers at face coordinates `(u, v)`, or `None` when
/// the point is background.
fn face_color(id: &IdentityParams, frame: &Frame, brows: &[(f64, f64)], u: f64, v: f64) -> Option<[f64; 3]> {
    let s = &id.shape;
    let r2 = u * u + v * v;
    let hairline = -1.0 + id.hair_depth + id.fringe_tilt * u;
    if r2 > 1.0 {
        let outer = u * u / (1.12 * 1.12) + (v + 0.04) * (v + 0.04) / (1.14 * 1.14);
        return (outer <= 1.0 && v < -0.1).then_some(id.hair);
    }
    if v < hairline {
        return Some(id.hair);
    }
    // Eyes: sclera ellipse with a round iris and pupil in pixel units.
    for c in [-s.eye_half_spacing, s.eye_half_spacing] {
        let (du, dv) = ((u - c) / s.eye_rx, (v - s.eye_line) / s.eye_ry);
        if du * du + dv * dv <= 1.0 {
            let d_px = ((u - c) * frame.a).hypot((v - s.eye_line) * frame.b);
            let iris_r = 0.55 * s.eye_ry * frame.b;
            return Some(if d_px <= 0.45 * iris_r {
                [20.0, 18.0, 18.0]
            } else if d_px <= iris_r {
                id.iris
            } else {
                [236.0, 236.0, 232.0]
            });
        }
    }
    for side in brows.chunks(5) {
        let near = side.windows(2).any(|w| segment_distance((u, v), w[0], w[1]) <= id.brow_thickness / 2.0);
        if near {
            return Some(scaled(id.hair, 0.75));
        }
    }
    let (mu, mv) = (u / s.mouth_half_width, (v - 0.56) / 0.075);
    if mu * mu + mv * mv <= 1.0 {
        return Some(id.lips);
    }
    let (nu, nv) = (u / 0.12, (v - 0.24) / 0.06);
    let shade = if nu * nu + nv * nv <= 1.0 { 0.9 } else { 1.0 - 0.06 * r2 };
    Some(scaled(id.skin, shade))
}

/// Renders faces onto a `width x height` canvas. Later faces paint over
/// earlier ones; the background and lighting come from the first capture.
pub fn render_scene(width: u32, height: u32, faces: &[(IdentityParams, Capture)], noise_seed: u64) -> Vec<RenderedFace> {
    let base = faces.first().map(|f| f.1.clone()).unwrap_or_else(Capture::neutral);
    let frames: Vec<Frame> = faces.iter().map(|(id, cap)| Frame::new(id, cap, width, height)).collect();
    let brows: Vec<Vec<(f64, f64)>> = faces
        .iter()
        .map(|(id, _)| shape_points(&id.shape)[17..27].iter().map(|p| (p.x, p.y)).collect())
        .collect();
    let mut noise_rng = rng::seeded(noise_seed);
    let noise = Normal::new(0.0, base.noise_sigma.max(1e-12)).expect("finite sigma");
    let image = RgbImage::from_fn(width, height, |x, y| {
        let (px, py) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let mut color = base.background;
        for (k, (id, _)) in faces.iter().enumerate() {
            let (u, v) = frames[k].to_face(px, py);
            if let Some(c) = face_color(id, &frames[k], &brows[k], u, v) {
                color = c;
            }
        }
        let light = base.brightness * (1.0 + base.gradient * (px / f64::from(width) - 0.5) * 2.0);
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let n = if base.noise_sigma > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            out[ch] = (color[ch] * light + n).round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    });
    faces
        .iter()
        .zip(&frames)
        .map(|((id, _), frame)| {
            let points = shape_points(&id.shape).into_iter().map(|p| frame.to_pixel(p.x, p.y)).collect();
            RenderedFace {
                image: image.clone(),
                face_box: frame.face_box(width, height),
                landmarks: LandmarkSet::new(points).expect("template has 68 finite points"),
            }
        })
        .collect()
}

pub fn render_face(identity: &IdentityParams, capture: &Capture, size: u32, noise_seed: u64) -> RenderedFace {
    render_scene(size, size, &[(identity.clone(), capture.clone())], noise_seed)
        .pop()
        .expect("one face rendered")
}

/// Parameters of identity `i` of a corpus; independent of corpus size.
pub fn identity(seed: u64, i: usize) -> IdentityParams {
    IdentityParams::random(&mut rng::seeded(rng::derive_seed(seed, &format!("identity/{i}"))))
}

/// Image `j` of identity `i`.
pub fn identity_image(seed: u64, i: usize, j: usize, size: u32) -> RenderedFace {
    let label = format!("capture/{i}/{j}");
    let mut r = rng::seeded(rng::derive_seed(seed, &label));
    let capture = Capture::random(&mut r);
    render_face(&identity(seed, i), &capture, size, rng::derive_seed(seed, &format!("noise/{i}/{j}")))
}

/// One image per identity: the bundled frontal-face smoke corpus.
pub fn smoke_corpus(count: usize, size: u32, seed: u64) -> Vec<RenderedFace> {
    (0..count).map(|i| identity_image(seed, i, 0, size)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub dataset_id: String,
    pub identities: usize,
    pub images_per_identity: usize,
    pub size: u32,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn identity_id(&self, i: usize) -> String {
        format!("{}_{i:04}", self.dataset_id)
    }

    pub fn image_id(&self, i: usize, j: usize) -> String {
        format!("{}/{j:02}", self.identity_id(i))
    }
}

/// Renders an unmasked corpus into `out_dir` and returns its index, whose
/// root is `out_dir`.
pub fn write_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetIndex, SynthError> {
    let mut records = Vec::with_capacity(spec.identities * spec.images_per_identity);
    for i in 0..spec.identities {
        for j in 0..spec.images_per_identity {
            let face = identity_image(spec.seed, i, j, spec.size);
            let rel = PathBuf::from(&spec.dataset_id).join(spec.identity_id(i)).join(format!("{j:02}.png"));
            let path = out_dir.join(&rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|source| SynthError::Io { path: dir.to_path_buf(), source })?;
            }
            face.image.save(&path).map_err(|source| SynthError::Encode { path: path.clone(), source })?;
            records.push(ImageRecord {
                image_id: spec.image_id(i, j),
                identity_id: spec.identity_id(i),
                dataset_id: spec.dataset_id.clone(),
                variant: Variant::Unmasked,
                path: rel,
            });
        }
    }
    Ok(DatasetIndex::new(spec.dataset_id.clone(), out_dir, records).expect("generated ids are unique"))
}
