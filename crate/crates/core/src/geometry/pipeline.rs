//! Dataset-level masking: detect, fit landmarks, fill the hull, re-detect.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    apply_mask, build_mask_polygon, to_rgb, EyeAnchoredPredictor, FaceBox, FaceDetector, GeometryError, LandmarkPredictor,
    LandmarkSet, MaskPolygon, SkinToneDetector, SkinToneDetectorConfig, DEFAULT_MASK_COLOR, DEFAULT_MASK_INDICES,
};
use crate::registry::{DatasetIndex, ImageRecord, RegistryError, Variant};

/// Mask settings as read from a mask config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub index_set: Vec<usize>,
    pub fill_color: [u8; 3],
    /// Parameter file for the face detector; built-in defaults when absent.
    pub detector_weights: Option<PathBuf>,
    /// Parameter file for the landmark predictor; built-in defaults when absent.
    pub landmark_weights: Option<PathBuf>,
    /// Also require landmarks to be recoverable on the masked output.
    pub validate_landmarks: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            index_set: DEFAULT_MASK_INDICES.to_vec(),
            fill_color: DEFAULT_MASK_COLOR,
            detector_weights: None,
            landmark_weights: None,
            validate_landmarks: false,
        }
    }
}

/// The detector and landmark predictor used by the pipeline.
pub struct MaskingTools {
    pub detector: Box<dyn FaceDetector>,
    pub predictor: Box<dyn LandmarkPredictor>,
}

impl Default for MaskingTools {
    fn default() -> Self {
        Self { detector: Box::new(SkinToneDetector::default()), predictor: Box::new(EyeAnchoredPredictor::default()) }
    }
}

impl MaskingTools {
    /// Builds the bundled adapters, reading their parameter files if the
    /// config names any.
    pub fn from_config(config: &MaskConfig) -> Result<Self, RegistryError> {
        let load = |path: &Option<PathBuf>| -> Result<SkinToneDetectorConfig, RegistryError> {
            match path {
                None => Ok(SkinToneDetectorConfig::default()),
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|source| RegistryError::Io { path: p.clone(), source })?;
                    serde_json::from_str(&text)
                        .map_err(|e| RegistryError::ManifestParse { line: e.line() as u64, message: e.to_string() })
                }
            }
        };
        let detector = SkinToneDetector::new(load(&config.detector_weights)?);
        let predictor = EyeAnchoredPredictor { eyes: SkinToneDetector::new(load(&config.landmark_weights)?) };
        Ok(Self { detector: Box::new(detector), predictor: Box::new(predictor) })
    }
}

/// Everything produced while masking one image.
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub image: RgbImage,
    pub face: FaceBox,
    pub landmarks: LandmarkSet,
    pub polygon: MaskPolygon,
}

/// True iff a face is still detectable on the masked image.
pub fn verify_maskability(masked_image: &RgbImage, detector: &dyn FaceDetector) -> bool {
    detector.detect_primary_face(masked_image).is_ok()
}

/// Masks a single image. Fails with `NoFaceFound` when the masked result is
/// no longer detectable.
pub fn mask_image(image: &RgbImage, tools: &MaskingTools, config: &MaskConfig) -> Result<MaskOutcome, GeometryError> {
    let face = tools.detector.detect_primary_face(image)?;
    let landmarks = tools.predictor.predict_landmarks(image, &face)?;
    let polygon = build_mask_polygon(&landmarks, &config.index_set, config.fill_color)?;
    let masked = apply_mask(image, &polygon);
    let redetected = tools.detector.detect_primary_face(&masked).map_err(|_| GeometryError::NoFaceFound)?;
    if config.validate_landmarks {
        tools
            .predictor
            .predict_landmarks(&masked, &redetected)
            .map_err(|_| GeometryError::NoFaceFound)?;
    }
    Ok(MaskOutcome { image: masked, face, landmarks, polygon })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskStatus {
    Masked,
    DiscardedNoFace,
    DiscardedIo,
}

impl MaskStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskStatus::Masked => "masked",
            MaskStatus::DiscardedNoFace => "discarded_no_face",
            MaskStatus::DiscardedIo => "discarded_io",
        }
    }
}

impl fmt::Display for MaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "masked" => Ok(MaskStatus::Masked),
            "discarded_no_face" => Ok(MaskStatus::DiscardedNoFace),
            "discarded_io" => Ok(MaskStatus::DiscardedIo),
            other => Err(format!("unknown mask status {other:?}")),
        }
    }
}

/// One line of the masking report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingEntry {
    pub image_id: String,
    pub status: MaskStatus,
    /// Output file for masked images, empty otherwise.
    pub output_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskingReport {
    pub input_count: usize,
    pub masked_count: usize,
    pub discarded_count: usize,
    pub discarded_ids: Vec<String>,
    /// Per-input outcomes in input order.
    pub entries: Vec<MaskingEntry>,
}

impl MaskingReport {
    pub fn from_entries(entries: Vec<MaskingEntry>) -> Self {
        let masked_count = entries.iter().filter(|e| e.status == MaskStatus::Masked).count();
        let discarded_ids: Vec<String> = entries
            .iter()
            .filter(|e| e.status != MaskStatus::Masked)
            .map(|e| e.image_id.clone())
            .collect();
        Self {
            input_count: entries.len(),
            masked_count,
            discarded_count: discarded_ids.len(),
            discarded_ids,
            entries,
        }
    }

    pub fn io_failures(&self) -> usize {
        self.entries.iter().filter(|e| e.status == MaskStatus::DiscardedIo).count()
    }
}

pub fn write_masking_report(report: &MaskingReport, path: impl AsRef<Path>) -> Result<(), RegistryError> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| RegistryError::Io { path: path.to_path_buf(), source: e.into() };
    w.write_record(["image_id", "status", "output_path"]).map_err(io)?;
    for e in &report.entries {
        let out = e.output_path.as_ref().map(|p| p.to_string_lossy().into_owned()).unwrap_or_default();
        w.write_record([e.image_id.as_str(), e.status.as_str(), out.as_str()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| RegistryError::Io { path: path.to_path_buf(), source: e.into_error() })?;
    crate::registry::write_file(path, &bytes).map_err(|source| RegistryError::Io { path: path.to_path_buf(), source })
}

pub fn read_masking_report(path: impl AsRef<Path>) -> Result<MaskingReport, RegistryError> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| RegistryError::Io { path: path.to_path_buf(), source: e.into() })?;
    let mut entries = Vec::new();
    for (i, row) in r.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| RegistryError::ManifestParse { line, message: e.to_string() })?;
        if row.len() != 3 {
            return Err(RegistryError::ManifestParse { line, message: format!("expected 3 fields, got {}", row.len()) });
        }
        let status = row[1].parse().map_err(|message| RegistryError::ManifestParse { line, message })?;
        let output_path = (!row[2].is_empty()).then(|| PathBuf::from(&row[2]));
        entries.push(MaskingEntry { image_id: row[0].to_string(), status, output_path });
    }
    Ok(MaskingReport::from_entries(entries))
}

/// Relative output location for a masked image; keeps identity sub-folders
/// but never escapes the output root.
fn masked_relative_path(record: &ImageRecord) -> PathBuf {
    let clean: String = record
        .image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '/') { c } else { '_' })
        .collect();
    let mut p = PathBuf::from("masked").join(&record.dataset_id);
    for part in clean.split('/').filter(|s| !s.is_empty()) {
        p.push(part);
    }
    p.set_extension("png");
    p
}

/// Image id given to the masked counterpart of an unmasked image.
pub fn masked_image_id(image_id: &str) -> String {
    format!("{image_id}_masked")
}

/// Masks every unmasked record of `index`, writing PNGs under `out_dir`.
///
/// Returns the index of masked images (rooted at `out_dir`) and a report
/// with one entry per unmasked input, in input order. Per-file failures are
/// recorded in the report rather than aborting the run. `workers` bounds
/// the thread pool; `None` uses the global pool.
pub fn mask_dataset(
    index: &DatasetIndex,
    tools: &MaskingTools,
    config: &MaskConfig,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<(DatasetIndex, MaskingReport), RegistryError> {
    let inputs: Vec<&ImageRecord> = index.records().iter().filter(|r| r.variant == Variant::Unmasked).collect();
    let job = |record: &ImageRecord| -> (MaskingEntry, Option<ImageRecord>) {
        let src = index.resolve(record);
        let discard = |status| (MaskingEntry { image_id: record.image_id.clone(), status, output_path: None }, None);
        let image = match image::open(&src) {
            Ok(img) => to_rgb(&img),
            Err(e) => {
                warn!("{}: cannot read {}: {e}", record.image_id, src.display());
                return discard(MaskStatus::DiscardedIo);
            }
        };
        let outcome = match mask_image(&image, tools, config) {
            Ok(o) => o,
            Err(e) => {
                debug!("{}: discarded ({e})", record.image_id);
                return discard(MaskStatus::DiscardedNoFace);
            }
        };
        let rel = masked_relative_path(record);
        let dst = out_dir.join(&rel);
        let saved = dst
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .map_err(|e| e.to_string())
            .and_then(|_| outcome.image.save(&dst).map_err(|e| e.to_string()));
        if let Err(e) = saved {
            warn!("{}: cannot write {}: {e}", record.image_id, dst.display());
            return discard(MaskStatus::DiscardedIo);
        }
        let masked = ImageRecord {
            image_id: masked_image_id(&record.image_id),
            identity_id: record.identity_id.clone(),
            dataset_id: record.dataset_id.clone(),
            variant: Variant::Masked,
            path: rel.clone(),
        };
        (MaskingEntry { image_id: record.image_id.clone(), status: MaskStatus::Masked, output_path: Some(rel) }, Some(masked))
    };

    let results: Vec<(MaskingEntry, Option<ImageRecord>)> = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| RegistryError::Io { path: out_dir.to_path_buf(), source: std::io::Error::other(e) })?;
            pool.install(|| inputs.par_iter().map(|r| job(r)).collect())
        }
        None => inputs.par_iter().map(|r| job(r)).collect(),
    };

    let mut entries = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    for (entry, record) in results {
        entries.push(entry);
        records.extend(record);
    }
    let masked_index = DatasetIndex::new(index.dataset_id(), out_dir.to_path_buf(), records)?;
    Ok((masked_index, MaskingReport::from_entries(entries)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_accounting() {
        let e = |id: &str, status| MaskingEntry { image_id: id.into(), status, output_path: None };
        let r = MaskingReport::from_entries(vec![
            e("a", MaskStatus::Masked),
            e("b", MaskStatus::DiscardedNoFace),
            e("c", MaskStatus::DiscardedIo),
        ]);
        assert_eq!((r.input_count, r.masked_count, r.discarded_count), (3, 1, 2));
        assert_eq!(r.discarded_ids, vec!["b".to_string(), "c".to_string()]);
        assert_eq!(r.io_failures(), 1);
    }

    #[test]
    fn masked_paths_stay_under_root() {
        let rec = ImageRecord {
            image_id: "../../etc/x.y".into(),
            identity_id: "i".into(),
            dataset_id: "d".into(),
            variant: Variant::Unmasked,
            path: "x".into(),
        };
        let p = masked_relative_path(&rec);
        assert!(p.components().all(|c| matches!(c, std::path::Component::Normal(_))), "{p:?}");
    }

    #[test]
    fn status_round_trip() {
        for s in [MaskStatus::Masked, MaskStatus::DiscardedNoFace, MaskStatus::DiscardedIo] {
            assert_eq!(s.as_str().parse::<MaskStatus>().unwrap(), s);
        }
    }
}
