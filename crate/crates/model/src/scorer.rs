//! Image lookup by id and the model-backed pair scorers.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use image::RgbImage;
use maskmatch_core::geometry::to_rgb;
use maskmatch_core::registry::DatasetIndex;
use maskmatch_core::scoring::{MeanEnsemble, PairScorer, ScoreError, Tap};

use crate::error::Result;
use crate::verifier::{EnsembleModel, Features, HeadWeights, VerifierModel};

/// Decoded images by image id, loaded lazily from dataset indices or
/// inserted directly.
#[derive(Default)]
pub struct ImageStore {
    paths: HashMap<String, PathBuf>,
    loaded: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_index(index: &DatasetIndex) -> Self {
        let mut s = Self::new();
        s.add_index(index);
        s
    }

    pub fn add_index(&mut self, index: &DatasetIndex) {
        for r in index.records() {
            self.paths.insert(r.image_id.clone(), index.resolve(r));
        }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, image: RgbImage) {
        self.loaded.get_mut().expect("image cache lock").insert(image_id.into(), Arc::new(image));
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.paths.contains_key(image_id) || self.loaded.lock().expect("image cache lock").contains_key(image_id)
    }

    pub fn get(&self, image_id: &str) -> Result<Arc<RgbImage>, ScoreError> {
        if let Some(img) = self.loaded.lock().expect("image cache lock").get(image_id) {
            return Ok(img.clone());
        }
        let missing = || ScoreError::MissingImage { image_id: image_id.to_string() };
        let path = self.paths.get(image_id).ok_or_else(missing)?;
        let img = Arc::new(to_rgb(&image::open(path).map_err(|_| missing())?));
        self.loaded.lock().expect("image cache lock").insert(image_id.to_string(), img.clone());
        Ok(img)
    }
}

/// Scores pairs with one model at one tap. Each image is embedded once, on
/// its own, and cached, so a pair and its swap see identical features.
pub struct ModelScorer<'a> {
    model: &'a VerifierModel,
    images: &'a ImageStore,
    tap: Tap,
    head: HeadWeights,
    features: Mutex<HashMap<String, Arc<Features>>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a VerifierModel, images: &'a ImageStore, tap: Tap) -> Result<Self> {
        Ok(Self { model, images, tap, head: model.head_weights()?, features: Mutex::new(HashMap::new()) })
    }

    pub fn tap(&self) -> Tap {
        self.tap
    }

    pub fn features(&self, image_id: &str) -> Result<Arc<Features>, ScoreError> {
        if let Some(f) = self.features.lock().expect("feature cache lock").get(image_id) {
            return Ok(f.clone());
        }
        let img = self.images.get(image_id)?;
        let e = self.model.embed(&img).map_err(|e| ScoreError::Backend(e.to_string()))?;
        let f = Arc::new(self.head.features(e));
        self.features.lock().expect("feature cache lock").insert(image_id.to_string(), f.clone());
        Ok(f)
    }
}

impl PairScorer for ModelScorer<'_> {
    fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>, ScoreError> {
        pairs
            .iter()
            .map(|(a, b)| {
                let fa = self.features(a)?;
                let fb = self.features(b)?;
                self.head.similarity(self.tap, &fa, &fb).map_err(|e| ScoreError::Backend(e.to_string()))
            })
            .collect()
    }
}

/// Averaged bottleneck similarity over the ensemble members.
pub fn ensemble_scorer<'a>(ensemble: &'a EnsembleModel, images: &'a ImageStore) -> Result<MeanEnsemble<ModelScorer<'a>>> {
    let members = ensemble.members().iter().map(|m| ModelScorer::new(m, images, Tap::Bottleneck)).collect::<Result<Vec<_>>>()?;
    Ok(MeanEnsemble::new(members).expect("ensembles are never empty"))
}
