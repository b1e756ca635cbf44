#![allow(dead_code)]

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use maskmatch_core::registry::{DatasetIndex, ImageRecord, Role, SplitAssignment, Splits, Variant};
use maskmatch_core::synth::identity_image;
use maskmatch_model::ImageStore;

/// In-memory dataset of rendered faces. Masked views cover the lower part
/// of the face with a flat colour.
pub fn toy_dataset(dataset_id: &str, identities: usize, per_variant: usize, size: u32, seed: u64, store: &mut ImageStore) -> DatasetIndex {
    let mut records = Vec::new();
    for i in 0..identities {
        let identity_id = format!("{dataset_id}_{i:03}");
        for j in 0..per_variant {
            for variant in [Variant::Unmasked, Variant::Masked] {
                let k = if variant == Variant::Masked { j + per_variant } else { j };
                let face = identity_image(seed, i, k, size);
                let mut img = face.image;
                if variant == Variant::Masked {
                    let b = face.face_box;
                    let top = b.y + b.height * 11 / 20;
                    for y in top..(b.y + b.height).min(size) {
                        for x in b.x..(b.x + b.width).min(size) {
                            img.put_pixel(x, y, Rgb([70, 120, 200]));
                        }
                    }
                }
                let image_id = format!("{identity_id}/{variant}/{j:02}");
                store.insert(image_id.clone(), img);
                records.push(ImageRecord {
                    image_id: image_id.clone(),
                    identity_id: identity_id.clone(),
                    dataset_id: dataset_id.into(),
                    variant,
                    path: format!("{image_id}.png").into(),
                });
            }
        }
    }
    DatasetIndex::new(dataset_id, "", records).unwrap()
}

/// Splits with the first `train` identities in training, the next
/// `validation` in validation and the rest held out.
pub fn ordered_splits(index: &DatasetIndex, train: usize, validation: usize) -> Splits {
    let ids: Vec<String> = index.identity_map().keys().cloned().collect();
    let take = |r: std::ops::Range<usize>| -> BTreeSet<String> { ids[r.start.min(ids.len())..r.end.min(ids.len())].iter().cloned().collect() };
    Splits {
        seed: 0,
        fractions: (0.0, 0.0),
        assignments: [
            SplitAssignment { role: Role::Train, identity_ids: take(0..train) },
            SplitAssignment { role: Role::Validation, identity_ids: take(train..train + validation) },
            SplitAssignment { role: Role::Holdout, identity_ids: take(train + validation..ids.len()) },
        ],
    }
}

pub fn flat_image(size: u32, c: [u8; 3]) -> RgbImage {
    RgbImage::from_pixel(size, size, Rgb(c))
}
