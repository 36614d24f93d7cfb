#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use camtrap_core::active_learning::Strategy;
use camtrap_core::classifier::TrainConfig;
use camtrap_core::detection::{write_manifest, CropRecord, PixelRect};
use camtrap_core::embedding::EmbeddingStore;
use camtrap_core::project::{Project, ProjectInit, CROPS_FILE, EMBEDDINGS_FILE};

pub const CLASSES: [&str; 3] = ["Deer", "Fox", "Hare"];
pub const POOL: usize = 90;
pub const VALIDATION: usize = 30;

/// Smallest valid PNG: one transparent pixel.
pub const PNG_1X1: [u8; 67] = [
    0x89, 0x50, 0x4E, 0x47, 0x0D, 0x0A, 0x1A, 0x0A, 0x00, 0x00, 0x00, 0x0D, 0x49, 0x48, 0x44, 0x52,
    0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x06, 0x00, 0x00, 0x00, 0x1F, 0x15, 0xC4,
    0x89, 0x00, 0x00, 0x00, 0x0A, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9C, 0x63, 0x00, 0x01, 0x00, 0x00,
    0x05, 0x00, 0x01, 0x0D, 0x0A, 0x2D, 0xB4, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4E, 0x44, 0xAE,
    0x42, 0x60, 0x82,
];

pub fn crop_name(i: usize) -> String {
    format!("crop{i:03}")
}

/// Ground truth for fixture ids: class `i % 3`.
pub fn truth(crop_id: &str) -> &'static str {
    let i: usize = crop_id.trim_start_matches("crop").parse().expect("fixture id");
    CLASSES[i % 3]
}

/// Three well-separated classes in four dimensions: the first `VALIDATION`
/// ids are held out, the remaining `POOL` form the pool. Every crop has a
/// PNG and a manifest row. Seed batch and query batches hold 25 items.
pub fn small_project(dir: &Path, epochs: usize) -> Project {
    let mut store = EmbeddingStore::new(4, "fixture").unwrap();
    let mut crops = Vec::new();
    fs::create_dir_all(dir.join("crops")).unwrap();
    for i in 0..VALIDATION + POOL {
        let id = crop_name(i);
        let mut v = vec![0.0f32; 4];
        v[i % 3] = 3.0;
        v[3] = ((i * 37 % 11) as f32 - 5.0) / 10.0;
        v[(i + 1) % 3] += ((i * 13 % 7) as f32 - 3.0) / 10.0;
        store.insert(id.clone(), v).unwrap();
        let path = dir.join("crops").join(format!("{id}.png"));
        fs::write(&path, PNG_1X1).unwrap();
        crops.push(CropRecord {
            crop_id: id,
            source_image: format!("site1/img{i:03}.jpg"),
            rect: PixelRect::new(0, 0, 1, 1),
            detection_confidence: 0.9,
            crop_path: path,
        });
    }
    store.save(&dir.join(EMBEDDINGS_FILE)).unwrap();
    let mut manifest = Vec::new();
    write_manifest(&mut manifest, &crops, dir).unwrap();
    fs::write(dir.join(CROPS_FILE), manifest).unwrap();

    let validation: BTreeMap<String, String> = (0..VALIDATION)
        .map(|i| (crop_name(i), truth(&crop_name(i)).to_string()))
        .collect();
    Project::create(
        dir,
        ProjectInit {
            project_id: "fixture".into(),
            class_names: CLASSES.iter().map(|c| c.to_string()).collect(),
            label_budget: POOL,
            batch_size_query: 25,
            strategy: Strategy::Entropy,
            seed: 7,
            train: TrainConfig {
                epochs,
                seed: 7,
                batch_size: 8,
                ..TrainConfig::default()
            },
            validation,
            seed_set_size: Some(25),
        },
    )
    .unwrap()
}
