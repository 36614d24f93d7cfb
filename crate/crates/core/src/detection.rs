//! Detector batch-output ingestion.
//!
//! Reads the animal/person/vehicle detector's JSON batch format, filters the
//! hits, turns normalized boxes into padded pixel rectangles and writes one
//! PNG crop per surviving detection.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Slack allowed on `x + w` and `y + h` for detector rounding.
pub const BBOX_EPSILON: f64 = 1e-6;

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.2;
pub const DEFAULT_PADDING_FRAC: f64 = 0.05;

pub const MANIFEST_HEADER: &str =
    "crop_id,source_image,left,top,width,height,confidence,crop_path";

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("malformed detection file at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot decode image {path}: {message}")]
    Decode { path: String, message: String },
    #[error("cannot write crop {path}: {message}")]
    Write { path: String, message: String },
    #[error("crop rect {rect} does not fit inside {width}x{height} image")]
    RectOutOfBounds {
        rect: PixelRect,
        width: u32,
        height: u32,
    },
    #[error("invalid crop manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Animal,
    Person,
    Vehicle,
}

impl Category {
    pub fn from_name(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "animal" => Some(Category::Animal),
            "person" => Some(Category::Person),
            "vehicle" => Some(Category::Vehicle),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Animal => "animal",
            Category::Person => "person",
            Category::Vehicle => "vehicle",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Normalized `(x, y, w, h)` box with a top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        NormBox { x, y, w, h }
    }

    /// Returns the reason the box violates the normalized-box invariants, if any.
    pub fn validate(&self) -> Result<(), String> {
        let NormBox { x, y, w, h } = *self;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err("non-finite bbox coordinate".into());
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(format!("bbox origin ({x}, {y}) outside [0,1]"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(format!("bbox size ({w}, {h}) not positive"));
        }
        if x + w > 1.0 + BBOX_EPSILON || y + h > 1.0 + BBOX_EPSILON {
            return Err(format!("bbox extent ({}, {}) exceeds 1", x + w, y + h));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_path: String,
    pub category: Category,
    pub confidence: f64,
    pub bbox: NormBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn new(left: u32, top: u32, width: u32, height: u32) -> Self {
        PixelRect {
            left,
            top,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.left + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.top + self.height
    }

    pub fn contains(&self, other: &PixelRect) -> bool {
        self.left <= other.left
            && self.top <= other.top
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.width >= 1 && self.height >= 1 && self.right() <= width && self.bottom() <= height
    }
}

impl fmt::Display for PixelRect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.left, self.top, self.width, self.height
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub crop_id: String,
    pub source_image: String,
    pub rect: PixelRect,
    pub detection_confidence: f64,
    pub crop_path: PathBuf,
}

/// Why a detection entry did not become a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDetection {
    pub image: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub total_images: usize,
    pub empty_images: usize,
    pub failed_images: usize,
    pub total_detections: usize,
    pub records: usize,
    /// Unknown category codes. Not fatal.
    pub warnings: Vec<SkippedDetection>,
    /// Detections whose box or confidence broke an invariant.
    pub rejected: Vec<SkippedDetection>,
}

impl IngestSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDetections {
    pub records: Vec<DetectionRecord>,
    /// Code to name, as declared by the document (or the detector defaults).
    pub categories: BTreeMap<String, String>,
    pub summary: IngestSummary,
}

#[derive(Deserialize)]
struct RawDocument {
    images: Vec<RawImage>,
    #[serde(default)]
    detection_categories: Option<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
struct RawImage {
    file: String,
    #[serde(default)]
    detections: Option<Vec<RawDetection>>,
    #[serde(default)]
    failure: Option<String>,
}

#[derive(Deserialize)]
struct RawDetection {
    category: String,
    conf: f64,
    bbox: Vec<f64>,
}

fn default_categories() -> BTreeMap<String, String> {
    [("1", "animal"), ("2", "person"), ("3", "vehicle")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

/// Parses a detector batch-output document.
///
/// Unknown category codes are skipped with a warning; boxes or confidences
/// outside their valid ranges are rejected with a reason. Both land in the
/// summary, neither aborts the parse.
pub fn parse_detection_file(raw: &[u8]) -> Result<ParsedDetections, IngestError> {
    let doc: RawDocument = serde_json::from_slice(raw).map_err(|e| IngestError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let categories = doc.detection_categories.unwrap_or_else(default_categories);

    let mut summary = IngestSummary {
        total_images: doc.images.len(),
        ..Default::default()
    };
    let mut records = Vec::new();

    for image in doc.images {
        if image.failure.is_some() && image.detections.is_none() {
            summary.failed_images += 1;
            continue;
        }
        let detections = image.detections.unwrap_or_default();
        if detections.is_empty() {
            summary.empty_images += 1;
            continue;
        }
        for (index, det) in detections.into_iter().enumerate() {
            summary.total_detections += 1;
            let skip = |reason: String| SkippedDetection {
                image: image.file.clone(),
                index,
                reason,
            };
            let category = match categories.get(&det.category).and_then(|n| Category::from_name(n)) {
                Some(c) => c,
                None => {
                    log::warn!(
                        "{}: detection {index} has unknown category code {:?}",
                        image.file,
                        det.category
                    );
                    summary
                        .warnings
                        .push(skip(format!("unknown category code {:?}", det.category)));
                    continue;
                }
            };
            if det.bbox.len() != 4 {
                summary
                    .rejected
                    .push(skip(format!("bbox has {} values, expected 4", det.bbox.len())));
                continue;
            }
            let bbox = NormBox::new(det.bbox[0], det.bbox[1], det.bbox[2], det.bbox[3]);
            if let Err(reason) = bbox.validate() {
                summary.rejected.push(skip(reason));
                continue;
            }
            if !(0.0..=1.0).contains(&det.conf) {
                summary
                    .rejected
                    .push(skip(format!("confidence {} outside [0,1]", det.conf)));
                continue;
            }
            records.push(DetectionRecord {
                image_path: image.file.clone(),
                category,
                confidence: det.conf,
                bbox,
            });
        }
    }
    summary.records = records.len();

    Ok(ParsedDetections {
        records,
        categories,
        summary,
    })
}

/// Keeps records with `confidence >= min_confidence` and an allowed category.
pub fn filter_detections(
    records: &[DetectionRecord],
    min_confidence: f64,
    allowed: &[Category],
) -> Vec<DetectionRecord> {
    records
        .iter()
        .filter(|r| r.confidence >= min_confidence && allowed.contains(&r.category))
        .cloned()
        .collect()
}

/// Scales a normalized box to pixels, pads each side by `padding_frac` of the
/// box side, rounds every edge half away from zero and clamps to the image.
///
/// A box that collapses to zero width or height becomes the single pixel row
/// or column holding the box centre.
pub fn compute_crop_rect(bbox: &NormBox, image_dims: (u32, u32), padding_frac: f64) -> PixelRect {
    let (left, width) = axis_span(bbox.x, bbox.w, image_dims.0, padding_frac);
    let (top, height) = axis_span(bbox.y, bbox.h, image_dims.1, padding_frac);
    PixelRect::new(left, top, width, height)
}

fn axis_span(start: f64, len: f64, extent: u32, padding_frac: f64) -> (u32, u32) {
    debug_assert!(extent >= 1);
    let extent_f = extent as f64;
    let lo = start * extent_f;
    let span = len * extent_f;
    let pad = padding_frac * span;
    let a = (lo - pad).round().clamp(0.0, extent_f);
    let b = (lo + span + pad).round().clamp(0.0, extent_f);
    if b - a >= 1.0 {
        (a as u32, (b - a) as u32)
    } else {
        let centre = (lo + span / 2.0).floor().clamp(0.0, extent_f - 1.0);
        (centre as u32, 1)
    }
}

/// Deterministic crop id: lowercase hex of the first 128 bits of SHA-256 over
/// the source path and the rectangle.
pub fn crop_id(source_image: &str, rect: &PixelRect) -> String {
    let mut hasher = Sha256::new();
    hasher.update((source_image.len() as u64).to_le_bytes());
    hasher.update(source_image.as_bytes());
    for v in [rect.left, rect.top, rect.width, rect.height] {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    hex::encode(&digest[..16])
}

/// Crops written for one image plus any per-crop write failures.
#[derive(Debug, Default)]
pub struct CropBatch {
    pub crops: Vec<CropRecord>,
    pub failures: Vec<IngestError>,
}

/// Decodes `image_file` and writes one PNG per rect into `out_dir`.
pub fn extract_crops(
    image_file: &Path,
    source_image: &str,
    rects: &[(PixelRect, f64)],
    out_dir: &Path,
) -> Result<CropBatch, IngestError> {
    let img = open_image(image_file)?;
    Ok(extract_crops_from(&img, source_image, rects, out_dir))
}

fn open_image(path: &Path) -> Result<DynamicImage, IngestError> {
    let decode = |message: String| IngestError::Decode {
        path: path.display().to_string(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| decode(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode(e.to_string()))?;
    reader.decode().map_err(|e| decode(e.to_string()))
}

/// Crops an already decoded image. `rects` pairs each rectangle with the
/// confidence of the detection it came from.
pub fn extract_crops_from(
    img: &DynamicImage,
    source_image: &str,
    rects: &[(PixelRect, f64)],
    out_dir: &Path,
) -> CropBatch {
    let mut batch = CropBatch::default();
    for &(rect, confidence) in rects {
        if !rect.fits_within(img.width(), img.height()) {
            batch.failures.push(IngestError::RectOutOfBounds {
                rect,
                width: img.width(),
                height: img.height(),
            });
            continue;
        }
        let id = crop_id(source_image, &rect);
        let crop_path = out_dir.join(format!("{id}.png"));
        let crop = img.crop_imm(rect.left, rect.top, rect.width, rect.height);
        match crop.save_with_format(&crop_path, ImageFormat::Png) {
            Ok(()) => batch.crops.push(CropRecord {
                crop_id: id,
                source_image: source_image.to_string(),
                rect,
                detection_confidence: confidence,
                crop_path,
            }),
            Err(e) => batch.failures.push(IngestError::Write {
                path: crop_path.display().to_string(),
                message: e.to_string(),
            }),
        }
    }
    batch
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub min_confidence: f64,
    pub allowed_categories: Vec<Category>,
    pub padding_frac: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            allowed_categories: vec![Category::Animal],
            padding_frac: DEFAULT_PADDING_FRAC,
        }
    }
}

#[derive(Debug)]
pub struct IngestOutcome {
    /// In detector-file order.
    pub crops: Vec<CropRecord>,
    pub summary: IngestSummary,
    /// Per-image or per-crop failures; ingestion continued past each.
    pub errors: Vec<IngestError>,
}

/// Full ingest: parse, filter, compute rects and write crops to `crop_dir`.
/// Images are processed in parallel; output keeps input order.
pub fn ingest(
    detections_json: &[u8],
    image_dir: &Path,
    crop_dir: &Path,
    config: &IngestConfig,
) -> Result<IngestOutcome, IngestError> {
    let parsed = parse_detection_file(detections_json)?;
    let kept = filter_detections(
        &parsed.records,
        config.min_confidence,
        &config.allowed_categories,
    );
    std::fs::create_dir_all(crop_dir)?;

    let mut groups: Vec<(String, Vec<&DetectionRecord>)> = Vec::new();
    for rec in &kept {
        match groups.iter_mut().find(|(p, _)| *p == rec.image_path) {
            Some((_, list)) => list.push(rec),
            None => groups.push((rec.image_path.clone(), vec![rec])),
        }
    }

    let per_image: Vec<Result<CropBatch, IngestError>> = groups
        .par_iter()
        .map(|(source, dets)| {
            let img = open_image(&image_dir.join(source))?;
            let dims = (img.width(), img.height());
            let rects: Vec<(PixelRect, f64)> = dets
                .iter()
                .map(|d| (compute_crop_rect(&d.bbox, dims, config.padding_frac), d.confidence))
                .collect();
            Ok(extract_crops_from(&img, source, &rects, crop_dir))
        })
        .collect();

    let mut crops = Vec::new();
    let mut errors = Vec::new();
    for result in per_image {
        match result {
            Ok(batch) => {
                crops.extend(batch.crops);
                errors.extend(batch.failures);
            }
            Err(e) => {
                log::warn!("{e}");
                errors.push(e);
            }
        }
    }
    Ok(IngestOutcome {
        crops,
        summary: parsed.summary,
        errors,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    crop_id: String,
    source_image: String,
    left: u32,
    top: u32,
    width: u32,
    height: u32,
    confidence: f64,
    crop_path: String,
}

fn path_to_manifest(path: &Path, base: &Path) -> String {
    let rel = path.strip_prefix(base).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Writes the crop manifest CSV. `crop_path` is written relative to `base`
/// when it lies underneath it.
pub fn write_manifest<W: Write>(
    writer: W,
    crops: &[CropRecord],
    base: &Path,
) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    for c in crops {
        w.serialize(ManifestRow {
            crop_id: c.crop_id.clone(),
            source_image: c.source_image.clone(),
            left: c.rect.left,
            top: c.rect.top,
            width: c.rect.width,
            height: c.rect.height,
            confidence: c.detection_confidence,
            crop_path: path_to_manifest(&c.crop_path, base),
        })?;
    }
    if crops.is_empty() {
        w.write_record(MANIFEST_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a crop manifest; relative crop paths are resolved against `base`.
pub fn read_manifest<R: Read>(reader: R, base: &Path) -> Result<Vec<CropRecord>, IngestError> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != MANIFEST_HEADER {
        return Err(IngestError::Manifest(format!("unexpected header {header:?}")));
    }
    let mut crops = Vec::new();
    for row in r.deserialize::<ManifestRow>() {
        let row = row?;
        let rect = PixelRect::new(row.left, row.top, row.width, row.height);
        crops.push(CropRecord {
            crop_id: row.crop_id,
            source_image: row.source_image,
            rect,
            detection_confidence: row.confidence,
            crop_path: base.join(row.crop_path),
        });
    }
    Ok(crops)
}
