//! Evaluation samples: camera images, panoramas, highway scenarios, and the
//! JSON-lines manifest that lists them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use image::{GenericImage, ImageFormat, RgbaImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::DrivingAction;
use crate::backend::ImagePayload;
use crate::geometry::Point2D;
use crate::object::{ObjectCategory, ObjectRecord};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("camera {camera} has height {actual}, expected {expected} to match its group")]
    HeightMismatch { camera: CameraPosition, expected: u32, actual: u32 },
    #[error("missing image for camera {0}")]
    MissingImage(String),
    #[error("ambiguous image for camera {camera}: {candidates:?}")]
    AmbiguousImage { camera: CameraPosition, candidates: Vec<PathBuf> },
    #[error("failed to read image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("manifest line {line}: duplicate sample_id {sample_id:?} (first seen on line {first_line})")]
    DuplicateSampleId { sample_id: String, line: usize, first_line: usize },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid seam offsets: {0}")]
    InvalidSeams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CameraPosition {
    Front,
    FrontLeft,
    FrontRight,
    Back,
    BackLeft,
    BackRight,
}

impl CameraPosition {
    pub const ALL: [CameraPosition; 6] = [
        CameraPosition::Front,
        CameraPosition::FrontLeft,
        CameraPosition::FrontRight,
        CameraPosition::Back,
        CameraPosition::BackLeft,
        CameraPosition::BackRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CameraPosition::Front => "front",
            CameraPosition::FrontLeft => "front_left",
            CameraPosition::FrontRight => "front_right",
            CameraPosition::Back => "back",
            CameraPosition::BackLeft => "back_left",
            CameraPosition::BackRight => "back_right",
        }
    }
}

impl fmt::Display for CameraPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A decoded image together with the path it was referenced by.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSource {
    /// Path as written in the manifest (relative to the manifest directory).
    pub path: String,
    pub raster: RgbaImage,
}

impl ImageSource {
    pub fn from_raster(path: impl Into<String>, raster: RgbaImage) -> Self {
        Self { path: path.into(), raster }
    }

    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }
}

/// The six surround-view cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSet {
    pub front: ImageSource,
    pub front_left: ImageSource,
    pub front_right: ImageSource,
    pub back: ImageSource,
    pub back_left: ImageSource,
    pub back_right: ImageSource,
}

impl CameraSet {
    pub fn get(&self, camera: CameraPosition) -> &ImageSource {
        match camera {
            CameraPosition::Front => &self.front,
            CameraPosition::FrontLeft => &self.front_left,
            CameraPosition::FrontRight => &self.front_right,
            CameraPosition::Back => &self.back,
            CameraPosition::BackLeft => &self.back_left,
            CameraPosition::BackRight => &self.back_right,
        }
    }

    /// Builds a set from a lookup, failing on the first camera that is absent.
    pub fn from_lookup(mut lookup: impl FnMut(CameraPosition) -> Option<ImageSource>) -> Result<Self, SceneError> {
        let mut take = |c: CameraPosition| lookup(c).ok_or_else(|| SceneError::MissingImage(c.name().into()));
        Ok(CameraSet {
            front: take(CameraPosition::Front)?,
            front_left: take(CameraPosition::FrontLeft)?,
            front_right: take(CameraPosition::FrontRight)?,
            back: take(CameraPosition::Back)?,
            back_left: take(CameraPosition::BackLeft)?,
            back_right: take(CameraPosition::BackRight)?,
        })
    }
}

/// Horizontal pixel offsets where each source image begins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeamOffsets {
    pub front: Vec<u32>,
    pub back: Vec<u32>,
}

impl SeamOffsets {
    /// Single-source panoramas with no recorded seams.
    pub fn whole() -> Self {
        Self { front: vec![0], back: vec![0] }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (name, seams) in [("front", &self.front), ("back", &self.back)] {
            if seams.first() != Some(&0) {
                return Err(SceneError::InvalidSeams(format!("{name} seams must start at 0")));
            }
            if seams.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SceneError::InvalidSeams(format!("{name} seams must be strictly increasing")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaPair {
    pub front_panorama: RgbaImage,
    pub back_panorama: RgbaImage,
    pub seam_offsets: SeamOffsets,
}

impl PanoramaPair {
    /// PNG-encoded front and back panoramas, in that order.
    pub fn to_attachments(&self) -> Vec<ImagePayload> {
        vec![
            ImagePayload::png("front", encode_png(&self.front_panorama)),
            ImagePayload::png("back", encode_png(&self.back_panorama)),
        ]
    }

    /// Largest width and height over both panoramas.
    pub fn bounds(&self) -> (u32, u32) {
        (
            self.front_panorama.width().max(self.back_panorama.width()),
            self.front_panorama.height().max(self.back_panorama.height()),
        )
    }
}

/// Concatenates (left, center, right) side by side for the front and back
/// groups. Pixels are copied verbatim: no blending and no scaling.
pub fn merge_panorama(cameras: &CameraSet) -> Result<PanoramaPair, SceneError> {
    use CameraPosition::*;
    let (front, front_seams) = merge_group(cameras, [FrontLeft, Front, FrontRight])?;
    let (back, back_seams) = merge_group(cameras, [BackLeft, Back, BackRight])?;
    Ok(PanoramaPair {
        front_panorama: front,
        back_panorama: back,
        seam_offsets: SeamOffsets { front: front_seams, back: back_seams },
    })
}

fn merge_group(cameras: &CameraSet, order: [CameraPosition; 3]) -> Result<(RgbaImage, Vec<u32>), SceneError> {
    let height = cameras.get(order[1]).height();
    for cam in order {
        let actual = cameras.get(cam).height();
        if actual != height {
            return Err(SceneError::HeightMismatch { camera: cam, expected: height, actual });
        }
    }
    let width: u32 = order.iter().map(|&c| cameras.get(c).width()).sum();
    let mut out = RgbaImage::new(width, height);
    let mut seams = Vec::with_capacity(3);
    let mut x = 0;
    for cam in order {
        let src = &cameras.get(cam).raster;
        seams.push(x);
        out.copy_from(src, x, 0).expect("source fits by construction");
        x += src.width();
    }
    Ok((out, seams))
}

pub fn encode_png(raster: &RgbaImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    raster.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encoding");
    buf.into_inner()
}

pub fn write_png(path: &Path, raster: &RgbaImage) -> Result<(), SceneError> {
    fs::write(path, encode_png(raster))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<RgbaImage, SceneError> {
    let img = image::open(path).map_err(|source| SceneError::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgba8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoramaImages {
    pub front: ImageSource,
    pub back: ImageSource,
    /// Optional `seams.json` sidecar path as written in the manifest.
    pub seams_path: Option<String>,
    pub seam_offsets: SeamOffsets,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneImages {
    Cameras(CameraSet),
    Panoramas(PanoramaImages),
}

impl SceneImages {
    pub fn panoramas(&self) -> Result<PanoramaPair, SceneError> {
        match self {
            SceneImages::Cameras(set) => merge_panorama(set),
            SceneImages::Panoramas(p) => Ok(PanoramaPair {
                front_panorama: p.front.raster.clone(),
                back_panorama: p.back.raster.clone(),
                seam_offsets: p.seam_offsets.clone(),
            }),
        }
    }
}

/// Reference labels for one sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub objects: Vec<ObjectRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_decision: Option<DrivingAction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_distance_m: Option<f64>,
    #[serde(default)]
    pub category_presence: BTreeMap<ObjectCategory, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vehicle_id: String,
    pub lane: i64,
    pub longitudinal_pos_m: f64,
    pub speed_mps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Point2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighwayScenario {
    pub ego: VehicleState,
    #[serde(default)]
    pub neighbors: Vec<VehicleState>,
    pub lane_count: u32,
}

impl HighwayScenario {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.lane_count == 0 {
            return Err(SceneError::InvalidScenario("lane_count must be positive".into()));
        }
        for v in std::iter::once(&self.ego).chain(&self.neighbors) {
            if v.lane < 0 || v.lane >= self.lane_count as i64 {
                return Err(SceneError::InvalidScenario(format!(
                    "vehicle {} lane {} outside [0, {})",
                    v.vehicle_id, v.lane, self.lane_count
                )));
            }
            if !(v.speed_mps >= 0.0 && v.speed_mps.is_finite()) {
                return Err(SceneError::InvalidScenario(format!(
                    "vehicle {} speed {} must be nonnegative",
                    v.vehicle_id, v.speed_mps
                )));
            }
            if !v.longitudinal_pos_m.is_finite() || v.coords.is_some_and(|c| !c.is_finite()) {
                return Err(SceneError::InvalidScenario(format!("vehicle {} has non-finite position", v.vehicle_id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub sample_id: String,
    /// `None` for text-only scenario samples.
    pub images: Option<SceneImages>,
    pub ground_truth: GroundTruth,
    pub scenario: Option<HighwayScenario>,
    pub scene_tags: BTreeSet<String>,
}

impl SceneSample {
    pub fn validate(&self) -> Result<(), SceneError> {
        if let Some(d) = self.ground_truth.true_distance_m {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(SceneError::InvalidScenario(format!("true_distance_m {d} must be nonnegative")));
            }
        }
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        if let Some(SceneImages::Cameras(set)) = &self.images {
            merge_panorama(set)?;
        }
        if let Some(SceneImages::Panoramas(p)) = &self.images {
            p.seam_offsets.validate()?;
        }
        Ok(())
    }
}

/// Renders a highway scenario as prompt text. Numbers use one decimal place;
/// neighbors are listed nearest first by absolute longitudinal offset.
pub fn scenario_to_text(scenario: &HighwayScenario) -> String {
    let mut out = String::new();
    let lanes = if scenario.lane_count == 1 { "lane" } else { "lanes" };
    let _ = writeln!(out, "Highway scenario with {} {lanes}.", scenario.lane_count);
    let _ =
        writeln!(out, "Ego vehicle: lane {}, speed {} m/s.", scenario.ego.lane, one_decimal(scenario.ego.speed_mps));
    if scenario.neighbors.is_empty() {
        out.push_str("No surrounding vehicles.\n");
        return out;
    }
    let mut neighbors: Vec<&VehicleState> = scenario.neighbors.iter().collect();
    neighbors.sort_by(|a, b| {
        a.longitudinal_pos_m
            .abs()
            .total_cmp(&b.longitudinal_pos_m.abs())
            .then(a.longitudinal_pos_m.total_cmp(&b.longitudinal_pos_m))
            .then_with(|| a.vehicle_id.cmp(&b.vehicle_id))
    });
    out.push_str("Surrounding vehicles (nearest first, position relative to ego, positive is ahead):\n");
    for v in neighbors {
        let _ = writeln!(
            out,
            "- Vehicle {}: lane {}, position {} m, speed {} m/s.",
            v.vehicle_id,
            v.lane,
            signed_one_decimal(v.longitudinal_pos_m),
            one_decimal(v.speed_mps)
        );
    }
    out
}

fn one_decimal(value: f64) -> String {
    let s = format!("{value:.1}");
    if s == "-0.0" {
        "0.0".to_string()
    } else {
        s
    }
}

fn signed_one_decimal(value: f64) -> String {
    let s = one_decimal(value);
    if s.starts_with('-') || s == "0.0" {
        s
    } else {
        format!("+{s}")
    }
}

// --- manifest ---------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum ImagesEntry {
    Cameras {
        front: String,
        front_left: String,
        front_right: String,
        back: String,
        back_left: String,
        back_right: String,
    },
    Panoramas {
        front: String,
        back: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seams: Option<String>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLine {
    sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    images: Option<ImagesEntry>,
    #[serde(default)]
    ground_truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scenario: Option<HighwayScenario>,
    #[serde(default)]
    scene_tags: BTreeSet<String>,
}

struct ImageCache<'a> {
    base: &'a Path,
    decoded: HashMap<PathBuf, RgbaImage>,
}

impl ImageCache<'_> {
    fn load(&mut self, rel: &str) -> Result<ImageSource, SceneError> {
        let full = self.base.join(rel);
        if let Some(r) = self.decoded.get(&full) {
            return Ok(ImageSource::from_raster(rel, r.clone()));
        }
        let raster = read_image(&full)?;
        self.decoded.insert(full, raster.clone());
        Ok(ImageSource::from_raster(rel, raster))
    }
}

/// Loads a JSON-lines manifest. Image paths resolve relative to the manifest's
/// directory. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<SceneSample>, SceneError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut cache = ImageCache { base, decoded: HashMap::new() };
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestLine =
            serde_json::from_str(&line).map_err(|e| SceneError::Manifest { line: line_no, message: e.to_string() })?;
        if let Some(&first_line) = seen.get(&entry.sample_id) {
            return Err(SceneError::DuplicateSampleId { sample_id: entry.sample_id, line: line_no, first_line });
        }
        seen.insert(entry.sample_id.clone(), line_no);
        let sample = sample_from_entry(entry, &mut cache)
            .map_err(|e| SceneError::Manifest { line: line_no, message: e.to_string() })?;
        samples.push(sample);
    }
    Ok(samples)
}

fn sample_from_entry(entry: ManifestLine, cache: &mut ImageCache<'_>) -> Result<SceneSample, SceneError> {
    let images = match entry.images {
        None => None,
        Some(ImagesEntry::Cameras { front, front_left, front_right, back, back_left, back_right }) => {
            Some(SceneImages::Cameras(CameraSet {
                front: cache.load(&front)?,
                front_left: cache.load(&front_left)?,
                front_right: cache.load(&front_right)?,
                back: cache.load(&back)?,
                back_left: cache.load(&back_left)?,
                back_right: cache.load(&back_right)?,
            }))
        }
        Some(ImagesEntry::Panoramas { front, back, seams }) => {
            let seam_offsets = match &seams {
                Some(rel) => {
                    let text = fs::read_to_string(cache.base.join(rel))?;
                    serde_json::from_str(&text).map_err(|e| SceneError::InvalidSeams(e.to_string()))?
                }
                None => SeamOffsets::whole(),
            };
            Some(SceneImages::Panoramas(PanoramaImages {
                front: cache.load(&front)?,
                back: cache.load(&back)?,
                seams_path: seams,
                seam_offsets,
            }))
        }
    };
    let sample = SceneSample {
        sample_id: entry.sample_id,
        images,
        ground_truth: entry.ground_truth,
        scenario: entry.scenario,
        scene_tags: entry.scene_tags,
    };
    sample.validate()?;
    Ok(sample)
}

/// Writes samples as a JSON-lines manifest, referencing images by the paths
/// they were loaded from. Rasters are not written.
pub fn write_manifest(path: &Path, samples: &[SceneSample]) -> Result<(), SceneError> {
    let mut file = fs::File::create(path)?;
    for sample in samples {
        let images = sample.images.as_ref().map(|imgs| match imgs {
            SceneImages::Cameras(c) => ImagesEntry::Cameras {
                front: c.front.path.clone(),
                front_left: c.front_left.path.clone(),
                front_right: c.front_right.path.clone(),
                back: c.back.path.clone(),
                back_left: c.back_left.path.clone(),
                back_right: c.back_right.path.clone(),
            },
            SceneImages::Panoramas(p) => ImagesEntry::Panoramas {
                front: p.front.path.clone(),
                back: p.back.path.clone(),
                seams: p.seams_path.clone(),
            },
        });
        let entry = ManifestLine {
            sample_id: sample.sample_id.clone(),
            images,
            ground_truth: sample.ground_truth.clone(),
            scenario: sample.scenario.clone(),
            scene_tags: sample.scene_tags.clone(),
        };
        let line =
            serde_json::to_string(&entry).map_err(|e| SceneError::Manifest { line: 0, message: e.to_string() })?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}

/// Finds `<camera>.<ext>` files for all six cameras in `dir`.
pub fn load_camera_dir(dir: &Path) -> Result<CameraSet, SceneError> {
    let mut found: BTreeMap<CameraPosition, Vec<PathBuf>> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) =
            (path.file_stem().and_then(|s| s.to_str()), path.extension().and_then(|s| s.to_str()))
        else {
            continue;
        };
        let ext = ext.to_ascii_lowercase();
        if !matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
            continue;
        }
        if let Some(cam) = CameraPosition::ALL.into_iter().find(|c| c.name() == stem) {
            found.entry(cam).or_default().push(path);
        }
    }
    let mut resolved = HashMap::new();
    for cam in CameraPosition::ALL {
        match found.remove(&cam) {
            None => return Err(SceneError::MissingImage(cam.name().into())),
            Some(mut paths) if paths.len() > 1 => {
                paths.sort();
                return Err(SceneError::AmbiguousImage { camera: cam, candidates: paths });
            }
            Some(mut paths) => {
                let path = paths.pop().expect("one path");
                let raster = read_image(&path)?;
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                resolved.insert(cam, ImageSource::from_raster(name, raster));
            }
        }
    }
    CameraSet::from_lookup(|c| resolved.remove(&c))
}
