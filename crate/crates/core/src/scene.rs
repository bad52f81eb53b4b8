//! On-disk scenes: manifest, RGB-D frames, normalization into the unit cube,
//! annotation persistence, checkpoints and segmentation export.
//!
//! Poses in the manifest are camera-to-world, row-major 4x4, with camera axes
//! x right, y down, +z forward. Depth images are 16-bit PNGs holding z-depth in
//! millimeters, 0 meaning missing.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    encode_targets, load_feature_map, sample_feature_vectors, save_feature_map, AutoencoderConfig,
    FeatureAutoencoder, FeatureMap,
};
use crate::field::{FieldConfig, ParamGroup};
use crate::nn::{AdamConfig, AdamState};
use crate::objective::{AnnotationSet, AnnotationStroke, ClassInfo};
use crate::rendering::{pixel_center, Camera, Pose};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `x_normalized = scale * x + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        scale: 1.0,
        offset: [0.0; 3],
    };

    pub fn apply_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        p * self.scale + Vector3::from(self.offset)
    }

    pub fn apply_camera(&self, camera: &Camera) -> Camera {
        Camera {
            pose: Pose {
                rotation: camera.pose.rotation,
                translation: self.apply_point(camera.pose.translation),
            },
            ..*camera
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    /// Reference class map (indexed or 8-bit gray PNG), used for evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    pub split: Split,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub classes: Vec<ClassInfo>,
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
}

impl SceneManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One frame in normalized scene coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub camera: Camera,
    pub split: Split,
    /// Row-major linear colors in `[0, 1]`.
    pub rgb: Vec<[f32; 3]>,
    /// Distance along each pixel ray in scene units; 0 where missing.
    pub depth: Option<Vec<f32>>,
    /// Raw image features.
    pub features: Option<FeatureMap>,
    /// Encoded feature targets.
    pub targets: Option<FeatureMap>,
    /// Reference class map.
    pub labels: Option<Vec<u16>>,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: SceneManifest,
    pub classes: Vec<ClassInfo>,
    pub frames: Vec<Frame>,
    pub normalization: Normalization,
    pub near: f64,
    pub far: f64,
}

impl SceneDataset {
    pub fn train_frames(&self) -> Vec<usize> {
        self.split_frames(Split::Train)
    }

    pub fn test_frames(&self) -> Vec<usize> {
        self.split_frames(Split::Test)
    }

    fn split_frames(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].split == split).collect()
    }

    pub fn frame_index(&self, id: &str) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn frame_sizes(&self) -> Vec<(u32, u32)> {
        self.frames.iter().map(|f| (f.camera.width, f.camera.height)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn empty_annotations(&self) -> AnnotationSet {
        AnnotationSet::new(self.classes.clone(), self.frame_sizes())
    }

    pub fn has_features(&self) -> bool {
        self.frames.iter().any(|f| f.features.is_some())
    }

    pub fn has_targets(&self) -> bool {
        self.frames.iter().any(|f| f.targets.is_some())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }
}

fn read_rgb(path: &Path) -> Result<(u32, u32, Vec<[f32; 3]>)> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_owned(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let px = img.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
    Ok((w, h, px))
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_png_bytes(&bytes, path)
}

fn decode_png_bytes(bytes: &[u8], path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let img_err = |e: png::DecodingError| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(img_err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(img_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads a 16-bit single-channel PNG.
pub fn read_depth_png(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Image {
            path: path.to_owned(),
            message: "depth must be a 16-bit grayscale PNG".into(),
        });
    }
    let px = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((info.width, info.height, px))
}

/// Reads class indices from an 8-bit indexed or grayscale PNG.
pub fn read_class_map(path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    decode_class_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?, path)
}

/// Class indices from in-memory PNG bytes; `path` only labels errors.
pub fn decode_class_png(bytes: &[u8], path: &Path) -> Result<(u32, u32, Vec<u16>)> {
    let (info, buf) = decode_png_bytes(bytes, path)?;
    let ok_type = matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale);
    if !ok_type || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image {
            path: path.to_owned(),
            message: "class map must be an 8-bit indexed or grayscale PNG".into(),
        });
    }
    Ok((info.width, info.height, buf.into_iter().map(u16::from).collect()))
}

fn encode_png(width: u32, height: u32, color: png::ColorType, depth: png::BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().expect("in-memory PNG header");
        writer.write_image_data(data).expect("in-memory PNG data");
    }
    out
}

pub fn encode_rgb_png(width: u32, height: u32, rgb: &[[f32; 3]]) -> Vec<u8> {
    let bytes: Vec<u8> = rgb
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    encode_png(width, height, png::ColorType::Rgb, png::BitDepth::Eight, None, &bytes)
}

pub fn encode_gray_png(width: u32, height: u32, values: &[u8]) -> Vec<u8> {
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Eight, None, values)
}

pub fn encode_depth_png(width: u32, height: u32, millimeters: &[u16]) -> Vec<u8> {
    let bytes: Vec<u8> = millimeters.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &bytes)
}

/// Indexed-color PNG whose palette entry `i` is the color of class `i`.
pub fn encode_class_png(width: u32, height: u32, classes: &[u16], palette: &[ClassInfo]) -> Result<Vec<u8>> {
    if palette.is_empty() || palette.len() > 256 {
        return Err(Error::Data(format!("cannot index {} classes in a PNG palette", palette.len())));
    }
    if let Some(&c) = classes.iter().find(|&&c| c as usize >= palette.len()) {
        return Err(Error::Data(format!("class {c} outside palette")));
    }
    let pal: Vec<u8> = palette.iter().flat_map(|c| c.color).collect();
    let idx: Vec<u8> = classes.iter().map(|&c| c as u8).collect();
    Ok(encode_png(width, height, png::ColorType::Indexed, png::BitDepth::Eight, Some(pal), &idx))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Camera centers plus back-projected depth points.
fn scene_points(cameras: &[Camera], depths: &[Option<Vec<f32>>]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let centers = cameras.iter().map(Camera::center).collect();
    let mut points = Vec::new();
    for (cam, depth) in cameras.iter().zip(depths) {
        let Some(depth) = depth else { continue };
        for (i, &z) in depth.iter().enumerate() {
            if z <= 0.0 {
                continue;
            }
            let (u, v) = pixel_center(i as u32 % cam.width, i as u32 / cam.width);
            let p = cam.pose.rotation * (cam.camera_direction(u, v) * z as f64) + cam.pose.translation;
            points.push(p);
        }
    }
    (centers, points)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Similarity that maps the box spanned by the camera centers and the
/// 1st-99th percentile of back-projected depth points (z-depth in meters)
/// into `[-0.9, 0.9]^3`. Degenerate extents fall back to unit scale.
pub fn normalize_scene(cameras: &[Camera], depths: &[Option<Vec<f32>>]) -> Result<Normalization> {
    if cameras.is_empty() {
        return Err(Error::Scene("normalization needs at least one camera".into()));
    }
    let (centers, points) = scene_points(cameras, depths);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &centers {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    if !points.is_empty() {
        for a in 0..3 {
            let mut v: Vec<f64> = points.iter().map(|p| p[a]).collect();
            v.sort_by(f64::total_cmp);
            lo[a] = lo[a].min(percentile(&v, 0.01));
            hi[a] = hi[a].max(percentile(&v, 0.99));
        }
    }
    let center: [f64; 3] = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    let scale = if half > 1e-9 { 0.9 / half } else { 1.0 };
    Ok(Normalization {
        scale,
        offset: center.map(|c| -scale * c),
    })
}

/// Near/far bounds from the 1st and 99th percentile of normalized ray
/// distances, widened by 10%.
fn depth_bounds(frames: &[Frame]) -> Option<(f64, f64)> {
    let mut d: Vec<f64> = frames
        .iter()
        .filter_map(|f| f.depth.as_ref())
        .flatten()
        .filter(|&&v| v > 0.0)
        .map(|&v| v as f64)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(((0.9 * percentile(&d, 0.01)).max(1e-3), 1.1 * percentile(&d, 0.99)))
}

pub const DEFAULT_NEAR: f64 = 0.05;
pub const DEFAULT_FAR: f64 = 3.5;

/// Loads `manifest.json` from `path` (a scene directory or the file itself).
pub fn load_scene(path: &Path) -> Result<SceneDataset> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_owned() };
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_owned();
    let manifest = SceneManifest::load(&manifest_path)?;
    if manifest.frames.is_empty() {
        return Err(Error::Scene("empty scene".into()));
    }
    if manifest.classes.is_empty() {
        return Err(Error::Scene("scene declares no classes".into()));
    }
    for (i, c) in manifest.classes.iter().enumerate() {
        if c.id as usize != i {
            return Err(Error::Scene(format!("class ids must be 0..C in order, found {} at {i}", c.id)));
        }
    }
    let mut seen = BTreeSet::new();
    let mut raw = Vec::with_capacity(manifest.frames.len());
    for entry in &manifest.frames {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::Scene(format!("duplicate frame id `{}`", entry.id)));
        }
        let scene_err = |m: String| Error::Scene(format!("frame `{}`: {m}", entry.id));
        entry.camera.validate().map_err(|e| scene_err(e.to_string()))?;
        let (w, h) = (entry.camera.width, entry.camera.height);
        let (rw, rh, rgb) = read_rgb(&root.join(&entry.rgb)).map_err(|e| scene_err(e.to_string()))?;
        if (rw, rh) != (w, h) {
            return Err(scene_err(format!("rgb is {rw}x{rh} but the camera is {w}x{h}")));
        }
        let depth = match &entry.depth {
            Some(p) => {
                let (dw, dh, mm) = read_depth_png(&root.join(p)).map_err(|e| scene_err(e.to_string()))?;
                if (dw, dh) != (w, h) {
                    return Err(scene_err(format!("depth is {dw}x{dh} but rgb is {w}x{h}")));
                }
                Some(mm.iter().map(|&v| v as f32 / 1000.0).collect::<Vec<f32>>())
            }
            None => None,
        };
        let features = match &entry.features {
            Some(p) => Some(load_feature_map(&root.join(p)).map_err(|e| scene_err(e.to_string()))?),
            None => None,
        };
        let labels = match &entry.labels {
            Some(p) => {
                let (lw, lh, l) = read_class_map(&root.join(p)).map_err(|e| scene_err(e.to_string()))?;
                if (lw, lh) != (w, h) {
                    return Err(scene_err(format!("labels are {lw}x{lh} but rgb is {w}x{h}")));
                }
                if let Some(&c) = l.iter().find(|&&c| c as usize >= manifest.classes.len()) {
                    return Err(scene_err(format!("label {c} is not a declared class")));
                }
                Some(l)
            }
            None => None,
        };
        raw.push((entry, rgb, depth, features, labels));
    }
    let cameras: Vec<Camera> = raw.iter().map(|r| r.0.camera).collect();
    let normalization = match manifest.normalization {
        Some(n) => n,
        None => normalize_scene(&cameras, &raw.iter().map(|r| r.2.clone()).collect::<Vec<_>>())?,
    };
    let frames: Vec<Frame> = raw
        .into_iter()
        .map(|(entry, rgb, depth, features, labels)| {
            let camera = normalization.apply_camera(&entry.camera);
            let depth = depth.map(|z| {
                z.iter()
                    .enumerate()
                    .map(|(i, &z)| {
                        let (u, v) = pixel_center(i as u32 % camera.width, i as u32 / camera.width);
                        (camera.z_depth_to_distance(u, v, z as f64) * normalization.scale) as f32
                    })
                    .collect()
            });
            Frame {
                id: entry.id.clone(),
                camera,
                split: entry.split,
                rgb,
                depth,
                features,
                targets: None,
                labels,
            }
        })
        .collect();
    let (near, far) = match (manifest.near, manifest.far) {
        (Some(n), Some(f)) => (n, f),
        _ => depth_bounds(&frames).unwrap_or((DEFAULT_NEAR, DEFAULT_FAR)),
    };
    if !(near > 0.0 && far > near) {
        return Err(Error::Scene(format!("invalid near/far {near}/{far}")));
    }
    Ok(SceneDataset {
        root,
        classes: manifest.classes.clone(),
        manifest,
        frames,
        normalization,
        near,
        far,
    })
}

#[derive(Serialize, Deserialize, PartialEq)]
struct AutoencoderStamp {
    config: AutoencoderConfig,
    sources: Vec<(String, u64)>,
}

/// Trains (or reuses from the cache) the feature autoencoder and attaches
/// encoded targets to every frame that has features. Cache files live under
/// `<scene>/cache` and are reused only when config and sources match.
pub fn prepare_feature_targets(dataset: &mut SceneDataset, config: &AutoencoderConfig) -> Result<Option<FeatureAutoencoder>> {
    if !dataset.has_features() {
        return Ok(None);
    }
    let cache = dataset.cache_dir();
    let stamp = AutoencoderStamp {
        config: *config,
        sources: dataset
            .manifest
            .frames
            .iter()
            .filter_map(|f| {
                let p = f.features.as_ref()?;
                let len = std::fs::metadata(dataset.root.join(p)).map(|m| m.len()).unwrap_or(0);
                Some((p.clone(), len))
            })
            .collect(),
    };
    let stamp_path = cache.join("autoencoder.stamp.json");
    let ae_path = cache.join("autoencoder.json");
    let cached = std::fs::read_to_string(&stamp_path)
        .ok()
        .and_then(|s| serde_json::from_str::<AutoencoderStamp>(&s).ok())
        .filter(|s| *s == stamp)
        .and_then(|_| std::fs::read_to_string(&ae_path).ok())
        .and_then(|t| FeatureAutoencoder::from_json(&t).ok());
    let reuse = cached.is_some();
    let ae = match cached {
        Some(ae) => ae,
        None => {
            let maps: Vec<&FeatureMap> = dataset.frames.iter().filter_map(|f| f.features.as_ref()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let samples = sample_feature_vectors(&maps, config.sample_count, &mut rng)?;
            let mut ae = FeatureAutoencoder::new(maps[0].dim as usize, config, &mut rng)?;
            ae.train(&samples, config)?;
            write_file(&ae_path, ae.to_json()?.as_bytes())?;
            write_file(&stamp_path, serde_json::to_string(&stamp)?.as_bytes())?;
            ae
        }
    };
    for frame in &mut dataset.frames {
        let Some(features) = &frame.features else { continue };
        let path = cache.join("targets").join(format!("{}.fmap", frame.id));
        let targets = match reuse.then(|| load_feature_map(&path).ok()).flatten() {
            Some(t) => t,
            None => {
                let t = encode_targets(features, &ae)?;
                std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
                save_feature_map(&path, &t)?;
                t
            }
        };
        frame.targets = Some(targets);
    }
    Ok(Some(ae))
}

/// Writes one stroke per line.
pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    let mut out = Vec::new();
    for s in set.strokes() {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn load_annotations(path: &Path, classes: Vec<ClassInfo>, frame_sizes: Vec<(u32, u32)>) -> Result<AnnotationSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut set = AnnotationSet::new(classes, frame_sizes);
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let stroke: AnnotationStroke = serde_json::from_str(&line)?;
        set.insert(stroke)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
    }
    Ok(set)
}

/// Parameters and optimizer moments of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub group: ParamGroup,
    pub params: Vec<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field_config: FieldConfig,
    /// Free-form training configuration echo.
    pub train_config: serde_json::Value,
    pub iteration: u64,
    pub annotation_revision: u64,
    pub groups: Vec<GroupState>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    field_config: FieldConfig,
    train_config: serde_json::Value,
    iteration: u64,
    annotation_revision: u64,
    groups: Vec<GroupHeader>,
}

#[derive(Serialize, Deserialize)]
struct GroupHeader {
    group: ParamGroup,
    len: usize,
    adam: AdamConfig,
    steps: u64,
}

const CKPT_MAGIC: &[u8; 4] = b"VSCK";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            field_config: self.field_config.clone(),
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            annotation_revision: self.annotation_revision,
            groups: self
                .groups
                .iter()
                .map(|g| GroupHeader {
                    group: g.group,
                    len: g.params.len(),
                    adam: g.adam.config,
                    steps: g.adam.step_count,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for g in &self.groups {
            for buf in [&g.params, &g.adam.first_moment, &g.adam.second_moment] {
                for v in buf.iter() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, message: &str| Error::Format {
            offset: offset as u64,
            message: message.to_owned(),
        };
        if bytes.len() < 16 || &bytes[..4] != CKPT_MAGIC {
            return Err(fmt(0, "not a checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(fmt(4, "unsupported checkpoint version"));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json_end = 16usize.checked_add(json_len).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt(bytes.len(), "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..json_end])?;
        let mut pos = json_end;
        let mut take = |len: usize| -> Result<Vec<f32>> {
            let end = pos + 4 * len;
            if end > bytes.len() {
                return Err(fmt(bytes.len(), "truncated parameter data"));
            }
            let v = bytes[pos..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos = end;
            Ok(v)
        };
        let mut groups = Vec::new();
        for g in &header.groups {
            let params = take(g.len)?;
            let first_moment = take(g.len)?;
            let second_moment = take(g.len)?;
            groups.push(GroupState {
                group: g.group,
                params,
                adam: AdamState {
                    config: g.adam,
                    first_moment,
                    second_moment,
                    step_count: g.steps,
                },
            });
        }
        if pos != bytes.len() {
            return Err(fmt(pos, "trailing bytes"));
        }
        Ok(Self {
            field_config: header.field_config,
            train_config: header.train_config,
            iteration: header.iteration,
            annotation_revision: header.annotation_revision,
            groups,
        })
    }

    /// Refuses configs that differ from the one the checkpoint was trained
    /// with, listing every differing key.
    pub fn check_compatible(&self, requested: &FieldConfig) -> Result<()> {
        let a = serde_json::to_value(&self.field_config)?;
        let b = serde_json::to_value(requested)?;
        let mut diff = Vec::new();
        json_diff("", &a, &b, &mut diff);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(diff.join("\n")))
        }
    }
}

fn json_diff(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                json_diff(&path, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        _ if a != b => out.push(format!("  {prefix}: checkpoint={a} requested={b}")),
        _ => {}
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    write_file(&tmp, &bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes `<id>.png` (indexed color, palette = class colors) for every frame
/// plus `palette.json`.
pub fn export_segmentation(out_dir: &Path, frames: &[(String, u32, u32, Vec<u16>)], classes: &[ClassInfo]) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (id, w, h, map) in frames {
        let png = encode_class_png(*w, *h, map, classes)?;
        write_file(&out_dir.join(format!("{id}.png")), &png)?;
    }
    let mut f = std::fs::File::create(out_dir.join("palette.json")).map_err(|e| Error::io(out_dir, e))?;
    f.write_all(serde_json::to_string_pretty(classes)?.as_bytes())
        .map_err(|e| Error::io(out_dir, e))
}
