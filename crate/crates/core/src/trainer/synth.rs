//! Analytic RGB-D scenes with exact depth, class maps and synthetic features.
//!
//! World frame is z-up. Surfaces are Lambertian under one directional light
//! plus ambient. Albedo patterns reuse the same colors across classes so color
//! alone does not determine the class.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{class_embeddings, save_feature_map, synth_features, SynthFeatureParams};
use crate::objective::ClassInfo;
use crate::rendering::{pixel_center, Camera, Pose};
use crate::scene::{
    encode_class_png, encode_depth_png, encode_rgb_png, normalize_scene, write_file, FrameEntry, SceneManifest,
    Split, MANIFEST_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Horizontal plane `z = height`, infinite.
    Plane { height: f64 },
    Sphere { center: [f64; 3], radius: f64 },
    /// Axis-aligned box.
    Box { center: [f64; 3], half_extents: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub shape: Shape,
    pub class: u32,
    pub albedo: [f64; 3],
    /// Second checker color; `None` gives a uniform surface.
    #[serde(default)]
    pub pattern: Option<[f64; 3]>,
    /// Checker cell size in world units.
    #[serde(default = "default_cell")]
    pub cell: f64,
    /// The checker covers only `|x|, |y| <= extent`; plain albedo beyond.
    #[serde(default)]
    pub pattern_extent: Option<f64>,
}

fn default_cell() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub count: usize,
    /// Distance from the look-at point.
    pub radius: f64,
    pub elevation_deg: f64,
    pub azimuth_offset_deg: f64,
    pub look_at: [f64; 3],
    pub fov_deg: f64,
}

impl OrbitSpec {
    pub fn azimuth_deg(&self, i: usize) -> f64 {
        self.azimuth_offset_deg + 360.0 * i as f64 / self.count.max(1) as f64
    }

    pub fn pose(&self, azimuth_deg: f64) -> Pose {
        let (az, el) = (azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        let target = Vector3::from(self.look_at);
        let eye = target + self.radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        Pose::look_at(eye, target, Vector3::z())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeatureSpec {
    #[serde(flatten)]
    pub params: SynthFeatureParams,
    /// Norm of every class embedding.
    pub embedding_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub classes: Vec<ClassInfo>,
    pub primitives: Vec<PrimitiveSpec>,
    pub train_views: OrbitSpec,
    pub test_views: OrbitSpec,
    pub width: u32,
    pub height: u32,
    /// Direction towards the light.
    pub light: [f64; 3],
    pub ambient: f64,
    #[serde(default)]
    pub features: Option<SyntheticFeatureSpec>,
}

const RED: [f64; 3] = [0.85, 0.35, 0.25];
const BLUE: [f64; 3] = [0.25, 0.45, 0.85];
const SAND: [f64; 3] = [0.9, 0.8, 0.45];

impl SyntheticSceneSpec {
    /// Floor, sphere and box seen from a 12-view orbit with 4 held-out views.
    pub fn standard() -> Self {
        let class = |id: u32, name: &str, color: [u8; 3]| ClassInfo {
            id,
            name: name.into(),
            color,
        };
        let orbit = |count, offset| OrbitSpec {
            count,
            radius: 1.1,
            elevation_deg: 55.0,
            azimuth_offset_deg: offset,
            look_at: [0.0, 0.0, 0.1],
            fov_deg: 50.0,
        };
        Self {
            classes: vec![
                class(0, "floor", [120, 120, 120]),
                class(1, "sphere", [230, 60, 60]),
                class(2, "box", [60, 120, 230]),
            ],
            primitives: vec![
                PrimitiveSpec {
                    shape: Shape::Plane { height: 0.0 },
                    class: 0,
                    albedo: SAND,
                    pattern: Some(BLUE),
                    cell: 0.25,
                    pattern_extent: Some(0.75),
                },
                PrimitiveSpec {
                    shape: Shape::Sphere {
                        center: [0.18, 0.12, 0.2],
                        radius: 0.2,
                    },
                    class: 1,
                    albedo: RED,
                    pattern: Some(SAND),
                    cell: 0.15,
                    pattern_extent: None,
                },
                PrimitiveSpec {
                    shape: Shape::Box {
                        center: [-0.22, -0.16, 0.14],
                        half_extents: [0.12, 0.14, 0.14],
                    },
                    class: 2,
                    albedo: BLUE,
                    pattern: Some(RED),
                    cell: 0.14,
                    pattern_extent: None,
                },
            ],
            train_views: orbit(12, 0.0),
            test_views: orbit(4, 15.0),
            width: 48,
            height: 48,
            light: [0.4, 0.3, 1.0],
            ambient: 0.35,
            features: Some(SyntheticFeatureSpec {
                params: SynthFeatureParams {
                    dim: 384,
                    noise: 0.1,
                    smoothing_radius: 1,
                    stride: 2,
                    seed: 11,
                },
                embedding_scale: 1.0,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("synthetic scenes need at least two classes".into()));
        }
        if self.width == 0 || self.height == 0 || self.train_views.count == 0 {
            return Err(Error::Config("synthetic scene needs images and training views".into()));
        }
        for p in &self.primitives {
            if p.class as usize >= self.classes.len() {
                return Err(Error::Config(format!("primitive class {} is not declared", p.class)));
            }
            let inside = |c: &[f64; 3], r: [f64; 3]| (0..3).all(|a| c[a].abs() + r[a] <= 1.0);
            let ok = match &p.shape {
                Shape::Plane { height } => height.abs() <= 1.0,
                Shape::Sphere { center, radius } => *radius > 0.0 && inside(center, [*radius; 3]),
                Shape::Box { center, half_extents } => half_extents.iter().all(|&h| h > 0.0) && inside(center, *half_extents),
            };
            if !ok {
                return Err(Error::Config(format!("primitive {:?} leaves the unit cube", p.shape)));
            }
        }
        Ok(())
    }

    pub fn camera(&self, orbit: &OrbitSpec, azimuth_deg: f64) -> Camera {
        Camera::from_fov(self.width, self.height, orbit.fov_deg, orbit.pose(azimuth_deg))
    }
}

/// Ray hit: distance, surface point, normal, primitive index.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub primitive: usize,
}

fn intersect(shape: &Shape, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Plane { height } => {
            if d.z.abs() < EPS {
                return None;
            }
            let t = (height - o.z) / d.z;
            (t > EPS).then(|| (t, if d.z < 0.0 { Vector3::z() } else { -Vector3::z() }))
        }
        Shape::Sphere { center, radius } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > EPS { -b - s } else { -b + s };
            (t > EPS).then(|| (t, (o + d * t - c) / *radius))
        }
        Shape::Box { center, half_extents } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                let lo = center[a] - half_extents[a];
                let hi = center[a] + half_extents[a];
                if d[a].abs() < EPS {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
            }
            if t0 > t1 || t0 <= EPS {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t0, n))
        }
    }
}

/// Nearest hit along a unit-direction ray.
pub fn trace(spec: &SyntheticSceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    spec.primitives
        .iter()
        .enumerate()
        .filter_map(|(i, p)| intersect(&p.shape, origin, dir).map(|(t, n)| (i, t, n)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, t, normal)| Hit {
            t,
            point: origin + dir * t,
            normal,
            primitive: i,
        })
}

fn albedo(p: &PrimitiveSpec, x: &Vector3<f64>) -> [f64; 3] {
    let inside = p.pattern_extent.is_none_or(|e| x.x.abs() <= e && x.y.abs() <= e);
    match p.pattern {
        // Cells are centered on the origin so the pattern is mirror symmetric.
        Some(second) if inside => {
            let parity: i64 = (0..3).map(|a| (x[a] / p.cell + 0.5).floor() as i64).sum();
            if parity.rem_euclid(2) == 0 {
                p.albedo
            } else {
                second
            }
        }
        _ => p.albedo,
    }
}

/// Exact per-pixel outputs of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticView {
    pub rgb: Vec<[f32; 3]>,
    /// z-depth in world units, 0 where the ray escapes.
    pub z_depth: Vec<f64>,
    /// Distance along the unit ray, 0 where the ray escapes.
    pub distance: Vec<f64>,
    pub classes: Vec<u16>,
}

pub const BACKGROUND: [f32; 3] = [0.0, 0.0, 0.0];

pub fn render_analytic(spec: &SyntheticSceneSpec, camera: &Camera) -> AnalyticView {
    let light = Vector3::from(spec.light).normalize();
    let n = camera.pixel_count();
    let mut view = AnalyticView {
        rgb: vec![BACKGROUND; n],
        z_depth: vec![0.0; n],
        distance: vec![0.0; n],
        classes: vec![0; n],
    };
    let origin = camera.center();
    for j in 0..camera.height {
        for i in 0..camera.width {
            let (u, v) = pixel_center(i, j);
            let dir = camera.world_direction(u, v);
            let Some(hit) = trace(spec, &origin, &dir) else { continue };
            let k = (j * camera.width + i) as usize;
            let prim = &spec.primitives[hit.primitive];
            let shade = spec.ambient + (1.0 - spec.ambient) * hit.normal.dot(&light).max(0.0);
            view.rgb[k] = albedo(prim, &hit.point).map(|c| (c * shade).clamp(0.0, 1.0) as f32);
            view.distance[k] = hit.t;
            view.z_depth[k] = hit.t / camera.camera_direction(u, v).norm();
            view.classes[k] = prim.class as u16;
        }
    }
    view
}

/// Writes a complete scene directory and returns its manifest.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec, out: &Path) -> Result<SceneManifest> {
    spec.validate()?;
    let embeddings = spec
        .features
        .as_ref()
        .map(|f| class_embeddings(spec.classes.len(), f.params.dim, f.embedding_scale, f.params.seed));
    let views: Vec<(Split, Camera)> = (0..spec.train_views.count)
        .map(|i| (Split::Train, spec.camera(&spec.train_views, spec.train_views.azimuth_deg(i))))
        .chain((0..spec.test_views.count).map(|i| (Split::Test, spec.camera(&spec.test_views, spec.test_views.azimuth_deg(i)))))
        .collect();
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    let (mut n_train, mut n_test) = (0, 0);
    for (split, camera) in &views {
        let id = match split {
            Split::Train => {
                n_train += 1;
                format!("train_{:03}", n_train - 1)
            }
            Split::Test => {
                n_test += 1;
                format!("test_{:03}", n_test - 1)
            }
        };
        let view = render_analytic(spec, camera);
        let (w, h) = (spec.width, spec.height);
        write_file(&out.join(format!("rgb/{id}.png")), &encode_rgb_png(w, h, &view.rgb))?;
        let mm: Vec<u16> = view.z_depth.iter().map(|&z| (z * 1000.0).round().min(u16::MAX as f64) as u16).collect();
        write_file(&out.join(format!("depth/{id}.png")), &encode_depth_png(w, h, &mm))?;
        write_file(&out.join(format!("labels/{id}.png")), &encode_class_png(w, h, &view.classes, &spec.classes)?)?;
        let features = match (&spec.features, &embeddings) {
            (Some(f), Some(emb)) => {
                let params = SynthFeatureParams {
                    seed: f.params.seed.wrapping_add(frames.len() as u64 + 1),
                    ..f.params.clone()
                };
                let map = synth_features(&view.classes, w, h, emb, &params)?;
                let rel = format!("features/{id}.fmap");
                std::fs::create_dir_all(out.join("features")).map_err(|e| Error::io(out, e))?;
                save_feature_map(&out.join(&rel), &map)?;
                Some(rel)
            }
            _ => None,
        };
        depths.push(Some(mm.iter().map(|&v| v as f32 / 1000.0).collect::<Vec<f32>>()));
        frames.push(FrameEntry {
            id: id.clone(),
            rgb: format!("rgb/{id}.png"),
            depth: Some(format!("depth/{id}.png")),
            features,
            labels: Some(format!("labels/{id}.png")),
            split: *split,
            camera: *camera,
        });
    }
    let cameras: Vec<Camera> = views.iter().map(|v| v.1).collect();
    let manifest = SceneManifest {
        classes: spec.classes.clone(),
        frames,
        normalization: Some(normalize_scene(&cameras, &depths)?),
        near: None,
        far: None,
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    write_file(&out.join("spec.json"), serde_json::to_string_pretty(spec)?.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_depth_matches_closed_form() {
        let mut spec = SyntheticSceneSpec::standard();
        spec.primitives = vec![PrimitiveSpec {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.0],
                radius: 0.5,
            },
            class: 1,
            albedo: RED,
            pattern: None,
            cell: 0.1,
            pattern_extent: None,
        }];
        let pose = Pose::look_at(Vector3::new(0.0, -0.9, 0.0), Vector3::zeros(), Vector3::z());
        let cam = Camera::from_fov(24, 24, 30.0, pose);
        let view = render_analytic(&spec, &cam);
        for j in 0..24 {
            for i in 0..24 {
                let (u, v) = pixel_center(i, j);
                let d = cam.world_direction(u, v);
                let o = cam.center();
                // |o + t d|^2 = r^2 with |d| = 1.
                let b = o.dot(&d);
                let t = -b - (b * b - o.norm_squared() + 0.25).sqrt();
                let k = (j * 24 + i) as usize;
                assert!((view.distance[k] - t).abs() < 1e-5, "pixel ({i},{j})");
                assert_eq!(view.classes[k], 1);
            }
        }
    }

    #[test]
    fn mirrored_azimuths_give_mirrored_images() {
        let mut spec = SyntheticSceneSpec::standard();
        spec.primitives.truncate(1);
        spec.primitives.push(PrimitiveSpec {
            shape: Shape::Sphere {
                center: [0.1, 0.0, 0.2],
                radius: 0.2,
            },
            class: 1,
            albedo: RED,
            pattern: Some(BLUE),
            cell: 0.1,
            pattern_extent: None,
        });
        spec.light = [0.5, 0.0, 1.0];
        let orbit = &spec.train_views;
        let a = render_analytic(&spec, &spec.camera(orbit, 40.0));
        let b = render_analytic(&spec, &spec.camera(orbit, -40.0));
        let w = spec.width as usize;
        for j in 0..spec.height as usize {
            for i in 0..w {
                let (p, q) = (j * w + i, j * w + (w - 1 - i));
                assert_eq!(a.classes[p], b.classes[q]);
                assert!((a.distance[p] - b.distance[q]).abs() < 1e-9);
                for c in 0..3 {
                    assert!((a.rgb[p][c] - b.rgb[q][c]).abs() < 1e-5, "pixel ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn standard_scene_covers_all_classes() {
        let spec = SyntheticSceneSpec::standard();
        spec.validate().unwrap();
        let mut seen = [false; 3];
        for i in 0..spec.train_views.count {
            let view = render_analytic(&spec, &spec.camera(&spec.train_views, spec.train_views.azimuth_deg(i)));
            assert!(view.distance.iter().all(|&d| d > 0.0), "view {i} sees background");
            for &c in &view.classes {
                seen[c as usize] = true;
            }
        }
        assert_eq!(seen, [true; 3]);
    }
}
