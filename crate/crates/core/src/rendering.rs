//! Pinhole cameras, ray generation, stratified sampling and volumetric
//! compositing with its exact backward pass.
//!
//! Camera convention: x right, y down, the camera looks along +z. Poses are
//! camera-to-world.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image "up" as close to
    /// `up` as possible (camera y points down).
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: eye,
        }
    }

    /// Row-major 4x4 matrix.
    pub fn to_row_major(&self) -> [f64; 16] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
            0.0, 0.0, 0.0, 1.0,
        ]
    }

    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::Data(format!("pose needs 16 values, got {}", m.len())));
        }
        Ok(Self {
            rotation: Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            translation: Vector3::new(m[3], m[7], m[11]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-5 || (r.determinant() - 1.0).abs() > 1e-5 {
            return Err(Error::Data("pose rotation is not orthonormal with det +1".into()));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("pose translation is not finite".into()));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for Pose {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Pose::from_row_major(&v)
    }
}

impl From<Pose> for Vec<f64> {
    fn from(p: Pose) -> Self {
        p.to_row_major().to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub pose: Pose,
}

impl Camera {
    /// Square-pixel camera with a horizontal field of view in degrees and the
    /// principal point at the image center.
    pub fn from_fov(width: u32, height: u32, fov_x_deg: f64, pose: Pose) -> Self {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        Self {
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Data(format!(
                "degenerate intrinsics fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Data("camera image has zero size".into()));
        }
        self.pose.validate()
    }

    /// Unnormalized camera-frame direction `((u - cx) / fx, (v - cy) / fy, 1)`.
    pub fn camera_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Unit world-frame direction through image point `(u, v)`.
    pub fn world_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        (self.pose.rotation * self.camera_direction(u, v)).normalize()
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.translation
    }

    /// Converts a z-depth at image point `(u, v)` into distance along the ray.
    pub fn z_depth_to_distance(&self, u: f64, v: f64, z: f64) -> f64 {
        z * self.camera_direction(u, v).norm()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Image-plane point sampled for integer pixel `(i, j)`: its center.
#[inline]
pub fn pixel_center(i: u32, j: u32) -> (f64, f64) {
    (i as f64 + 0.5, j as f64 + 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// Rays through image points `(u, v)`; points may lie anywhere in
/// `[0, width] x [0, height]`.
pub fn generate_rays(camera: &Camera, pixels: &[(f64, f64)], near: f64, far: f64) -> Result<Vec<Ray>> {
    camera.validate()?;
    if !(near >= 0.0 && near < far) {
        return Err(Error::Config(format!("invalid ray bounds [{near}, {far}]")));
    }
    let (w, h) = (camera.width as f64, camera.height as f64);
    pixels
        .iter()
        .map(|&(u, v)| {
            if !(0.0..=w).contains(&u) || !(0.0..=h).contains(&v) {
                return Err(Error::Data(format!("pixel ({u}, {v}) outside {w}x{h} image")));
            }
            Ok(Ray {
                origin: camera.center(),
                direction: camera.world_direction(u, v),
                near,
                far,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
    pub points: Vec<Vector3<f64>>,
}

/// Writes `n` sample distances and spacings for `[near, far]` into `t` and
/// `deltas`: one sample per uniform bin, at the bin center or uniformly
/// jittered inside it.
pub fn sample_distances<R: Rng + ?Sized>(
    near: f64,
    far: f64,
    stratified: bool,
    rng: &mut R,
    t: &mut [f64],
    deltas: &mut [f64],
) {
    let n = t.len();
    let bin = (far - near) / n as f64;
    for (i, ti) in t.iter_mut().enumerate() {
        let offset = if stratified { rng.random::<f64>() } else { 0.5 };
        *ti = near + (i as f64 + offset) * bin;
    }
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { far };
        deltas[i] = (next - t[i]).max(0.0);
    }
}

pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, stratified: bool, rng: &mut R) -> RaySamples {
    assert!(n >= 1, "need at least one sample per ray");
    let mut t = vec![0.0; n];
    let mut deltas = vec![0.0; n];
    sample_distances(ray.near, ray.far, stratified, rng, &mut t, &mut deltas);
    let points = t.iter().map(|&ti| ray.at(ti)).collect();
    RaySamples { t, deltas, points }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Composite<T> {
    /// Integrated value, one entry per channel.
    pub value: Vec<T>,
    pub weights: Vec<T>,
    /// `T_i`, the transmittance reaching sample `i`.
    pub transmittance: Vec<T>,
}

impl<T: Real> Composite<T> {
    pub fn opacity(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// Computes `w_i = T_i (1 - exp(-sigma_i delta_i))` and
/// `T_i = exp(-sum_{j<i} sigma_j delta_j)` into `weights`/`transmittance`.
pub fn compositing_weights<T: Real>(sigma: &[T], deltas: &[T], weights: &mut [T], transmittance: &mut [T]) {
    let mut depth = T::zero();
    for i in 0..sigma.len() {
        let tau = sigma[i] * deltas[i];
        let trans = (-depth).exp();
        transmittance[i] = trans;
        weights[i] = trans * -(-tau).exp_m1();
        depth += tau;
    }
}

/// Integrates `k`-channel per-sample `values` (`n x k`) along a ray.
pub fn composite<T: Real>(sigma: &[T], values: &[T], deltas: &[T], k: usize) -> Composite<T> {
    let n = sigma.len();
    assert_eq!(deltas.len(), n);
    assert_eq!(values.len(), n * k);
    let mut weights = vec![T::zero(); n];
    let mut transmittance = vec![T::zero(); n];
    compositing_weights(sigma, deltas, &mut weights, &mut transmittance);
    let mut value = vec![T::zero(); k];
    for (w, row) in weights.iter().zip(values.chunks_exact(k)) {
        for (acc, &v) in value.iter_mut().zip(row) {
            *acc += *w * v;
        }
    }
    Composite {
        value,
        weights,
        transmittance,
    }
}

/// Gradients of `upstream . composite(...)` with respect to densities and
/// per-sample values. `d_values` receives `w_i * upstream` per sample.
#[allow(clippy::too_many_arguments)]
pub fn composite_backward_into<T: Real>(
    sigma: &[T],
    deltas: &[T],
    values: &[T],
    k: usize,
    weights: &[T],
    transmittance: &[T],
    upstream: &[T],
    d_sigma: &mut [T],
    d_values: &mut [T],
) {
    let n = sigma.len();
    // a_i = upstream . h_i; d tau_k = T_{k+1} a_k - sum_{i>k} w_i a_i
    let mut suffix = T::zero();
    for i in (0..n).rev() {
        let row = &values[i * k..(i + 1) * k];
        let a: T = row.iter().zip(upstream).map(|(&h, &g)| h * g).sum();
        let next_trans = transmittance[i] * (-(sigma[i] * deltas[i])).exp();
        d_sigma[i] = deltas[i] * (next_trans * a - suffix);
        suffix += weights[i] * a;
        for (d, &g) in d_values[i * k..(i + 1) * k].iter_mut().zip(upstream) {
            *d = weights[i] * g;
        }
    }
}

pub fn composite_backward<T: Real>(
    sigma: &[T],
    deltas: &[T],
    values: &[T],
    k: usize,
    forward: &Composite<T>,
    upstream: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut d_sigma = vec![T::zero(); sigma.len()];
    let mut d_values = vec![T::zero(); values.len()];
    composite_backward_into(
        sigma,
        deltas,
        values,
        k,
        &forward.weights,
        &forward.transmittance,
        upstream,
        &mut d_sigma,
        &mut d_values,
    );
    (d_sigma, d_values)
}

/// Everything integrated along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRay {
    pub rgb: [f32; 3],
    /// Distance along the ray, scene units.
    pub depth: f32,
    pub logits: Vec<f32>,
    pub feature: Vec<f32>,
    pub weights: Vec<f32>,
    pub opacity: f32,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(pose: Pose) -> Camera {
        Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 24.0,
            cy: 24.0,
            width: 48,
            height: 48,
            pose,
        }
    }

    #[test]
    fn principal_point_maps_to_optical_axis() {
        let rays = generate_rays(&cam(Pose::identity()), &[(24.0, 24.0)], 0.1, 2.0).unwrap();
        assert_eq!(rays[0].direction, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn one_focal_length_right_is_45_degrees() {
        // cx + fx = 64 needs a wider image
        assert!(generate_rays(&cam(Pose::identity()), &[(64.0, 24.0)], 0.1, 2.0).is_err());
        let mut c = cam(Pose::identity());
        c.width = 100;
        let d = generate_rays(&c, &[(64.0, 24.0)], 0.1, 2.0).unwrap()[0].direction;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d - Vector3::new(s, 0.0, s)).norm() < 1e-15);
    }

    #[test]
    fn ray_directions_are_unit() {
        let pose = Pose::look_at(
            Vector3::new(1.0, -2.0, 1.5),
            Vector3::new(0.0, 0.0, 0.2),
            Vector3::new(0.0, 0.0, 1.0),
        );
        let c = cam(pose);
        c.validate().unwrap();
        let px: Vec<(f64, f64)> = (0..48).flat_map(|j| (0..48).map(move |i| pixel_center(i, j))).collect();
        for r in generate_rays(&c, &px, 0.0, 1.0).unwrap() {
            assert!((r.direction.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_intrinsics_rejected() {
        let mut c = cam(Pose::identity());
        c.fx = 0.0;
        assert!(generate_rays(&c, &[(1.0, 1.0)], 0.0, 1.0).is_err());
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let eye = Vector3::new(0.5, 0.3, 0.8);
        let pose = Pose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        pose.validate().unwrap();
        let d = cam(pose).world_direction(24.0, 24.0);
        assert!((d - (-eye).normalize()).norm() < 1e-12);
        let back = Pose::from_row_major(&pose.to_row_major()).unwrap();
        assert_eq!(back, pose);
    }

    #[test]
    fn single_deterministic_sample() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 0.0,
            far: 2.0,
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = sample_along_ray(&ray, 1, false, &mut r);
        assert_eq!(s.t, vec![1.0]);
        assert_eq!(s.deltas, vec![1.0]);
        assert_eq!(s, sample_along_ray(&ray, 1, false, &mut r));
    }

    #[test]
    fn stratified_samples_increase() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 1.0, 0.0),
            near: 0.3,
            far: 2.7,
        };
        for seed in 0..50 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_along_ray(&ray, 64, true, &mut r);
            assert!(s.t.windows(2).all(|w| w[0] < w[1]));
            assert!(s.deltas.iter().all(|&d| d >= 0.0));
            assert!((s.deltas[63] - (2.7 - s.t[63])).abs() < 1e-15);
        }
    }

    #[test]
    fn transparent_ray_renders_zero() {
        let c = composite(&[0.0f64; 4], &[1.0, 2.0, 3.0, 4.0], &[0.5; 4], 1);
        assert_eq!(c.value, vec![0.0]);
        assert!(c.transmittance.iter().all(|&t| t == 1.0));
        assert!(c.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn half_opacity_sample() {
        let ln2 = 2f64.ln();
        let c = composite(&[ln2], &[1.0], &[1.0], 1);
        assert!((c.value[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn opaque_first_sample_dominates() {
        let c = composite(&[50.0f64, 3.0, 7.0], &[0.25, 9.0, -4.0], &[1.0, 0.5, 0.5], 1);
        assert!((c.value[0] - 0.25).abs() < 1e-6);
        assert!(c.weights[1] < 1e-20 && c.weights[2] < 1e-20);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let n = 12;
        let k = 3;
        let sigma: Vec<f64> = (0..n).map(|_| r.random_range(0.0..4.0)).collect();
        let deltas: Vec<f64> = (0..n).map(|_| r.random_range(0.01..0.3)).collect();
        let values: Vec<f64> = (0..n * k).map(|_| r.random_range(-1.0..1.0)).collect();
        let up = [0.3, -1.2, 0.7];
        let fwd = composite(&sigma, &values, &deltas, k);
        let (ds, dv) = composite_backward(&sigma, &deltas, &values, k, &fwd, &up);
        let loss = |s: &[f64]| {
            let c = composite(s, &values, &deltas, k);
            c.value.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = finite_difference_grad(loss, &sigma, 1e-6);
        assert!(relative_error(&ds, &fd) <= 1e-6);
        for i in 0..n {
            for c in 0..k {
                assert_eq!(dv[i * k + c], fwd.weights[i] * up[c]);
            }
        }
        let (zs, zv) = composite_backward(&sigma, &deltas, &values, k, &fwd, &[0.0; 3]);
        assert!(zs.iter().chain(&zv).all(|&v| v == 0.0));
    }
}
