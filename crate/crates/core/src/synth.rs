//! Synthetic training data: physically plausible scene randomization, pose
//! perturbations, camera sampling and the depth/RGB augmentations that align
//! synthetic renders with sensor data.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::camera::{CameraError, CameraIntrinsics};
use crate::geometry::{compose, exp_se3, exp_so3, inverse, log_so3, quat_to_mat, GeometryError};
use crate::image::{DepthImage, RgbImage, RgbdImage};
use crate::mesh::{model_diameter, MeshError, TriangleMesh};
use crate::render::{render_rgbd, CropWindow};
use crate::rng::stream_rng;
use crate::{Mat3, Pose, Twist, UnitQuaternion, Vec3};

/// Camera distance range from the scene origin, meters.
pub const CAMERA_RADIUS_MIN: f64 = 0.6;
pub const CAMERA_RADIUS_MAX: f64 = 1.3;

/// Fixed settling step count.
pub const SETTLE_STEPS: usize = 50;
/// Downward displacement per settling step, meters.
pub const GRAVITY_STEP: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("object left the image in {attempts} consecutive attempts")]
    OutOfView { attempts: usize },
    #[error("scene has no objects")]
    EmptyScene,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationParams {
    /// Scale of the half-normal translation magnitude, meters.
    pub sigma_t: f64,
    /// Scale of the half-normal rotation magnitude, radians.
    pub sigma_w: f64,
}

impl Default for PerturbationParams {
    fn default() -> Self {
        Self { sigma_t: 0.02, sigma_w: 0.262 }
    }
}

impl PerturbationParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.sigma_t >= 0.0 && self.sigma_t.is_finite()) {
            return Err(SynthError::InvalidParameter { name: "sigma_t", value: self.sigma_t });
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w.is_finite()) {
            return Err(SynthError::InvalidParameter { name: "sigma_w", value: self.sigma_w });
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { sigma_t: self.sigma_t * s, sigma_w: self.sigma_w * s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationParams {
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise_sigma: f64,
    /// Missing-depth fraction is drawn from `U[0, missing_max]`.
    pub missing_max: f64,
    /// Hue shift drawn from `U[-hue_shift, hue_shift]`, in turns.
    pub hue_shift: f64,
    /// Saturation and value scales drawn from `U[1 - sv_scale, 1 + sv_scale]`.
    pub sv_scale: f64,
    /// Per-image RGB noise sigma drawn from `U[0, rgb_noise_max]`.
    pub rgb_noise_max: f64,
    pub blur_probability: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    /// Per-scene brightness scale drawn from `U[brightness_min, brightness_max]`.
    pub brightness_min: f64,
    pub brightness_max: f64,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            depth_noise_sigma: 0.002,
            missing_max: 0.4,
            hue_shift: 0.05,
            sv_scale: 0.2,
            rgb_noise_max: 0.02,
            blur_probability: 0.5,
            blur_sigma_min: 0.5,
            blur_sigma_max: 1.5,
            brightness_min: 0.7,
            brightness_max: 1.3,
        }
    }
}

impl AugmentationParams {
    /// All augmentations disabled.
    pub fn none() -> Self {
        Self {
            depth_noise_sigma: 0.0,
            missing_max: 0.0,
            hue_shift: 0.0,
            sv_scale: 0.0,
            rgb_noise_max: 0.0,
            blur_probability: 0.0,
            blur_sigma_min: 0.0,
            blur_sigma_max: 0.0,
            brightness_min: 1.0,
            brightness_max: 1.0,
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sample_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if let Some(u) = v.normalized() {
            return u;
        }
    }
}

/// Half-normal magnitude `|N(0, sigma)|`.
fn half_normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (z * sigma).abs()
}

/// Relative pose perturbation with half-normal magnitudes and uniform
/// directions for translation and rotation.
pub fn sample_perturbation(p: &PerturbationParams, rng: &mut ChaCha8Rng) -> Twist {
    let t_mag = half_normal(rng, p.sigma_t);
    let t_dir = sample_unit_vector(rng);
    let w_mag = half_normal(rng, p.sigma_w);
    let w_dir = sample_unit_vector(rng);
    Twist::new(t_dir * t_mag, w_dir * w_mag)
}

/// Uniformly distributed rotation.
pub fn sample_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            let q = UnitQuaternion { x: q[0] / n, y: q[1] / n, z: q[2] / n, w: q[3] / n };
            if let Ok(r) = quat_to_mat(&q) {
                return r.orthonormalized();
            }
        }
    }
}

/// Camera-to-world pose with the optical axis (+z) pointing from `position` to
/// the origin, image "down" (+y) aligned with world -z where possible.
pub fn look_at_origin(position: Vec3) -> Pose {
    let forward = (-position).normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0));
    let up = Vec3::new(0.0, 0.0, 1.0);
    let right = forward
        .cross(up)
        .normalized()
        .or_else(|| forward.cross(Vec3::new(0.0, 1.0, 0.0)).normalized())
        .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
    let down = forward.cross(right);
    Pose::new(Mat3::from_columns(right, down, forward), position)
}

/// Camera-to-world pose on the shell `[0.6, 1.3]` m around the origin, looking
/// at the origin, rolled about its optical axis by a uniform angle.
pub fn sample_camera_pose(rng: &mut ChaCha8Rng) -> Pose {
    let (a, b) = (CAMERA_RADIUS_MIN.powi(3), CAMERA_RADIUS_MAX.powi(3));
    let radius = rng.gen_range(a..=b).cbrt().clamp(CAMERA_RADIUS_MIN, CAMERA_RADIUS_MAX);
    let position = sample_unit_vector(rng) * radius;
    let roll = rng.gen_range(0.0..2.0 * PI);
    let base = look_at_origin(position);
    Pose::new(base.rotation * exp_so3(Vec3::new(0.0, 0.0, roll)), position)
}

/// An object in the settling simulation, approximated by its bounding sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    /// Index of the object's mesh in the caller's model list.
    pub mesh_id: usize,
    /// Object-to-world pose; the bounding sphere is centered at the translation.
    pub pose: Pose,
    pub bounding_radius: f64,
}

impl SceneObject {
    pub fn new(mesh_id: usize, mesh: &TriangleMesh, pose: Pose) -> Result<Self, SynthError> {
        let radius = model_diameter(mesh)?.meters / 2.0;
        if !(radius > 0.0) {
            return Err(SynthError::InvalidParameter { name: "bounding_radius", value: radius });
        }
        Ok(Self { mesh_id, pose, bounding_radius: radius })
    }

    fn bottom(&self) -> f64 {
        self.pose.translation.z - self.bounding_radius
    }
}

fn penetration(a: &SceneObject, b: &SceneObject) -> f64 {
    a.bounding_radius + b.bounding_radius - (a.pose.translation - b.pose.translation).norm()
}

fn any_penetration(objects: &[SceneObject]) -> bool {
    (0..objects.len()).any(|i| (i + 1..objects.len()).any(|j| penetration(&objects[i], &objects[j]) > 0.0))
}

fn clamp_to_table(obj: &mut SceneObject, table_z: f64) {
    if obj.bottom() < table_z {
        obj.pose.translation.z = table_z + obj.bounding_radius;
    }
}

/// Pushes penetrating pairs apart symmetrically along their center line.
fn push_apart(objects: &mut [SceneObject], table_z: f64, rng: &mut ChaCha8Rng) {
    for _ in 0..8 {
        let mut moved = false;
        for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                let depth = penetration(&objects[i], &objects[j]);
                if depth <= 0.0 {
                    continue;
                }
                let delta = objects[j].pose.translation - objects[i].pose.translation;
                let dir = delta.normalized().unwrap_or_else(|| {
                    let v = sample_unit_vector(rng);
                    Vec3::new(v.x, v.y, 0.0).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0))
                });
                let half = dir * (depth / 2.0);
                objects[i].pose.translation = objects[i].pose.translation - half;
                objects[j].pose.translation += half;
                moved = true;
            }
        }
        for obj in objects.iter_mut() {
            clamp_to_table(obj, table_z);
        }
        if !moved {
            break;
        }
    }
}

/// Lifts objects (lowest first) until each rests clear of every object placed
/// before it. Only ever moves objects up, so the result is penetration-free.
fn project_penetration_free(objects: &mut [SceneObject], table_z: f64) {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[a].pose.translation.z.total_cmp(&objects[b].pose.translation.z).then(a.cmp(&b)));
    let mut placed: Vec<usize> = Vec::with_capacity(objects.len());
    for &i in &order {
        clamp_to_table(&mut objects[i], table_z);
        loop {
            let mut lifted = false;
            for &j in &placed {
                let (a, b) = (&objects[i], &objects[j]);
                let reach = a.bounding_radius + b.bounding_radius;
                let d = a.pose.translation - b.pose.translation;
                let horizontal_sq = d.x * d.x + d.y * d.y;
                if penetration(a, b) > 0.0 {
                    let rise = (reach * reach - horizontal_sq).max(0.0).sqrt();
                    // tiny margin so rounding never leaves a residual overlap
                    let z = b.pose.translation.z + rise * (1.0 + 1e-12) + 1e-12;
                    if z > objects[i].pose.translation.z {
                        objects[i].pose.translation.z = z;
                        lifted = true;
                    }
                }
            }
            if !lifted {
                break;
            }
        }
        placed.push(i);
    }
}

/// Simplified rigid settling: gravity, table support and pairwise sphere
/// separation for at most [`SETTLE_STEPS`] steps, then a projection pass
/// that guarantees no penetration and no object below the table.
pub fn settle_scene(
    objects: &[SceneObject],
    table_z: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SceneObject>, SynthError> {
    if objects.is_empty() {
        return Err(SynthError::EmptyScene);
    }
    let mut out = objects.to_vec();
    for _ in 0..SETTLE_STEPS {
        let mut fell = false;
        for obj in out.iter_mut() {
            if obj.bottom() > table_z {
                obj.pose.translation.z -= GRAVITY_STEP.min(obj.bottom() - table_z);
                fell = true;
            }
            clamp_to_table(obj, table_z);
        }
        push_apart(&mut out, table_z, rng);
        if !fell && !any_penetration(&out) {
            break;
        }
    }
    project_penetration_free(&mut out, table_z);
    Ok(out)
}

/// Adds `N(0, sigma)` to every valid pixel; results are kept valid by clamping
/// to 1e-6 m.
pub fn augment_depth_noise(d: &DepthImage, sigma: f64, rng: &mut ChaCha8Rng) -> DepthImage {
    let mut out = d.clone();
    if sigma <= 0.0 {
        return out;
    }
    for v in out.data.iter_mut().filter(|v| **v > 0.0) {
        let n: f64 = rng.sample(StandardNormal);
        *v = (*v + sigma * n).max(1e-6);
    }
    out
}

/// Invalidates exactly `round(fraction * valid_count)` uniformly chosen valid
/// pixels.
pub fn corrupt_depth_missing(d: &DepthImage, fraction: f64, rng: &mut ChaCha8Rng) -> DepthImage {
    let mut out = d.clone();
    let mut valid: Vec<usize> = (0..out.data.len()).filter(|&i| out.data[i] > 0.0).collect();
    let count = (fraction.clamp(0.0, 1.0) * valid.len() as f64).round() as usize;
    // partial Fisher-Yates: the first `count` entries become a uniform subset
    for k in 0..count {
        let j = rng.gen_range(k..valid.len());
        valid.swap(k, j);
        out.data[valid[k]] = 0.0;
    }
    out
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Edge-preserving depth smoothing with hole filling. Invalid pixels are
/// filled when at least a quarter of their neighbors are valid, using the
/// neighbor median as the range reference.
pub fn bilateral_filter(d: &DepthImage, sigma_space: f64, sigma_range: f64, radius: usize) -> DepthImage {
    let (w, h) = (d.width, d.height);
    let r = radius as isize;
    let neighbors = ((2 * radius + 1) * (2 * radius + 1) - 1) as f64;
    let inv_s = 1.0 / (2.0 * sigma_space * sigma_space);
    let inv_r = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = DepthImage::new(w, h);
    let mut window: Vec<(isize, isize, f64)> = Vec::with_capacity(((2 * radius + 1) * (2 * radius + 1)) as usize);
    let mut scratch = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let v = d.get(nx as usize, ny as usize);
                    if v > 0.0 {
                        window.push((dx, dy, v));
                    }
                }
            }
            let center = d.get(x as usize, y as usize);
            let reference = if center > 0.0 {
                center
            } else {
                if (window.len() as f64) < 0.25 * neighbors {
                    continue;
                }
                scratch.clear();
                scratch.extend(window.iter().map(|e| e.2));
                median(&mut scratch)
            };
            let (mut num, mut den) = (0.0, 0.0);
            for &(dx, dy, v) in &window {
                let ds = (dx * dx + dy * dy) as f64;
                let dr = v - reference;
                let wgt = (-ds * inv_s - dr * dr * inv_r).exp();
                num += wgt * v;
                den += wgt;
            }
            if den > 0.0 {
                out.set(x as usize, y as usize, num / den);
            } else if center > 0.0 {
                out.set(x as usize, y as usize, center);
            }
        }
    }
    out
}

fn rgb_to_hsv(c: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = c;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    [h, s, max]
}

fn hsv_to_rgb(c: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = c;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Normalized 1-D Gaussian kernel truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let pass = |src: &RgbImage, horizontal: bool| -> RgbImage {
        let mut dst = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (i, kv) in k.iter().enumerate() {
                    let off = i as isize - r;
                    let (sx, sy) = if horizontal {
                        ((x as isize + off).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + off).clamp(0, h as isize - 1) as usize)
                    };
                    let c = src.get(sx, sy);
                    for ch in 0..3 {
                        acc[ch] += kv * c[ch];
                    }
                }
                dst.set(x, y, acc);
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// HSV shift, Gaussian noise and optional blur, in that order; output clamped
/// to `[0, 1]`.
pub fn augment_rgb(img: &RgbImage, p: &AugmentationParams, rng: &mut ChaCha8Rng) -> RgbImage {
    let dh = p.hue_shift * rng.gen_range(-1.0..=1.0);
    let ds = 1.0 + p.sv_scale * rng.gen_range(-1.0..=1.0);
    let dv = 1.0 + p.sv_scale * rng.gen_range(-1.0..=1.0);
    let noise_sigma = p.rgb_noise_max * rng.gen::<f64>();
    let blur_sigma = if rng.gen::<f64>() < p.blur_probability {
        rng.gen_range(p.blur_sigma_min..=p.blur_sigma_max.max(p.blur_sigma_min))
    } else {
        0.0
    };

    let mut out = img.clone();
    if dh != 0.0 || ds != 1.0 || dv != 1.0 {
        for c in out.data.iter_mut() {
            let [h, s, v] = rgb_to_hsv(*c);
            *c = hsv_to_rgb([(h + dh).rem_euclid(1.0), (s * ds).clamp(0.0, 1.0), (v * dv).clamp(0.0, 1.0)]);
        }
    }
    if noise_sigma > 0.0 {
        for c in out.data.iter_mut() {
            for ch in c.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *ch += noise_sigma * n;
            }
        }
    }
    let mut out = gaussian_blur(&out, blur_sigma);
    for c in out.data.iter_mut() {
        for ch in c.iter_mut() {
            *ch = ch.clamp(0.0, 1.0);
        }
    }
    out
}

fn scale_brightness(img: &mut RgbImage, b: f64) {
    if b == 1.0 {
        return;
    }
    for c in img.data.iter_mut() {
        for ch in c.iter_mut() {
            *ch = (*ch * b).clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub perturbation: PerturbationParams,
    pub augmentation: AugmentationParams,
    /// Side of the square crops, pixels.
    pub crop_size: usize,
    /// Attempts at drawing an in-view configuration before giving up.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            perturbation: PerturbationParams::default(),
            augmentation: AugmentationParams::default(),
            crop_size: 176,
            max_attempts: 100,
        }
    }
}

/// One training sample: a clean render at the perturbed previous pose and an
/// augmented render at the true pose, both cropped around the previous pose.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub img_prev: RgbdImage,
    pub img_cur: RgbdImage,
    pub gt_twist: Twist,
}

/// A training pair together with the full-frame data it was cut from.
#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub pair: TrainingPair,
    pub pose_true: Pose,
    pub pose_prev: Pose,
    /// Augmented full-frame observation at `pose_true`.
    pub observation: RgbdImage,
}

/// Whether the bounding sphere of an object at `pose` projects fully inside
/// the image.
pub fn sphere_in_view(pose: &Pose, radius: f64, k: &CameraIntrinsics) -> bool {
    let c = pose.translation;
    if c.z <= radius + 0.05 {
        return false;
    }
    let Ok((u, v, z)) = k.project(c) else {
        return false;
    };
    let (ru, rv) = (k.fx * radius / z, k.fy * radius / z);
    u - ru >= 0.0 && v - rv >= 0.0 && u + ru <= (k.width - 1) as f64 && v + rv <= (k.height - 1) as f64
}

/// Generates pair `index` of the stream keyed by `seed`. Each pair uses its own
/// RNG stream, so pairs can be produced in any order.
pub fn generate_pair(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    cfg: &SynthConfig,
    seed: u64,
    index: u64,
) -> Result<GeneratedPair, SynthError> {
    cfg.perturbation.validate()?;
    let diameter = model_diameter(mesh)?.meters;
    let radius = diameter / 2.0;
    let mut rng = stream_rng(seed, index);

    let mut found = None;
    for _ in 0..cfg.max_attempts.max(1) {
        let drop = Pose::new(
            sample_rotation(&mut rng),
            Vec3::new(rng.gen_range(-0.05..=0.05), rng.gen_range(-0.05..=0.05), radius + rng.gen_range(0.1..=0.4)),
        );
        let scene = settle_scene(&[SceneObject { mesh_id: 0, pose: drop, bounding_radius: radius }], 0.0, &mut rng)?;
        let camera = sample_camera_pose(&mut rng);
        let pose_true = compose(&inverse(&camera), &scene[0].pose);
        let gt_twist = sample_perturbation(&cfg.perturbation, &mut rng);
        let pose_prev = compose(&inverse(&exp_se3(&gt_twist)), &pose_true);
        if sphere_in_view(&pose_true, radius, k) && sphere_in_view(&pose_prev, radius, k) {
            found = Some((pose_true, pose_prev, gt_twist));
            break;
        }
    }
    let (pose_true, pose_prev, gt_twist) = found.ok_or(SynthError::OutOfView { attempts: cfg.max_attempts })?;

    let aug = &cfg.augmentation;
    let brightness = if aug.brightness_max > aug.brightness_min {
        rng.gen_range(aug.brightness_min..=aug.brightness_max)
    } else {
        aug.brightness_min
    };
    let prev = render_rgbd(mesh, &pose_prev, k);
    let mut cur = render_rgbd(mesh, &pose_true, k);
    scale_brightness(&mut cur.rgb, brightness);

    cur.rgb = augment_rgb(&cur.rgb, aug, &mut rng);
    cur.depth = augment_depth_noise(&cur.depth, aug.depth_noise_sigma, &mut rng);
    let missing = aug.missing_max * rng.gen::<f64>();
    cur.depth = corrupt_depth_missing(&cur.depth, missing, &mut rng);

    let window = CropWindow::around_object(&pose_prev, diameter, k)?;
    let pair = TrainingPair {
        img_prev: window.resample(&prev, cfg.crop_size),
        img_cur: window.resample(&cur, cfg.crop_size),
        gt_twist,
    };
    Ok(GeneratedPair { pair, pose_true, pose_prev, observation: cur })
}

/// Object pose seen corner-on so that three cube faces are equally visible.
pub fn corner_view_pose(distance: f64) -> Pose {
    let axis = Vec3::new(-1.0, 1.0, 0.0).normalized().unwrap_or(Vec3::new(1.0, 0.0, 0.0));
    let angle = (-1.0 / 3f64.sqrt()).acos();
    Pose::new(exp_so3(axis * angle), Vec3::new(0.0, 0.0, distance))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub frames: usize,
    /// Per-frame motion is drawn with the perturbation sigmas times this factor.
    pub motion_scale: f64,
    pub perturbation: PerturbationParams,
    /// Largest allowed offset of the object center from the start, meters.
    pub max_offset_t: f64,
    /// Largest allowed rotation away from the start orientation, radians.
    pub max_offset_w: f64,
    pub depth_noise_sigma: f64,
    /// Distance of the object from the camera at the first frame, meters.
    pub distance: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            frames: 100,
            motion_scale: 0.25,
            perturbation: PerturbationParams::default(),
            max_offset_t: 0.1,
            max_offset_w: 0.5,
            depth_noise_sigma: 0.0,
            distance: 0.7,
        }
    }
}

/// Rendered frames and ground-truth object-to-camera poses.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub poses: Vec<Pose>,
    pub frames: Vec<RgbdImage>,
}

/// Object-centric motion: rotate by `step.w` about the object center, then
/// move the center by `step.t`.
pub fn move_object(pose: &Pose, step: &Twist) -> Pose {
    Pose::new((exp_so3(step.w) * pose.rotation).orthonormalized(), pose.translation + step.t)
}

/// Random-walk trajectory of object-centric steps that reflects off its
/// offset bounds: a step that would leave them is applied with the opposite
/// sign, or redrawn.
pub fn random_walk(start: &Pose, cfg: &SequenceConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Pose>, SynthError> {
    let step_params = cfg.perturbation.scaled(cfg.motion_scale);
    step_params.validate()?;
    let within = |p: &Pose| -> bool {
        let dt = (p.translation - start.translation).norm();
        let dw = log_so3(&(p.rotation * start.rotation.transpose())).map(|w| w.norm()).unwrap_or(f64::INFINITY);
        dt <= cfg.max_offset_t && dw <= cfg.max_offset_w
    };
    let mut poses = Vec::with_capacity(cfg.frames);
    let mut current = *start;
    for i in 0..cfg.frames {
        if i > 0 {
            let mut next = None;
            for _ in 0..100 {
                let step = sample_perturbation(&step_params, rng);
                let forward = move_object(&current, &step);
                if within(&forward) {
                    next = Some(forward);
                    break;
                }
                let back = move_object(&current, &Twist::new(-step.t, -step.w));
                if within(&back) {
                    next = Some(back);
                    break;
                }
            }
            current = next.unwrap_or(current);
        }
        poses.push(current);
    }
    Ok(poses)
}

/// Renders a random-walk sequence of `mesh` starting from the corner view.
pub fn generate_sequence(
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    cfg: &SequenceConfig,
    seed: u64,
) -> Result<SyntheticSequence, SynthError> {
    let mut walk_rng = stream_rng(seed, 0);
    let mut noise_rng = stream_rng(seed, 1);
    let poses = random_walk(&corner_view_pose(cfg.distance), cfg, &mut walk_rng)?;
    let frames = poses
        .iter()
        .map(|p| {
            let mut f = render_rgbd(mesh, p, k);
            f.depth = augment_depth_noise(&f.depth, cfg.depth_noise_sigma, &mut noise_rng);
            f
        })
        .collect();
    Ok(SyntheticSequence { poses, frames })
}
