//! Frame-to-frame tracking on SE(3).
//!
//! Each frame, the object model is rendered at the previous pose, both the
//! render and the new observation are cropped around that pose, and a
//! [`ResidualEstimator`] predicts the twist `dxi` that carries the previous
//! pose to the current one. The pose is then updated on the manifold as
//! `exp(dxi) * T_prev`.

use std::time::Instant;

use crate::camera::{CameraError, CameraIntrinsics};
use crate::geometry::{apply_update, exp_se3, relative_twist, GeometryError};
use crate::image::{DepthImage, RgbdImage};
use crate::mesh::{model_diameter, sample_surface, MeshError, SurfacePoint, TriangleMesh};
use crate::render::{render_rgbd, CropWindow};
use crate::{Pose, Twist, Vec3};

/// Default side of the square crops handed to estimators.
pub const DEFAULT_CROP_SIZE: usize = 176;

/// Surface samples used as ICP model points.
pub const MODEL_SAMPLE_COUNT: usize = 1000;
pub const MODEL_SAMPLE_SEED: u64 = 0x5EED_1C9;

#[derive(Debug, thiserror::Error)]
pub enum TrackError {
    #[error("degenerate system: only {inliers} inlier correspondences (need 6)")]
    Degenerate { inliers: usize },
    #[error("normal equations are not positive definite after damping {damping:e}")]
    Singular { damping: f64 },
    #[error("estimator produced a non-finite twist")]
    NonFinite,
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{0}")]
    Estimator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNewtonConfig {
    pub max_iterations: usize,
    /// Stop once the step norm `|dxi|` falls below this.
    pub convergence_tol: f64,
    /// Huber threshold on point-to-plane residuals, meters.
    pub huber_delta: f64,
    /// Correspondences farther apart than this are dropped, meters.
    pub max_correspondence_dist: f64,
    /// Added to the diagonal of `JᵀJ`.
    pub damping: f64,
    /// Minimum cosine between model and observed normals for a correspondence.
    pub normal_compatibility: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            convergence_tol: 1e-6,
            huber_delta: 0.005,
            max_correspondence_dist: 0.05,
            damping: 1e-9,
            normal_compatibility: 0.8,
        }
    }
}

/// Accumulated Gauss–Newton normal equations, unknowns ordered `(t, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub jtj: [[f64; 6]; 6],
    pub jtr: [f64; 6],
    /// Huber-weighted sum of squared residuals at the linearization point.
    pub weighted_cost: f64,
    /// Unweighted RMS of inlier residuals, meters.
    pub rms: f64,
    pub inliers: usize,
}

impl NormalSystem {
    /// Weighted cost of the linearized residuals after a step `delta`.
    pub fn linearized_cost(&self, delta: &Twist) -> f64 {
        let d = delta.to_array();
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..6 {
            lin += d[i] * self.jtr[i];
            for j in 0..6 {
                quad += d[i] * self.jtj[i][j] * d[j];
            }
        }
        self.weighted_cost + 2.0 * lin + quad
    }
}

/// Jacobian row of `r = n · (exp(xi) p - q)` at `xi = 0`.
#[inline]
pub fn point_to_plane_jacobian(p: Vec3, n: Vec3) -> [f64; 6] {
    let pn = p.cross(n);
    [n.x, n.y, n.z, pn.x, pn.y, pn.z]
}

/// Source of observed correspondences for posed model points.
pub trait Associate {
    /// Observed point (and its normal, when known) matched to model point
    /// `index` at camera-frame position `p`.
    fn associate(&self, index: usize, p: Vec3) -> Option<(Vec3, Option<Vec3>)>;
}

/// Where a cropped image came from: depth in crop pixel `(i, j)` was measured
/// along the ray of a source pixel, not along the crop pixel's own ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSource {
    pub window: CropWindow,
    pub intrinsics: CameraIntrinsics,
}

/// Half-width of the stencil used to estimate observed normals, pixels.
pub const NORMAL_STENCIL: usize = 1;

/// Projective data association against an observed depth image.
pub struct ProjectiveAssociation<'a> {
    pub depth: &'a DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub source: Option<CropSource>,
}

impl ProjectiveAssociation<'_> {
    fn point(&self, x: usize, y: usize) -> Option<Vec3> {
        let d = self.depth.get(x, y);
        if d <= 0.0 {
            return None;
        }
        Some(match &self.source {
            Some(src) => {
                let (sx, sy) = src.window.depth_source_pixel(x, y, self.depth.width);
                src.intrinsics.backproject_pixel(sx, sy, d)
            }
            None => self.intrinsics.backproject_pixel(x as f64, y as f64, d),
        })
    }

    /// Normal from central differences of back-projections
    /// [`NORMAL_STENCIL`] pixels away.
    fn normal(&self, x: usize, y: usize, center: Vec3) -> Option<Vec3> {
        let s = NORMAL_STENCIL;
        if x < s || y < s || x + s >= self.depth.width || y + s >= self.depth.height {
            return None;
        }
        let dx = self.point(x + s, y)? - self.point(x - s, y)?;
        let dy = self.point(x, y + s)? - self.point(x, y - s)?;
        let n = dx.cross(dy).normalized()?;
        Some(if n.dot(center) > 0.0 { -n } else { n })
    }
}

impl Associate for ProjectiveAssociation<'_> {
    fn associate(&self, _index: usize, p: Vec3) -> Option<(Vec3, Option<Vec3>)> {
        let (u, v, _) = self.intrinsics.project(p).ok()?;
        let (x, y) = self.intrinsics.pixel_at(u, v)?;
        let q = self.point(x, y)?;
        // points whose normal cannot be estimated sit on silhouettes or holes
        Some((q, Some(self.normal(x, y, q)?)))
    }
}

/// Index-aligned correspondences: model point `i` matches `points[i]`.
pub struct PairedCloud<'a>(pub &'a [Vec3]);

impl Associate for PairedCloud<'_> {
    fn associate(&self, index: usize, _p: Vec3) -> Option<(Vec3, Option<Vec3>)> {
        self.0.get(index).map(|&q| (q, None))
    }
}

/// Builds the Huber-weighted point-to-plane normal equations for camera-frame
/// model points with unit normals.
pub fn build_point_to_plane_system(
    model: &[SurfacePoint],
    observed: &impl Associate,
    cfg: &GaussNewtonConfig,
) -> Result<NormalSystem, TrackError> {
    let mut sys = NormalSystem { jtj: [[0.0; 6]; 6], jtr: [0.0; 6], weighted_cost: 0.0, rms: 0.0, inliers: 0 };
    let mut sq_sum = 0.0;
    for (i, sp) in model.iter().enumerate() {
        let (p, n) = (sp.position, sp.normal);
        let Some((q, q_normal)) = observed.associate(i, p) else {
            continue;
        };
        if (p - q).norm() > cfg.max_correspondence_dist {
            continue;
        }
        if q_normal.is_some_and(|qn| qn.dot(n) < cfg.normal_compatibility) {
            continue;
        }
        let r = n.dot(p - q);
        let weight = if r.abs() <= cfg.huber_delta { 1.0 } else { cfg.huber_delta / r.abs() };
        let j = point_to_plane_jacobian(p, n);
        for a in 0..6 {
            sys.jtr[a] += weight * j[a] * r;
            for b in a..6 {
                sys.jtj[a][b] += weight * j[a] * j[b];
            }
        }
        sys.weighted_cost += weight * r * r;
        sq_sum += r * r;
        sys.inliers += 1;
    }
    if sys.inliers < 6 {
        return Err(TrackError::Degenerate { inliers: sys.inliers });
    }
    for a in 0..6 {
        for b in 0..a {
            sys.jtj[a][b] = sys.jtj[b][a];
        }
    }
    sys.rms = (sq_sum / sys.inliers as f64).sqrt();
    Ok(sys)
}

fn cholesky_solve(a: &[[f64; 6]; 6], b: &[f64; 6]) -> Option<[f64; 6]> {
    let scale = (0..6).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    let mut l = [[0.0; 6]; 6];
    for i in 0..6 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > scale * 1e-15) || !s.is_finite() {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 6];
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let mut s = y[i];
        for k in i + 1..6 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

/// Solves `(JᵀJ + damping I) dxi = -Jᵀr` by Cholesky, escalating the damping
/// tenfold up to three times if the matrix is not positive definite.
pub fn solve_normal_equations(jtj: &[[f64; 6]; 6], jtr: &[f64; 6], damping: f64) -> Result<Twist, TrackError> {
    let rhs = jtr.map(|v| -v);
    let mut lambda = damping;
    for _ in 0..4 {
        let mut a = *jtj;
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += lambda;
        }
        if let Some(x) = cholesky_solve(&a, &rhs) {
            return Ok(Twist::from_array(x));
        }
        lambda *= 10.0;
    }
    Err(TrackError::Singular { damping: lambda / 10.0 })
}

/// Everything an estimator may use besides the two images.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorContext<'a> {
    pub pose_prev: Pose,
    pub mesh: &'a TriangleMesh,
    /// Intrinsics of the (cropped) images handed to the estimator.
    pub intrinsics: CameraIntrinsics,
    pub crop: Option<CropSource>,
    pub frame_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub twist: Twist,
    pub residual_rms: Option<f64>,
}

impl Estimate {
    pub fn from_twist(twist: Twist) -> Self {
        Self { twist, residual_rms: None }
    }
}

/// Predicts the relative twist between a render at the previous pose and the
/// current observation.
pub trait ResidualEstimator {
    fn estimate(
        &self,
        rendered_prev: &RgbdImage,
        observed_cur: &RgbdImage,
        ctx: &EstimatorContext<'_>,
    ) -> Result<Estimate, TrackError>;
}

/// Classical point-to-plane Gauss–Newton estimator with projective association.
pub struct IcpEstimator {
    pub cfg: GaussNewtonConfig,
    model: Vec<SurfacePoint>,
}

/// Rendered depth may sit this far in front of a model point that still counts
/// as visible, meters.
const VISIBILITY_TOLERANCE: f64 = 0.01;

impl IcpEstimator {
    pub fn new(mesh: &TriangleMesh, cfg: GaussNewtonConfig) -> Result<Self, TrackError> {
        Ok(Self { cfg, model: sample_surface(mesh, MODEL_SAMPLE_COUNT, MODEL_SAMPLE_SEED)? })
    }

    pub fn model_points(&self) -> &[SurfacePoint] {
        &self.model
    }

    /// Model points visible at `pose`: facing the camera and not occluded in
    /// the render at that pose.
    fn visible_points(&self, pose: &Pose, rendered: &RgbdImage, k: &CameraIntrinsics) -> Vec<SurfacePoint> {
        self.model
            .iter()
            .filter(|sp| {
                let p = pose.transform_point(sp.position);
                let n = pose.rotation * sp.normal;
                if n.dot(p) >= 0.0 {
                    return false;
                }
                let Ok((u, v, z)) = k.project(p) else {
                    return false;
                };
                match k.pixel_at(u, v) {
                    Some((x, y)) if rendered.width() == k.width && rendered.height() == k.height => {
                        let d = rendered.depth.get(x, y);
                        d > 0.0 && z <= d + VISIBILITY_TOLERANCE
                    }
                    _ => false,
                }
            })
            .copied()
            .collect()
    }

    /// Runs Gauss–Newton from `pose_prev`; returns the final pose and the RMS
    /// residual of the last linearization.
    pub fn register(
        &self,
        rendered_prev: &RgbdImage,
        observed: &RgbdImage,
        pose_prev: &Pose,
        k: &CameraIntrinsics,
        crop: Option<CropSource>,
    ) -> Result<(Pose, f64), TrackError> {
        let visible = self.visible_points(pose_prev, rendered_prev, k);
        let assoc = ProjectiveAssociation { depth: &observed.depth, intrinsics: *k, source: crop };
        let mut pose = *pose_prev;
        let mut rms = f64::NAN;
        for _ in 0..self.cfg.max_iterations {
            let posed: Vec<SurfacePoint> = visible
                .iter()
                .map(|sp| SurfacePoint {
                    position: pose.transform_point(sp.position),
                    normal: pose.rotation * sp.normal,
                })
                .collect();
            let sys = build_point_to_plane_system(&posed, &assoc, &self.cfg)?;
            rms = sys.rms;
            let step = solve_normal_equations(&sys.jtj, &sys.jtr, self.cfg.damping)?;
            if !step.is_finite() {
                return Err(TrackError::NonFinite);
            }
            pose = apply_update(&pose, &step).orthonormalized();
            if step.norm() < self.cfg.convergence_tol {
                break;
            }
        }
        Ok((pose, rms))
    }
}

impl ResidualEstimator for IcpEstimator {
    fn estimate(
        &self,
        rendered_prev: &RgbdImage,
        observed_cur: &RgbdImage,
        ctx: &EstimatorContext<'_>,
    ) -> Result<Estimate, TrackError> {
        let (pose, rms) = self.register(rendered_prev, observed_cur, &ctx.pose_prev, &ctx.intrinsics, ctx.crop)?;
        Ok(Estimate { twist: relative_twist(&ctx.pose_prev, &pose)?, residual_rms: Some(rms) })
    }
}

/// Returns the exact relative twist to a known trajectory.
pub struct GroundTruthEstimator {
    pub poses: Vec<Pose>,
}

impl ResidualEstimator for GroundTruthEstimator {
    fn estimate(&self, _: &RgbdImage, _: &RgbdImage, ctx: &EstimatorContext<'_>) -> Result<Estimate, TrackError> {
        let target = self
            .poses
            .get(ctx.frame_index)
            .ok_or_else(|| TrackError::Estimator(format!("no ground truth for frame {}", ctx.frame_index)))?;
        Ok(Estimate::from_twist(relative_twist(&ctx.pose_prev, target)?))
    }
}

/// Always predicts no motion.
pub struct ZeroEstimator;

impl ResidualEstimator for ZeroEstimator {
    fn estimate(&self, _: &RgbdImage, _: &RgbdImage, _: &EstimatorContext<'_>) -> Result<Estimate, TrackError> {
        Ok(Estimate::from_twist(Twist::zero()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub pose: Pose,
    /// Number of frames processed so far.
    pub frame_index: usize,
    pub last_twist: Twist,
    pub residual_rms: Option<f64>,
    /// Set when the estimator failed on the last frame; the pose was kept.
    pub lost: bool,
}

impl TrackState {
    pub fn new(pose: Pose) -> Self {
        Self { pose, frame_index: 0, last_twist: Twist::zero(), residual_rms: None, lost: false }
    }
}

/// Render and observation cropped around the previous pose.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub rendered: RgbdImage,
    pub observed: RgbdImage,
    /// Intrinsics of the virtual crop camera.
    pub intrinsics: CameraIntrinsics,
    pub source: CropSource,
}

/// Object, camera and crop settings shared by every frame of a sequence.
#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    pub mesh: &'a TriangleMesh,
    pub intrinsics: CameraIntrinsics,
    pub diameter: f64,
    pub crop_size: usize,
}

impl<'a> Tracker<'a> {
    pub fn new(mesh: &'a TriangleMesh, intrinsics: CameraIntrinsics, crop_size: usize) -> Result<Self, TrackError> {
        let diameter = model_diameter(mesh)?.meters;
        Ok(Self { mesh, intrinsics, diameter, crop_size })
    }

    /// Renders at the previous pose and crops render and observation around it.
    pub fn prepare(&self, pose: &Pose, observation: &RgbdImage) -> Result<PreparedFrame, TrackError> {
        let rendered = render_rgbd(self.mesh, pose, &self.intrinsics);
        let window = CropWindow::around_object(pose, self.diameter, &self.intrinsics)?;
        Ok(PreparedFrame {
            rendered: window.resample(&rendered, self.crop_size),
            observed: window.resample(observation, self.crop_size),
            intrinsics: window.intrinsics(&self.intrinsics, self.crop_size),
            source: CropSource { window, intrinsics: self.intrinsics },
        })
    }

    /// Estimator context for a prepared frame.
    pub fn context(&self, state: &TrackState, frame: &PreparedFrame) -> EstimatorContext<'a> {
        EstimatorContext {
            pose_prev: state.pose,
            mesh: self.mesh,
            intrinsics: frame.intrinsics,
            crop: Some(frame.source),
            frame_index: state.frame_index,
        }
    }

    /// One tracking step. Estimator failures keep the previous pose and set
    /// the lost flag.
    pub fn track_frame(&self, state: &TrackState, observation: &RgbdImage, estimator: &dyn ResidualEstimator) -> TrackState {
        let attempt = || -> Result<Estimate, TrackError> {
            let frame = self.prepare(&state.pose, observation)?;
            let est = estimator.estimate(&frame.rendered, &frame.observed, &self.context(state, &frame))?;
            if !est.twist.is_finite() {
                return Err(TrackError::NonFinite);
            }
            Ok(est)
        };
        match attempt() {
            Ok(est) => TrackState {
                pose: apply_update(&state.pose, &est.twist).orthonormalized(),
                frame_index: state.frame_index + 1,
                last_twist: est.twist,
                residual_rms: est.residual_rms,
                lost: false,
            },
            Err(_) => TrackState {
                pose: state.pose,
                frame_index: state.frame_index + 1,
                last_twist: Twist::zero(),
                residual_rms: None,
                lost: true,
            },
        }
    }

    /// Tracks every frame in order starting from `init_pose`, without ever
    /// re-initializing.
    pub fn track_sequence<I>(&self, init_pose: Pose, frames: I, estimator: &dyn ResidualEstimator) -> Trajectory
    where
        I: IntoIterator,
        I::Item: std::borrow::Borrow<RgbdImage>,
    {
        let mut state = TrackState::new(init_pose);
        let mut out = Trajectory::default();
        for frame in frames {
            let start = Instant::now();
            state = self.track_frame(&state, std::borrow::Borrow::borrow(&frame), estimator);
            out.poses.push(state.pose);
            out.records.push(FrameRecord {
                frame: state.frame_index - 1,
                twist_norm: state.last_twist.norm(),
                residual_rms: state.residual_rms,
                lost: state.lost,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub twist_norm: f64,
    pub residual_rms: Option<f64>,
    pub lost: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub records: Vec<FrameRecord>,
}

impl Trajectory {
    pub fn lost_flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.lost).collect()
    }
}

/// Applies a twist to camera-frame model points, for tests and diagnostics.
pub fn transform_surface(points: &[SurfacePoint], xi: &Twist) -> Vec<SurfacePoint> {
    let t = exp_se3(xi);
    points
        .iter()
        .map(|sp| SurfacePoint { position: t.transform_point(sp.position), normal: t.rotation * sp.normal })
        .collect()
}
