//! so(3)/se(3) Lie-algebra and SE(3) Lie-group arithmetic.
//!
//! Poses follow the homogeneous form `[R t; 0 1]`. The exponential of a twist
//! `(t, w)` is `[exp_so3(w) t; 0 1]`: the translation passes through unchanged,
//! without the left-Jacobian coupling of the textbook SE(3) exponential. Every
//! estimator in the crate produces twists against this convention, and pose
//! updates are left-multiplicative: `T_new = exp(dxi) * T_prev`.

use std::fmt;
use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use crate::scalar::Real;

/// Below this rotation angle Rodrigues' formula switches to its second-order
/// Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Tolerance used when validating rotation matrices and unit quaternions.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("matrix is not a rotation: max |R^T R - I| = {orthogonality:.3e}, det = {det}")]
    NotRotation { orthogonality: f64, det: f64 },
    #[error("quaternion is not unit length (norm {norm})")]
    NotUnitQuaternion { norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    #[inline]
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn zeros() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    #[inline]
    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction, or `None` for a zero vector.
    pub fn normalized(self) -> Option<Self> {
        let n = self.norm();
        if n > T::zero() && n.is_finite() {
            Some(self * (T::one() / n))
        } else {
            None
        }
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(self) -> T {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    #[inline]
    pub const fn from_rows(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn zeros() -> Self {
        Self { m: [[T::zero(); 3]; 3] }
    }

    pub fn identity() -> Self {
        let mut m = Self::zeros();
        for i in 0..3 {
            m.m[i][i] = T::one();
        }
        m
    }

    pub fn from_diagonal(d: Vec3<T>) -> Self {
        let mut m = Self::zeros();
        m.m[0][0] = d.x;
        m.m[1][1] = d.y;
        m.m[2][2] = d.z;
        m
    }

    /// Matrix whose columns are `a`, `b`, `c`.
    pub fn from_columns(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Self {
        Self::from_rows([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]])
    }

    #[inline]
    pub fn row(&self, i: usize) -> Vec3<T> {
        Vec3::from_array(self.m[i])
    }

    #[inline]
    pub fn col(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.m[i][j] = self.m[j][i];
            }
        }
        t
    }

    pub fn trace(&self) -> T {
        self.m[0][0] + self.m[1][1] + self.m[2][2]
    }

    pub fn determinant(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Transposed cofactor matrix divided by the determinant; `None` when singular.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let m = &self.m;
        let inv_det = T::one() / det;
        let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d] - m[a][d] * m[c][b];
        Some(Self::from_rows([
            [c(1, 1, 2, 2) * inv_det, -c(0, 1, 2, 2) * inv_det, c(0, 1, 1, 2) * inv_det],
            [-c(1, 0, 2, 2) * inv_det, c(0, 0, 2, 2) * inv_det, -c(0, 0, 1, 2) * inv_det],
            [c(1, 0, 2, 1) * inv_det, -c(0, 0, 2, 1) * inv_det, c(0, 0, 1, 1) * inv_det],
        ]))
    }

    pub fn scale(&self, s: T) -> Self {
        let mut r = *self;
        for row in r.m.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        r
    }

    pub fn frobenius_norm(&self) -> T {
        self.m.iter().flatten().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs_diff(&self, o: &Self) -> T {
        let mut d = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - o.m[i][j]).abs());
            }
        }
        d
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthogonality_error(&self) -> T {
        (self.transpose() * *self).max_abs_diff(&Self::identity())
    }

    /// Checks the rotation-matrix invariants within `tol`.
    pub fn validate_rotation(&self, tol: T) -> Result<(), GeometryError> {
        let orth = self.orthogonality_error();
        let det = self.determinant();
        if !self.is_finite() || orth > tol || (det - T::one()).abs() > tol {
            return Err(GeometryError::NotRotation {
                orthogonality: orth.to_f64_lossy(),
                det: det.to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// Nearest rotation in the Frobenius sense (polar factor), by Newton's
    /// iteration `R <- (R + R^-T) / 2`. Input must be close to a rotation.
    pub fn orthonormalized(&self) -> Self {
        let mut r = *self;
        for _ in 0..32 {
            let Some(inv) = r.inverse() else {
                break;
            };
            let next = (r + inv.transpose()).scale(T::lit(0.5));
            let delta = next.max_abs_diff(&r);
            r = next;
            if delta <= T::epsilon() {
                break;
            }
        }
        r
    }

    pub fn cast<U: Real>(&self) -> Mat3<U> {
        let mut r = Mat3::<U>::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = U::lit(self.m[i][j].to_f64_lossy());
            }
        }
        r
    }
}

impl<T: Real> Add for Mat3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = r.m[i][j] + o.m[i][j];
            }
        }
        r
    }
}

impl<T: Real> Sub for Mat3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = r.m[i][j] - o.m[i][j];
            }
        }
        r
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut r = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        r
    }
}

impl<T: Real> Mul<Vec3<T>> for Mat3<T> {
    type Output = Vec3<T>;
    #[inline]
    fn mul(self, v: Vec3<T>) -> Vec3<T> {
        Vec3::new(self.row(0).dot(v), self.row(1).dot(v), self.row(2).dot(v))
    }
}

/// Element of se(3): translation part `t` and rotation vector `w`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist<T> {
    pub t: Vec3<T>,
    pub w: Vec3<T>,
}

impl<T: Real> Twist<T> {
    pub const fn new(t: Vec3<T>, w: Vec3<T>) -> Self {
        Self { t, w }
    }

    pub fn zero() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    /// Components ordered `(tx, ty, tz, wx, wy, wz)`.
    pub fn to_array(self) -> [T; 6] {
        [self.t.x, self.t.y, self.t.z, self.w.x, self.w.y, self.w.z]
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]))
    }

    /// Euclidean norm of the 6-vector.
    pub fn norm(self) -> T {
        (self.t.norm_squared() + self.w.norm_squared()).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.t.is_finite() && self.w.is_finite()
    }
}

/// Rigid transform in SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub const fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(Mat3::identity(), t)
    }

    /// Row-major homogeneous 4x4 matrix.
    pub fn to_matrix4(&self) -> [[T; 4]; 4] {
        let r = &self.rotation.m;
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [T::zero(), T::zero(), T::zero(), T::one()],
        ]
    }

    /// Builds a pose from a homogeneous matrix, validating the rotation block.
    pub fn from_matrix4(h: [[T; 4]; 4]) -> Result<Self, GeometryError> {
        let rotation = Mat3::from_rows([
            [h[0][0], h[0][1], h[0][2]],
            [h[1][0], h[1][1], h[1][2]],
            [h[2][0], h[2][1], h[2][2]],
        ]);
        rotation.validate_rotation(T::lit(ROTATION_TOLERANCE))?;
        Ok(Self::new(rotation, Vec3::new(h[0][3], h[1][3], h[2][3])))
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.rotation.validate_rotation(T::lit(ROTATION_TOLERANCE))
    }

    /// Re-projects the rotation block onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        Self::new(self.rotation.orthonormalized(), self.translation)
    }

    pub fn compose(&self, other: &Self) -> Self {
        compose(self, other)
    }

    pub fn inverse(&self) -> Self {
        inverse(self)
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        transform_point(self, p)
    }

    /// Largest absolute entry-wise difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, o: &Self) -> T {
        self.rotation
            .max_abs_diff(&o.rotation)
            .max((self.translation - o.translation).max_abs())
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose::new(self.rotation.cast(), self.translation.cast())
    }
}

impl<T: Real> fmt::Display for Pose<T> {
    /// Four lines of four floats, row-major, printed with 17 significant digits.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.to_matrix4() {
            let line: Vec<String> = row.iter().map(|v| format!("{:.16e}", v.to_f64_lossy())).collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Unit quaternion with non-negative scalar part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion<T> {
    pub x: T,
    pub y: T,
    pub z: T,
    pub w: T,
}

impl<T: Real> UnitQuaternion<T> {
    pub fn identity() -> Self {
        Self { x: T::zero(), y: T::zero(), z: T::zero(), w: T::one() }
    }

    pub fn norm(&self) -> T {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }
}

/// `[w]x`, the matrix with `skew(w) * v == w.cross(v)`.
pub fn skew<T: Real>(w: Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    Mat3::from_rows([[z, -w.z, w.y], [w.z, z, -w.x], [-w.y, w.x, z]])
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`: `vee((m - mᵀ) / 2)`.
fn vee_antisymmetric<T: Real>(m: &Mat3<T>) -> Vec3<T> {
    let h = T::lit(0.5);
    Vec3::new(
        (m.m[2][1] - m.m[1][2]) * h,
        (m.m[0][2] - m.m[2][0]) * h,
        (m.m[1][0] - m.m[0][1]) * h,
    )
}

/// Rodrigues' formula.
pub fn exp_so3<T: Real>(w: Vec3<T>) -> Mat3<T> {
    let k = skew(w);
    let k2 = k * k;
    let theta = w.norm();
    if theta < T::lit(SMALL_ANGLE) {
        return Mat3::identity() + k + k2.scale(T::lit(0.5));
    }
    let a = theta.sin() / theta;
    let b = (T::one() - theta.cos()) / (theta * theta);
    Mat3::identity() + k.scale(a) + k2.scale(b)
}

/// Rotation vector of `r` with angle in `[0, pi]`.
///
/// At exactly `pi` the axis sign is fixed so that its first nonzero component
/// is positive.
pub fn log_so3<T: Real>(r: &Mat3<T>) -> Result<Vec3<T>, GeometryError> {
    r.validate_rotation(T::lit(ROTATION_TOLERANCE))?;
    let half = T::lit(0.5);
    let cos_theta = ((r.trace() - T::one()) * half).max(-T::one()).min(T::one());
    // |v| = sin(theta)
    let v = vee_antisymmetric(r);
    let sin_theta = v.norm();
    let theta = sin_theta.atan2(cos_theta);

    if cos_theta >= T::zero() {
        // theta / sin(theta), series near zero
        let factor = if theta < T::lit(1e-4) {
            T::one() + theta * theta / T::lit(6.0)
        } else {
            theta / sin_theta
        };
        return Ok(v * factor);
    }

    if sin_theta > T::lit(1e-7) {
        return Ok(v * (theta / sin_theta));
    }

    // Near pi: (R + Rᵀ)/2 - cos(theta) I = (1 - cos(theta)) a aᵀ.
    let sym = (*r + r.transpose()).scale(half) - Mat3::identity().scale(cos_theta);
    let outer = sym.scale(T::one() / (T::one() - cos_theta));
    let diag = [outer.m[0][0], outer.m[1][1], outer.m[2][2]];
    let mut k = 0;
    for i in 1..3 {
        if diag[i] > diag[k] {
            k = i;
        }
    }
    let ak = diag[k].max(T::zero()).sqrt();
    let mut axis = Vec3::new(outer.m[0][k] / ak, outer.m[1][k] / ak, outer.m[2][k] / ak);
    axis = axis.normalized().unwrap_or(Vec3::new(T::one(), T::zero(), T::zero()));
    let eps = T::lit(1e-12);
    let first = [axis.x, axis.y, axis.z].into_iter().find(|c| c.abs() > eps).unwrap_or(T::one());
    if first < T::zero() {
        axis = -axis;
    }
    if sin_theta > T::lit(1e-10) && axis.dot(v) < T::zero() {
        axis = -axis;
    }
    Ok(axis * theta)
}

pub fn exp_se3<T: Real>(xi: &Twist<T>) -> Pose<T> {
    Pose::new(exp_so3(xi.w), xi.t)
}

pub fn log_se3<T: Real>(pose: &Pose<T>) -> Result<Twist<T>, GeometryError> {
    Ok(Twist::new(pose.translation, log_so3(&pose.rotation)?))
}

/// `a * b`.
pub fn compose<T: Real>(a: &Pose<T>, b: &Pose<T>) -> Pose<T> {
    Pose::new(a.rotation * b.rotation, a.rotation * b.translation + a.translation)
}

pub fn inverse<T: Real>(pose: &Pose<T>) -> Pose<T> {
    let rt = pose.rotation.transpose();
    Pose::new(rt, -(rt * pose.translation))
}

#[inline]
pub fn transform_point<T: Real>(pose: &Pose<T>, p: Vec3<T>) -> Vec3<T> {
    pose.rotation * p + pose.translation
}

/// Left-multiplicative manifold update `exp(dxi) * prev`.
pub fn apply_update<T: Real>(prev: &Pose<T>, dxi: &Twist<T>) -> Pose<T> {
    compose(&exp_se3(dxi), prev)
}

/// The twist that [`apply_update`] needs to carry `prev` onto `cur`.
pub fn relative_twist<T: Real>(prev: &Pose<T>, cur: &Pose<T>) -> Result<Twist<T>, GeometryError> {
    log_se3(&compose(cur, &inverse(prev)))
}

/// Quaternion of the rotation `exp_so3(w)`, canonicalized to `w >= 0`.
pub fn quat_from_rotvec<T: Real>(w: Vec3<T>) -> UnitQuaternion<T> {
    let theta = w.norm();
    let half = theta * T::lit(0.5);
    // sin(theta/2) / theta
    let s = if theta < T::lit(1e-4) {
        T::lit(0.5) - theta * theta / T::lit(48.0)
    } else {
        half.sin() / theta
    };
    let mut q = UnitQuaternion { x: w.x * s, y: w.y * s, z: w.z * s, w: half.cos() };
    if q.w < T::zero() {
        q = UnitQuaternion { x: -q.x, y: -q.y, z: -q.z, w: -q.w };
    }
    q
}

pub fn quat_to_mat<T: Real>(q: &UnitQuaternion<T>) -> Result<Mat3<T>, GeometryError> {
    let norm = q.norm();
    if !norm.is_finite() || (norm - T::one()).abs() > T::lit(ROTATION_TOLERANCE) {
        return Err(GeometryError::NotUnitQuaternion { norm: norm.to_f64_lossy() });
    }
    let (x, y, z, w) = (q.x, q.y, q.z, q.w);
    let one = T::one();
    let two = T::lit(2.0);
    Ok(Mat3::from_rows([
        [one - two * (y * y + z * z), two * (x * y - z * w), two * (x * z + y * w)],
        [two * (x * y + z * w), one - two * (x * x + z * z), two * (y * z - x * w)],
        [two * (x * z - y * w), two * (y * z + x * w), one - two * (x * x + y * y)],
    ]))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use proptest::prelude::*;

    use super::*;

    type V = Vec3<f64>;
    type M = Mat3<f64>;

    /// Truncated power series of the matrix exponential.
    fn series_exp(a: &M, terms: usize) -> M {
        let mut sum = M::identity();
        let mut term = M::identity();
        for k in 1..terms {
            term = (term * *a).scale(1.0 / k as f64);
            sum = sum + term;
        }
        sum
    }

    fn matmul4(a: [[f64; 4]; 4], b: [[f64; 4]; 4]) -> [[f64; 4]; 4] {
        let mut r = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    r[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        r
    }

    fn arb_rotvec(max_angle: f64) -> impl Strategy<Value = V> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, 0.0f64..max_angle).prop_filter_map(
            "non-degenerate axis",
            |(x, y, z, a)| V::new(x, y, z).normalized().map(|u| u * a),
        )
    }

    fn arb_pose() -> impl Strategy<Value = Pose<f64>> {
        (arb_rotvec(PI - 0.1), -2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0)
            .prop_map(|(w, x, y, z)| exp_se3(&Twist::new(V::new(x, y, z), w)))
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(V::zeros()), M::zeros());
        assert_eq!(
            skew(V::new(0.0, 0.0, 1.0)),
            M::from_rows([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        );
        let a = V::new(1.0, 2.0, 3.0);
        let b = V::new(4.0, 5.0, 6.0);
        // cross product computed by hand
        assert_eq!(skew(a) * b, V::new(-3.0, 6.0, -3.0));
        let s = skew(a);
        assert_eq!(s.transpose(), s.scale(-1.0));
    }

    #[test]
    fn exp_so3_examples() {
        assert_eq!(exp_so3(V::zeros()), M::identity());
        let r = exp_so3(V::new(0.0, 0.0, FRAC_PI_2));
        let expected = M::from_rows([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(r.max_abs_diff(&expected) < 1e-15);
        let w = V::new(0.1, 0.2, 0.3);
        let oracle = series_exp(&skew(w), 30);
        assert!(exp_so3(w).max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn exp_so3_works_in_single_precision() {
        let r = exp_so3(Vec3::<f32>::new(0.3, -0.2, 0.5));
        assert!(r.orthogonality_error() < 1e-6);
        let w = log_so3(&r).unwrap();
        assert!((w - Vec3::new(0.3, -0.2, 0.5)).max_abs() < 1e-5);
    }

    #[test]
    fn log_so3_examples() {
        assert_eq!(log_so3(&M::identity()).unwrap(), V::zeros());
        let w = V::new(0.4, -0.2, 0.7);
        assert!((log_so3(&exp_so3(w)).unwrap() - w).max_abs() < 1e-9);

        let flip = exp_so3(V::new(PI, 0.0, 0.0));
        assert!(flip.max_abs_diff(&M::from_diagonal(V::new(1.0, -1.0, -1.0))) < 1e-15);
        let w = log_so3(&M::from_diagonal(V::new(1.0, -1.0, -1.0))).unwrap();
        assert!((w - V::new(PI, 0.0, 0.0)).max_abs() < 1e-12);
    }

    #[test]
    fn log_so3_pi_sign_is_canonical() {
        // 180 degrees about (-1, 1, 0)/sqrt(2): axis comes back with a positive first component
        let axis = V::new(-1.0, 1.0, 0.0).normalized().unwrap();
        let w = log_so3(&exp_so3(axis * PI)).unwrap();
        assert!((w.norm() - PI).abs() < 1e-9);
        assert!(w.x > 0.0);
        assert!(exp_so3(w).max_abs_diff(&exp_so3(axis * PI)) < 1e-12);
    }

    #[test]
    fn log_so3_rejects_non_rotation() {
        let m = M::from_diagonal(V::new(1.0, 1.0, 1.01));
        assert!(matches!(log_so3(&m), Err(GeometryError::NotRotation { .. })));
        let reflection = M::from_diagonal(V::new(1.0, 1.0, -1.0));
        assert!(log_so3(&reflection).is_err());
    }

    #[test]
    fn exp_se3_examples() {
        assert_eq!(exp_se3(&Twist::<f64>::zero()), Pose::identity());
        let p = exp_se3(&Twist::new(V::new(0.01, 0.0, 0.0), V::zeros()));
        assert_eq!(p, Pose::from_translation(V::new(0.01, 0.0, 0.0)));
        let p = exp_se3(&Twist::new(V::new(0.0, 0.0, 0.05), V::new(0.0, 0.0, FRAC_PI_2)));
        assert_eq!(p.translation, V::new(0.0, 0.0, 0.05));
        assert!(p.rotation.max_abs_diff(&exp_so3(V::new(0.0, 0.0, FRAC_PI_2))) == 0.0);
    }

    #[test]
    fn log_se3_examples() {
        assert_eq!(log_se3(&Pose::<f64>::identity()).unwrap(), Twist::zero());
        let t = log_se3(&Pose::from_translation(V::new(0.1, 0.2, 0.3))).unwrap();
        assert_eq!(t, Twist::new(V::new(0.1, 0.2, 0.3), V::zeros()));
    }

    #[test]
    fn transform_point_examples() {
        let p = V::new(1.0, 2.0, 3.0);
        assert_eq!(transform_point(&Pose::identity(), p), p);
        let t = Pose::from_translation(V::new(0.05, 0.0, 0.0));
        assert_eq!(transform_point(&t, V::zeros()), V::new(0.05, 0.0, 0.0));
        let rz = Pose::new(exp_so3(V::new(0.0, 0.0, FRAC_PI_2)), V::zeros());
        assert!((transform_point(&rz, V::new(1.0, 0.0, 0.0)) - V::new(0.0, 1.0, 0.0)).max_abs() < 1e-15);
    }

    #[test]
    fn apply_update_examples() {
        let prev = exp_se3(&Twist::new(V::new(0.1, -0.3, 0.8), V::new(0.2, 0.1, -0.4)));
        assert_eq!(apply_update(&prev, &Twist::zero()), prev);
        let p = apply_update(&Pose::identity(), &Twist::new(V::new(0.01, 0.0, 0.0), V::zeros()));
        assert_eq!(p.translation, V::new(0.01, 0.0, 0.0));
    }

    #[test]
    fn quaternion_examples() {
        let q = quat_from_rotvec(V::zeros());
        assert_eq!(q, UnitQuaternion::identity());
        let q = quat_from_rotvec(V::new(0.0, 0.0, PI));
        assert!(q.x.abs() < 1e-15 && q.y.abs() < 1e-15 && (q.z - 1.0).abs() < 1e-15);
        assert!(q.w >= 0.0 && q.w < 1e-15);
    }

    #[test]
    fn quat_to_mat_rejects_non_unit() {
        let q = UnitQuaternion { x: 0.0, y: 0.0, z: 0.0, w: 1.1 };
        assert!(matches!(quat_to_mat(&q), Err(GeometryError::NotUnitQuaternion { .. })));
    }

    #[test]
    fn polar_reorthonormalization_fixes_drift() {
        let r = exp_so3(V::new(0.3, 0.2, -0.1));
        let mut noisy = r;
        noisy.m[0][1] += 1e-6;
        noisy.m[2][0] -= 2e-6;
        let fixed = noisy.orthonormalized();
        assert!(fixed.orthogonality_error() < 1e-15);
        assert!((fixed.determinant() - 1.0).abs() < 1e-15);
        assert!(fixed.max_abs_diff(&r) < 1e-5);
    }

    #[test]
    fn composition_drift_stays_bounded() {
        let step = exp_se3(&Twist::new(V::new(0.001, -0.002, 0.0005), V::new(0.01, -0.02, 0.015)));
        let mut pose = Pose::identity();
        for _ in 0..10_000 {
            pose = compose(&step, &pose).orthonormalized();
        }
        assert!(pose.rotation.orthogonality_error() < 1e-9);
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pose_display_is_four_rows() {
        let s = Pose::<f64>::identity().to_string();
        assert_eq!(s.lines().count(), 4);
        assert!(s.lines().all(|l| l.split_whitespace().count() == 4));
    }

    proptest! {
        #[test]
        fn exp_is_rotation(w in arb_rotvec(10.0)) {
            let r = exp_so3(w);
            prop_assert!(r.orthogonality_error() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_exp_round_trip(w in arb_rotvec(PI - 1e-3)) {
            prop_assert!((log_so3(&exp_so3(w)).unwrap() - w).max_abs() < 1e-9);
        }

        #[test]
        fn exp_of_negation_is_inverse(w in arb_rotvec(10.0)) {
            prop_assert!((exp_so3(w) * exp_so3(-w)).max_abs_diff(&M::identity()) < 1e-12);
        }

        #[test]
        fn small_angle_continuity(u in arb_rotvec(1.0), eps in 1e-9f64..1e-4) {
            let Some(u) = u.normalized() else { return Ok(()) };
            let lin = M::identity() + skew(u).scale(eps);
            prop_assert!((exp_so3(u * eps) - lin).frobenius_norm() <= eps * eps);
        }

        #[test]
        fn se3_round_trip(w in arb_rotvec(PI - 0.1), t in proptest::array::uniform3(-5.0f64..5.0)) {
            let xi = Twist::new(V::from_array(t), w);
            let back = log_se3(&exp_se3(&xi)).unwrap();
            prop_assert!((back.t - xi.t).max_abs() < 1e-9 && (back.w - xi.w).max_abs() < 1e-9);
        }

        #[test]
        fn compose_matches_homogeneous_product(a in arb_pose(), b in arb_pose()) {
            let oracle = matmul4(a.to_matrix4(), b.to_matrix4());
            let c = compose(&a, &b).to_matrix4();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((c[i][j] - oracle[i][j]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn compose_identity_and_inverse(a in arb_pose()) {
            prop_assert_eq!(compose(&a, &Pose::identity()), a);
            prop_assert!(compose(&a, &inverse(&a)).max_abs_diff(&Pose::identity()) < 1e-12);
            prop_assert!(inverse(&inverse(&a)).max_abs_diff(&a) < 1e-12);
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = compose(&compose(&a, &b), &c);
            let r = compose(&a, &compose(&b, &c));
            prop_assert!(l.max_abs_diff(&r) < 1e-12);
        }

        #[test]
        fn relative_twist_round_trips(prev in arb_pose(), cur in arb_pose()) {
            let xi = relative_twist(&prev, &cur).unwrap();
            prop_assert!(apply_update(&prev, &xi).max_abs_diff(&cur) < 1e-9);
        }

        #[test]
        fn quaternion_matches_rodrigues(w in arb_rotvec(2.0 * PI)) {
            let q = quat_from_rotvec(w);
            prop_assert!(q.w >= 0.0);
            prop_assert!((q.norm() - 1.0).abs() < 1e-12);
            prop_assert!(quat_to_mat(&q).unwrap().max_abs_diff(&exp_so3(w)) < 1e-9);
        }

        #[test]
        fn quaternion_canonical_under_equivalent_rotvec(w in arb_rotvec(PI)) {
            let n = w.norm();
            prop_assume!(n > 1e-6);
            let alt = w * ((n - 2.0 * PI) / n);
            let (q1, q2) = (quat_from_rotvec(w), quat_from_rotvec(alt));
            prop_assert!(q1.w >= 0.0 && q2.w >= 0.0);
            let (m1, m2) = (quat_to_mat(&q1).unwrap(), quat_to_mat(&q2).unwrap());
            prop_assert!(m1.max_abs_diff(&m2) < 1e-9);
        }
    }
}
