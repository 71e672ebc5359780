//! Pinhole camera model.
//!
//! Pixel `(u, v)` has its center at integer coordinates, so pixel `(cx, cy)`
//! looks straight down the optical axis.

use crate::image::DepthImage;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth image is {got:?}, intrinsics expect {expected:?}")]
    SizeMismatch { got: (usize, usize), expected: (usize, usize) },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// A 640×480 structured-light sensor.
impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 572.4, fy: 573.6, cx: 325.3, cy: 242.0, width: 640, height: 480 }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self, CameraError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame point to `(u, v, z)`.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64), CameraError> {
        if !(p.z > 0.0) {
            return Err(CameraError::BehindCamera { z: p.z });
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy, p.z))
    }

    /// Pixel coordinates plus depth back to a camera-frame point.
    #[inline]
    pub fn backproject_pixel(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Nearest pixel whose center is closest to `(u, v)`, if inside the image.
    #[inline]
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let x = (u + 0.5).floor();
        let y = (v + 0.5).floor();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }
}

/// Point cloud of all valid pixels, in row-major pixel order.
pub fn backproject(depth: &DepthImage, k: &CameraIntrinsics) -> Result<Vec<Vec3>, CameraError> {
    if (depth.width, depth.height) != (k.width, k.height) {
        return Err(CameraError::SizeMismatch {
            got: (depth.width, depth.height),
            expected: (k.width, k.height),
        });
    }
    let mut cloud = Vec::new();
    for y in 0..depth.height {
        for x in 0..depth.width {
            let z = depth.get(x, y);
            if z > 0.0 {
                cloud.push(k.backproject_pixel(x as f64, y as f64, z));
            }
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn project_examples() {
        let k = k640();
        assert_eq!(k.project(Vec3::new(0.0, 0.0, 1.0)).unwrap(), (320.0, 240.0, 1.0));
        assert_eq!(k.project(Vec3::new(0.1, 0.0, 1.0)).unwrap(), (370.0, 240.0, 1.0));
        assert!(matches!(k.project(Vec3::new(0.0, 0.0, -1.0)), Err(CameraError::BehindCamera { .. })));
        assert!(k.project(Vec3::new(0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 500.0, 0.0, 0.0, 10, 10).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 0.0, 0.0, 0, 10).is_err());
    }

    #[test]
    fn backproject_examples() {
        let k = k640();
        let empty = DepthImage::new(640, 480);
        assert!(backproject(&empty, &k).unwrap().is_empty());

        let mut one = DepthImage::new(640, 480);
        one.set(320, 240, 1.0);
        assert_eq!(backproject(&one, &k).unwrap(), vec![Vec3::new(0.0, 0.0, 1.0)]);

        assert!(backproject(&DepthImage::new(10, 10), &k).is_err());
    }

    proptest! {
        #[test]
        fn backproject_inverts_project(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..5.0) {
            let k = k640();
            let p = Vec3::new(x, y, z);
            let (u, v, d) = k.project(p).unwrap();
            prop_assert!((k.backproject_pixel(u, v, d) - p).max_abs() < 1e-9);
        }
    }
}
