//! Dense RGB, depth and RGB-D image containers.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImageError {
    #[error("image dimensions {width}x{height} do not match data length {len}")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("rgb is {rgb:?} but depth is {depth:?}")]
    DimensionMismatch { rgb: (usize, usize), depth: (usize, usize) },
    #[error("depth value {value} at pixel {index} is negative or not finite")]
    BadDepth { index: usize, value: f64 },
}

/// Metric depth per pixel; `0.0` marks an invalid or missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        Self { width, height, data: vec![depth; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadLength { width, height, len: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(ImageError::BadDepth { index, value });
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: f64) {
        self.data[y * self.width + x] = d;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// Linear RGB in `[0, 1]` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::BadLength { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f64; 3]) {
        self.data[y * self.width + x] = c;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub rgb: RgbImage,
    pub depth: DepthImage,
}

impl RgbdImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { rgb: RgbImage::new(width, height), depth: DepthImage::new(width, height) }
    }

    pub fn from_parts(rgb: RgbImage, depth: DepthImage) -> Result<Self, ImageError> {
        if (rgb.width, rgb.height) != (depth.width, depth.height) {
            return Err(ImageError::DimensionMismatch {
                rgb: (rgb.width, rgb.height),
                depth: (depth.width, depth.height),
            });
        }
        Ok(Self { rgb, depth })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.depth.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.depth.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_validation() {
        assert!(DepthImage::from_data(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            DepthImage::from_data(1, 2, vec![1.0, -0.5]),
            Err(ImageError::BadDepth { index: 1, .. })
        ));
        let d = DepthImage::from_data(2, 1, vec![0.0, 1.5]).unwrap();
        assert_eq!(d.valid_count(), 1);
        assert!(!d.is_valid(0, 0));
    }

    #[test]
    fn rgbd_dimensions_must_agree() {
        let err = RgbdImage::from_parts(RgbImage::new(3, 2), DepthImage::new(2, 3)).unwrap_err();
        assert!(matches!(err, ImageError::DimensionMismatch { .. }));
    }
}
