//! Deterministic software z-buffer rasterizer and object-centered cropping.

use crate::camera::{CameraError, CameraIntrinsics};
use crate::image::{DepthImage, RgbImage, RgbdImage};
use crate::mesh::TriangleMesh;
use crate::{Pose, Vec3};

/// Vertices closer than this to the camera plane cull their triangle.
pub const NEAR_PLANE: f64 = 1e-3;

/// Side of the crop window relative to the projected object diameter.
pub const CROP_PADDING: f64 = 1.4;

#[derive(Clone, Copy)]
struct ScreenVertex {
    u: f64,
    v: f64,
    inv_z: f64,
    color: [f64; 3],
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Top-left fill rule for the positive orientation of [`edge`] in a y-down image.
#[inline]
fn is_top_left(a: (f64, f64), b: (f64, f64)) -> bool {
    (a.1 == b.1 && b.0 > a.0) || b.1 < a.1
}

/// Renders `mesh` posed by `object_to_camera`.
///
/// Covered pixels get perspective-correct depth and vertex colors, shaded by a
/// two-sided headlight Lambert term. Uncovered pixels are black with depth 0.
/// Triangles with any vertex in front of [`NEAR_PLANE`] are skipped.
pub fn render_rgbd(mesh: &TriangleMesh, object_to_camera: &Pose, k: &CameraIntrinsics) -> RgbdImage {
    let (w, h) = (k.width, k.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut rgb = RgbImage::new(w, h);
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|&v| object_to_camera.transform_point(v)).collect();

    for tri in &mesh.triangles {
        let p = [cam[tri[0]], cam[tri[1]], cam[tri[2]]];
        if p.iter().any(|q| q.z < NEAR_PLANE) {
            continue;
        }
        let Some(normal) = (p[1] - p[0]).cross(p[2] - p[0]).normalized() else {
            continue;
        };
        let mut sv = [0usize, 1, 2].map(|i| ScreenVertex {
            u: k.fx * p[i].x / p[i].z + k.cx,
            v: k.fy * p[i].y / p[i].z + k.cy,
            inv_z: 1.0 / p[i].z,
            color: mesh.color(tri[i]),
        });
        let pos = |s: &ScreenVertex| (s.u, s.v);
        let mut area = edge(pos(&sv[0]), pos(&sv[1]), pos(&sv[2]));
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            sv.swap(1, 2);
            area = -area;
        }
        let (a, b, c) = (pos(&sv[0]), pos(&sv[1]), pos(&sv[2]));
        let min_u = a.0.min(b.0).min(c.0);
        let max_u = a.0.max(b.0).max(c.0);
        let min_v = a.1.min(b.1).min(c.1);
        let max_v = a.1.max(b.1).max(c.1);
        if max_u < 0.0 || max_v < 0.0 || min_u > (w - 1) as f64 || min_v > (h - 1) as f64 {
            continue;
        }
        let x0 = min_u.ceil().max(0.0) as usize;
        let x1 = (max_u.floor() as usize).min(w - 1);
        let y0 = min_v.ceil().max(0.0) as usize;
        let y1 = (max_v.floor() as usize).min(h - 1);
        let edges = [(b, c), (c, a), (a, b)];
        let top_left = edges.map(|(s, e)| is_top_left(s, e));

        for y in y0..=y1 {
            for x in x0..=x1 {
                let px = (x as f64, y as f64);
                let mut lambda = [0.0; 3];
                let mut inside = true;
                for i in 0..3 {
                    let e = edge(edges[i].0, edges[i].1, px);
                    if e < 0.0 || (e == 0.0 && !top_left[i]) {
                        inside = false;
                        break;
                    }
                    lambda[i] = e / area;
                }
                if !inside {
                    continue;
                }
                let inv_z: f64 = (0..3).map(|i| lambda[i] * sv[i].inv_z).sum();
                let depth = 1.0 / inv_z;
                let idx = y * w + x;
                if !(depth < zbuf[idx]) {
                    continue;
                }
                zbuf[idx] = depth;
                let mut color = [0.0; 3];
                for (ch, out) in color.iter_mut().enumerate() {
                    let num: f64 = (0..3).map(|i| lambda[i] * sv[i].inv_z * sv[i].color[ch]).sum();
                    *out = num * depth;
                }
                let point = k.backproject_pixel(px.0, px.1, depth);
                let view = (-point).normalized().unwrap_or(Vec3::new(0.0, 0.0, -1.0));
                let lambert = normal.dot(view).abs();
                rgb.data[idx] = color.map(|c| (c * lambert).clamp(0.0, 1.0));
            }
        }
    }

    let depth = DepthImage {
        width: w,
        height: h,
        data: zbuf.into_iter().map(|z| if z.is_finite() { z } else { 0.0 }).collect(),
    };
    RgbdImage { rgb, depth }
}

/// Square source-image window around a projected object center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    /// Window center in source pixel coordinates.
    pub center_u: f64,
    pub center_v: f64,
    /// Window side in source pixels.
    pub side: f64,
}

impl CropWindow {
    /// Window of side `CROP_PADDING * fx * diameter / z` around the projection
    /// of `object_to_camera.translation`.
    pub fn around_object(object_to_camera: &Pose, diameter: f64, k: &CameraIntrinsics) -> Result<Self, CameraError> {
        let (u, v, z) = k.project(object_to_camera.translation)?;
        Ok(Self { center_u: u, center_v: v, side: CROP_PADDING * k.fx * diameter / z })
    }

    /// Source coordinate of the center of output pixel `i` along one axis.
    #[inline]
    fn source_coord(center: f64, side: f64, out_size: usize, i: usize) -> f64 {
        center - side / 2.0 + (i as f64 + 0.5) * side / out_size as f64
    }

    /// Intrinsics of the virtual camera that sees the resampled crop.
    pub fn intrinsics(&self, k: &CameraIntrinsics, out_size: usize) -> CameraIntrinsics {
        let scale = self.side / out_size as f64;
        let u0 = Self::source_coord(self.center_u, self.side, out_size, 0);
        let v0 = Self::source_coord(self.center_v, self.side, out_size, 0);
        CameraIntrinsics {
            fx: k.fx / scale,
            fy: k.fy / scale,
            cx: (k.cx - u0) / scale,
            cy: (k.cy - v0) / scale,
            width: out_size,
            height: out_size,
        }
    }

    /// Source pixel whose depth lands in output pixel `(i, j)`, which may lie
    /// outside the source image.
    pub fn depth_source_pixel(&self, i: usize, j: usize, out_size: usize) -> (f64, f64) {
        let sx = Self::source_coord(self.center_u, self.side, out_size, i);
        let sy = Self::source_coord(self.center_v, self.side, out_size, j);
        ((sx + 0.5).floor(), (sy + 0.5).floor())
    }

    /// Resamples `img` inside the window to `out_size x out_size`. RGB is
    /// bilinear, depth is nearest-neighbor. Samples outside the source image
    /// are black and invalid.
    pub fn resample(&self, img: &RgbdImage, out_size: usize) -> RgbdImage {
        let (w, h) = (img.width(), img.height());
        let mut out = RgbdImage::new(out_size, out_size);
        let sample_rgb = |x: isize, y: isize| -> [f64; 3] {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                [0.0; 3]
            } else {
                img.rgb.get(x as usize, y as usize)
            }
        };
        for j in 0..out_size {
            let sy = Self::source_coord(self.center_v, self.side, out_size, j);
            for i in 0..out_size {
                let sx = Self::source_coord(self.center_u, self.side, out_size, i);

                let (nx, ny) = self.depth_source_pixel(i, j, out_size);
                if nx >= 0.0 && ny >= 0.0 && nx < w as f64 && ny < h as f64 {
                    out.depth.set(i, j, img.depth.get(nx as usize, ny as usize));
                }

                let x0 = sx.floor();
                let y0 = sy.floor();
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let mut c = [0.0; 3];
                let taps = [
                    (x0, y0, (1.0 - fx) * (1.0 - fy)),
                    (x0 + 1, y0, fx * (1.0 - fy)),
                    (x0, y0 + 1, (1.0 - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ];
                for (x, y, wgt) in taps {
                    if wgt == 0.0 {
                        continue;
                    }
                    let s = sample_rgb(x, y);
                    for ch in 0..3 {
                        c[ch] += wgt * s[ch];
                    }
                }
                out.rgb.set(i, j, c);
            }
        }
        out
    }
}

/// Object-centered crop resampled to `out_size x out_size`.
pub fn crop_and_zoom(
    img: &RgbdImage,
    object_to_camera: &Pose,
    diameter: f64,
    k: &CameraIntrinsics,
    out_size: usize,
) -> Result<RgbdImage, CameraError> {
    let window = CropWindow::around_object(object_to_camera, diameter, k)?;
    Ok(window.resample(img, out_size))
}
