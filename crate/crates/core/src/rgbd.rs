//! Registered RGB-D input: intrinsics, depth and color frames, and
//! deprojection into a camera-frame point cloud.
//!
//! Camera axes follow the usual pinhole convention: +z forward, +x right,
//! +y down. Depth frames hold raw sensor units; a raw value of zero means
//! "no return".

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Depths beyond this many meters are treated as invalid unless overridden.
pub const DEFAULT_MAX_RANGE: f64 = 3.0;

#[derive(Debug, Error)]
pub enum RgbdError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
}

fn io_err(path: &Path, source: std::io::Error) -> RgbdError {
    RgbdError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pinhole intrinsics in factored form plus the depth unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), RgbdError> {
        let bad = |msg: &str| Err(RgbdError::InvalidIntrinsics(msg.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be non-zero");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        if !(self.depth_scale > 0.0 && self.depth_scale.is_finite()) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// The 3x3 intrinsic matrix `K`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self, RgbdError> {
        let intr: Self = serde_json::from_str(s)?;
        intr.validate()?;
        Ok(intr)
    }

    pub fn load(path: &Path) -> Result<Self, RgbdError> {
        let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json_str(&s)
    }

    fn check_dims(&self, width: u32, height: u32) -> Result<(), RgbdError> {
        if width != self.width || height != self.height {
            return Err(RgbdError::DimensionMismatch {
                expected_w: self.width,
                expected_h: self.height,
                found_w: width,
                found_h: height,
            });
        }
        Ok(())
    }
}

/// Row-major raw depth image. Zero marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self, RgbdError> {
        if data.len() != width as usize * height as usize {
            return Err(RgbdError::InvalidFrame(format!(
                "depth data has {} values for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Quantizes metric depths; non-finite, non-positive or unrepresentable
    /// values become invalid.
    pub fn from_meters(width: u32, height: u32, meters: &[f64], depth_scale: f64) -> Result<Self, RgbdError> {
        let data = meters
            .iter()
            .map(|&z| {
                if !(z.is_finite() && z > 0.0) {
                    return 0;
                }
                let raw = (z / depth_scale).round();
                if raw >= 1.0 && raw <= u16::MAX as f64 {
                    raw as u16
                } else {
                    0
                }
            })
            .collect();
        Self::new(width, height, data)
    }

    pub fn raw(&self, u: u32, v: u32) -> u16 {
        self.data[(v * self.width + u) as usize]
    }

    /// Depth in meters, or `None` for an invalid pixel.
    pub fn meters(&self, u: u32, v: u32, depth_scale: f64) -> Option<f64> {
        match self.raw(u, v) {
            0 => None,
            raw => Some(raw as f64 * depth_scale),
        }
    }

    /// Marks every pixel deeper than `max_range` meters as invalid.
    pub fn invalidate_beyond(&mut self, max_range: f64, depth_scale: f64) {
        for raw in &mut self.data {
            if *raw as f64 * depth_scale > max_range {
                *raw = 0;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d != 0).count()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RgbdError> {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .ok_or_else(|| RgbdError::InvalidFrame("depth buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RgbdError> {
        fs::write(path, self.to_png_bytes()?).map_err(|e| io_err(path, e))
    }
}

/// Loads a 16-bit grayscale depth PNG, invalidating depths beyond
/// [`DEFAULT_MAX_RANGE`].
pub fn load_depth(path: &Path, intr: &CameraIntrinsics) -> Result<DepthFrame, RgbdError> {
    load_depth_with_range(path, intr, DEFAULT_MAX_RANGE)
}

pub fn load_depth_with_range(
    path: &Path,
    intr: &CameraIntrinsics,
    max_range: f64,
) -> Result<DepthFrame, RgbdError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
    let gray = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(RgbdError::UnsupportedFormat(format!(
                "depth must be 16-bit single channel, got {:?}",
                other.color()
            )))
        }
    };
    intr.check_dims(gray.width(), gray.height())?;
    let mut frame = DepthFrame::new(gray.width(), gray.height(), gray.into_raw())?;
    frame.invalidate_beyond(max_range, intr.depth_scale);
    Ok(frame)
}

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl ColorFrame {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RgbdError> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(RgbdError::InvalidFrame(format!(
                "color data has {} bytes for {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, u: u32, v: u32) -> [u8; 3] {
        let i = (v * self.width + u) as usize * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put_pixel(&mut self, u: u32, v: u32, rgb: [u8; 3]) {
        let i = (v * self.width + u) as usize * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, RgbdError> {
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width, self.height, self.data.clone())
                .ok_or_else(|| RgbdError::InvalidFrame("color buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RgbdError> {
        fs::write(path, self.to_png_bytes()?).map_err(|e| io_err(path, e))
    }
}

pub fn load_color(path: &Path) -> Result<ColorFrame, RgbdError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
    let rgb = match img {
        DynamicImage::ImageRgb8(buf) => buf,
        DynamicImage::ImageRgba8(buf) => DynamicImage::ImageRgba8(buf).to_rgb8(),
        other => {
            return Err(RgbdError::UnsupportedFormat(format!(
                "color must be 8-bit RGB, got {:?}",
                other.color()
            )))
        }
    };
    ColorFrame::new(rgb.width(), rgb.height(), rgb.into_raw())
}

/// Color and depth must share dimensions with the intrinsics.
pub fn check_registered(
    color: &ColorFrame,
    depth: &DepthFrame,
    intr: &CameraIntrinsics,
) -> Result<(), RgbdError> {
    intr.check_dims(depth.width, depth.height)?;
    intr.check_dims(color.width, color.height)
}

/// Points in the camera frame, optionally tagged with the pixel they came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub pixels: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    /// Builds an untagged cloud, rejecting non-finite points and z <= 0.
    pub fn from_points(points: Vec<Vec3>) -> Result<Self, RgbdError> {
        if let Some(p) = points
            .iter()
            .find(|p| !(p.iter().all(|c| c.is_finite()) && p.z > 0.0))
        {
            return Err(RgbdError::InvalidFrame(format!("bad point {:?}", p)));
        }
        Ok(Self {
            points,
            pixels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Inverse pinhole model over every valid pixel, in raster order.
pub fn deproject(depth: &DepthFrame, intr: &CameraIntrinsics) -> Result<PointCloud, RgbdError> {
    intr.check_dims(depth.width, depth.height)?;
    let n = depth.valid_count();
    let mut points = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    for v in 0..depth.height {
        for u in 0..depth.width {
            if let Some(z) = depth.meters(u, v, intr.depth_scale) {
                let x = (u as f64 - intr.cx) * z / intr.fx;
                let y = (v as f64 - intr.cy) * z / intr.fy;
                points.push(Vec3::new(x, y, z));
                pixels.push([u, v]);
            }
        }
    }
    Ok(PointCloud {
        points,
        pixels: Some(pixels),
    })
}

/// Axis-aligned box in the camera frame; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self, RgbdError> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn unbounded() -> Self {
        Self {
            min: [f64::NEG_INFINITY; 3],
            max: [f64::INFINITY; 3],
        }
    }

    pub fn validate(&self) -> Result<(), RgbdError> {
        if (0..3).all(|i| self.min[i] < self.max[i]) {
            Ok(())
        } else {
            Err(RgbdError::InvalidFrame(
                "workspace bounds need min < max on every axis".into(),
            ))
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

/// Keeps the points inside `bounds`, preserving order and pixel tags.
pub fn crop_workspace(cloud: &PointCloud, bounds: &Aabb) -> PointCloud {
    let keep: Vec<usize> = (0..cloud.points.len())
        .filter(|&i| bounds.contains(&cloud.points[i]))
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        pixels: cloud
            .pixels
            .as_ref()
            .map(|px| keep.iter().map(|&i| px[i]).collect()),
    }
}

/// Binary per-pixel mask, e.g. the image region of one named object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_ids(width: u32, height: u32, ids: &[u16], id: u16) -> Self {
        Self {
            width,
            height,
            data: ids.iter().map(|&x| x == id).collect(),
        }
    }

    /// Membership of a continuous pixel, rounded to the nearest integer pixel.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return false;
        }
        self.data[v as usize * self.width as usize + u as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 500.0,
            fy: 500.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
            depth_scale: 0.001,
        }
    }

    fn write_depth(dir: &Path, name: &str, w: u32, h: u32, data: Vec<u16>) -> std::path::PathBuf {
        let path = dir.join(name);
        DepthFrame::new(w, h, data).unwrap().save_png(&path).unwrap();
        path
    }

    #[test]
    fn intrinsics_validation() {
        assert!(intr(640, 480).validate().is_ok());
        let mut bad = intr(640, 480);
        bad.fx = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = intr(640, 480);
        bad.cx = 640.0;
        assert!(bad.validate().is_err());
        let mut bad = intr(640, 480);
        bad.depth_scale = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn intrinsic_matrix_layout() {
        let k = intr(640, 480).matrix();
        assert_eq!(k[(0, 0)], 500.0);
        assert_eq!(k[(0, 2)], 320.0);
        assert_eq!(k[(1, 2)], 240.0);
        assert_eq!(k[(2, 2)], 1.0);
        assert_eq!(k[(1, 0)], 0.0);
    }

    #[test]
    fn load_all_zero_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_depth(dir.path(), "zero.png", 4, 4, vec![0; 16]);
        let frame = load_depth(&path, &intr(4, 4)).unwrap();
        assert_eq!(frame.data.len(), 16);
        assert_eq!(frame.valid_count(), 0);
    }

    #[test]
    fn load_uniform_plane() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_depth(dir.path(), "plane_1m.png", 8, 6, vec![1000; 48]);
        let i = intr(8, 6);
        let frame = load_depth(&path, &i).unwrap();
        for v in 0..6 {
            for u in 0..8 {
                assert_eq!(frame.meters(u, v, i.depth_scale), Some(1.0));
            }
        }
    }

    #[test]
    fn out_of_range_pixel_is_invalidated() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = vec![1000; 16];
        data[5] = 65535;
        let path = write_depth(dir.path(), "spike.png", 4, 4, data);
        let frame = load_depth_with_range(&path, &intr(4, 4), 3.0).unwrap();
        assert_eq!(frame.raw(1, 1), 0);
        assert_eq!(frame.valid_count(), 15);
        // 3000 raw units is exactly at max range and stays valid
        let path = write_depth(dir.path(), "edge.png", 4, 4, vec![3000; 16]);
        assert_eq!(load_depth(&path, &intr(4, 4)).unwrap().valid_count(), 16);
    }

    #[test]
    fn depth_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_depth(dir.path(), "d.png", 4, 4, vec![1; 16]);
        assert!(matches!(
            load_depth(&path, &intr(8, 4)),
            Err(RgbdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn depth_rejects_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        ColorFrame::filled(4, 4, [1, 2, 3]).save_png(&path).unwrap();
        assert!(matches!(
            load_depth(&path, &intr(4, 4)),
            Err(RgbdError::UnsupportedFormat(_))
        ));
        assert!(matches!(
            load_depth(&dir.path().join("missing.png"), &intr(4, 4)),
            Err(RgbdError::Io { .. })
        ));
    }

    #[test]
    fn color_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut c = ColorFrame::filled(5, 3, [10, 20, 30]);
        c.put_pixel(4, 2, [255, 0, 7]);
        c.save_png(&path).unwrap();
        assert_eq!(load_color(&path).unwrap(), c);
    }

    #[test]
    fn deproject_optical_axis() {
        let i = intr(640, 480);
        let mut d = DepthFrame::new(640, 480, vec![0; 640 * 480]).unwrap();
        d.data[240 * 640 + 320] = 1000;
        let cloud = deproject(&d, &i).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(0.0, 0.0, 1.0)]);
        assert_eq!(cloud.pixels.unwrap(), vec![[320, 240]]);
    }

    #[test]
    fn deproject_off_axis() {
        let i = intr(640, 480);
        let mut d = DepthFrame::new(640, 480, vec![0; 640 * 480]).unwrap();
        d.data[240 * 640 + 420] = 2000;
        let cloud = deproject(&d, &i).unwrap();
        let p = cloud.points[0];
        assert!((p - Vec3::new(0.4, 0.0, 2.0)).norm() < 1e-12);
    }

    #[test]
    fn deproject_all_invalid() {
        let i = intr(16, 8);
        let d = DepthFrame::new(16, 8, vec![0; 128]).unwrap();
        assert!(deproject(&d, &i).unwrap().is_empty());
    }

    fn ten_points() -> PointCloud {
        let pts = vec![
            Vec3::new(0.5, 0.5, 0.5),
            Vec3::new(2.0, 0.5, 0.5),
            Vec3::new(0.1, 0.9, 0.2),
            Vec3::new(-0.1, 0.5, 0.5),
            Vec3::new(0.5, 1.5, 0.5),
            Vec3::new(0.99, 0.01, 0.99),
            Vec3::new(0.5, 0.5, 1.01),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(3.0, 3.0, 3.0),
            Vec3::new(0.5, -0.2, 0.5),
        ];
        let pixels = (0..10).map(|i| [i, 0]).collect();
        PointCloud {
            points: pts,
            pixels: Some(pixels),
        }
    }

    #[test]
    fn crop_matches_brute_force_membership() {
        let cloud = ten_points();
        let unit = Aabb::new([0.0; 3], [1.0; 3]).unwrap();
        let cropped = crop_workspace(&cloud, &unit);
        let expected: Vec<usize> = cloud
            .points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.iter().all(|&c| (0.0..=1.0).contains(&c)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(expected, vec![0, 2, 5, 7]);
        assert_eq!(cropped.len(), 4);
        let px = cropped.pixels.as_ref().unwrap();
        for (j, &i) in expected.iter().enumerate() {
            assert_eq!(cropped.points[j], cloud.points[i]);
            assert_eq!(px[j], [i as u32, 0]);
        }
    }

    #[test]
    fn crop_identity_and_empty() {
        let cloud = ten_points();
        assert_eq!(crop_workspace(&cloud, &Aabb::unbounded()), cloud);
        let far = Aabb::new([10.0; 3], [11.0; 3]).unwrap();
        assert!(crop_workspace(&cloud, &far).is_empty());
        assert!(Aabb::new([0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn mask_rounds_and_bounds() {
        let ids = vec![0, 1, 1, 0];
        let m = PixelMask::from_ids(2, 2, &ids, 1);
        assert!(m.contains(1.2, 0.4));
        assert!(!m.contains(0.4, 0.4));
        assert!(m.contains(0.0, 0.6));
        assert!(!m.contains(-3.0, 0.0));
        assert_eq!(m.count(), 2);
    }
}
