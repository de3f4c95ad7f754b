//! Box representations, frame conversions, IoU / GIoU and L1 distance.
//!
//! Loss-side computations run in the normalized frame, metrics in pixels.
//! Zero-area boxes give IoU 0 instead of NaN so soft targets stay finite.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinate frame a box is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    #[default]
    Pixel,
    Normalized,
}

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: {0:?} vs {1:?}")]
    FrameMismatch(Frame, Frame),
    #[error("invalid box {0:?}: coordinates must be finite with x2 >= x1 and y2 >= y1")]
    InvalidBox([f64; 4]),
    #[error("invalid image size {0}x{1}")]
    InvalidImageSize(u32, u32),
}

/// Corner-form box. On disk it is always a pixel-frame `[x1, y1, x2, y2]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame: Frame,
}

impl From<[f64; 4]> for BoxXYXY {
    fn from(v: [f64; 4]) -> Self {
        BoxXYXY::pixel(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, frame: Frame) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            frame,
        }
    }

    pub fn pixel(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2, y2, Frame::Pixel)
    }

    pub fn normalized(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new(x1, y1, x2, y2, Frame::Normalized)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.coords().iter().all(|v| v.is_finite()) && self.x2 >= self.x1 && self.y2 >= self.y1;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox(self.coords()))
        }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// True when the box lies inside `[0, w] x [0, h]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn to_cxcywh(&self) -> BoxCxCyWH {
        BoxCxCyWH {
            cx: 0.5 * (self.x1 + self.x2),
            cy: 0.5 * (self.y1 + self.y2),
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

/// Center-form box in the normalized frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoxCxCyWH {
    fn from(v: [f64; 4]) -> Self {
        BoxCxCyWH {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BoxCxCyWH> for [f64; 4] {
    fn from(b: BoxCxCyWH) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl BoxCxCyWH {
    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY::normalized(
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }
}

fn check_size(image_size: (u32, u32)) -> Result<(f64, f64), GeometryError> {
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(GeometryError::InvalidImageSize(image_size.0, image_size.1));
    }
    Ok((f64::from(image_size.0), f64::from(image_size.1)))
}

/// Pixel corners to normalized corners.
pub fn to_normalized(b: &BoxXYXY, image_size: (u32, u32)) -> Result<BoxXYXY, GeometryError> {
    if b.frame != Frame::Pixel {
        return Err(GeometryError::FrameMismatch(b.frame, Frame::Pixel));
    }
    let (w, h) = check_size(image_size)?;
    Ok(BoxXYXY::normalized(b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h))
}

/// Normalized corners back to pixels.
pub fn to_pixel(b: &BoxXYXY, image_size: (u32, u32)) -> Result<BoxXYXY, GeometryError> {
    if b.frame != Frame::Normalized {
        return Err(GeometryError::FrameMismatch(b.frame, Frame::Normalized));
    }
    let (w, h) = check_size(image_size)?;
    Ok(BoxXYXY::pixel(b.x1 * w, b.y1 * h, b.x2 * w, b.y2 * h))
}

fn intersection_union(a: &BoxXYXY, b: &BoxXYXY) -> (f64, f64) {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    (inter, a.area() + b.area() - inter)
}

/// Intersection over union in `[0, 1]`.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64, GeometryError> {
    if a.frame != b.frame {
        return Err(GeometryError::FrameMismatch(a.frame, b.frame));
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let (inter, union) = intersection_union(a, b);
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64, GeometryError> {
    if a.frame != b.frame {
        return Err(GeometryError::FrameMismatch(a.frame, b.frame));
    }
    Ok(giou_unchecked(a, b))
}

pub(crate) fn giou_unchecked(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let (inter, union) = intersection_union(a, b);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosure = ew.max(0.0) * eh.max(0.0);
    if enclosure <= 0.0 {
        return iou;
    }
    (iou - (enclosure - union) / enclosure).clamp(-1.0, 1.0)
}

/// Sum of absolute coordinate differences.
pub fn l1(a: &BoxCxCyWH, b: &BoxCxCyWH) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit cells covered by an integer-aligned box.
    fn raster(b: [i32; 4]) -> std::collections::HashSet<(i32, i32)> {
        let mut s = std::collections::HashSet::new();
        for x in b[0]..b[2] {
            for y in b[1]..b[3] {
                s.insert((x, y));
            }
        }
        s
    }

    fn raster_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
        let ra = raster(a);
        let rb = raster(b);
        let inter = ra.intersection(&rb).count();
        let union = ra.union(&rb).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn px(v: [i32; 4]) -> BoxXYXY {
        BoxXYXY::pixel(v[0].into(), v[1].into(), v[2].into(), v[3].into())
    }

    #[test]
    fn iou_basic_cases() {
        let a = px([0, 0, 2, 2]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &px([5, 5, 6, 6])).unwrap(), 0.0);
        let b = px([1, 1, 3, 3]);
        let expected = raster_iou([0, 0, 2, 2], [1, 1, 3, 3]);
        assert!((expected - 1.0 / 7.0).abs() < 1e-15);
        assert!((iou(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_and_frames() {
        let d = BoxXYXY::pixel(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&d, &d).unwrap(), 0.0);
        let n = BoxXYXY::normalized(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(iou(&d, &n), Err(GeometryError::FrameMismatch(..))));
    }

    #[test]
    fn giou_cases() {
        let a = px([0, 0, 1, 1]);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        // IoU 0, enclosure 3, union 2.
        let g = giou(&a, &px([2, 0, 3, 1])).unwrap();
        assert!((g - (0.0 - (3.0 - 2.0) / 3.0)).abs() < 1e-12);
        // Nested box of half area: enclosure equals union.
        let outer = px([0, 0, 2, 2]);
        let inner = px([0, 0, 2, 1]);
        assert!((giou(&outer, &inner).unwrap() - iou(&outer, &inner).unwrap()).abs() < 1e-15);
        assert!((iou(&outer, &inner).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn conversions() {
        let b = BoxXYXY::pixel(0.0, 0.0, 640.0, 480.0);
        let n = to_normalized(&b, (640, 480)).unwrap();
        assert_eq!(n.coords(), [0.0, 0.0, 1.0, 1.0]);
        let d = BoxXYXY::pixel(10.0, 20.0, 10.0, 50.0);
        let nd = to_normalized(&d, (100, 100)).unwrap();
        assert_eq!(nd.width(), 0.0);
        let back = to_pixel(&nd, (100, 100)).unwrap();
        for (x, y) in back.coords().iter().zip(d.coords()) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(to_normalized(&b, (0, 10)).is_err());
        assert!(to_pixel(&b, (10, 10)).is_err());
    }

    #[test]
    fn l1_cases() {
        let a = BoxCxCyWH::from([0.5, 0.5, 0.2, 0.2]);
        assert_eq!(l1(&a, &a), 0.0);
        let b = BoxCxCyWH::from([0.5, 0.5, 0.3, 0.2]);
        assert!((l1(&a, &b) - 0.1).abs() < 1e-12);
    }

    fn arb_box() -> impl Strategy<Value = BoxXYXY> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| BoxXYXY::pixel(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_giou_ranges_and_symmetry(a in arb_box(), b in arb_box()) {
            let i = iou(&a, &b).unwrap();
            let g = giou(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(g <= i + 1e-12);
            prop_assert_eq!(i, iou(&b, &a).unwrap());
        }

        #[test]
        fn l1_matches_componentwise_sum(a in prop::array::uniform4(0.0..1.0f64), b in prop::array::uniform4(0.0..1.0f64)) {
            let mut oracle = 0.0;
            for k in 0..4 {
                oracle += (a[k] - b[k]).abs();
            }
            prop_assert!((l1(&BoxCxCyWH::from(a), &BoxCxCyWH::from(b)) - oracle).abs() < 1e-12);
        }

        #[test]
        fn normalize_round_trip(b in arb_box()) {
            let n = to_normalized(&b, (160, 90)).unwrap();
            let p = to_pixel(&n, (160, 90)).unwrap();
            for (x, y) in p.coords().iter().zip(b.coords()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
