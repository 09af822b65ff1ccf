//! Axis-aligned boxes in image pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-size box `(c_x, c_y, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !(w > 0.0 && h > 0.0) || ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    /// From corners `[x1, y1, x2, y2]`.
    pub fn from_corners(c: [f64; 4]) -> Result<Self> {
        Self::new(
            (c[0] + c[2]) / 2.0,
            (c[1] + c[3]) / 2.0,
            c[2] - c[0],
            c[3] - c[1],
        )
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with `[0, W] × [0, H]`, or `None` when empty.
    pub fn clip(&self, image_w: f64, image_h: f64) -> Option<Self> {
        let [x1, y1, x2, y2] = self.corners();
        let c = [x1.max(0.0), y1.max(0.0), x2.min(image_w), y2.min(image_h)];
        (c[2] > c[0] && c[3] > c[1]).then(|| Self::from_corners(c).expect("nonempty"))
    }

    /// Horizontal mirror on an image of width `image_w`.
    pub fn flip_horizontal(&self, image_w: f64) -> Self {
        Self {
            cx: image_w - self.cx,
            ..*self
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }
}

/// Intersection over union; symmetric and within `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(&a.corners(), &b.corners())
}

pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Scales a box about its center by `lambda`, then clips it to the image.
/// The clipped box keeps at least one pixel of extent on each axis.
pub fn scale_box(b: &BBox, lambda: f64, image_w: usize, image_h: usize) -> Result<BBox> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidBox(format!("scale factor {lambda} must be positive")));
    }
    let (iw, ih) = (image_w as f64, image_h as f64);
    if b.clip(iw, ih).is_none() {
        return Err(Error::InvalidBox(format!("{b:?} lies outside the {image_w}×{image_h} image")));
    }
    let scaled = BBox {
        cx: b.cx,
        cy: b.cy,
        w: b.w * lambda,
        h: b.h * lambda,
    };
    let [mut x1, mut y1, mut x2, mut y2] = scaled.corners();
    x1 = x1.max(0.0);
    y1 = y1.max(0.0);
    x2 = x2.min(iw);
    y2 = y2.min(ih);
    if x2 - x1 < 1.0 {
        let c = ((x1 + x2) / 2.0).clamp(0.5, iw - 0.5);
        x1 = c - 0.5;
        x2 = c + 0.5;
    }
    if y2 - y1 < 1.0 {
        let c = ((y1 + y2) / 2.0).clamp(0.5, ih - 0.5);
        y1 = c - 0.5;
        y2 = c + 0.5;
    }
    if [x1, y1, x2, y2] == scaled.corners() {
        return Ok(scaled);
    }
    BBox::from_corners([x1, y1, x2, y2])
}

/// Regression target `(t_x, t_y, t_w, t_h)` taking `proposal` onto `gt`.
pub fn encode_target(proposal: &BBox, gt: &BBox) -> [f64; 4] {
    [
        (gt.cx - proposal.cx) / proposal.w,
        (gt.cy - proposal.cy) / proposal.h,
        (gt.w / proposal.w).ln(),
        (gt.h / proposal.h).ln(),
    ]
}

/// Inverse of [`encode_target`].
pub fn apply_deltas(b: &BBox, t: &[f64; 4]) -> BBox {
    BBox {
        cx: b.cx + t[0] * b.w,
        cy: b.cy + t[1] * b.h,
        w: b.w * t[2].exp(),
        h: b.h * t[3].exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corner(c: [f64; 4]) -> BBox {
        BBox::from_corners(c).unwrap()
    }

    #[test]
    fn iou_hand_cases() {
        let a = corner([0.0, 0.0, 10.0, 10.0]);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corner([20.0, 20.0, 30.0, 30.0])), 0.0);
        let b = corner([5.0, 0.0, 15.0, 10.0]);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn scale_box_cases() {
        let b = BBox::new(50.0, 50.0, 20.0, 10.0).unwrap();
        let s = scale_box(&b, 1.2, 100, 100).unwrap();
        assert!((s.w - 24.0).abs() < 1e-12 && (s.h - 12.0).abs() < 1e-12);
        assert_eq!((s.cx, s.cy), (50.0, 50.0));
        assert_eq!(scale_box(&b, 1.0, 100, 100).unwrap(), b);

        // clip oracle: corners of (5,5,36,36) are [-13,-13,23,23]
        let b = BBox::new(5.0, 5.0, 20.0, 20.0).unwrap();
        let s = scale_box(&b, 1.8, 100, 100).unwrap();
        let want = [0.0, 0.0, 23.0, 23.0];
        for (g, w) in s.corners().iter().zip(want) {
            assert!((g - w).abs() < 1e-9);
        }
        assert!(s.area() < 1.8 * 1.8 * b.area());

        let outside = BBox::new(-50.0, -50.0, 10.0, 10.0).unwrap();
        assert!(scale_box(&outside, 1.0, 100, 100).is_err());
        assert!(scale_box(&b, 0.0, 100, 100).is_err());
    }

    #[test]
    fn tiny_boxes_keep_one_pixel() {
        let b = BBox::new(99.9, 0.1, 0.2, 0.2).unwrap();
        let s = scale_box(&b, 0.8, 100, 100).unwrap();
        assert!(s.w >= 1.0 - 1e-12 && s.h >= 1.0 - 1e-12);
        let [x1, y1, x2, y2] = s.corners();
        assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 100.0 && y2 <= 100.0);
    }

    #[test]
    fn encode_cases() {
        let p = BBox::new(10.0, 20.0, 8.0, 4.0).unwrap();
        assert_eq!(encode_target(&p, &p), [0.0; 4]);
        let g = BBox::new(10.0, 20.0, 16.0, 4.0).unwrap();
        assert!((encode_target(&p, &g)[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(apply_deltas(&p, &[0.0; 4]), p);
        let d = apply_deltas(&p, &[0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.w - 16.0).abs() < 1e-12);
    }

    #[test]
    fn flip_mirror_arithmetic() {
        let b = corner([0.0, 5.0, 10.0, 15.0]);
        let f = b.flip_horizontal(100.0);
        assert_eq!(f.corners(), [90.0, 5.0, 100.0, 15.0]);
        let centered = BBox::new(50.0, 30.0, 20.0, 10.0).unwrap();
        assert_eq!(centered.flip_horizontal(100.0), centered);
    }
}
