//! Boxes, IoU and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates with a confidence score.
/// Invariants: `x1 < x2`, `y1 < y2`, `score` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Input(format!(
                "degenerate box ({x1},{y1})-({x2},{y2})"
            )));
        }
        if !(0.0..=1.0).contains(&score) || !score.is_finite() {
            return Err(Error::Input(format!("box score {score} outside [0,1]")));
        }
        Ok(Self { x1, y1, x2, y2, score })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// Clip to `[0, w] x [0, h]`; `None` when nothing is left.
    pub fn clipped(&self, w: f64, h: f64) -> Option<BoundingBox> {
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        let x2 = self.x2.clamp(0.0, w);
        let y2 = self.y2.clamp(0.0, h);
        (x1 < x2 && y1 < y2).then_some(BoundingBox { x1, y1, x2, y2, score: self.score })
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-frame detections; `boxes.len()` is the object count for the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    #[serde(rename = "t")]
    pub frame_index: usize,
    pub boxes: Vec<BoundingBox>,
}

impl Detections {
    pub fn count(&self) -> usize {
        self.boxes.len()
    }
}

/// Greedy NMS: keep the highest-scoring box, suppress anything overlapping it
/// by more than `iou_thr`, repeat. Output stays sorted by descending score;
/// ties break on input order.
pub fn nms(boxes: &[BoundingBox], iou_thr: f64) -> Vec<BoundingBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.partial_cmp(&boxes[a].score).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<BoundingBox> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(boxes[i]);
        for &j in &order {
            if !suppressed[j] && j != i && iou(&boxes[i], &boxes[j]) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, s: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2, s).unwrap()
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(5.0, 5.0, 6.0, 6.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_offset_unit_squares() {
        // unit squares offset by 0.5 in x: inter 0.5, union 1.5 -> 1/3
        let a = bx(0.0, 0.0, 1.0, 1.0, 1.0);
        let b = bx(0.5, 0.0, 1.5, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_suppresses_duplicate_keeps_disjoint() {
        let a = bx(0.0, 0.0, 2.0, 2.0, 0.9);
        let b = bx(0.0, 0.0, 2.0, 2.0, 0.8);
        let kept = nms(&[b, a], 0.45);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let c = bx(10.0, 10.0, 12.0, 12.0, 0.5);
        let kept = nms(&[a, c], 0.45);
        assert_eq!(kept.len(), 2);
        assert!(kept[0].score >= kept[1].score);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0, 0.5).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0, 1.5).is_err());
    }
}
