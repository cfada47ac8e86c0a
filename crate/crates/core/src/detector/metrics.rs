//! Detection evaluation: recall at the operating threshold and single-class
//! average precision at IoU 0.5 with all-point (precision-envelope)
//! interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::bbox::{iou, Detections};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub recall: f64,
    pub map50: f64,
    /// Set when the ground truth was empty; recall is then reported as 1.0.
    pub zero_gt: bool,
}

/// Match predictions to ground truth frame by frame (greedy by score,
/// one-to-one at IoU >= 0.5) and integrate the precision envelope.
pub fn eval_detection(preds: &[Detections], gts: &[Detections]) -> Result<DetectionMetrics> {
    let mut gt_by_frame: std::collections::BTreeMap<usize, &Detections> = Default::default();
    for g in gts {
        if gt_by_frame.insert(g.frame_index, g).is_some() {
            return Err(Error::Input(format!(
                "duplicate ground-truth frame index {}",
                g.frame_index
            )));
        }
    }
    let total_gt: usize = gts.iter().map(|g| g.count()).sum();
    let total_preds: usize = preds.iter().map(|p| p.count()).sum();

    if total_gt == 0 {
        return Ok(DetectionMetrics {
            recall: 1.0,
            map50: if total_preds == 0 { 1.0 } else { 0.0 },
            zero_gt: true,
        });
    }

    // all predictions, sorted by descending score (ties: frame, then order)
    let mut flat: Vec<(f64, usize, usize)> = Vec::with_capacity(total_preds);
    for (pi, p) in preds.iter().enumerate() {
        for (bi, b) in p.boxes.iter().enumerate() {
            flat.push((b.score, pi, bi));
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut matched: std::collections::BTreeMap<usize, Vec<bool>> = gt_by_frame
        .iter()
        .map(|(&f, g)| (f, vec![false; g.count()]))
        .collect();

    let mut tp_flags = Vec::with_capacity(flat.len());
    for (_, pi, bi) in &flat {
        let pred = &preds[*pi];
        let b = &pred.boxes[*bi];
        let mut hit = false;
        if let Some(gt) = gt_by_frame.get(&pred.frame_index) {
            let used = matched.get_mut(&pred.frame_index).unwrap();
            let mut best = MATCH_IOU;
            let mut best_j = None;
            for (j, g) in gt.boxes.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(b, g);
                if v >= best {
                    best = v;
                    best_j = Some(j);
                }
            }
            if let Some(j) = best_j {
                used[j] = true;
                hit = true;
            }
        }
        tp_flags.push(hit);
    }

    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp_flags.len()); // (recall, precision)
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (i + 1) as f64));
    }

    // precision envelope, integrated over recall
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let r = points[i].0;
        if r > prev_recall {
            let env = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }

    Ok(DetectionMetrics { recall: tp as f64 / total_gt as f64, map50: ap, zero_gt: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::bbox::BoundingBox;

    fn det(t: usize, boxes: &[(f64, f64, f64, f64, f64)]) -> Detections {
        Detections {
            frame_index: t,
            boxes: boxes
                .iter()
                .map(|&(x1, y1, x2, y2, s)| BoundingBox::new(x1, y1, x2, y2, s).unwrap())
                .collect(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![det(0, &[(0.0, 0.0, 10.0, 10.0, 1.0)]), det(1, &[(5.0, 5.0, 9.0, 9.0, 1.0)])];
        let m = eval_detection(&gt, &gt).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.map50, 1.0);
        assert!(!m.zero_gt);
    }

    #[test]
    fn no_predictions() {
        let gt = vec![det(0, &[(0.0, 0.0, 10.0, 10.0, 1.0)])];
        let m = eval_detection(&[det(0, &[])], &gt).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.map50, 0.0);
    }

    #[test]
    fn hand_computed_ap_order_dependence() {
        // 1 GT box; TP at score 0.9 then FP at 0.8:
        // PR points (1.0, 1.0), (1.0, 0.5) -> AP 1.0
        let gt = vec![det(0, &[(0.0, 0.0, 10.0, 10.0, 1.0)])];
        let preds = vec![det(
            0,
            &[(0.0, 0.0, 10.0, 10.0, 0.9), (20.0, 20.0, 30.0, 30.0, 0.8)],
        )];
        let m = eval_detection(&preds, &gt).unwrap();
        assert!((m.map50 - 1.0).abs() < 1e-12);

        // swapped: FP at 0.9, TP at 0.8 -> points (0,0), (1.0, 0.5) -> AP 0.5
        let preds = vec![det(
            0,
            &[(20.0, 20.0, 30.0, 30.0, 0.9), (0.0, 0.0, 10.0, 10.0, 0.8)],
        )];
        let m = eval_detection(&preds, &gt).unwrap();
        assert!((m.map50 - 0.5).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
    }

    #[test]
    fn zero_gt_flag() {
        let m = eval_detection(&[det(0, &[(0.0, 0.0, 1.0, 1.0, 0.9)])], &[det(0, &[])]).unwrap();
        assert!(m.zero_gt);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.map50, 0.0);
    }

    #[test]
    fn duplicate_tp_never_raises_map() {
        let gt = vec![det(0, &[(0.0, 0.0, 10.0, 10.0, 1.0)])];
        let single = vec![det(0, &[(0.0, 0.0, 10.0, 10.0, 0.9)])];
        let dup = vec![det(
            0,
            &[(0.0, 0.0, 10.0, 10.0, 0.9), (0.1, 0.0, 10.0, 10.0, 0.85)],
        )];
        let m1 = eval_detection(&single, &gt).unwrap();
        let m2 = eval_detection(&dup, &gt).unwrap();
        assert!(m2.map50 <= m1.map50 + 1e-12);
    }
}
