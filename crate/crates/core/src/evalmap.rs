//! IoU, per-class average precision and the mAP family.
//!
//! AP uses all-point interpolation of the monotone precision envelope for
//! every IoU threshold. Matching is greedy in descending score order; each
//! detection takes the best-IoU unmatched ground truth of its image.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::head::Detection;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// AP for one class over several images, given per-image detections and
/// ground truths.
pub fn average_precision_pooled(images: &[(&[Detection], &[BBox])], iou_threshold: f64) -> f64 {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(img, (dets, _))| (0..dets.len()).map(move |d| (img, d)))
        .collect();
    order.sort_by(|&(ia, da), &(ib, db)| {
        let (a, b) = (&images[ia].0[da], &images[ib].0[db]);
        b.score
            .total_cmp(&a.score)
            .then(ia.cmp(&ib))
            .then(a.cell.cmp(&b.cell))
            .then(da.cmp(&db))
    });

    let mut matched: Vec<Vec<bool>> = images
        .iter()
        .map(|(_, g)| alloc::vec![false; g.len()])
        .collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for (img, d) in order {
        let det = &images[img].0[d];
        let gts = images[img].1;
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[img][g] {
                continue;
            }
            let o = iou(&det.bbox, gt);
            if o >= iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        match best {
            Some((g, _)) => {
                matched[img][g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    // Monotone envelope from the right, then area under the staircase.
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[i];
            prev_recall = r;
        }
    }
    ap
}

/// AP for a single image and a single class.
pub fn average_precision(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> f64 {
    average_precision_pooled(&[(dets, gts)], iou_threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// AP at each of [`IOU_THRESHOLDS`] for every class that has ground truth.
    pub per_class_ap: BTreeMap<u32, [f64; 10]>,
    pub map50: f64,
    pub map75: f64,
    /// Mean over the ten thresholds 0.50..=0.95.
    pub map_coco: f64,
}

pub fn map_metrics(dets: &[Vec<Detection>], gts: &[Vec<BBox>], classes: u32) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::Shape {
            op: "map_metrics: images",
            left: (dets.len(), 1),
            right: (gts.len(), 1),
        });
    }
    let mut per_class_ap = BTreeMap::new();
    for class in 0..classes {
        let class_dets: Vec<Vec<Detection>> = dets
            .iter()
            .map(|d| d.iter().filter(|x| x.class_id == class).copied().collect())
            .collect();
        let class_gts: Vec<Vec<BBox>> = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class_id == class).copied().collect())
            .collect();
        if class_gts.iter().all(|g| g.is_empty()) {
            continue;
        }
        let images: Vec<(&[Detection], &[BBox])> = class_dets
            .iter()
            .zip(&class_gts)
            .map(|(d, g)| (d.as_slice(), g.as_slice()))
            .collect();
        let aps = IOU_THRESHOLDS.map(|t| average_precision_pooled(&images, t));
        per_class_ap.insert(class, aps);
    }
    if per_class_ap.is_empty() {
        return Err(Error::UndefinedMetric);
    }
    let k = per_class_ap.len() as f64;
    let mean_at = |idx: usize| per_class_ap.values().map(|a| a[idx]).sum::<f64>() / k;
    let map50 = mean_at(0);
    let map75 = mean_at(5);
    let map_coco = per_class_ap
        .values()
        .map(|a| a.iter().sum::<f64>() / 10.0)
        .sum::<f64>()
        / k;
    Ok(EvalResult {
        per_class_ap,
        map50,
        map75,
        map_coco,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use alloc::vec;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2, 0).unwrap()
    }

    fn det(b: BBox, score: f64, cell: usize) -> Detection {
        Detection {
            bbox: b,
            score,
            class_id: b.class_id,
            cell,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(2.0, 2.0, 3.0, 3.0)), 0.0);
        assert!((iou(&a, &bx(0.5, 0.0, 1.5, 1.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 30.0)];
        let dets: Vec<_> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| det(*g, 0.9, i))
            .collect();
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
        assert_eq!(average_precision(&[], &gts, 0.5), 0.0);
        let fps = [det(bx(50.0, 50.0, 60.0, 60.0), 0.8, 0)];
        assert_eq!(average_precision(&fps, &gts, 0.5), 0.0);
        assert_eq!(average_precision(&[], &[], 0.5), 0.0);
    }

    #[test]
    fn hand_staircase() {
        // 3 gts; ranked detections: TP, FP, TP, FP, TP.
        let gts = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 0.0, 30.0, 10.0),
            bx(40.0, 0.0, 50.0, 10.0),
        ];
        let miss = bx(0.0, 40.0, 10.0, 50.0);
        let dets = [
            det(gts[0], 0.9, 0),
            det(miss, 0.8, 1),
            det(gts[1], 0.7, 2),
            det(miss, 0.6, 3),
            det(gts[2], 0.5, 4),
        ];
        // Points: (1/3, 1), (1/3, 1/2), (2/3, 2/3), (2/3, 1/2), (1, 3/5).
        // Envelope at recall steps: 1, 2/3, 3/5.
        let expect = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
        assert!((average_precision(&dets, &gts, 0.5) - expect).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let gts = [bx(0.0, 0.0, 10.0, 10.0)];
        let dets = [det(gts[0], 0.9, 0), det(gts[0], 0.8, 1)];
        assert_eq!(average_precision(&dets, &gts, 0.5), 1.0);
        let dets = [det(gts[0], 0.8, 0), det(bx(30.0, 30.0, 40.0, 40.0), 0.9, 1)];
        assert!((average_precision(&dets, &gts, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn map_cases() {
        let g0 = BBox::new(0.0, 0.0, 10.0, 10.0, 0).unwrap();
        let g1 = BBox::new(20.0, 20.0, 30.0, 30.0, 1).unwrap();
        let gts = vec![vec![g0, g1]];
        let perfect = vec![vec![det(g0, 0.9, 0), det(g1, 0.9, 1)]];
        let r = map_metrics(&perfect, &gts, 2).unwrap();
        assert_eq!((r.map50, r.map75, r.map_coco), (1.0, 1.0, 1.0));
        let r = map_metrics(&[vec![]], &gts, 2).unwrap();
        assert_eq!((r.map50, r.map75, r.map_coco), (0.0, 0.0, 0.0));
        let half = vec![vec![det(g0, 0.9, 0)]];
        assert_eq!(map_metrics(&half, &gts, 2).unwrap().map50, 0.5);
        // class 2 has no gt and is excluded
        assert_eq!(map_metrics(&half, &gts, 3).unwrap().per_class_ap.len(), 2);
        assert_eq!(
            map_metrics(&[vec![]], &[vec![]], 3),
            Err(Error::UndefinedMetric)
        );
    }

    fn random_case(rng: &mut SplitMix64) -> (Vec<Detection>, Vec<BBox>) {
        let gts: Vec<BBox> = (0..4)
            .map(|i| {
                let x = 30.0 * i as f64 + rng.uniform(0.0, 5.0);
                bx(x, 0.0, x + 20.0, 20.0)
            })
            .collect();
        let dets = (0..8)
            .map(|c| {
                let g = gts[rng.below(4) as usize];
                let dx = rng.uniform(-8.0, 8.0);
                let dy = rng.uniform(-8.0, 8.0);
                det(
                    bx(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy),
                    rng.uniform(0.01, 1.0),
                    c,
                )
            })
            .collect();
        (dets, gts)
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_ranking(seed in any::<u64>(), k in 0.1f64..5.0) {
            let (dets, gts) = random_case(&mut SplitMix64::new(seed));
            let squashed: Vec<_> = dets
                .iter()
                .map(|d| Detection {
                    score: (k * d.score).exp() / 100.0,
                    ..*d
                })
                .collect();
            for t in IOU_THRESHOLDS {
                prop_assert_eq!(
                    average_precision(&dets, &gts, t),
                    average_precision(&squashed, &gts, t)
                );
            }
        }

        #[test]
        fn trailing_false_positives_never_help(seed in any::<u64>()) {
            let (mut dets, gts) = random_case(&mut SplitMix64::new(seed));
            let before = average_precision(&dets, &gts, 0.5);
            dets.push(det(bx(500.0, 500.0, 510.0, 510.0), 0.0, 99));
            prop_assert!(average_precision(&dets, &gts, 0.5) <= before);
        }
    }

    #[test]
    fn coco_map_rarely_exceeds_map50() {
        let mut rng = SplitMix64::new(3);
        let trials = 200;
        let mut ok = 0;
        for _ in 0..trials {
            let (dets, gts) = random_case(&mut rng);
            let r = map_metrics(&[dets], &[gts], 1).unwrap();
            if r.map_coco <= r.map50 + 1e-12 {
                ok += 1;
            }
            for v in [r.map50, r.map75, r.map_coco] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(ok as f64 >= 0.99 * trials as f64);
    }
}
