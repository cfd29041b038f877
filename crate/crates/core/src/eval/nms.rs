use crate::timeline::{segment_iou, DetectionSet};

/// Class-wise greedy non-maximum suppression: a detection is dropped when its
/// IoU with an already kept detection of the same class exceeds `iou_thr`.
/// The output keeps the input's items in descending score order.
pub fn nms(dets: &DetectionSet, iou_thr: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..dets.items.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&dets.items[a], &dets.items[b]);
        y.score
            .total_cmp(&x.score)
            .then(x.segment.start().total_cmp(&y.segment.start()))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets.items[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets.items[k];
            o.label == d.label && segment_iou(&o.segment, &d.segment) > iou_thr
        });
        if !suppressed {
            kept.push(i);
        }
    }
    DetectionSet {
        video_id: dets.video_id.clone(),
        items: kept.into_iter().map(|i| dets.items[i]).collect(),
    }
}
