//! Box overlap measures and duplicate suppression of interaction quads.

use hoi_query::detector::{nms_filter, BBox, HoiQuad, DEFAULT_NMS_IOU};

fn main() {
    let a = BBox::new(0.1, 0.1, 0.5, 0.5);
    let b = BBox::new(0.3, 0.3, 0.7, 0.7);
    let far = BBox::new(0.8, 0.8, 0.9, 0.9);
    println!("IoU {:.4}, GIoU {:.4}, GIoU to a distant box {:.4}", a.iou(&b), a.giou(&b), a.giou(&far));

    let obj = BBox::new(0.5, 0.1, 0.7, 0.3);
    let quad = |h: BBox, s: f64| HoiQuad { human: h, object: obj, object_class: 1, verb: 2, object_score: s, action_score: 1.0 };
    let quads = vec![quad(a, 0.9), quad(BBox::new(0.11, 0.1, 0.5, 0.51), 0.8), quad(b, 0.7)];
    let kept = nms_filter(&quads, DEFAULT_NMS_IOU);
    println!("kept {} of {} quads; scores {:?}", kept.len(), quads.len(), kept.iter().map(HoiQuad::score).collect::<Vec<_>>());
}
