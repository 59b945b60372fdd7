use super::HoiQuad;

/// Joint-IoU suppression threshold.
pub const DEFAULT_NMS_IOU: f64 = 0.7;

fn conflicts(a: &HoiQuad, b: &HoiQuad, thresh: f64) -> bool {
    a.object_class == b.object_class
        && a.verb == b.verb
        && a.human.iou(&b.human) > thresh
        && a.object.iou(&b.object) > thresh
}

/// Greedy suppression in descending `object_score · action_score` (ties keep
/// input order). A candidate is dropped when some kept quadruple of the same
/// `(object, verb)` overlaps it above `thresh` on both boxes. Survivors are
/// returned in input order.
pub fn nms_filter(quads: &[HoiQuad], thresh: f64) -> Vec<HoiQuad> {
    let mut order: Vec<usize> = (0..quads.len()).collect();
    order.sort_by(|&a, &b| quads[b].score().total_cmp(&quads[a].score()));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&k| conflicts(&quads[k], &quads[i], thresh)) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| quads[i]).collect()
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::detector::BBox;

    fn quad(h: BBox, o: BBox, cls: usize, verb: usize, score: f64) -> HoiQuad {
        HoiQuad { human: h, object: o, object_class: cls, verb, object_score: score, action_score: 1.0 }
    }

    /// The greedy result is the unique keep-set `K` where every member is
    /// unchallenged by higher-priority members and every non-member is
    /// challenged by one. Enumerate all subsets and return the fixpoints.
    fn fixpoints(quads: &[HoiQuad], thresh: f64) -> Vec<Vec<usize>> {
        let n = quads.len();
        let before = |a: usize, b: usize| {
            let (sa, sb) = (quads[a].score(), quads[b].score());
            sa > sb || (sa == sb && a < b)
        };
        let mut out = Vec::new();
        for mask in 0u32..(1 << n) {
            let inside = |i: usize| mask & (1 << i) != 0;
            let ok = (0..n).all(|i| {
                let challenged = (0..n).any(|k| k != i && inside(k) && before(k, i) && conflicts(&quads[k], &quads[i], thresh));
                inside(i) != challenged
            });
            if ok {
                out.push((0..n).filter(|&i| inside(i)).collect());
            }
        }
        out
    }

    #[test]
    fn identical_quads_collapse() {
        let b = BBox::new(0.1, 0.1, 0.4, 0.4);
        let q = quad(b, b, 1, 2, 0.8);
        assert_eq!(nms_filter(&[q, q], DEFAULT_NMS_IOU), vec![q]);
    }

    #[test]
    fn disjoint_or_different_category_survive() {
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        let b = BBox::new(0.5, 0.5, 0.7, 0.7);
        let qs = [quad(a, a, 0, 0, 0.5), quad(b, b, 0, 0, 0.9), quad(a, a, 1, 0, 0.4)];
        assert_eq!(nms_filter(&qs, DEFAULT_NMS_IOU), qs.to_vec());
        // Human boxes overlap but object boxes do not.
        let qs = [quad(a, a, 0, 0, 0.5), quad(a, b, 0, 0, 0.9)];
        assert_eq!(nms_filter(&qs, DEFAULT_NMS_IOU).len(), 2);
    }

    #[test]
    fn crafted_chain_matches_exhaustive_oracle() {
        // b suppresses a and c; d is only near c, so it survives because c
        // was removed first.
        let bx = |x: f64| BBox::new(x, 0.0, x + 1.0, 1.0);
        let o = BBox::new(0.0, 0.0, 0.5, 0.5);
        let qs = [quad(bx(0.1), o, 0, 0, 0.7), quad(bx(0.0), o, 0, 0, 0.9), quad(bx(0.15), o, 0, 0, 0.6), quad(bx(0.32), o, 0, 0, 0.5)];
        let kept = nms_filter(&qs, DEFAULT_NMS_IOU);
        assert_eq!(kept, vec![qs[1], qs[3]]);
        assert_eq!(fixpoints(&qs, DEFAULT_NMS_IOU), vec![vec![1, 3]]);
    }

    #[test]
    fn random_sets_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let n = rng.random_range(1..9);
            let qs: Vec<HoiQuad> = (0..n)
                .map(|_| {
                    let j = |rng: &mut ChaCha8Rng| {
                        let x = rng.random_range(0.0..0.1);
                        BBox::new(x, x, 0.5 + x, 0.5 + x)
                    };
                    let (h, o) = (j(&mut rng), j(&mut rng));
                    quad(h, o, rng.random_range(0..2), 0, (rng.random_range(0..4) as f64) / 4.0)
                })
                .collect();
            let kept = nms_filter(&qs, DEFAULT_NMS_IOU);
            let oracle = fixpoints(&qs, DEFAULT_NMS_IOU);
            assert_eq!(oracle.len(), 1);
            assert_eq!(kept, oracle[0].iter().map(|&i| qs[i]).collect::<Vec<_>>());
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    assert!(!conflicts(a, b, DEFAULT_NMS_IOU));
                }
            }
        }
    }
}
