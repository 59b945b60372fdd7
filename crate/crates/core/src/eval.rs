//! Interaction mAP with Full / Rare / Non-Rare splits.
//!
//! A prediction is a true positive when an unmatched ground truth in the
//! same image has the same `(object, verb)` and both boxes overlap it with
//! IoU >= 0.5. Predictions are processed in descending score (ties: image
//! id, then position in the image's record); among eligible ground truths
//! the one with the largest `min(IoU_h, IoU_o)` is taken (ties: lowest
//! index). AP is all-points interpolated: the sum over true-positive ranks
//! of the best precision at that rank or later, divided by the number of
//! ground truths.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Scene, Vocabulary};
use crate::detector::{checked_iou, BBox, HoiQuad, HoiTarget, PredictionRecord};
use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;
pub const EVAL_HEADER: &str = "#hoi-eval v1";

/// IoU of two proper boxes; degenerate input is an error.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    checked_iou(a, b)
}

/// A scored prediction with its tie-break keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedPrediction {
    pub image_id: u64,
    pub index: usize,
    pub quad: HoiQuad,
}

fn rank_order(a: &RankedPrediction, b: &RankedPrediction) -> std::cmp::Ordering {
    b.quad.score().total_cmp(&a.quad.score()).then(a.image_id.cmp(&b.image_id)).then(a.index.cmp(&b.index))
}

/// TP flags for predictions of one category, which must already be in rank
/// order. `gts` maps image id to that image's ground truths of the category.
pub fn match_triplets(preds: &[RankedPrediction], gts: &BTreeMap<u64, Vec<HoiTarget>>, iou_thresh: f64) -> Vec<bool> {
    let mut used: BTreeMap<u64, Vec<bool>> = gts.iter().map(|(&k, v)| (k, vec![false; v.len()])).collect();
    preds
        .iter()
        .map(|p| {
            let (Some(cands), Some(taken)) = (gts.get(&p.image_id), used.get_mut(&p.image_id)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (k, gt) in cands.iter().enumerate() {
                if taken[k] || gt.object_class != p.quad.object_class || gt.verb != p.quad.verb {
                    continue;
                }
                let (ih, io) = (p.quad.human.iou(&gt.human), p.quad.object.iou(&gt.object));
                if ih >= iou_thresh && io >= iou_thresh {
                    let q = ih.min(io);
                    if best.is_none_or(|(_, b)| q > b) {
                        best = Some((k, q));
                    }
                }
            }
            match best {
                Some((k, _)) => {
                    taken[k] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated AP; 0 when `num_gt == 0`.
pub fn average_precision(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = flags.iter().zip(&precision).filter(|(&f, _)| f).fold(0.0, |acc, (_, &p)| acc + p);
    sum / num_gt as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub id: usize,
    pub verb: String,
    pub object: String,
    pub train_count: usize,
    pub rare: bool,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `None` when the category has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryAp>,
    pub map_full: f64,
    pub map_rare: f64,
    pub map_nonrare: f64,
    pub n_full: usize,
    pub n_rare: usize,
    pub n_nonrare: usize,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Scores `preds` against `scenes`. Category `c` is Rare when
/// `train_counts[c] < rare_threshold`.
pub fn evaluate(
    preds: &[PredictionRecord],
    scenes: &[Scene],
    vocab: &Vocabulary,
    train_counts: &[usize],
    rare_threshold: usize,
) -> Result<EvalReport> {
    let n_cat = vocab.n_categories();
    if train_counts.len() != n_cat {
        return Err(Error::Validation(format!("{} train counts for {n_cat} categories", train_counts.len())));
    }
    let mut gts: Vec<BTreeMap<u64, Vec<HoiTarget>>> = vec![BTreeMap::new(); n_cat];
    let mut n_gt = vec![0usize; n_cat];
    for s in scenes {
        for t in s.targets() {
            let c = vocab.category_id(t.verb, t.object_class);
            gts[c].entry(s.image_id).or_default().push(t);
            n_gt[c] += 1;
        }
    }
    let known: std::collections::HashSet<u64> = scenes.iter().map(|s| s.image_id).collect();
    let mut by_cat: Vec<Vec<RankedPrediction>> = vec![Vec::new(); n_cat];
    for rec in preds {
        if !known.contains(&rec.image_id) {
            return Err(Error::Validation(format!("prediction for unknown image {}", rec.image_id)));
        }
        for (index, q) in rec.quads.iter().enumerate() {
            if q.verb >= vocab.verbs.len() || q.object_class >= vocab.objects.len() {
                return Err(Error::Validation(format!(
                    "image {}: unknown category (verb {}, object {})",
                    rec.image_id, q.verb, q.object_class
                )));
            }
            by_cat[vocab.category_id(q.verb, q.object_class)].push(RankedPrediction { image_id: rec.image_id, index, quad: *q });
        }
    }
    let mut categories = Vec::with_capacity(n_cat);
    for c in 0..n_cat {
        let list = &mut by_cat[c];
        list.sort_by(rank_order);
        let flags = match_triplets(list, &gts[c], MATCH_IOU);
        let (v, o) = vocab.category(c);
        categories.push(CategoryAp {
            id: c,
            verb: vocab.verbs[v].clone(),
            object: vocab.objects[o].clone(),
            train_count: train_counts[c],
            rare: train_counts[c] < rare_threshold,
            n_gt: n_gt[c],
            n_pred: list.len(),
            ap: (n_gt[c] > 0).then(|| average_precision(&flags, n_gt[c])),
        });
    }
    let pick = |f: &dyn Fn(&CategoryAp) -> bool| -> Vec<f64> { categories.iter().filter(|c| f(c)).filter_map(|c| c.ap).collect() };
    let (full, rare, nonrare) = (pick(&|_| true), pick(&|c| c.rare), pick(&|c| !c.rare));
    Ok(EvalReport {
        map_full: mean(&full),
        map_rare: mean(&rare),
        map_nonrare: mean(&nonrare),
        n_full: full.len(),
        n_rare: rare.len(),
        n_nonrare: nonrare.len(),
        categories,
    })
}

impl EvalReport {
    /// Tab-separated table: one row per category, then `full`, `rare` and
    /// `nonrare` summary rows. Undefined AP is written as `-`.
    ///
    /// Columns: `scope, category, verb, object, train_count, n_gt, n_pred, ap`.
    pub fn to_table(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\nscope\tcategory\tverb\tobject\ttrain_count\tn_gt\tn_pred\tap\n");
        for c in &self.categories {
            let scope = if c.rare { "rare_category" } else { "category" };
            let ap = c.ap.map_or("-".to_string(), |a| format!("{a:.6}"));
            out.push_str(&format!("{scope}\t{}\t{}\t{}\t{}\t{}\t{}\t{ap}\n", c.id, c.verb, c.object, c.train_count, c.n_gt, c.n_pred));
        }
        for (scope, map, n) in [("full", self.map_full, self.n_full), ("rare", self.map_rare, self.n_rare), ("nonrare", self.map_nonrare, self.n_nonrare)] {
            out.push_str(&format!("{scope}\t-\t-\t-\t-\t{n}\t-\t{map:.6}\n"));
        }
        out
    }

    /// Writes `<stem>.tsv` and `<stem>.json` next to each other.
    pub fn write(&self, stem: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
        let tsv = stem.with_extension("tsv");
        let json = stem.with_extension("json");
        fs::write(&tsv, self.to_table()).map_err(|e| Error::io(&tsv, e))?;
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((tsv, json))
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::{generate_corpus, VocabConfig};

    fn quad(h: BBox, o: BBox, cls: usize, verb: usize, score: f64) -> HoiQuad {
        HoiQuad { human: h, object: o, object_class: cls, verb, object_score: score, action_score: 1.0 }
    }

    fn perfect(scenes: &[Scene]) -> Vec<PredictionRecord> {
        scenes
            .iter()
            .map(|s| PredictionRecord {
                image_id: s.image_id,
                quads: s.targets().iter().map(|t| quad(t.human, t.object, t.object_class, t.verb, 0.9)).collect(),
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(1.0, 1.0, 2.0, 2.0)).unwrap(), 0.0);
        assert!((iou(&a, &BBox::new(0.5, 0.0, 1.5, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(iou(&a, &BBox::new(0.5, 0.5, 0.4, 0.9)).is_err());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), 1.0);
        assert_eq!(average_precision(&[true, false], 2), 0.5);
        assert_eq!(average_precision(&[false, false], 2), 0.0);
        assert_eq!(average_precision(&[], 0), 0.0);
        // Precision 1/2 at the second TP, interpolated from rank 3's 2/3.
        assert!((average_precision(&[false, true, true], 2) - (2.0 / 3.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn matching_examples() {
        let b = BBox::new(0.1, 0.1, 0.4, 0.4);
        let gt = HoiTarget { human: b, object: b, object_class: 0, verb: 1 };
        let gts: BTreeMap<u64, Vec<HoiTarget>> = [(0, vec![gt])].into();
        let p = |score: f64, verb: usize, index: usize| RankedPrediction { image_id: 0, index, quad: quad(b, b, 0, verb, score) };
        assert_eq!(match_triplets(&[p(0.9, 1, 0)], &gts, MATCH_IOU), vec![true]);
        assert_eq!(match_triplets(&[p(0.9, 2, 0)], &gts, MATCH_IOU), vec![false]);
        assert_eq!(match_triplets(&[p(0.9, 1, 0), p(0.5, 1, 1)], &gts, MATCH_IOU), vec![true, false]);
        // Both boxes must pass.
        let off = RankedPrediction { image_id: 0, index: 0, quad: quad(b, BBox::new(0.5, 0.5, 0.9, 0.9), 0, 1, 0.9) };
        assert_eq!(match_triplets(&[off], &gts, MATCH_IOU), vec![false]);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let c = VocabConfig::default();
        let vocab = c.vocabulary();
        let scenes = generate_corpus(1, 0, 60, &c).unwrap();
        let counts = crate::data::category_counts(&scenes, &vocab);
        let r = evaluate(&perfect(&scenes), &scenes, &vocab, &counts, 10).unwrap();
        assert_eq!(r.map_full, 1.0);
        assert!(r.n_rare > 0 && r.map_rare == 1.0);
        let empty: Vec<PredictionRecord> = scenes.iter().map(|s| PredictionRecord { image_id: s.image_id, quads: vec![] }).collect();
        let r = evaluate(&empty, &scenes, &vocab, &counts, 10).unwrap();
        assert_eq!((r.map_full, r.map_rare, r.map_nonrare), (0.0, 0.0, 0.0));
        assert_eq!(r.n_full, counts.iter().filter(|&&n| n > 0).count());
        let bad = vec![PredictionRecord { image_id: 0, quads: vec![quad(BBox::new(0.0, 0.0, 0.1, 0.1), BBox::new(0.0, 0.0, 0.1, 0.1), 9, 0, 0.5)] }];
        assert!(matches!(evaluate(&bad, &scenes, &vocab, &counts, 10), Err(Error::Validation(_))));
    }

    #[test]
    fn shuffling_records_does_not_change_the_report() {
        let c = VocabConfig::default();
        let vocab = c.vocabulary();
        let scenes = generate_corpus(2, 0, 40, &c).unwrap();
        let counts = crate::data::category_counts(&scenes, &vocab);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut preds = perfect(&scenes);
        for rec in &mut preds {
            for q in &mut rec.quads {
                q.object_score = rng.random_range(0.1..1.0);
                if rng.random::<f64>() < 0.3 {
                    q.verb = rng.random_range(0..6);
                }
            }
        }
        let base = evaluate(&preds, &scenes, &vocab, &counts, 10).unwrap();
        for _ in 0..5 {
            let mut shuffled = preds.clone();
            for k in (1..shuffled.len()).rev() {
                shuffled.swap(k, rng.random_range(0..=k));
            }
            assert_eq!(evaluate(&shuffled, &scenes, &vocab, &counts, 10).unwrap(), base);
        }
    }

    #[test]
    fn appending_a_lowest_score_tp_never_lowers_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let n = rng.random_range(0..10);
            let flags: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let tps = flags.iter().filter(|&&f| f).count();
            let num_gt = tps + rng.random_range(1..4);
            let before = average_precision(&flags, num_gt);
            let mut more = flags.clone();
            more.push(true);
            let after = average_precision(&more, num_gt);
            assert!((0.0..=1.0).contains(&before) && after >= before);
        }
    }

    #[test]
    fn report_table_layout() {
        let c = VocabConfig::default();
        let vocab = c.vocabulary();
        let scenes = generate_corpus(1, 0, 10, &c).unwrap();
        let counts = crate::data::category_counts(&scenes, &vocab);
        let r = evaluate(&perfect(&scenes), &scenes, &vocab, &counts, 10).unwrap();
        let t = r.to_table();
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], EVAL_HEADER);
        assert_eq!(lines.len(), 2 + 24 + 3);
        assert!(lines[lines.len() - 3].starts_with("full\t"));
        let dir = tempfile::tempdir().unwrap();
        let (_, json) = r.write(&dir.path().join("report")).unwrap();
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
