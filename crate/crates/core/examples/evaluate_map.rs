//! Scores perfect, degraded and empty predictions with the Full/Rare/Non-Rare
//! mAP protocol.

use hoi_query::data::{category_counts, generate_corpus, VocabConfig, RARE_THRESHOLD};
use hoi_query::detector::{BBox, HoiQuad, PredictionRecord};
use hoi_query::eval::evaluate;

fn main() -> hoi_query::Result<()> {
    let vc = VocabConfig::default();
    let vocab = vc.vocabulary();
    let train = generate_corpus(1, 0, 2000, &vc)?;
    let test = generate_corpus(1, 10_000, 300, &vc)?;
    let counts = category_counts(&train, &vocab);

    let perfect: Vec<PredictionRecord> = test
        .iter()
        .map(|s| PredictionRecord {
            image_id: s.image_id,
            quads: s
                .targets()
                .into_iter()
                .map(|t| HoiQuad { human: t.human, object: t.object, object_class: t.object_class, verb: t.verb, object_score: 1.0, action_score: 1.0 })
                .collect(),
        })
        .collect();
    // Shift every other object box so it misses the IoU threshold.
    let degraded: Vec<PredictionRecord> = perfect
        .iter()
        .map(|r| PredictionRecord {
            image_id: r.image_id,
            quads: r
                .quads
                .iter()
                .enumerate()
                .map(|(k, q)| {
                    let o = q.object;
                    let object = if k % 2 == 0 { o } else { BBox::new(o.x1 + o.width() * 0.7, o.y1, o.x2 + o.width() * 0.7, o.y2) };
                    HoiQuad { object, action_score: if k % 2 == 0 { 0.9 } else { 0.95 }, ..*q }
                })
                .collect(),
        })
        .collect();
    for (name, preds) in [("perfect", perfect), ("degraded", degraded), ("empty", Vec::new())] {
        let r = evaluate(&preds, &test, &vocab, &counts, RARE_THRESHOLD)?;
        println!(
            "{name:<9} full {:.4}  rare {:.4} ({} categories)  non-rare {:.4} ({} categories)",
            r.map_full, r.map_rare, r.n_rare, r.map_nonrare, r.n_nonrare
        );
    }
    Ok(())
}
