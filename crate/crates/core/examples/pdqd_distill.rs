//! Turns oracle detections into multi-label pseudo-labels and scores the
//! object-aware branch's pooled prediction against them.

use hoi_query::data::{generate_scene, oracle_detect, render_scene, scene_seed, NoiseConfig, VocabConfig};
use hoi_query::detector::{Model, ModelConfig};
use hoi_query::numerics::Graph;
use hoi_query::pdqd::{make_pseudo_labels, multilabel_bce};

fn main() -> hoi_query::Result<()> {
    let vc = VocabConfig::default();
    let vocab = vc.vocabulary();
    let scene = generate_scene(0, scene_seed(7, 0), &vc)?;
    let dets = oracle_detect(&scene, &NoiseConfig::default());
    for d in &dets {
        println!("detected {:<8} conf {:.2}", vocab.objects[d.class], d.confidence);
    }
    let pairs: Vec<(usize, f64)> = dets.iter().map(|d| (d.class, d.confidence)).collect();
    for tau in [0.3, 0.5, 0.8] {
        println!("tau {tau}: positives {:?}", make_pseudo_labels(&pairs, vocab.objects.len(), tau)?.positive_classes());
    }

    let labels = make_pseudo_labels(&pairs, vocab.objects.len(), 0.5)?;
    let model = Model::new(ModelConfig::default(), &vocab.pairs())?;
    let image = render_scene(&scene, model.config.image_size, model.config.image_size);
    let mut g = Graph::inference(&model.store);
    let out = model.forward(&mut g, &image)?;
    let logits = out.pdqd_logits.expect("pdqd enabled");
    let loss = multilabel_bce(&mut g, logits, &labels)?;
    println!("untrained distillation loss {:.4} (ln 2 = {:.4})", g.value(loss).item(), std::f64::consts::LN_2);
    Ok(())
}
