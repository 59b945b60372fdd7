//! Runs the action-aware query branch on a rendered scene and prints the
//! per-layer attention over interaction prompts.

use hoi_query::data::{generate_scene, render_scene, scene_seed, VocabConfig};
use hoi_query::detector::{Model, ModelConfig};
use hoi_query::numerics::Graph;

fn main() -> hoi_query::Result<()> {
    let vc = VocabConfig::default();
    let vocab = vc.vocabulary();
    let scene = generate_scene(0, scene_seed(42, 0), &vc)?;
    let config = ModelConfig { actor_layers: 2, ..ModelConfig::default() };
    let model = Model::new(config, &vocab.pairs())?;
    let image = render_scene(&scene, model.config.image_size, model.config.image_size);

    let mut g = Graph::inference(&model.store);
    let out = model.forward(&mut g, &image)?;
    let trace = out.actor.expect("actor enabled");
    let prompts = &model.text.as_ref().expect("dictionary").prompts;
    for (l, &s) in trace.attention.iter().enumerate() {
        let row = g.value(s).row(0);
        let mut top: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        top.sort_by(|a, b| b.1.total_cmp(&a.1));
        let names: Vec<String> = top[..3].iter().map(|(i, w)| format!("{} ({w:.3})", prompts[*i])).collect();
        println!("layer {l}: row sum {:.12}, top prompts: {}", row.iter().sum::<f64>(), names.join(", "));
    }
    let a = g.value(trace.queries);
    println!("A: {} x {}, all rows identical: {}", a.rows(), a.cols(), (1..a.rows()).all(|r| a.row(r) == a.row(0)));
    Ok(())
}
