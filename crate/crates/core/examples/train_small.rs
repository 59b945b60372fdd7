//! Trains the full model briefly on a small corpus and runs detection on a
//! held-out scene.
//!
//! `cargo run --release --example train_small -- [epochs]`

use hoi_query::data::{generate_corpus, VocabConfig};
use hoi_query::experiment::bench_model;
use hoi_query::train::{TrainConfig, TrainData, Trainer};

fn main() -> hoi_query::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(8), |s| s.parse()).expect("epochs must be an integer");
    let vc = VocabConfig::default();
    let vocab = vc.vocabulary();
    let train = generate_corpus(1, 0, 400, &vc)?;
    let val = generate_corpus(1, 1_000_000, 100, &vc)?;
    let config = TrainConfig { model: bench_model(), epochs, ..TrainConfig::default() };
    let data = TrainData::new(vocab.clone(), &train, val, &config)?;
    let mut trainer = Trainer::new(config, &vocab)?;
    println!("{} parameters", trainer.model.store.num_scalars());
    trainer.fit(&data, None)?;
    for m in &trainer.history {
        println!("epoch {:>3}  loss {:.4}  val mAP {:.4}", m.epoch, m.train_loss, m.val_map_full);
    }
    let sample = &data.val[0];
    for q in trainer.model.detect(&sample.image)?.iter().take(5) {
        println!(
            "{} {} score {:.3} human {:?} object {:?}",
            vocab.verbs[q.verb],
            vocab.objects[q.object_class],
            q.score(),
            q.human.to_array(),
            q.object.to_array()
        );
    }
    Ok(())
}
