//! Generates a few scenes, prints their interactions and an ASCII rendering
//! of the first one.

use hoi_query::data::{category_counts, generate_corpus, render_scene, VocabConfig, RARE_THRESHOLD};

fn main() -> hoi_query::Result<()> {
    let vc = VocabConfig::default();
    let vocab = vc.vocabulary();
    let scenes = generate_corpus(3, 0, 500, &vc)?;
    for s in &scenes[..3] {
        let desc: Vec<String> = s
            .interactions
            .iter()
            .map(|i| format!("{} {}", vocab.verbs[i.verb], vocab.objects[s.entities[i.object].class]))
            .collect();
        println!("image {}: {}", s.image_id, desc.join(", "));
    }
    let img = render_scene(&scenes[0], 24, 48);
    for y in 0..24 {
        let line: String = (0..48)
            .map(|x| {
                let (r, g, b) = (img.data()[y * 48 + x], img.data()[24 * 48 + y * 48 + x], img.data()[2 * 24 * 48 + y * 48 + x]);
                if r > 0.9 && g < 0.2 { 'H' } else if r + g + b > 0.5 { 'o' } else { '.' }
            })
            .collect();
        println!("{line}");
    }
    let counts = category_counts(&scenes, &vocab);
    println!("rare categories in 500 scenes: {}", counts.iter().filter(|&&c| c < RARE_THRESHOLD).count());
    Ok(())
}
