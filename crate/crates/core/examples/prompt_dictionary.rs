//! Renders interaction prompts under each builtin template and builds the
//! text dictionary the action-aware branch attends to.

use hoi_query::data::VocabConfig;
use hoi_query::textbank::{build_dictionary, render_prompt, PromptTemplate};

fn main() -> hoi_query::Result<()> {
    for t in PromptTemplate::builtin() {
        println!("{:<12} {}", t.name, render_prompt(&t, "ride", "bicycle")?);
    }
    let pairs = VocabConfig::default().vocabulary().pairs();
    let dict = build_dictionary(&pairs, &PromptTemplate::by_name("progressive")?, 16, 0)?;
    println!("\n{} prompts embedded into {}-d rows", dict.len(), dict.dim());
    for (i, p) in dict.prompts.iter().take(4).enumerate() {
        let row: Vec<String> = dict.embeddings.row(i)[..4].iter().map(|v| format!("{v:+.3}")).collect();
        println!("  {p:<32} [{} ...]", row.join(", "));
    }
    Ok(())
}
