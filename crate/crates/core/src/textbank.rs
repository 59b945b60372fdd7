//! Interaction prompt dictionary and the global image embedding.
//!
//! The text side is a deterministic stand-in for a pre-trained language
//! encoder: each whitespace token hashes to a fixed pseudo-random unit
//! vector, and a prompt embeds to the normalised mean of its tokens. Prompts
//! that share tokens therefore land closer together than prompts that don't.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub pattern: String,
}

impl PromptTemplate {
    /// `pattern` must contain `{1}` (verb) and `{2}` (object) exactly once each.
    pub fn new(name: impl Into<String>, pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        for ph in ["{1}", "{2}"] {
            let n = pattern.matches(ph).count();
            if n != 1 {
                return Err(Error::Validation(format!("template {pattern:?} has {n} occurrences of {ph}")));
            }
        }
        Ok(PromptTemplate { name: name.into(), pattern })
    }

    /// The four built-in templates, in sweep order.
    pub fn builtin() -> Vec<PromptTemplate> {
        [
            ("minimal", "person {1} {2}"),
            ("someone", "someone {1} a/an {2} outdoors or indoors"),
            ("progressive", "a person is {1}ing a/an {2}"),
            ("interacting", "person interacting with a/an {2} by {1}ing"),
        ]
        .into_iter()
        .map(|(n, p)| PromptTemplate::new(n, p).expect("builtin template"))
        .collect()
    }

    pub fn by_name(name: &str) -> Result<PromptTemplate> {
        PromptTemplate::builtin().into_iter().find(|t| t.name == name).ok_or_else(|| {
            let names: Vec<String> = PromptTemplate::builtin().into_iter().map(|t| t.name).collect();
            Error::Validation(format!("unknown template {name:?}; expected one of {names:?}"))
        })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::by_name("progressive").expect("builtin template")
    }
}

fn check_token(kind: &str, tok: &str) -> Result<()> {
    if tok.is_empty() {
        return Err(Error::Validation(format!("empty {kind}")));
    }
    if tok.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
        return Err(Error::Validation(format!("{kind} {tok:?} must be a single lowercase token")));
    }
    Ok(())
}

/// Present participle by the naive rule: drop one trailing `e`, append `ing`.
pub fn gerund(verb: &str) -> String {
    let stem = if verb.len() > 1 && verb.ends_with('e') { &verb[..verb.len() - 1] } else { verb };
    format!("{stem}ing")
}

pub fn render_prompt(template: &PromptTemplate, verb: &str, object: &str) -> Result<String> {
    check_token("verb", verb)?;
    check_token("object", object)?;
    Ok(template.pattern.replace("{1}ing", &gerund(verb)).replace("{1}", verb).replace("{2}", object))
}

fn token_vector(token: &str, d_t: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let v: Vec<f64> = (0..d_t).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else {
        let u = 1.0 / (v.len() as f64).sqrt();
        v.iter_mut().for_each(|x| *x = u);
    }
}

/// Deterministic unit-norm embedding of `prompt`, shape `1 x d_t`.
pub fn embed_text_stub(prompt: &str, d_t: usize, seed: u64) -> Result<Tensor> {
    if d_t < 8 {
        return Err(Error::Validation(format!("text dimension {d_t} < 8")));
    }
    let mut acc = vec![0.0; d_t];
    let mut n = 0usize;
    for tok in prompt.split_whitespace() {
        acc.iter_mut().zip(token_vector(tok, d_t, seed)).for_each(|(a, v)| *a += v);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    normalize(&mut acc);
    Ok(Tensor::row_vector(acc))
}

/// Embedded prompts, one row per interaction category.
#[derive(Clone, Debug)]
pub struct TextDictionary {
    pub embeddings: Tensor,
    pub prompts: Vec<String>,
    pub category_index: HashMap<(String, String), usize>,
}

impl TextDictionary {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

pub fn build_dictionary(
    vocab: &[(String, String)],
    template: &PromptTemplate,
    d_t: usize,
    seed: u64,
) -> Result<TextDictionary> {
    if vocab.is_empty() {
        return Err(Error::Validation("empty interaction vocabulary".into()));
    }
    let mut category_index = HashMap::new();
    let mut prompts = Vec::with_capacity(vocab.len());
    let mut data = Vec::with_capacity(vocab.len() * d_t);
    for (i, (verb, object)) in vocab.iter().enumerate() {
        if category_index.insert((verb.clone(), object.clone()), i).is_some() {
            return Err(Error::Validation(format!("duplicate interaction ({verb}, {object})")));
        }
        let prompt = render_prompt(template, verb, object)?;
        data.extend_from_slice(embed_text_stub(&prompt, d_t, seed)?.data());
        prompts.push(prompt);
    }
    Ok(TextDictionary { embeddings: Tensor::matrix(vocab.len(), d_t, data), prompts, category_index })
}

/// Reads `verb<TAB>object` lines; blank lines and `#` comments are skipped.
pub fn read_vocab_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(v), Some(o), None) if !v.is_empty() && !o.is_empty() => out.push((v.to_string(), o.to_string())),
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: n + 1,
                    msg: "expected verb<TAB>object".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_vocab_file(path: &Path, vocab: &[(String, String)]) -> Result<()> {
    let text: String = vocab.iter().map(|(v, o)| format!("{v}\t{o}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Unit-norm image descriptor `I`, shape `1 x d_t`.
#[derive(Clone, Debug)]
pub struct GlobalImageEmbedding {
    pub vector: Tensor,
}

/// Global average pool, learnable projection `C -> d_t`, L2 normalisation.
#[derive(Clone, Debug)]
pub struct ImageEmbedder {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ImageEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, d_t: usize, seed: u64) -> Self {
        ImageEmbedder {
            weight: store.add_xavier(&format!("{prefix}.weight"), channels, d_t, seed),
            bias: store.add_const(&format!("{prefix}.bias"), 1, d_t, 0.0),
        }
    }

    /// `features` holds one spatial position per row (`S x C`).
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let pooled = g.mean_rows(features)?;
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let projected = g.linear(pooled, w, Some(b))?;
        g.l2_normalize_rows(projected)
    }

    /// Embeds a `C x H' x W'` feature map.
    pub fn embed(&self, store: &ParamStore, feature_map: &Tensor) -> Result<GlobalImageEmbedding> {
        let shape = feature_map.shape();
        if shape.len() != 3 {
            return Err(Error::dim("embed_image_stub", format!("expected C x H' x W', got {shape:?}")));
        }
        let (c, s) = (shape[0], shape[1] * shape[2]);
        let mut rows = vec![0.0; s * c];
        for ch in 0..c {
            for p in 0..s {
                rows[p * c + ch] = feature_map.data()[ch * s + p];
            }
        }
        let mut g = Graph::inference(store);
        let f = g.constant(Tensor::matrix(s, c, rows));
        let v = self.forward(&mut g, f)?;
        Ok(GlobalImageEmbedding { vector: g.value(v).clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn renders_progressive_and_minimal_templates() {
        let t = PromptTemplate::by_name("progressive").unwrap();
        assert_eq!(render_prompt(&t, "ride", "bicycle").unwrap(), "a person is riding a/an bicycle");
        let t = PromptTemplate::by_name("minimal").unwrap();
        assert_eq!(render_prompt(&t, "eat", "banana").unwrap(), "person eat banana");
        let t = PromptTemplate::by_name("interacting").unwrap();
        assert_eq!(render_prompt(&t, "hold", "cup").unwrap(), "person interacting with a/an cup by holding");
    }

    #[test]
    fn rejects_empty_or_uppercase_tokens() {
        let t = PromptTemplate::default();
        assert!(matches!(render_prompt(&t, "", "cup"), Err(Error::Validation(_))));
        assert!(matches!(render_prompt(&t, "ride", ""), Err(Error::Validation(_))));
        assert!(render_prompt(&t, "Ride", "cup").is_err());
    }

    #[test]
    fn template_placeholders_must_appear_once() {
        assert!(PromptTemplate::new("x", "{1} {1} {2}").is_err());
        assert!(PromptTemplate::new("x", "{1} only").is_err());
        assert_eq!(PromptTemplate::builtin().len(), 4);
    }

    #[test]
    fn text_stub_is_deterministic_and_unit_norm() {
        let a = embed_text_stub("a person is riding a/an horse", 32, 0).unwrap();
        let b = embed_text_stub("a person is riding a/an horse", 32, 0).unwrap();
        assert_eq!(a, b);
        for p in ["x", "person ride bicycle", "", "a b c d e f g"] {
            let v = embed_text_stub(p, 16, 3).unwrap();
            assert!((cosine(&v, &v) - 1.0).abs() < 1e-9);
        }
        assert!(embed_text_stub("x", 4, 0).is_err());
    }

    #[test]
    fn shared_tokens_are_closer_than_disjoint_prompts() {
        let base = embed_text_stub("person ride bicycle", 32, 0).unwrap();
        let near = embed_text_stub("person ride horse", 32, 0).unwrap();
        let far = embed_text_stub("zz qq ww", 32, 0).unwrap();
        assert!(cosine(&base, &near) > cosine(&base, &far));
    }

    #[test]
    fn dictionary_rows_follow_vocab_order() {
        let vocab: Vec<(String, String)> = ["ride", "hold", "carry", "push", "kick", "throw"]
            .iter()
            .flat_map(|v| ["bicycle", "ball", "cup", "horse"].iter().map(move |o| (v.to_string(), o.to_string())))
            .collect();
        let d = build_dictionary(&vocab, &PromptTemplate::default(), 32, 0).unwrap();
        assert_eq!(d.embeddings.dims2(), (24, 32));
        for (i, (v, o)) in vocab.iter().enumerate() {
            assert_eq!(d.category_index[&(v.clone(), o.clone())], i);
            let row = embed_text_stub(&d.prompts[i], 32, 0).unwrap();
            assert_eq!(d.embeddings.row(i), row.data());
        }
        let one = build_dictionary(&vocab[..1], &PromptTemplate::default(), 32, 0).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn dictionary_rejects_duplicates_and_empty() {
        let dup = vec![("ride".to_string(), "horse".to_string()); 2];
        assert!(matches!(build_dictionary(&dup, &PromptTemplate::default(), 16, 0), Err(Error::Validation(_))));
        assert!(build_dictionary(&[], &PromptTemplate::default(), 16, 0).is_err());
    }

    fn embedder(c: usize, d: usize) -> (ParamStore, ImageEmbedder) {
        let mut store = ParamStore::new();
        let e = ImageEmbedder::new(&mut store, "img", c, d, 5);
        (store, e)
    }

    #[test]
    fn image_stub_matches_pool_then_project_oracle() {
        let (store, e) = embedder(4, 8);
        let map = Tensor::new(vec![4, 2, 2], (0..16).map(|k| ((k * 7 % 5) as f64) - 2.0).collect()).unwrap();
        let got = e.embed(&store, &map).unwrap().vector;

        let w = store.tensor(e.weight);
        let pooled: Vec<f64> = (0..4).map(|c| map.data()[c * 4..c * 4 + 4].iter().sum::<f64>() / 4.0).collect();
        let mut proj: Vec<f64> = (0..8).map(|j| (0..4).map(|c| pooled[c] * w.get(c, j)).sum()).collect();
        let n = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
        proj.iter_mut().for_each(|x| *x /= n);
        for (a, b) in got.data().iter().zip(&proj) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((cosine(&got, &got) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn image_stub_of_zero_map_is_uniform() {
        let (store, e) = embedder(3, 9);
        let map = Tensor::new(vec![3, 2, 2], vec![0.0; 12]).unwrap();
        let v = e.embed(&store, &map).unwrap().vector;
        assert!(v.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn vocab_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        let vocab = vec![("ride".to_string(), "horse".to_string()), ("hold".to_string(), "cup".to_string())];
        write_vocab_file(&p, &vocab).unwrap();
        assert_eq!(read_vocab_file(&p).unwrap(), vocab);
        fs::write(&p, "ride horse\n").unwrap();
        assert!(matches!(read_vocab_file(&p), Err(Error::Parse { line: 1, .. })));
    }
}
