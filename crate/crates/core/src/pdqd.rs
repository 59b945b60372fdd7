//! Perceptual distilled query decoder.
//!
//! Learnable, image-independent projection tokens `P` cross-attend to the
//! encoder features; the decoded tokens are mean-pooled and classified by a
//! two-layer head trained against multi-label pseudo-labels from an external
//! detector. `P` itself is then added to the object queries and to the
//! object decoder outputs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{self, DecoderBlock, Linear};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

/// Hidden width of the pooled classification head.
pub const HEAD_HIDDEN: usize = 128;
/// Pseudo-label confidence threshold.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct ProjectionTokens(pub ParamId);

#[derive(Clone, Debug)]
pub struct ClassHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ClassHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, n_classes: usize, seed: u64) -> Self {
        ClassHead {
            hidden: Linear::new(store, &format!("{name}.0"), width, HEAD_HIDDEN, true, seed),
            out: Linear::new(store, &format!("{name}.1"), HEAD_HIDDEN, n_classes, true, seed),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Pdqd {
    pub tokens: ProjectionTokens,
    pub decoder: Vec<DecoderBlock>,
    pub head: ClassHead,
}

impl Pdqd {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_queries: usize,
        width: usize,
        ffn_hidden: usize,
        depth: usize,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        Pdqd {
            tokens: ProjectionTokens(store.add_normal(&format!("{prefix}.tokens"), n_queries, width, 1.0, seed)),
            decoder: (0..depth)
                .map(|d| DecoderBlock::new(store, &format!("{prefix}.decoder{d}"), width, ffn_hidden, seed))
                .collect(),
            head: ClassHead::new(store, &format!("{prefix}.head"), width, n_classes, seed),
        }
    }

    /// Decodes `P` against `F_e` and returns the pooled class logits.
    pub fn forward(&self, g: &mut Graph, encoded: Var) -> Result<Var> {
        let p = g.param(self.tokens.0);
        let f_obj = decode_object_tokens(g, p, encoded, &self.decoder)?;
        classify_pooled(g, f_obj, &self.head)
    }
}

/// `F_obj = Decoder(P, F_e)`.
pub fn decode_object_tokens(g: &mut Graph, tokens: Var, encoded: Var, blocks: &[DecoderBlock]) -> Result<Var> {
    let (tw, ew) = (g.value(tokens).cols(), g.value(encoded).cols());
    if tw != ew {
        return Err(Error::dim("decode_object_tokens", format!("token width {tw}, feature width {ew}")));
    }
    nn::decode(g, blocks, tokens, encoded)
}

/// Mean over token rows, then `Linear -> ReLU -> Linear`; returns raw logits.
pub fn classify_pooled(g: &mut Graph, f_obj: Var, head: &ClassHead) -> Result<Var> {
    let pooled = g.mean_rows(f_obj)?;
    let h = head.hidden.forward(g, pooled)?;
    let h = g.relu(h)?;
    head.out.forward(g, h)
}

/// Binary presence vector over object classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<bool>,
    pub tau: f64,
}

impl PseudoLabels {
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn positive_classes(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &b)| b).map(|(j, _)| j).collect()
    }

    pub fn from_classes(classes: &[usize], n_classes: usize, tau: f64) -> Result<Self> {
        let mut labels = vec![false; n_classes];
        for &c in classes {
            *labels
                .get_mut(c)
                .ok_or_else(|| Error::Validation(format!("class {c} out of range for {n_classes} classes")))? = true;
        }
        Ok(PseudoLabels { labels, tau })
    }
}

/// `y[j] = 1` iff some detection of class `j` has confidence strictly above `tau`.
pub fn make_pseudo_labels(detections: &[(usize, f64)], n_classes: usize, tau: f64) -> Result<PseudoLabels> {
    let mut labels = vec![false; n_classes];
    for &(class, conf) in detections {
        if class >= n_classes {
            return Err(Error::Validation(format!("detection class {class} out of range for {n_classes} classes")));
        }
        if !(0.0..=1.0).contains(&conf) {
            return Err(Error::Validation(format!("confidence {conf} outside [0, 1]")));
        }
        if conf > tau {
            labels[class] = true;
        }
    }
    Ok(PseudoLabels { labels, tau })
}

/// Mean binary cross entropy of the pooled logits against the pseudo-labels.
pub fn multilabel_bce(g: &mut Graph, logits: Var, labels: &PseudoLabels) -> Result<Var> {
    let per_class = g.bce_with_logits(logits, &labels.targets())?;
    g.mean(per_class)
}

/// `Q_o' = Q_o + λ1·P`.
pub fn enhance_object_queries(g: &mut Graph, q_o: Var, tokens: Var, lambda1: f64) -> Result<Var> {
    g.residual_enhance(q_o, tokens, lambda1)
}

/// `V_o' = V_o + λ2·P`.
pub fn enhance_object_outputs(g: &mut Graph, v_o: Var, tokens: Var, lambda2: f64) -> Result<Var> {
    g.residual_enhance(v_o, tokens, lambda2)
}

pub fn enhance_object(g: &mut Graph, q_o: Var, v_o: Var, tokens: Var, lambda1: f64, lambda2: f64) -> Result<(Var, Var)> {
    Ok((enhance_object_queries(g, q_o, tokens, lambda1)?, enhance_object_outputs(g, v_o, tokens, lambda2)?))
}

/// Writes `image_id<TAB>comma-separated class ids`, one line per image.
pub fn write_pseudo_label_cache(path: &Path, rows: &[(u64, PseudoLabels)]) -> Result<()> {
    let mut text = String::new();
    for (id, labels) in rows {
        let classes: Vec<String> = labels.positive_classes().iter().map(|c| c.to_string()).collect();
        text.push_str(&format!("{id}\t{}\n", classes.join(",")));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_label_cache(path: &Path, n_classes: usize, tau: f64) -> Result<Vec<(u64, PseudoLabels)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, classes) = line.split_once('\t').ok_or_else(|| parse_err(n + 1, "missing tab".into()))?;
        let id: u64 = id.parse().map_err(|_| parse_err(n + 1, format!("bad image id {id:?}")))?;
        let classes: Vec<usize> = if classes.is_empty() {
            Vec::new()
        } else {
            classes
                .split(',')
                .map(|c| c.parse().map_err(|_| parse_err(n + 1, format!("bad class id {c:?}"))))
                .collect::<Result<_>>()?
        };
        let labels = PseudoLabels::from_classes(&classes, n_classes, tau).map_err(|e| parse_err(n + 1, e.to_string()))?;
        out.push((id, labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{sigmoid, tol, Tensor};
    use crate::reference as r;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn pseudo_labels_follow_strict_max_rule() {
        let y = make_pseudo_labels(&[(3, 0.6), (3, 0.4), (5, 0.7)], 8, DEFAULT_TAU).unwrap();
        assert_eq!(y.positive_classes(), vec![3, 5]);
        let y = make_pseudo_labels(&[], 4, 0.5).unwrap();
        assert_eq!(y.labels, vec![false; 4]);
        let y = make_pseudo_labels(&[(0, 0.5), (1, 0.5)], 2, 0.5).unwrap();
        assert_eq!(y.labels, vec![false, false]);
        assert!(matches!(make_pseudo_labels(&[(4, 0.9)], 4, 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn raising_tau_never_adds_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let dets: Vec<(usize, f64)> = (0..rng.random_range(0..8)).map(|_| (rng.random_range(0..5), rng.random())).collect();
            let (t1, t2) = (rng.random::<f64>(), rng.random::<f64>());
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = make_pseudo_labels(&dets, 5, lo).unwrap();
            let b = make_pseudo_labels(&dets, 5, hi).unwrap();
            assert!(b.labels.iter().zip(&a.labels).all(|(&h, &l)| !h || l));
        }
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let zeros = g.constant(Tensor::zeros(1, 5));
        let y = PseudoLabels::from_classes(&[1, 4], 5, 0.5).unwrap();
        let l = multilabel_bce(&mut g, zeros, &y).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let sat = g.constant(Tensor::row_vector(vec![-20.0, 20.0, -20.0, -20.0, 20.0]));
        let l = multilabel_bce(&mut g, sat, &y).unwrap();
        assert!(g.value(l).item() < 1e-8);

        let x = g.constant(Tensor::row_vector(vec![1.0, -1.0]));
        let y = PseudoLabels::from_classes(&[0], 2, 0.5).unwrap();
        let l = multilabel_bce(&mut g, x, &y).unwrap();
        let want = -0.5 * (sigmoid(1.0).ln() + (1.0 - sigmoid(-1.0)).ln());
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row_vector((0..6).map(|_| rng.random_range(-30.0..30.0)).collect()));
            let y = PseudoLabels { labels: (0..6).map(|_| rng.random()).collect(), tau: 0.5 };
            let l = multilabel_bce(&mut g, x, &y).unwrap();
            assert!(g.value(l).item() >= 0.0);
        }
    }

    fn head_oracle(store: &ParamStore, head: &ClassHead, f_obj: &Tensor) -> Vec<f64> {
        let (n, c) = f_obj.dims2();
        let pooled: Vec<f64> = (0..c).map(|j| (0..n).map(|i| f_obj.get(i, j)).sum::<f64>() / n as f64).collect();
        let p = |id| store.tensor(id).data().to_vec();
        r::ffn(
            &pooled,
            1,
            c,
            HEAD_HIDDEN,
            head.out.bias.map(|b| store.tensor(b).numel()).unwrap(),
            (&p(head.hidden.weight), &p(head.hidden.bias.unwrap())),
            (&p(head.out.weight), &p(head.out.bias.unwrap())),
        )
    }

    #[test]
    fn pooled_head_matches_mean_then_mlp_oracle() {
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, "h", 6, 4, 2);
        let bias_ids = [head.hidden.bias.unwrap(), head.out.bias.unwrap()];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for id in bias_ids {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let f = random(&mut rng, 5, 6);
        let want = head_oracle(&store, &head, &f);
        let mut g = Graph::with_params(&store);
        let fv = g.constant(f);
        let logits = classify_pooled(&mut g, fv, &head).unwrap();
        assert_eq!(g.value(logits).dims2(), (1, 4));
        for (a, b) in g.value(logits).data().iter().zip(&want) {
            assert!((a - b).abs() < tol::EQUATION);
        }
    }

    #[test]
    fn pooling_identical_rows_and_zero_weights() {
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, "h", 4, 3, 2);
        for id in [head.hidden.weight, head.out.weight] {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store.tensor_mut(head.out.bias.unwrap()).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        let mut g = Graph::with_params(&store);
        let f = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]]));
        let pooled = g.mean_rows(f).unwrap();
        assert_eq!(g.value(pooled).data(), &[1.0, 2.0, 3.0, 4.0]);
        let logits = classify_pooled(&mut g, f, &head).unwrap();
        assert_eq!(g.value(logits).data(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn pooled_head_is_invariant_to_token_order() {
        let mut store = ParamStore::new();
        let head = ClassHead::new(&mut store, "h", 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random(&mut rng, 4, 4);
        let fp = Tensor::matrix(4, 4, [3usize, 1, 0, 2].iter().flat_map(|&k| f.row(k).to_vec()).collect());
        let mut g = Graph::with_params(&store);
        let (a, b) = (g.constant(f), g.constant(fp));
        let la = classify_pooled(&mut g, a, &head).unwrap();
        let lb = classify_pooled(&mut g, b, &head).unwrap();
        assert!(g.value(la).max_abs_diff(g.value(lb)) < 1e-12);
    }

    #[test]
    fn decoder_matches_replay_oracle() {
        let c = 6;
        let mut store = ParamStore::new();
        let pdqd = Pdqd::new(&mut store, "pdqd", 2, c, 12, 1, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mem = random(&mut rng, 3, c);
        let want = r::apply_decoder(&store, &pdqd.decoder[0], store.tensor(pdqd.tokens.0).data(), 2, mem.data(), 3);
        let mut g = Graph::with_params(&store);
        let p = g.param(pdqd.tokens.0);
        let m = g.constant(mem);
        let f = decode_object_tokens(&mut g, p, m, &pdqd.decoder).unwrap();
        for (a, b) in g.value(f).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn single_position_gives_all_ones_cross_attention() {
        let mut store = ParamStore::new();
        let pdqd = Pdqd::new(&mut store, "pdqd", 3, 4, 8, 1, 2, 1);
        let mut g = Graph::with_params(&store);
        let p = g.param(pdqd.tokens.0);
        let m = g.constant(Tensor::from_rows(&[&[0.3, -0.1, 0.2, 0.9]]));
        let (_, w) = pdqd.decoder[0].forward_traced(&mut g, p, m).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_weights_normalize_token_rows() {
        let mut store = ParamStore::new();
        let pdqd = Pdqd::new(&mut store, "pdqd", 3, 4, 8, 1, 2, 1);
        let block = &pdqd.decoder[0];
        for l in [
            &block.self_attn.query,
            &block.self_attn.key,
            &block.self_attn.value,
            &block.self_attn.out,
            &block.cross_attn.query,
            &block.cross_attn.key,
            &block.cross_attn.value,
            &block.cross_attn.out,
            &block.ffn.first,
            &block.ffn.second,
        ] {
            store.tensor_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tokens = store.tensor(pdqd.tokens.0).clone();
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        // Every sub-layer contributes zero, leaving three stacked norms.
        let want = r::layer_norm(&r::layer_norm(&r::layer_norm(tokens.data(), 4, &ones, &zeros, tol::LN_EPS), 4, &ones, &zeros, tol::LN_EPS), 4, &ones, &zeros, tol::LN_EPS);
        let mut g = Graph::with_params(&store);
        let p = g.param(pdqd.tokens.0);
        let m = g.constant(Tensor::full(5, 4, 0.7));
        let f = decode_object_tokens(&mut g, p, m, &pdqd.decoder).unwrap();
        for (a, b) in g.value(f).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decoder_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let pdqd = Pdqd::new(&mut store, "pdqd", 3, 4, 8, 1, 2, 1);
        let mut g = Graph::with_params(&store);
        let p = g.param(pdqd.tokens.0);
        let m = g.constant(Tensor::zeros(5, 3));
        assert!(matches!(decode_object_tokens(&mut g, p, m, &pdqd.decoder), Err(Error::Dimension { .. })));
    }

    #[test]
    fn object_enhancement_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]));
        let v = g.constant(Tensor::from_rows(&[&[0.5, 0.5]]));
        let p = g.constant(Tensor::from_rows(&[&[2.0, 3.0]]));
        let (q2, v2) = enhance_object(&mut g, q, v, p, 0.0, 0.0).unwrap();
        assert_eq!((g.value(q2), g.value(v2)), (g.value(q), g.value(v)));
        let (q2, v2) = enhance_object(&mut g, q, v, p, 1.0, 1.0).unwrap();
        assert_eq!(g.value(q2).data(), &[3.0, 2.0]);
        assert_eq!(g.value(v2).data(), &[2.5, 3.5]);
        let z = g.constant(Tensor::zeros(1, 2));
        let (q2, _) = enhance_object(&mut g, z, v, p, 1.0, 1.0).unwrap();
        assert_eq!(g.value(q2), g.value(p));
    }

    #[test]
    fn pseudo_label_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let rows = vec![
            (0, PseudoLabels::from_classes(&[1, 3], 4, 0.5).unwrap()),
            (7, PseudoLabels::from_classes(&[], 4, 0.5).unwrap()),
        ];
        write_pseudo_label_cache(&path, &rows).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "0\t1,3\n7\t\n");
        assert_eq!(read_pseudo_label_cache(&path, 4, 0.5).unwrap(), rows);
        fs::write(&path, "3\t9\n").unwrap();
        assert!(matches!(read_pseudo_label_cache(&path, 4, 0.5), Err(Error::Parse { line: 1, .. })));
    }
}
