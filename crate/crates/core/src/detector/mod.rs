//! DETR-style host pipeline.
//!
//! ```text
//! image -> patches -> F -> encoder -> F_e
//!   F  -> I -> ACTOR(I, T) -> A
//!   P  -> (decoder with F_e -> pooled class head, trained on pseudo-labels)
//! [Q_h ; Q_o + λ1·P] -> instance decoder -> V_h, V_o
//! V_h -> human boxes, V_o + λ2·P -> object boxes and classes
//! Q_a = V_h + V_o;  Q_a + γ1·A -> interaction decoder -> V_a;  V_a + γ2·A -> actions
//! ```
//!
//! With ACTOR and PDQD switched off the same code is the plain baseline;
//! parameter values are keyed by name, so both builds share every weight
//! they have in common.

mod boxes;
mod io;
mod nms;

pub use boxes::{checked_iou, cxcywh_to_corners, giou_loss_rows, l1_rows, BBox, MIN_EXTENT};
pub use io::{read_predictions, write_predictions, PredictionRecord};
pub use nms::{nms_filter, DEFAULT_NMS_IOU};

use serde::{Deserialize, Serialize};

use crate::actor::{self, ActorParams, ActorTrace};
use crate::error::{Error, Result};
use crate::nn::{self, DecoderBlock, EncoderBlock, Linear};
use crate::numerics::{softmax_in_place, sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use crate::pdqd::{self, Pdqd};
use crate::textbank::{build_dictionary, ImageEmbedder, PromptTemplate, TextDictionary};

/// How the instance decoder outputs are merged into action queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionFusion {
    #[default]
    Sum,
    /// `V_h W_h + V_o W_o`, a linear map of the concatenated pair.
    ConcatLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub width: usize,
    pub text_dim: usize,
    pub actor_layers: usize,
    pub image_size: usize,
    pub patch: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub interaction_depth: usize,
    pub pdqd_depth: usize,
    pub ffn_ratio: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub use_actor: bool,
    pub use_pdqd: bool,
    pub action_fusion: ActionFusion,
    pub template: String,
    pub n_objects: usize,
    pub n_verbs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_queries: 16,
            width: 64,
            text_dim: 32,
            actor_layers: actor::DEFAULT_LAYERS,
            image_size: 32,
            patch: 8,
            encoder_depth: 2,
            decoder_depth: 2,
            interaction_depth: 2,
            pdqd_depth: 1,
            ffn_ratio: 4,
            lambda1: 1.0,
            lambda2: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            use_actor: true,
            use_pdqd: true,
            action_fusion: ActionFusion::Sum,
            template: PromptTemplate::default().name,
            n_objects: 4,
            n_verbs: 6,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The same configuration with both query-initialisation branches off.
    pub fn baseline(&self) -> Self {
        ModelConfig { use_actor: false, use_pdqd: false, ..self.clone() }
    }

    pub fn n_positions(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_queries", self.n_queries),
            ("width", self.width),
            ("text_dim", self.text_dim),
            ("actor_layers", self.actor_layers),
            ("image_size", self.image_size),
            ("patch", self.patch),
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("interaction_depth", self.interaction_depth),
            ("pdqd_depth", self.pdqd_depth),
            ("ffn_ratio", self.ffn_ratio),
            ("n_objects", self.n_objects),
            ("n_verbs", self.n_verbs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if self.width < 2 {
            return Err(Error::Validation("width must be at least 2".into()));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::Validation(format!("image size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} = {v} is not finite")));
            }
        }
        PromptTemplate::by_name(&self.template)?;
        Ok(())
    }
}

/// One predicted interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiQuad {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    pub verb: usize,
    pub object_score: f64,
    pub action_score: f64,
}

impl HoiQuad {
    pub fn score(&self) -> f64 {
        self.object_score * self.action_score
    }
}

/// One ground-truth interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiTarget {
    pub human: BBox,
    pub object: BBox,
    pub object_class: usize,
    pub verb: usize,
}

/// Three-layer MLP emitting `(cx, cy, w, h)` through a sigmoid, converted to
/// corners.
#[derive(Clone, Debug)]
pub struct BoxHead {
    pub layers: [Linear; 3],
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, seed: u64) -> Self {
        BoxHead {
            layers: [
                Linear::new(store, &format!("{name}.0"), width, width, true, seed),
                Linear::new(store, &format!("{name}.1"), width, width, true, seed),
                Linear::new(store, &format!("{name}.2"), width, 4, true, seed),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.layers[1].forward(g, h)?;
        let h = g.relu(h)?;
        let raw = self.layers[2].forward(g, h)?;
        let squashed = g.sigmoid(raw)?;
        cxcywh_to_corners(g, squashed)
    }
}

#[derive(Clone, Debug)]
struct Fusion {
    human: Linear,
    object: Linear,
}

/// Fixed 2-D sinusoidal encodings, `S x width`: the first half of the
/// channels encodes the patch row, the second half the column.
pub fn sinusoidal_positions(grid: usize, width: usize) -> Tensor {
    const TEMPERATURE: f64 = 100.0;
    let half = width / 2;
    let mut data = Vec::with_capacity(grid * grid * width);
    for r in 0..grid {
        for c in 0..grid {
            for ch in 0..width {
                let (pos, k) = if ch < half { (r, ch) } else { (c, ch - half) };
                let span = if ch < half { half } else { width - half };
                let freq = TEMPERATURE.powf(-((k / 2 * 2) as f64) / span as f64);
                let angle = pos as f64 * freq;
                data.push(if k % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::matrix(grid * grid, width, data)
}

/// Splits a `3 x H x W` image into row-major `p x p` patches, one flattened
/// patch per row (channel-major inside a patch).
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Validation(format!("expected a 3 x H x W image, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Validation(format!("image {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let px = image.data();
    let mut data = Vec::with_capacity(px.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for ch in 0..3 {
                for y in 0..patch {
                    let row = ch * h * w + (pr * patch + y) * w + pc * patch;
                    data.extend_from_slice(&px[row..row + patch]);
                }
            }
        }
    }
    Ok(Tensor::matrix(gh * gw, 3 * patch * patch, data))
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N_q x 4` corner boxes (unclipped).
    pub human_boxes: Var,
    pub object_boxes: Var,
    /// `N_q x (N_obj + 1)`; the last column is "no object".
    pub object_logits: Var,
    /// `N_q x N_verb` multi-label logits.
    pub action_logits: Var,
    /// `1 x N_obj` pooled PDQD logits when PDQD is on.
    pub pdqd_logits: Option<Var>,
    pub actor: Option<ActorTrace>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: Option<TextDictionary>,
    patch_embed: Linear,
    positions: Tensor,
    encoder: Vec<EncoderBlock>,
    human_queries: ParamId,
    object_queries: ParamId,
    instance_decoder: Vec<DecoderBlock>,
    interaction_decoder: Vec<DecoderBlock>,
    human_box: BoxHead,
    object_box: BoxHead,
    object_class: Linear,
    action_head: Linear,
    fusion: Option<Fusion>,
    image_embedder: Option<ImageEmbedder>,
    actor: Option<ActorParams>,
    pdqd: Option<Pdqd>,
}

impl Model {
    /// `vocab` lists the `(verb, object)` categories embedded into `T`.
    pub fn new(config: ModelConfig, vocab: &[(String, String)]) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (w, seed) = (c.width, c.seed);
        let hidden = w * c.ffn_ratio;
        let mut store = ParamStore::new();
        let s = &mut store;
        let patch_embed = Linear::new(s, "patch_embed", 3 * c.patch * c.patch, w, true, seed);
        let encoder = (0..c.encoder_depth).map(|d| EncoderBlock::new(s, &format!("encoder{d}"), w, hidden, seed)).collect();
        let human_queries = s.add_normal("queries.human", c.n_queries, w, 1.0, seed);
        let object_queries = s.add_normal("queries.object", c.n_queries, w, 1.0, seed);
        let instance_decoder =
            (0..c.decoder_depth).map(|d| DecoderBlock::new(s, &format!("instance{d}"), w, hidden, seed)).collect();
        let interaction_decoder =
            (0..c.interaction_depth).map(|d| DecoderBlock::new(s, &format!("interaction{d}"), w, hidden, seed)).collect();
        let human_box = BoxHead::new(s, "head.human_box", w, seed);
        let object_box = BoxHead::new(s, "head.object_box", w, seed);
        let object_class = Linear::new(s, "head.object_class", w, c.n_objects + 1, true, seed);
        let action_head = Linear::new(s, "head.action", w, c.n_verbs, true, seed);
        let fusion = (c.action_fusion == ActionFusion::ConcatLinear).then(|| Fusion {
            human: Linear::new(s, "fusion.human", w, w, false, seed),
            object: Linear::new(s, "fusion.object", w, w, true, seed),
        });
        let (image_embedder, actor, text) = if c.use_actor {
            let template = PromptTemplate::by_name(&c.template)?;
            let text = build_dictionary(vocab, &template, c.text_dim, seed)?;
            (
                Some(ImageEmbedder::new(s, "actor.image", w, c.text_dim, seed)),
                Some(ActorParams::new(s, "actor", c.text_dim, w, c.actor_layers, c.n_queries, seed)),
                Some(text),
            )
        } else {
            (None, None, None)
        };
        let pdqd = c.use_pdqd.then(|| Pdqd::new(s, "pdqd", c.n_queries, w, hidden, c.pdqd_depth, c.n_objects, seed));
        Ok(Model {
            positions: sinusoidal_positions(c.image_size / c.patch, w),
            config,
            store,
            text,
            patch_embed,
            encoder,
            human_queries,
            object_queries,
            instance_decoder,
            interaction_decoder,
            human_box,
            object_box,
            object_class,
            action_head,
            fusion,
            image_embedder,
            actor,
            pdqd,
        })
    }

    /// Swaps the prompt template; the dictionary is rebuilt, weights are kept.
    pub fn set_template(&mut self, name: &str, vocab: &[(String, String)]) -> Result<()> {
        let template = PromptTemplate::by_name(name)?;
        if self.config.use_actor {
            self.text = Some(build_dictionary(vocab, &template, self.config.text_dim, self.config.seed)?);
        }
        self.config.template = template.name;
        Ok(())
    }

    /// Returns the patch features `F` and the encoded features `F_e`, both
    /// `S x C'`.
    pub fn encode_image(&self, g: &mut Graph, image: &Tensor) -> Result<(Var, Var)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[1] != self.config.image_size || shape[2] != self.config.image_size {
            return Err(Error::Validation(format!(
                "expected a 3 x {0} x {0} image, got {shape:?}",
                self.config.image_size
            )));
        }
        let patches = g.constant(patchify(image, self.config.patch)?);
        let x = self.patch_embed.forward(g, patches)?;
        let pos = g.constant(self.positions.clone());
        let f = g.add(x, pos)?;
        let mut e = f;
        for block in &self.encoder {
            e = block.forward(g, e)?;
        }
        Ok((f, e))
    }

    /// Decodes `[Q_h ; Q_o']` jointly and splits the result into `V_h, V_o`.
    pub fn instance_decode(&self, g: &mut Graph, q_h: Var, q_o: Var, encoded: Var) -> Result<(Var, Var)> {
        instance_decode_with(g, &self.instance_decoder, q_h, q_o, encoded)
    }

    /// Human boxes, object boxes and object-class logits per slot.
    pub fn predict_instances(&self, g: &mut Graph, v_h: Var, v_o: Var) -> Result<(Var, Var, Var)> {
        let hb = self.human_box.forward(g, v_h)?;
        let ob = self.object_box.forward(g, v_o)?;
        let cls = self.object_class.forward(g, v_o)?;
        Ok((hb, ob, cls))
    }

    pub fn form_action_queries(&self, g: &mut Graph, v_h: Var, v_o: Var) -> Result<Var> {
        match &self.fusion {
            None => form_action_queries(g, v_h, v_o),
            Some(f) => {
                let a = f.human.forward(g, v_h)?;
                let b = f.object.forward(g, v_o)?;
                g.add(a, b)
            }
        }
    }

    pub fn interaction_decode(&self, g: &mut Graph, q_a: Var, encoded: Var) -> Result<Var> {
        nn::decode(g, &self.interaction_decoder, q_a, encoded)
    }

    pub fn predict_actions(&self, g: &mut Graph, v_a: Var) -> Result<Var> {
        self.action_head.forward(g, v_a)
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ForwardOutput> {
        let c = &self.config;
        let (f, f_e) = self.encode_image(g, image)?;

        let actor = match (&self.actor, &self.image_embedder, &self.text) {
            (Some(params), Some(embedder), Some(text)) => {
                let i = embedder.forward(g, f)?;
                let t = g.constant(text.embeddings.clone());
                Some(actor::actor_forward(g, i, t, params)?)
            }
            _ => None,
        };
        let (tokens, pdqd_logits) = match &self.pdqd {
            Some(p) => (Some(g.param(p.tokens.0)), Some(p.forward(g, f_e)?)),
            None => (None, None),
        };

        let q_h = g.param(self.human_queries);
        let mut q_o = g.param(self.object_queries);
        if let Some(p) = tokens {
            q_o = pdqd::enhance_object_queries(g, q_o, p, c.lambda1)?;
        }
        let (v_h, v_o) = self.instance_decode(g, q_h, q_o, f_e)?;
        let v_o_enh = match tokens {
            Some(p) => pdqd::enhance_object_outputs(g, v_o, p, c.lambda2)?,
            None => v_o,
        };
        let (human_boxes, object_boxes, object_logits) = self.predict_instances(g, v_h, v_o_enh)?;

        let mut q_a = self.form_action_queries(g, v_h, v_o)?;
        if let Some(trace) = &actor {
            q_a = actor::enhance_action_queries(g, q_a, trace.queries, c.gamma1)?;
        }
        let mut v_a = self.interaction_decode(g, q_a, f_e)?;
        if let Some(trace) = &actor {
            v_a = actor::enhance_action_outputs(g, v_a, trace.queries, c.gamma2)?;
        }
        let action_logits = self.predict_actions(g, v_a)?;
        Ok(ForwardOutput { human_boxes, object_boxes, object_logits, action_logits, pdqd_logits, actor })
    }

    /// Parameter handles useful for gradient probes.
    pub fn projection_tokens(&self) -> Option<ParamId> {
        self.pdqd.as_ref().map(|p| p.tokens.0)
    }

    pub fn pdqd_module(&self) -> Option<&Pdqd> {
        self.pdqd.as_ref()
    }

    pub fn actor_module(&self) -> Option<&ActorParams> {
        self.actor.as_ref()
    }

    pub fn actor_query_weight(&self, layer: usize) -> Option<ParamId> {
        self.actor.as_ref().and_then(|a| a.layers.get(layer)).map(|l| l.w_q)
    }

    /// Raw per-slot quadruples, before NMS.
    pub fn slot_quads(&self, image: &Tensor) -> Result<Vec<HoiQuad>> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, image)?;
        Ok(assemble_quads(
            g.value(out.human_boxes),
            g.value(out.object_boxes),
            g.value(out.object_logits),
            g.value(out.action_logits),
        ))
    }

    /// Full inference: slot quadruples filtered by NMS.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<HoiQuad>> {
        Ok(nms_filter(&self.slot_quads(image)?, DEFAULT_NMS_IOU))
    }
}

pub fn instance_decode_with(g: &mut Graph, blocks: &[DecoderBlock], q_h: Var, q_o: Var, encoded: Var) -> Result<(Var, Var)> {
    let (hs, os) = (g.value(q_h).dims2(), g.value(q_o).dims2());
    if hs != os {
        return Err(Error::dim("instance_decode", format!("human queries {hs:?}, object queries {os:?}")));
    }
    let joint = g.concat_rows(&[q_h, q_o])?;
    let out = nn::decode(g, blocks, joint, encoded)?;
    Ok((g.slice_rows(out, 0, hs.0)?, g.slice_rows(out, hs.0, hs.0)?))
}

/// `Q_a = V_h + V_o`.
pub fn form_action_queries(g: &mut Graph, v_h: Var, v_o: Var) -> Result<Var> {
    g.add(v_h, v_o)
}

/// One quadruple per slot: the most likely real object class with its
/// softmax probability, and the most likely verb with its sigmoid score.
pub fn assemble_quads(human: &Tensor, object: &Tensor, object_logits: &Tensor, action_logits: &Tensor) -> Vec<HoiQuad> {
    let n_cls = object_logits.cols() - 1;
    (0..human.rows())
        .map(|i| {
            let mut probs = object_logits.row(i).to_vec();
            softmax_in_place(&mut probs);
            let object_class = argmax(&probs[..n_cls]);
            let actions = action_logits.row(i);
            let verb = argmax(actions);
            HoiQuad {
                human: BBox::from_slice(human.row(i)).clipped(),
                object: BBox::from_slice(object.row(i)).clipped(),
                object_class,
                verb,
                object_score: probs[object_class],
                action_score: sigmoid(actions[verb]),
            }
        })
        .collect()
}

/// First index of the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
