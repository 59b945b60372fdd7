//! Seeded synthetic interaction scenes.
//!
//! Humans are tall red rectangles; objects are coloured by class. Every
//! human interacts with one nearby object, and the verb is read off the
//! direction from the human centre to the object centre (six 60° sectors,
//! counter-clockwise from +x with y pointing up). Images are never stored:
//! a scene's seed re-renders it.

mod io;
mod oracle;
mod render;

pub use io::{read_dataset, write_dataset, DATASET_HEADER};
pub use oracle::{oracle_detect, NoiseConfig, OracleDetection};
pub use render::{render_scene, BACKGROUND, HUMAN_COLOR, OBJECT_COLORS};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{BBox, HoiTarget};
use crate::error::{Error, Result};

pub const DEFAULT_VERBS: [&str; 6] = ["ride", "hold", "carry", "push", "kick", "throw"];
pub const DEFAULT_OBJECTS: [&str; 4] = ["bicycle", "ball", "cup", "horse"];
/// Categories with fewer training instances than this are Rare.
pub const RARE_THRESHOLD: usize = 10;

/// Verbs and object classes with their sampling weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub verbs: Vec<(String, f64)>,
    pub objects: Vec<(String, f64)>,
    pub max_humans: usize,
    pub max_objects: usize,
}

/// `weights[i] = ratio^i`.
pub fn geometric_weights(n: usize, ratio: f64) -> Vec<f64> {
    (0..n).map(|i| ratio.powi(i as i32)).collect()
}

impl VocabConfig {
    pub fn skewed(verb_ratio: f64, object_ratio: f64) -> Self {
        let zip = |names: &[&str], w: Vec<f64>| names.iter().map(|s| s.to_string()).zip(w).collect();
        VocabConfig {
            verbs: zip(&DEFAULT_VERBS, geometric_weights(DEFAULT_VERBS.len(), verb_ratio)),
            objects: zip(&DEFAULT_OBJECTS, geometric_weights(DEFAULT_OBJECTS.len(), object_ratio)),
            max_humans: 3,
            max_objects: 4,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            verbs: self.verbs.iter().map(|(v, _)| v.clone()).collect(),
            objects: self.objects.iter().map(|(o, _)| o.clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.verbs.len() != SECTORS {
            return Err(Error::Validation(format!("the direction rule needs {SECTORS} verbs, got {}", self.verbs.len())));
        }
        if self.objects.is_empty() {
            return Err(Error::Validation("no object classes".into()));
        }
        if self.verbs.iter().chain(&self.objects).any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation("sampling weights must be positive".into()));
        }
        if self.max_humans == 0 || self.max_objects < self.max_humans {
            return Err(Error::Validation("need 1 <= max_humans <= max_objects".into()));
        }
        Ok(())
    }
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig::skewed(0.4, 0.5)
    }
}

/// Verb and object names. Category `(v, o)` has id `v · |objects| + o`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
}

impl Vocabulary {
    pub fn n_categories(&self) -> usize {
        self.verbs.len() * self.objects.len()
    }

    pub fn category_id(&self, verb: usize, object: usize) -> usize {
        verb * self.objects.len() + object
    }

    pub fn category(&self, id: usize) -> (usize, usize) {
        (id / self.objects.len(), id % self.objects.len())
    }

    /// `(verb, object)` name pairs in category-id order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.verbs.iter().flat_map(|v| self.objects.iter().map(move |o| (v.clone(), o.clone()))).collect()
    }

    /// Inverse of [`Vocabulary::pairs`]; pairs must form a full grid.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut verbs: Vec<String> = Vec::new();
        let mut objects: Vec<String> = Vec::new();
        for (v, o) in pairs {
            if !verbs.contains(v) {
                verbs.push(v.clone());
            }
            if !objects.contains(o) {
                objects.push(o.clone());
            }
        }
        let vocab = Vocabulary { verbs, objects };
        if vocab.pairs() != pairs {
            return Err(Error::Validation("vocabulary pairs are not a verb-major grid".into()));
        }
        Ok(vocab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntityKind {
    Human,
    Object,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    /// Object class; always 0 for humans.
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub human: usize,
    pub object: usize,
    pub verb: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub interactions: Vec<Interaction>,
}

impl Scene {
    pub fn targets(&self) -> Vec<HoiTarget> {
        self.interactions
            .iter()
            .map(|i| HoiTarget {
                human: self.entities[i.human].bbox,
                object: self.entities[i.object].bbox,
                object_class: self.entities[i.object].class,
                verb: i.verb,
            })
            .collect()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (k, e) in self.entities.iter().enumerate() {
            if !e.bbox.in_unit_square() {
                return Err(Error::Validation(format!("entity {k} box {:?} outside the unit square", e.bbox)));
            }
            let ok = match e.kind {
                EntityKind::Human => e.class == 0,
                EntityKind::Object => e.class < vocab.objects.len(),
            };
            if !ok {
                return Err(Error::Validation(format!("entity {k} has bad class {}", e.class)));
            }
        }
        for i in &self.interactions {
            let kind = |k: usize| self.entities.get(k).map(|e| e.kind);
            if kind(i.human) != Some(EntityKind::Human) || kind(i.object) != Some(EntityKind::Object) {
                return Err(Error::Validation(format!("interaction {i:?} references wrong entities")));
            }
            if i.verb >= vocab.verbs.len() {
                return Err(Error::Validation(format!("verb {} out of range", i.verb)));
            }
        }
        Ok(())
    }
}

const SECTORS: usize = 6;
/// Placement stays this far (radians) inside a sector so the rule is never
/// ambiguous at a boundary.
const SECTOR_MARGIN: f64 = 0.15;

/// Direction sector of `object` seen from `human`.
pub fn direction_bucket(human: &BBox, object: &BBox) -> usize {
    let dx = (object.x1 + object.x2 - human.x1 - human.x2) / 2.0;
    let dy = -(object.y1 + object.y2 - human.y1 - human.y2) / 2.0;
    let angle = dy.atan2(dx).rem_euclid(2.0 * PI);
    ((angle / (2.0 * PI / SECTORS as f64)) as usize).min(SECTORS - 1)
}

fn sample_weighted(rng: &mut ChaCha8Rng, items: &[(String, f64)]) -> usize {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (i, (_, w)) in items.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    items.len() - 1
}

fn separated(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x2 + gap <= b.x1 || b.x2 + gap <= a.x1 || a.y2 + gap <= b.y1 || b.y2 + gap <= a.y1
}

fn centre_distance(a: &BBox, b: &BBox) -> f64 {
    let dx = (a.x1 + a.x2 - b.x1 - b.x2) / 2.0;
    let dy = (a.y1 + a.y2 - b.y1 - b.y2) / 2.0;
    dx.hypot(dy)
}

const GAP: f64 = 0.02;
const ATTEMPTS: usize = 60;
/// Distractor objects keep at least this centre distance from every human.
const DISTRACTOR_DISTANCE: f64 = 0.4;

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox {
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::new(x, y, x + w, y + h)
}

fn fits(b: &BBox, placed: &[Entity]) -> bool {
    b.in_unit_square() && placed.iter().all(|e| separated(b, &e.bbox, GAP))
}

/// One scene, reproducible from `seed`.
pub fn generate_scene(image_id: u64, seed: u64, config: &VocabConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_humans = rng.random_range(1..=config.max_humans);
    let n_extra = rng.random_range(0..=config.max_objects - n_humans);
    let mut entities: Vec<Entity> = Vec::new();
    let mut interactions = Vec::new();

    for _ in 0..n_humans {
        let verb = sample_weighted(&mut rng, &config.verbs);
        let class = sample_weighted(&mut rng, &config.objects);
        let (hw, hh) = (rng.random_range(0.14..0.2), rng.random_range(0.28..0.4));
        let (ow, oh) = (rng.random_range(0.14..0.22), rng.random_range(0.14..0.22));
        let sector = 2.0 * PI / SECTORS as f64;
        for _ in 0..ATTEMPTS {
            let human = random_box(&mut rng, hw, hh);
            let angle = sector * verb as f64 + rng.random_range(SECTOR_MARGIN..sector - SECTOR_MARGIN);
            let dist = rng.random_range(0.24..0.34);
            let (cx, cy) = ((human.x1 + human.x2) / 2.0 + dist * angle.cos(), (human.y1 + human.y2) / 2.0 - dist * angle.sin());
            let object = BBox::from_cxcywh(cx, cy, ow, oh);
            if fits(&human, &entities) && fits(&object, &entities) && separated(&human, &object, GAP) {
                debug_assert_eq!(direction_bucket(&human, &object), verb);
                let h = entities.len();
                entities.push(Entity { kind: EntityKind::Human, class: 0, bbox: human });
                entities.push(Entity { kind: EntityKind::Object, class, bbox: object });
                interactions.push(Interaction { human: h, object: h + 1, verb });
                break;
            }
        }
    }
    for _ in 0..n_extra {
        let class = sample_weighted(&mut rng, &config.objects);
        let (ow, oh) = (rng.random_range(0.14..0.22), rng.random_range(0.14..0.22));
        for _ in 0..ATTEMPTS {
            let b = random_box(&mut rng, ow, oh);
            let far = entities
                .iter()
                .filter(|e| e.kind == EntityKind::Human)
                .all(|e| centre_distance(&e.bbox, &b) >= DISTRACTOR_DISTANCE);
            if far && fits(&b, &entities) {
                entities.push(Entity { kind: EntityKind::Object, class, bbox: b });
                break;
            }
        }
    }
    Ok(Scene { image_id, seed, entities, interactions })
}

/// Seed of scene `index` under `master` (SplitMix64 of their combination).
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` scenes with ids `first_id..first_id + count`.
pub fn generate_corpus(master: u64, first_id: u64, count: usize, config: &VocabConfig) -> Result<Vec<Scene>> {
    (0..count as u64).map(|i| generate_scene(first_id + i, scene_seed(master, first_id + i), config)).collect()
}

/// Interaction counts per category id.
pub fn category_counts(scenes: &[Scene], vocab: &Vocabulary) -> Vec<usize> {
    let mut counts = vec![0; vocab.n_categories()];
    for s in scenes {
        for i in &s.interactions {
            counts[vocab.category_id(i.verb, s.entities[i.object].class)] += 1;
        }
    }
    counts
}

/// Rare flags per category: training count below `threshold`.
pub fn rare_categories(train_counts: &[usize], threshold: usize) -> Vec<bool> {
    train_counts.iter().map(|&c| c < threshold).collect()
}
