use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{scene_seed, EntityKind, Scene};
use crate::detector::BBox;

/// Imperfections of the stand-in object detector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub drop_prob: f64,
    /// Confidences are uniform on `[conf_min, conf_max]`.
    pub conf_min: f64,
    pub conf_max: f64,
    /// Standard deviation of independent corner jitter.
    pub box_jitter: f64,
}

impl NoiseConfig {
    /// Every object reported with confidence 0.9 and its exact box.
    pub fn off() -> Self {
        NoiseConfig { drop_prob: 0.0, conf_min: 0.9, conf_max: 0.9, box_jitter: 0.0 }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { drop_prob: 0.05, conf_min: 0.35, conf_max: 1.0, box_jitter: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDetection {
    pub class: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

/// Reports the scene's objects. Each entity's draw depends only on the scene
/// seed and the entity index.
pub fn oracle_detect(scene: &Scene, noise: &NoiseConfig) -> Vec<OracleDetection> {
    let mut out = Vec::new();
    for (k, e) in scene.entities.iter().enumerate() {
        if e.kind != EntityKind::Object {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(scene.seed ^ 0x0D37_EC70, k as u64));
        if noise.drop_prob > 0.0 && rng.random::<f64>() < noise.drop_prob {
            continue;
        }
        let confidence = if noise.conf_max > noise.conf_min {
            rng.random_range(noise.conf_min..=noise.conf_max)
        } else {
            noise.conf_min
        };
        let bbox = if noise.box_jitter > 0.0 {
            let n = Normal::new(0.0, noise.box_jitter).expect("finite jitter");
            let v: Vec<f64> = e.bbox.to_array().iter().map(|c| c + n.sample(&mut rng)).collect();
            let b = BBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3]));
            b.clipped()
        } else {
            e.bbox
        };
        out.push(OracleDetection { class: e.class, bbox, confidence: confidence.clamp(0.0, 1.0) });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, Entity, VocabConfig};
    use crate::pdqd::{make_pseudo_labels, DEFAULT_TAU};

    #[test]
    fn noise_off_reports_every_object_at_point_nine() {
        for s in generate_corpus(3, 0, 50, &VocabConfig::default()).unwrap() {
            let dets = oracle_detect(&s, &NoiseConfig::off());
            let objects: Vec<&Entity> = s.entities.iter().filter(|e| e.kind == EntityKind::Object).collect();
            assert_eq!(dets.len(), objects.len());
            for (d, e) in dets.iter().zip(objects) {
                assert_eq!((d.class, d.bbox, d.confidence), (e.class, e.bbox, 0.9));
            }
        }
    }

    #[test]
    fn full_drop_gives_empty_labels() {
        let noise = NoiseConfig { drop_prob: 1.0, ..NoiseConfig::default() };
        for s in generate_corpus(4, 0, 20, &VocabConfig::default()).unwrap() {
            let dets = oracle_detect(&s, &noise);
            assert!(dets.is_empty());
            let pairs: Vec<(usize, f64)> = dets.iter().map(|d| (d.class, d.confidence)).collect();
            assert!(make_pseudo_labels(&pairs, 4, DEFAULT_TAU).unwrap().labels.iter().all(|&b| !b));
        }
    }

    #[test]
    fn max_rule_over_one_class() {
        let y = make_pseudo_labels(&[(2, 0.6), (2, 0.4)], 4, DEFAULT_TAU).unwrap();
        assert_eq!(y.labels, vec![false, false, true, false]);
    }

    #[test]
    fn draws_are_per_entity_and_deterministic() {
        let s = crate::data::generate_scene(0, 1234, &VocabConfig::default()).unwrap();
        let noise = NoiseConfig::default();
        assert_eq!(oracle_detect(&s, &noise), oracle_detect(&s, &noise));
        for d in oracle_detect(&s, &noise) {
            assert!((0.35..=1.0).contains(&d.confidence) && d.bbox.in_unit_square());
        }
        // Dropping a trailing entity leaves earlier draws unchanged.
        let mut shorter = s.clone();
        if shorter.entities.last().map(|e| e.kind) == Some(EntityKind::Object) && shorter.entities.len() > 2 {
            shorter.entities.pop();
            shorter.interactions.retain(|i| i.object < shorter.entities.len());
            let a = oracle_detect(&s, &noise);
            let b = oracle_detect(&shorter, &noise);
            assert_eq!(&a[..b.len()], &b[..]);
        }
    }
}
