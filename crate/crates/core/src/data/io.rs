//! Dataset files.
//!
//! ```text
//! #hoi-scenes v1
//! <image_id>\t<seed>\t<entities>\t<interactions>
//! ```
//!
//! `entities` is `;`-separated `h|o:class:x1,y1,x2,y2`; `interactions` is
//! `;`-separated `human-object-verb` entity indices. Coordinates are written
//! in shortest round-trip form, so reading back is exact.

use std::fs;
use std::path::Path;

use super::{Entity, EntityKind, Interaction, Scene};
use crate::detector::BBox;
use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "#hoi-scenes v1";

fn format_scene(s: &Scene) -> String {
    let entities: Vec<String> = s
        .entities
        .iter()
        .map(|e| {
            let k = if e.kind == EntityKind::Human { 'h' } else { 'o' };
            let b = e.bbox;
            format!("{k}:{}:{},{},{},{}", e.class, b.x1, b.y1, b.x2, b.y2)
        })
        .collect();
    let interactions: Vec<String> = s.interactions.iter().map(|i| format!("{}-{}-{}", i.human, i.object, i.verb)).collect();
    format!("{}\t{}\t{}\t{}", s.image_id, s.seed, entities.join(";"), interactions.join(";"))
}

fn parse_entity(s: &str) -> std::result::Result<Entity, String> {
    let mut parts = s.splitn(3, ':');
    let (kind, class, coords) = match (parts.next(), parts.next(), parts.next()) {
        (Some(k), Some(c), Some(b)) => (k, c, b),
        _ => return Err(format!("entity {s:?} is not kind:class:box")),
    };
    let kind = match kind {
        "h" => EntityKind::Human,
        "o" => EntityKind::Object,
        _ => return Err(format!("unknown entity kind {kind:?}")),
    };
    let class = class.parse().map_err(|_| format!("bad class {class:?}"))?;
    let v: Vec<f64> = coords.split(',').map(|c| c.parse::<f64>().map_err(|_| format!("bad coordinate {c:?}"))).collect::<std::result::Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("box has {} coordinates", v.len()));
    }
    let bbox = BBox::from_slice(&v);
    if !bbox.in_unit_square() {
        return Err(format!("box {bbox:?} is not a proper box in the unit square"));
    }
    Ok(Entity { kind, class, bbox })
}

fn parse_interaction(s: &str, entities: &[Entity]) -> std::result::Result<Interaction, String> {
    let v: Vec<usize> = s.split('-').map(|x| x.parse().map_err(|_| format!("bad interaction {s:?}"))).collect::<std::result::Result<_, _>>()?;
    if v.len() != 3 {
        return Err(format!("interaction {s:?} is not human-object-verb"));
    }
    let i = Interaction { human: v[0], object: v[1], verb: v[2] };
    let kind = |k: usize| entities.get(k).map(|e| e.kind);
    if kind(i.human) != Some(EntityKind::Human) || kind(i.object) != Some(EntityKind::Object) {
        return Err(format!("interaction {s:?} references the wrong entities"));
    }
    Ok(i)
}

fn parse_scene(line: &str) -> std::result::Result<Scene, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", f.len()));
    }
    let image_id = f[0].parse().map_err(|_| format!("bad image id {:?}", f[0]))?;
    let seed = f[1].parse().map_err(|_| format!("bad seed {:?}", f[1]))?;
    let entities: Vec<Entity> = if f[2].is_empty() { Vec::new() } else { f[2].split(';').map(parse_entity).collect::<std::result::Result<_, _>>()? };
    let interactions = if f[3].is_empty() {
        Vec::new()
    } else {
        f[3].split(';').map(|s| parse_interaction(s, &entities)).collect::<std::result::Result<_, _>>()?
    };
    Ok(Scene { image_id, seed, entities, interactions })
}

pub fn write_dataset(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut text = format!("{DATASET_HEADER}\n");
    for s in scenes {
        text.push_str(&format_scene(s));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// An empty file reads as an empty corpus.
pub fn read_dataset(path: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, DATASET_HEADER)) => {}
        Some(_) => return Err(err(1, format!("missing {DATASET_HEADER:?} header"))),
    }
    lines.filter(|(_, l)| !l.is_empty()).map(|(n, l)| parse_scene(l).map_err(|m| err(n + 1, m))).collect()
}
