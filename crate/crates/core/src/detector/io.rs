//! Prediction files.
//!
//! ```text
//! #hoi-preds v1
//! <image_id>\t<quad>;<quad>;...
//! ```
//!
//! Each quad is twelve comma-separated fields:
//! `hx1,hy1,hx2,hy2,ox1,oy1,ox2,oy2,object,verb,object_score,action_score`.
//! An image with no predictions keeps its line with an empty quad list.

use std::fs;
use std::path::Path;

use super::{BBox, HoiQuad};
use crate::error::{Error, Result};

pub const PREDICTIONS_HEADER: &str = "#hoi-preds v1";

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub quads: Vec<HoiQuad>,
}

fn format_quad(q: &HoiQuad) -> String {
    let mut f: Vec<String> = q.human.to_array().iter().chain(&q.object.to_array()).map(|v| v.to_string()).collect();
    f.push(q.object_class.to_string());
    f.push(q.verb.to_string());
    f.push(q.object_score.to_string());
    f.push(q.action_score.to_string());
    f.join(",")
}

fn parse_quad(s: &str) -> std::result::Result<HoiQuad, String> {
    let f: Vec<&str> = s.split(',').collect();
    if f.len() != 12 {
        return Err(format!("quad has {} fields, expected 12", f.len()));
    }
    let num = |i: usize| f[i].parse::<f64>().map_err(|_| format!("field {} = {:?} is not a number", i + 1, f[i]));
    let idx = |i: usize| f[i].parse::<usize>().map_err(|_| format!("field {} = {:?} is not an index", i + 1, f[i]));
    let human = BBox::new(num(0)?, num(1)?, num(2)?, num(3)?);
    let object = BBox::new(num(4)?, num(5)?, num(6)?, num(7)?);
    if !human.is_proper() || !object.is_proper() {
        return Err("box corners not ordered".into());
    }
    let (object_score, action_score) = (num(10)?, num(11)?);
    if !(0.0..=1.0).contains(&object_score) || !(0.0..=1.0).contains(&action_score) {
        return Err("score outside [0, 1]".into());
    }
    Ok(HoiQuad { human, object, object_class: idx(8)?, verb: idx(9)?, object_score, action_score })
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = format!("{PREDICTIONS_HEADER}\n");
    for r in records {
        let quads: Vec<String> = r.quads.iter().map(format_quad).collect();
        text.push_str(&format!("{}\t{}\n", r.image_id, quads.join(";")));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, msg: String| Error::Parse { path: path.display().to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, PREDICTIONS_HEADER)) => {}
        _ => return Err(err(1, format!("missing {PREDICTIONS_HEADER:?} header"))),
    }
    let mut out = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| err(n + 1, "missing tab".into()))?;
        let image_id = id.parse().map_err(|_| err(n + 1, format!("bad image id {id:?}")))?;
        let quads = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(';').map(|q| parse_quad(q).map_err(|m| err(n + 1, m))).collect::<Result<_>>()?
        };
        out.push(PredictionRecord { image_id, quads });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let q = HoiQuad {
            human: BBox::new(0.1, 0.2, 0.3, 0.4),
            object: BBox::new(0.5, 0.5, 0.9, 1.0),
            object_class: 2,
            verb: 5,
            object_score: 0.123456789,
            action_score: 1.0 / 3.0,
        };
        let recs = vec![PredictionRecord { image_id: 4, quads: vec![q, q] }, PredictionRecord { image_id: 9, quads: vec![] }];
        write_predictions(&path, &recs).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), recs);

        fs::write(&path, format!("{PREDICTIONS_HEADER}\n1\t0.1,0.2,0.3\n")).unwrap();
        assert!(matches!(read_predictions(&path), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "1\t\n").unwrap();
        assert!(matches!(read_predictions(&path), Err(Error::Parse { line: 1, .. })));
    }
}
