use super::{EntityKind, Scene};
use crate::numerics::Tensor;

pub const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.12];
/// Humans own the saturated-red band; no object colour enters it.
pub const HUMAN_COLOR: [f64; 3] = [0.95, 0.15, 0.15];
pub const OBJECT_COLORS: [[f64; 3]; 6] = [
    [0.15, 0.8, 0.25],
    [0.2, 0.35, 0.95],
    [0.9, 0.85, 0.2],
    [0.65, 0.3, 0.9],
    [0.2, 0.85, 0.85],
    [0.95, 0.6, 0.85],
];

/// Rasterises `scene` into a `3 x h x w` image. A pixel is painted when its
/// centre lies inside the half-open box; later entities overdraw earlier ones.
pub fn render_scene(scene: &Scene, h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        data[ch * h * w..(ch + 1) * h * w].fill(BACKGROUND[ch]);
    }
    for e in &scene.entities {
        let color = match e.kind {
            EntityKind::Human => HUMAN_COLOR,
            EntityKind::Object => OBJECT_COLORS[e.class % OBJECT_COLORS.len()],
        };
        let b = &e.bbox;
        // Pixel centres (i + 0.5) / n inside [lo, hi).
        let span = |lo: f64, hi: f64, n: usize| {
            let first = (lo * n as f64 - 0.5).ceil().max(0.0) as usize;
            let end = ((hi * n as f64 - 0.5).ceil().max(0.0) as usize).min(n);
            first..end.max(first)
        };
        for y in span(b.y1, b.y2, h) {
            for x in span(b.x1, b.x2, w) {
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = color[ch];
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("shape matches data")
}
