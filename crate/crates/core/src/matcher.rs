//! Bipartite matching of prediction slots to ground-truth interactions and
//! the set-prediction loss.

use serde::{Deserialize, Serialize};

use crate::detector::{giou_loss_rows, l1_rows, BBox, ForwardOutput, HoiTarget};
use crate::error::{Error, Result};
use crate::numerics::{bce_logit, Graph, Tensor, Var};
use crate::pdqd::{multilabel_bce, PseudoLabels};

/// Cost of a filler entry when a rectangular problem is squared up.
pub const PAD_COST: f64 = 1e6;
/// Totals this close (relative) count as tied.
const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub box_l1: f64,
    pub giou: f64,
    pub class: f64,
    pub action: f64,
    /// Weight of the pseudo-label term.
    pub pdqd: f64,
    /// Relative class weight of unmatched slots.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { box_l1: 5.0, giou: 2.0, class: 1.0, action: 1.0, pdqd: 1.0, no_object: 0.1 }
    }
}

/// Per-slot prediction values, detached from any graph.
#[derive(Clone, Debug)]
pub struct SlotValues {
    pub human_boxes: Tensor,
    pub object_boxes: Tensor,
    pub object_logits: Tensor,
    pub action_logits: Tensor,
}

impl SlotValues {
    pub fn from_graph(g: &Graph, out: &ForwardOutput) -> Self {
        SlotValues {
            human_boxes: g.value(out.human_boxes).clone(),
            object_boxes: g.value(out.object_boxes).clone(),
            object_logits: g.value(out.object_logits).clone(),
            action_logits: g.value(out.action_logits).clone(),
        }
    }

    pub fn n_slots(&self) -> usize {
        self.human_boxes.rows()
    }
}

fn log_softmax_at(logits: &[f64], k: usize) -> f64 {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    logits[k] - m - z.ln()
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    (0..n).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
}

/// Matching cost of slot `slot` against `gt`.
pub fn pair_cost(pred: &SlotValues, slot: usize, gt: &HoiTarget, w: &LossWeights) -> f64 {
    let h = BBox::from_slice(pred.human_boxes.row(slot));
    let o = BBox::from_slice(pred.object_boxes.row(slot));
    let l1 = h.l1(&gt.human) + o.l1(&gt.object);
    let giou = (1.0 - h.giou(&gt.human)) + (1.0 - o.giou(&gt.object));
    let cls = -log_softmax_at(pred.object_logits.row(slot), gt.object_class);
    let actions = pred.action_logits.row(slot);
    let target = one_hot(actions.len(), gt.verb);
    let act = actions.iter().zip(&target).map(|(&x, &t)| bce_logit(x, t)).sum::<f64>() / actions.len() as f64;
    w.box_l1 * l1 + w.giou * giou + w.class * cls + w.action * act
}

/// Rows are prediction slots, columns ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("cost_matrix", format!("{} entries for {rows}x{cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Squares the matrix up with [`PAD_COST`] entries.
    pub fn padded(&self) -> CostMatrix {
        let n = self.rows.max(self.cols);
        let data = (0..n * n)
            .map(|k| {
                let (r, c) = (k / n, k % n);
                if r < self.rows && c < self.cols {
                    self.get(r, c)
                } else {
                    PAD_COST
                }
            })
            .collect();
        CostMatrix { rows: n, cols: n, data }
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

pub fn cost_matrix(pred: &SlotValues, gts: &[HoiTarget], w: &LossWeights) -> Result<CostMatrix> {
    let data = (0..pred.n_slots()).flat_map(|s| gts.iter().map(move |gt| (s, gt))).map(|(s, gt)| pair_cost(pred, s, gt, w)).collect();
    CostMatrix::new(pred.n_slots(), gts.len(), data)
}

/// `(slot, gt)` pairs sorted by slot.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchAssignment {
    pub fn gt_for_slot(&self, slot: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == slot).map(|p| p.1)
    }
}

/// Shortest-augmenting-path Hungarian method with potentials for an
/// `n x m` problem, `n <= m`. Returns the column of each row.
fn solve_rect(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Optimal pairs over the given row and column subsets.
fn optimal_pairs(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    if rows.len() <= cols.len() {
        let assign = solve_rect(rows.len(), cols.len(), |i, j| cost.get(rows[i], cols[j]));
        rows.iter().zip(assign).map(|(&r, j)| (r, cols[j])).collect()
    } else {
        let assign = solve_rect(cols.len(), rows.len(), |i, j| cost.get(rows[j], cols[i]));
        cols.iter().zip(assign).map(|(&c, i)| (rows[i], c)).collect()
    }
}

/// Minimum-total-cost matching covering the smaller side. Among optimal
/// matchings the one whose slot-sorted pair list is lexicographically
/// smallest is returned.
pub fn hungarian_assign(cost: &CostMatrix) -> MatchAssignment {
    let all_rows: Vec<usize> = (0..cost.rows).collect();
    let all_cols: Vec<usize> = (0..cost.cols).collect();
    let best = cost.total(&optimal_pairs(cost, &all_rows, &all_cols));
    let tol = TIE_TOL * (1.0 + best.abs());
    let target = cost.rows.min(cost.cols);

    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_total = 0.0;
    for r in 0..cost.rows {
        if fixed.len() == target {
            break;
        }
        for c in 0..cost.cols {
            if fixed.iter().any(|p| p.1 == c) {
                continue;
            }
            let rest_rows: Vec<usize> = (r + 1..cost.rows).collect();
            let rest_cols: Vec<usize> = (0..cost.cols).filter(|&k| k != c && !fixed.iter().any(|p| p.1 == k)).collect();
            let rest = optimal_pairs(cost, &rest_rows, &rest_cols);
            if fixed.len() + 1 + rest.len() < target {
                continue;
            }
            let total = fixed_total + cost.get(r, c) + cost.total(&rest);
            if total <= best + tol {
                fixed.push((r, c));
                fixed_total += cost.get(r, c);
                break;
            }
        }
    }
    MatchAssignment { pairs: fixed }
}

/// Scalar parts of [`set_loss`] for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class: f64,
    pub box_l1: f64,
    pub giou: f64,
    pub action: f64,
    pub pdqd: f64,
    pub total: f64,
}

/// Weighted set-prediction loss.
///
/// Every slot pays object cross entropy against its matched class, or
/// "no object" with relative weight `no_object`, averaged by total weight.
/// Matched slots add box L1, `1 - GIoU` and mean action BCE, each summed
/// over both boxes and divided by `max(#gt, 1)`. The pseudo-label BCE on the
/// pooled PDQD logits is added with weight `pdqd` when both are present.
pub fn set_loss(
    g: &mut Graph,
    out: &ForwardOutput,
    gts: &[HoiTarget],
    assignment: &MatchAssignment,
    pseudo: Option<&PseudoLabels>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (n_slots, n_cls1) = g.value(out.object_logits).dims2();
    let no_object = n_cls1 - 1;
    for &(s, t) in &assignment.pairs {
        if s >= n_slots || t >= gts.len() {
            return Err(Error::Contract(format!("assignment pair ({s}, {t}) out of range")));
        }
    }
    let mut parts = LossBreakdown::default();

    let logp = g.log_softmax_rows(out.object_logits)?;
    let mut targets: Vec<(usize, usize)> = (0..n_slots).map(|s| (s, no_object)).collect();
    let mut weights = vec![w.no_object; n_slots];
    for &(s, t) in &assignment.pairs {
        targets[s].1 = gts[t].object_class;
        weights[s] = 1.0;
    }
    let picked = g.pick(logp, &targets)?;
    let wsum: f64 = weights.iter().sum();
    let wcol = g.constant(Tensor::matrix(n_slots, 1, weights));
    let weighted = g.mul(picked, wcol)?;
    let ce = g.sum(weighted)?;
    let class = g.scale(ce, -w.class / wsum)?;
    parts.class = g.value(class).item();
    let mut total = class;

    if !assignment.pairs.is_empty() {
        let slots: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched: Vec<&HoiTarget> = assignment.pairs.iter().map(|p| &gts[p.1]).collect();
        let norm = 1.0 / gts.len().max(1) as f64;
        let hb = g.select_rows(out.human_boxes, &slots)?;
        let ob = g.select_rows(out.object_boxes, &slots)?;
        let gt_h: Vec<BBox> = matched.iter().map(|t| t.human).collect();
        let gt_o: Vec<BBox> = matched.iter().map(|t| t.object).collect();

        let l1h = l1_rows(g, hb, &gt_h)?;
        let l1o = l1_rows(g, ob, &gt_o)?;
        let l1 = g.add(l1h, l1o)?;
        let l1 = g.sum(l1)?;
        let l1 = g.scale(l1, w.box_l1 * norm)?;
        parts.box_l1 = g.value(l1).item();

        let gh = giou_loss_rows(g, hb, &gt_h)?;
        let go = giou_loss_rows(g, ob, &gt_o)?;
        let gi = g.add(gh, go)?;
        let gi = g.sum(gi)?;
        let gi = g.scale(gi, w.giou * norm)?;
        parts.giou = g.value(gi).item();

        let acts = g.select_rows(out.action_logits, &slots)?;
        let n_verbs = g.value(acts).cols();
        let act_targets: Vec<f64> = matched.iter().flat_map(|t| one_hot(n_verbs, t.verb)).collect();
        let bce = g.bce_with_logits(acts, &act_targets)?;
        let bce = g.sum(bce)?;
        let act = g.scale(bce, w.action * norm / n_verbs as f64)?;
        parts.action = g.value(act).item();

        total = g.add(total, l1)?;
        total = g.add(total, gi)?;
        total = g.add(total, act)?;
    }

    if let (Some(logits), Some(labels)) = (out.pdqd_logits, pseudo) {
        if w.pdqd != 0.0 {
            let lo = multilabel_bce(g, logits, labels)?;
            let lo = g.scale(lo, w.pdqd)?;
            parts.pdqd = g.value(lo).item();
            total = g.add(total, lo)?;
        }
    }
    parts.total = g.value(total).item();
    Ok((total, parts))
}
