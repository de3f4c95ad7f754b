//! Matchability-aware loss, bipartite matching, and the weighted objective.

use serde::{Deserialize, Serialize};

use crate::align_head::{sigmoid, LogitBlock};
use crate::geometry::{giou_unchecked, iou_unchecked, l1, BoxCxCyWH};
use crate::matrix::{BinaryMatrix, Matrix};
use crate::supervision::CorrespondenceSet;

/// Log arguments below this are floored before taking the log.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalConfig {
    pub gamma: f64,
    pub alpha_neg: f64,
}

impl Default for MalConfig {
    fn default() -> Self {
        Self {
            gamma: 1.5,
            alpha_neg: 1.0,
        }
    }
}

impl MalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.alpha_neg.is_finite() && self.alpha_neg > 0.0) {
            return Err(format!("alpha_neg must be finite and > 0, got {}", self.alpha_neg));
        }
        Ok(())
    }
}

/// `base^g` with a zero base giving zero for every `g`, including 0.
#[inline]
fn pow0(base: f64, g: f64) -> f64 {
    if base <= 0.0 {
        0.0
    } else {
        base.powf(g)
    }
}

#[inline]
fn ln_floor(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Loss for one probability `p`, soft target `q` and binary label `y`.
pub fn mal(p: f64, q: f64, y: bool, cfg: &MalConfig) -> f64 {
    let g = cfg.gamma;
    if y {
        -(pow0(q, g) * ln_floor(p) + pow0(1.0 - q, g) * ln_floor(1.0 - p))
    } else {
        -cfg.alpha_neg * pow0(p, g) * ln_floor(1.0 - p)
    }
}

/// Derivative of [`mal`] with respect to `p` where no log argument is
/// floored.
pub fn mal_grad(p: f64, q: f64, y: bool, cfg: &MalConfig) -> f64 {
    let g = cfg.gamma;
    if y {
        -pow0(q, g) / p + pow0(1.0 - q, g) / (1.0 - p)
    } else {
        let focal = if g == 0.0 || p <= 0.0 {
            0.0
        } else {
            g * p.powf(g - 1.0) * (1.0 - p).ln()
        };
        cfg.alpha_neg * (pow0(p, g) / (1.0 - p) - focal)
    }
}

/// Derivative of `mal(sigmoid(s), q, y)` with respect to the logit `s`,
/// written so it stays finite for saturated probabilities.
pub fn mal_grad_logit(s: f64, q: f64, y: bool, cfg: &MalConfig) -> f64 {
    let p = sigmoid(s);
    let g = cfg.gamma;
    if y {
        -pow0(q, g) * (1.0 - p) + pow0(1.0 - q, g) * p
    } else {
        let focal = if g == 0.0 || p <= 0.0 {
            0.0
        } else {
            g * pow0(p, g) * (1.0 - p) * (-s.max(0.0) - (-s.abs()).exp().ln_1p())
        };
        // ln(1 - p) = -softplus(s), evaluated stably above.
        cfg.alpha_neg * (pow0(p, g) * p - focal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub query: f64,
    pub attr: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub giou: f64,
    pub fgl: f64,
    pub ddf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            query: 1.0,
            attr: 1.0,
            box_: 5.0,
            giou: 2.0,
            fgl: 0.15,
            ddf: 1.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.query, self.attr, self.box_, self.giou, self.fgl, self.ddf];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("loss weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            box_: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Assignment {
    /// `(pred_index, gt_index)`, sorted by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl Assignment {
    pub fn gt_of(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|&(_, g)| g)
    }
}

/// Square minimum-cost assignment with dual potentials (shortest
/// augmenting paths). Returns `col_of_row` and `(u, v)` such that
/// `cost[i][j] - u[i] - v[j] >= 0` with equality on the assignment.
fn solve_square(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    (col_of_row, u[1..].to_vec(), v[1..].to_vec())
}

fn square_cost(cost: &Matrix, rows: &[usize], cols: &[usize], n_real_cols: usize) -> (Vec<Vec<f64>>, f64) {
    // Columns at or beyond `n_real_cols` are zero-cost dummies.
    let n = rows.len();
    let mut sq = vec![vec![0.0; n]; n];
    for (a, &r) in rows.iter().enumerate() {
        for (b, &c) in cols.iter().enumerate() {
            if c < n_real_cols && r < cost.rows() {
                sq[a][b] = cost.get(r, c);
            }
        }
    }
    let (assign, _, _) = solve_square(&sq);
    let total = assign.iter().enumerate().map(|(a, &b)| sq[a][b]).sum();
    (sq, total)
}

/// Minimum-cost assignment of `min(rows, cols)` pairs. Among optimal
/// assignments the lexicographically smallest sorted pair list wins.
pub fn linear_assignment(cost: &Matrix) -> Vec<(usize, usize)> {
    let (nr, nc) = (cost.rows(), cost.cols());
    if nr == 0 || nc == 0 {
        return Vec::new();
    }
    assert!(cost.is_finite(), "assignment costs must be finite");
    let n = nr.max(nc);
    // Padded square problem: dummy rows and columns cost nothing.
    let rows: Vec<usize> = (0..n).collect();
    let cols: Vec<usize> = (0..n).collect();
    let (sq, best) = square_cost(cost, &rows, &cols, nc);
    let (_, u, v) = solve_square(&sq);
    let scale = cost.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * best.abs().max(1.0) * (n as f64);
    let dual_tol = 1e-7 * scale * (n as f64);

    let mut free_rows: Vec<usize> = (0..n).collect();
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut remaining = best;
    let mut pairs = Vec::new();
    for i in 0..nr {
        free_rows.retain(|&r| r != i);
        let mut chosen = None;
        for &j in free_cols.iter().filter(|&&j| j < nc) {
            let c = cost.get(i, j);
            if c - u[i] - v[j] > dual_tol {
                continue;
            }
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&x| x != j).collect();
            let (_, rest) = square_cost(cost, &free_rows, &rest_cols, nc);
            if c + rest <= remaining + tol {
                chosen = Some((j, c + rest));
                break;
            }
        }
        match chosen {
            Some((j, total)) => {
                free_cols.retain(|&x| x != j);
                remaining = total - cost.get(i, j);
                pairs.push((i, j));
            }
            None => {
                // Prediction left unmatched: it takes any dummy column.
                let dummy = *free_cols.iter().find(|&&j| j >= nc).expect("a dummy column remains");
                free_cols.retain(|&x| x != dummy);
            }
        }
    }
    pairs
}

pub fn assignment_cost(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
}

/// Matching cost between every prediction and every ground-truth object.
/// The class term averages the predicted probability over the object's
/// positive query columns.
pub fn matching_cost(
    pred_boxes: &[BoxCxCyWH],
    s_query: &LogitBlock,
    gt_boxes: &[BoxCxCyWH],
    m_q: &BinaryMatrix,
    w: &CostWeights,
) -> Matrix {
    let mut cost = Matrix::zeros(pred_boxes.len(), gt_boxes.len());
    for (i, pb) in pred_boxes.iter().enumerate() {
        let px = pb.to_xyxy();
        for (g, gb) in gt_boxes.iter().enumerate() {
            let cols: Vec<usize> = (0..m_q.cols()).filter(|&j| m_q.get(g, j)).collect();
            let cls = if cols.is_empty() {
                0.0
            } else {
                cols.iter().map(|&j| s_query.prob(i, j)).sum::<f64>() / cols.len() as f64
            };
            let c = -w.class * cls + w.box_ * l1(pb, gb) - w.giou * giou_unchecked(&px, &gb.to_xyxy());
            cost.set(i, g, c);
        }
    }
    cost
}

pub fn hungarian_match(
    pred_boxes: &[BoxCxCyWH],
    s_query: &LogitBlock,
    gt_boxes: &[BoxCxCyWH],
    m_q: &BinaryMatrix,
    w: &CostWeights,
) -> Assignment {
    let cost = matching_cost(pred_boxes, s_query, gt_boxes, m_q, w);
    let pairs = linear_assignment(&cost);
    let unmatched = (0..pred_boxes.len())
        .filter(|i| !pairs.iter().any(|(p, _)| p == i))
        .collect();
    Assignment { pairs, unmatched }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLosses {
    pub l_query: f64,
    pub l_attr: f64,
    /// Gradients with respect to the logits, masked columns zero.
    pub d_query: Matrix,
    pub d_attr: Matrix,
    pub n_pos: usize,
    /// Set when there were no positives and the normalizer was clamped.
    pub no_positives: bool,
}

fn block_loss(
    s: &LogitBlock,
    targets: &BinaryMatrix,
    assignment: &Assignment,
    quality: &[f64],
    norm: f64,
    cfg: &MalConfig,
) -> (f64, Matrix) {
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(s.n_pred(), s.n_cols());
    for i in 0..s.n_pred() {
        let gt = assignment.gt_of(i);
        for j in 0..s.n_cols() {
            if !s.mask[j] {
                continue;
            }
            let y = gt.is_some_and(|g| targets.get(g, j));
            let logit = s.values.get(i, j);
            loss += mal(sigmoid(logit), quality[i], y, cfg);
            grad.set(i, j, mal_grad_logit(logit, quality[i], y, cfg) / norm);
        }
    }
    (loss / norm, grad)
}

/// IoU soft targets per prediction: the IoU with its matched ground truth,
/// zero when unmatched.
pub fn soft_targets(pred_boxes: &[BoxCxCyWH], gt_boxes: &[BoxCxCyWH], a: &Assignment) -> Vec<f64> {
    let mut q = vec![0.0; pred_boxes.len()];
    for &(i, g) in &a.pairs {
        q[i] = iou_unchecked(&pred_boxes[i].to_xyxy(), &gt_boxes[g].to_xyxy());
    }
    q
}

pub fn semantic_losses(
    s_query: &LogitBlock,
    s_attr: &LogitBlock,
    assignment: &Assignment,
    pred_boxes: &[BoxCxCyWH],
    cs: &CorrespondenceSet,
    cfg: &MalConfig,
) -> SemanticLosses {
    let n_pos = assignment.pairs.len();
    let norm = n_pos.max(1) as f64;
    let q = soft_targets(pred_boxes, &cs.gt_boxes, assignment);
    let (l_query, d_query) = block_loss(s_query, &cs.m_q, assignment, &q, norm, cfg);
    let (l_attr, d_attr) = block_loss(s_attr, &cs.m_a, assignment, &q, norm, cfg);
    SemanticLosses {
        l_query,
        l_attr,
        d_query,
        d_attr,
        n_pos,
        no_positives: n_pos == 0,
    }
}

/// Mean L1 (summed over the four normalized coordinates) and mean
/// `1 - giou` over matched pairs. The flag is set for an empty assignment.
pub fn localization_losses(pred_boxes: &[BoxCxCyWH], gt_boxes: &[BoxCxCyWH], a: &Assignment) -> (f64, f64, bool) {
    if a.pairs.is_empty() {
        return (0.0, 0.0, true);
    }
    let n = a.pairs.len() as f64;
    let mut lb = 0.0;
    let mut lg = 0.0;
    for &(i, g) in &a.pairs {
        lb += l1(&pred_boxes[i], &gt_boxes[g]);
        lg += 1.0 - giou_unchecked(&pred_boxes[i].to_xyxy(), &gt_boxes[g].to_xyxy());
    }
    (lb / n, lg / n, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_query: f64,
    pub l_attr: f64,
    pub l_box: f64,
    pub l_giou: f64,
    pub l_fgl: f64,
    pub l_ddf: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.l_query, self.l_attr, self.l_box, self.l_giou, self.l_fgl, self.l_ddf]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.query * parts.l_query
        + w.attr * parts.l_attr
        + w.box_ * parts.l_box
        + w.giou * parts.l_giou
        + w.fgl * parts.l_fgl
        + w.ddf * parts.l_ddf
}

/// One line of the loss-breakdown log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogLine {
    pub step: usize,
    pub l_query: f64,
    pub l_attr: f64,
    pub l_box: f64,
    pub l_giou: f64,
    pub n_pos: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_positives: bool,
}

impl LossLogLine {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}
