//! Decoding logits into detections at query or attribute granularity.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::align_head::{sigmoid, LogitBlock};
use crate::geometry::{to_pixel, BoxCxCyWH, BoxXYXY};
use crate::matrix::{BinaryMatrix, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedScores {
    /// `N x Q` probabilities.
    pub probs: Matrix,
    /// Query rows of `m_map` with no valid attribute; their scores are 0.
    pub empty_queries: Vec<usize>,
}

/// Per prediction and query, reduces the sigmoid scores of the query's
/// valid attribute slots.
pub fn aggregate_attr_to_query(s_attr: &LogitBlock, m_map: &BinaryMatrix, reduction: Reduction) -> AggregatedScores {
    let n = s_attr.n_pred();
    let q = m_map.rows();
    let mut probs = Matrix::zeros(n, q);
    let mut empty_queries = Vec::new();
    for j in 0..q {
        let slots: Vec<usize> = (0..m_map.cols())
            .filter(|&k| m_map.get(j, k) && s_attr.mask[k])
            .collect();
        if slots.is_empty() {
            empty_queries.push(j);
            continue;
        }
        for i in 0..n {
            let ps = slots.iter().map(|&k| s_attr.prob(i, k));
            let v = match reduction {
                Reduction::Mean => ps.sum::<f64>() / slots.len() as f64,
                Reduction::Min => ps.fold(f64::INFINITY, f64::min),
                Reduction::Max => ps.fold(f64::NEG_INFINITY, f64::max),
            };
            probs.set(i, j, v);
        }
    }
    AggregatedScores { probs, empty_queries }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrLabel {
    pub slot: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
    #[serde(skip)]
    pub pred_index: usize,
    pub query_index: usize,
    pub query_score: f64,
    #[serde(rename = "attrs")]
    pub attr_labels: Vec<AttrLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// Shared shape of a decoding problem.
#[derive(Debug, Clone, Copy)]
pub struct DecodeInput<'a> {
    pub s_attr: &'a LogitBlock,
    pub a_max: usize,
    pub pred_boxes: &'a [BoxCxCyWH],
    pub image_size: (u32, u32),
}

impl DecodeInput<'_> {
    fn pixel_box(&self, i: usize) -> BoxXYXY {
        to_pixel(&self.pred_boxes[i].to_xyxy(), self.image_size).expect("normalized prediction and valid size")
    }

    fn attrs(&self, i: usize, query: usize) -> Vec<AttrLabel> {
        let start = query * self.a_max;
        (start..(start + self.a_max).min(self.s_attr.n_cols()))
            .filter(|&k| self.s_attr.mask[k])
            .map(|k| AttrLabel {
                slot: k,
                score: self.s_attr.prob(i, k),
            })
            .collect()
    }

    fn detection(&self, i: usize, query: usize, score: f64) -> Detection {
        Detection {
            box_: self.pixel_box(i),
            pred_index: i,
            query_index: query,
            query_score: score,
            attr_labels: self.attrs(i, query),
        }
    }
}

fn by_score_then_index(a: &Detection, b: &Detection) -> Ordering {
    b.query_score
        .partial_cmp(&a.query_score)
        .unwrap_or(Ordering::Equal)
        .then(a.pred_index.cmp(&b.pred_index))
}

fn decode_probs(
    probs: &Matrix,
    valid: &[bool],
    input: &DecodeInput<'_>,
    threshold: f64,
    top_k: Option<usize>,
) -> Vec<Detection> {
    if !valid.iter().any(|&v| v) {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..probs.rows() {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..probs.cols()).filter(|&j| valid[j]) {
            let p = probs.get(i, j);
            if best.is_none_or(|(_, b)| p > b) {
                best = Some((j, p));
            }
        }
        if let Some((j, p)) = best {
            if p >= threshold {
                out.push(input.detection(i, j, p));
            }
        }
    }
    out.sort_by(by_score_then_index);
    if let Some(k) = top_k {
        out.truncate(k);
    }
    out
}

/// Each prediction takes its highest-probability valid query; detections at
/// or above `threshold` are kept, ordered by score then prediction index.
pub fn decode(s_query: &LogitBlock, input: &DecodeInput<'_>, threshold: f64, top_k: Option<usize>) -> Vec<Detection> {
    let mut probs = Matrix::zeros(s_query.n_pred(), s_query.n_cols());
    for i in 0..s_query.n_pred() {
        for j in 0..s_query.n_cols() {
            probs.set(i, j, s_query.prob(i, j));
        }
    }
    decode_probs(&probs, &s_query.mask, input, threshold, top_k)
}

/// [`decode`] scored by aggregated attribute probabilities instead of the
/// query logits.
pub fn decode_from_attributes(
    m_map: &BinaryMatrix,
    input: &DecodeInput<'_>,
    reduction: Reduction,
    threshold: f64,
    top_k: Option<usize>,
) -> Vec<Detection> {
    let agg = aggregate_attr_to_query(input.s_attr, m_map, reduction);
    let valid: Vec<bool> = (0..m_map.rows()).map(|j| !agg.empty_queries.contains(&j)).collect();
    decode_probs(&agg.probs, &valid, input, threshold, top_k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Top1 {
    pub pred_index: usize,
    pub score: f64,
}

/// Highest-probability prediction for query column `j`, ignoring any
/// threshold. `None` for a masked or out-of-range column.
pub fn select_top1_per_query(s_query: &LogitBlock, j: usize) -> Option<Top1> {
    if j >= s_query.n_cols() || !s_query.mask[j] {
        return None;
    }
    let mut best: Option<Top1> = None;
    for i in 0..s_query.n_pred() {
        let p = s_query.prob(i, j);
        if best.is_none_or(|b| p > b.score) {
            best = Some(Top1 { pred_index: i, score: p });
        }
    }
    best
}

/// One answer per valid query column, for expression-style evaluation.
pub fn top1_detections(s_query: &LogitBlock, input: &DecodeInput<'_>) -> Vec<Detection> {
    (0..s_query.n_cols())
        .filter_map(|j| select_top1_per_query(s_query, j).map(|t| input.detection(t.pred_index, j, t.score)))
        .collect()
}

/// Probability of every column of `s` at `sigmoid`, masked columns zero.
pub fn probabilities(s: &LogitBlock) -> Matrix {
    let mut m = Matrix::zeros(s.n_pred(), s.n_cols());
    for i in 0..s.n_pred() {
        for j in 0..s.n_cols() {
            if s.mask[j] {
                m.set(i, j, sigmoid(s.values.get(i, j)));
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align_head::NEG;
    use proptest::prelude::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn block(rows: &[Vec<f64>], mask: Vec<bool>) -> LogitBlock {
        let vals: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mask).map(|(&p, &m)| if m { logit(p) } else { NEG }).collect())
            .collect();
        LogitBlock {
            values: Matrix::from_rows(&vals),
            mask,
        }
    }

    fn map(q: usize, a_max: usize, counts: &[usize]) -> BinaryMatrix {
        let mut m = BinaryMatrix::zeros(q, q * a_max);
        for (j, &c) in counts.iter().enumerate() {
            for k in 0..c {
                m.set(j, j * a_max + k, true);
            }
        }
        m
    }

    fn boxes(n: usize) -> Vec<BoxCxCyWH> {
        (0..n)
            .map(|i| BoxXYXY::normalized(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.05, 0.5).to_cxcywh())
            .collect()
    }

    #[test]
    fn aggregation_examples() {
        let s = block(&[vec![0.7, 0.0, 0.4, 0.6]], vec![true, false, true, true]);
        let m = map(2, 2, &[1, 2]);
        let agg = aggregate_attr_to_query(&s, &m, Reduction::Mean);
        assert!((agg.probs.get(0, 0) - 0.7).abs() < 1e-12);
        assert!((agg.probs.get(0, 1) - 0.5).abs() < 1e-12);
        let mx = aggregate_attr_to_query(&s, &m, Reduction::Max);
        assert!((mx.probs.get(0, 1) - 0.6).abs() < 1e-12);
        let mn = aggregate_attr_to_query(&s, &m, Reduction::Min);
        assert!((mn.probs.get(0, 1) - 0.4).abs() < 1e-12);

        let empty = aggregate_attr_to_query(&s, &map(2, 2, &[1, 0]), Reduction::Mean);
        assert_eq!(empty.empty_queries, vec![1]);
        assert_eq!(empty.probs.get(0, 1), 0.0);
    }

    #[test]
    fn padded_slots_do_not_matter() {
        let mut s = block(&[vec![0.7, 0.2, 0.4, 0.6]], vec![true, false, true, true]);
        let m = map(2, 2, &[1, 2]);
        let a = aggregate_attr_to_query(&s, &m, Reduction::Mean);
        s.values.set(0, 1, 5.0);
        assert_eq!(a, aggregate_attr_to_query(&s, &m, Reduction::Mean));
    }

    #[test]
    fn decode_basics() {
        let sq = block(&[vec![0.2, 0.9]], vec![true, true]);
        let sa = block(&[vec![0.3, 0.8]], vec![true, true]);
        let b = boxes(1);
        let input = DecodeInput {
            s_attr: &sa,
            a_max: 1,
            pred_boxes: &b,
            image_size: (200, 100),
        };
        let d = decode(&sq, &input, 0.5, None);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].query_index, 1);
        assert_eq!(d[0].attr_labels.len(), 1);
        assert_eq!(d[0].attr_labels[0].slot, 1);
        assert!(d[0].box_.validate().is_ok());
        assert!(decode(&sq, &input, 1.1, None).is_empty());
        let none = block(&[vec![0.2, 0.9]], vec![false, false]);
        assert!(decode(&none, &input, 0.0, None).is_empty());
    }

    #[test]
    fn ties_follow_pred_index() {
        let sq = block(&[vec![0.8], vec![0.8], vec![0.9]], vec![true]);
        let b = boxes(3);
        let input = DecodeInput {
            s_attr: &sq,
            a_max: 1,
            pred_boxes: &b,
            image_size: (100, 100),
        };
        let d = decode(&sq, &input, 0.0, None);
        assert_eq!(d.iter().map(|d| d.pred_index).collect::<Vec<_>>(), vec![2, 0, 1]);
        assert_eq!(decode(&sq, &input, 0.0, Some(2)).len(), 2);
    }

    #[test]
    fn top1() {
        let s = block(&[vec![0.2], vec![0.9], vec![0.4]], vec![true]);
        assert_eq!(select_top1_per_query(&s, 0).unwrap().pred_index, 1);
        let one = block(&[vec![0.01]], vec![true]);
        assert_eq!(select_top1_per_query(&one, 0).unwrap().pred_index, 0);
        let masked = block(&[vec![0.9]], vec![false]);
        assert!(select_top1_per_query(&masked, 0).is_none());
        assert!(select_top1_per_query(&masked, 3).is_none());
    }

    #[test]
    fn attribute_path_equals_query_path_for_single_attribute_world() {
        let sq = block(&[vec![0.3, 0.7], vec![0.8, 0.1]], vec![true, true]);
        let b = boxes(2);
        let input = DecodeInput {
            s_attr: &sq,
            a_max: 1,
            pred_boxes: &b,
            image_size: (100, 100),
        };
        let m = map(2, 1, &[1, 1]);
        assert_eq!(
            decode(&sq, &input, 0.0, None),
            decode_from_attributes(&m, &input, Reduction::Mean, 0.0, None)
        );
        let empty = map(2, 1, &[0, 0]);
        assert!(decode_from_attributes(&empty, &input, Reduction::Mean, 0.0, None).is_empty());
    }

    #[test]
    fn jsonl_schema() {
        let sq = block(&[vec![0.9]], vec![true]);
        let b = boxes(1);
        let input = DecodeInput {
            s_attr: &sq,
            a_max: 1,
            pred_boxes: &b,
            image_size: (100, 100),
        };
        let p = ImagePredictions {
            image_id: "x".into(),
            detections: decode(&sq, &input, 0.0, None),
        };
        let v = serde_json::to_value(&p).unwrap();
        let d = &v["detections"][0];
        assert!(d["box"].is_array());
        assert!(d["query_index"].is_u64());
        assert!(d["query_score"].is_f64());
        assert!(d["attrs"][0]["slot"].is_u64());
        assert!(d["attrs"][0]["score"].is_f64());
    }

    proptest! {
        #[test]
        fn aggregation_permutation_invariant(ps in prop::collection::vec(0.01..0.99f64, 3), rot in 0..3usize) {
            let s1 = block(std::slice::from_ref(&ps), vec![true; 3]);
            let mut rotated = ps.clone();
            rotated.rotate_left(rot);
            let s2 = block(&[rotated], vec![true; 3]);
            let m = map(1, 3, &[3]);
            for r in [Reduction::Mean, Reduction::Min, Reduction::Max] {
                let a = aggregate_attr_to_query(&s1, &m, r).probs.get(0, 0);
                let b = aggregate_attr_to_query(&s2, &m, r).probs.get(0, 0);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn scores_in_unit_interval(vals in prop::collection::vec(-50.0..50.0f64, 6)) {
            let s = LogitBlock { values: Matrix::from_vec(2, 3, vals), mask: vec![true, false, true] };
            let b = boxes(2);
            let input = DecodeInput { s_attr: &s, a_max: 1, pred_boxes: &b, image_size: (64, 64) };
            for d in decode(&s, &input, 0.0, None) {
                prop_assert!((0.0..=1.0).contains(&d.query_score));
                prop_assert!(d.attr_labels.iter().all(|a| (0.0..=1.0).contains(&a.score)));
            }
        }
    }
}
