//! Expression accuracy, attribute alignment accuracy, and COCO-style AP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::align_head::{sigmoid, LogitAffine};
use crate::geometry::{iou_unchecked, BoxXYXY};

pub const ACC_IOU: f64 = 0.5;
pub const DEFAULT_TAUS: [f64; 3] = [0.5, 0.6, 0.7];

/// How an attribute logit becomes the score compared against `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    #[default]
    Sigmoid,
    /// The raw cosine `(logit - beta) / alpha`.
    Cosine,
}

pub fn attribute_score(logit: f64, affine: &LogitAffine, mode: SimilarityMode) -> f64 {
    match mode {
        SimilarityMode::Sigmoid => sigmoid(logit),
        SimilarityMode::Cosine => (logit - affine.beta) / affine.alpha(),
    }
}

/// One referring expression: its answer box, ground truth, and the scores
/// of its attributes on the answer box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionEval {
    pub id: String,
    pub top1: Option<BoxXYXY>,
    pub gt: Vec<BoxXYXY>,
    pub attr_scores: Vec<f64>,
}

impl ExpressionEval {
    pub fn best_iou(&self) -> f64 {
        match &self.top1 {
            None => 0.0,
            Some(b) => self.gt.iter().map(|g| iou_unchecked(b, g)).fold(0.0, f64::max),
        }
    }

    pub fn localized(&self) -> bool {
        self.best_iou() >= ACC_IOU
    }

    pub fn attr_mean(&self) -> Option<f64> {
        if self.attr_scores.is_empty() {
            None
        } else {
            Some(self.attr_scores.iter().sum::<f64>() / self.attr_scores.len() as f64)
        }
    }

    pub fn aligned(&self, tau: f64) -> bool {
        self.localized() && self.attr_mean().is_some_and(|m| m > tau)
    }
}

/// Fraction of expressions whose answer overlaps some ground truth with
/// IoU at least 0.5. Empty input gives 0.
pub fn acc_at_05(evals: &[ExpressionEval]) -> f64 {
    if evals.is_empty() {
        return 0.0;
    }
    evals.iter().filter(|e| e.localized()).count() as f64 / evals.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttrAlign {
    pub value: f64,
    /// Expressions without attributes. They stay in the denominator and
    /// never count as aligned.
    pub zero_attribute: usize,
}

/// Localized expressions whose mean attribute score strictly exceeds `tau`.
pub fn attr_align(evals: &[ExpressionEval], tau: f64) -> AttrAlign {
    let zero_attribute = evals.iter().filter(|e| e.attr_scores.is_empty()).count();
    let value = if evals.is_empty() {
        0.0
    } else {
        evals.iter().filter(|e| e.aligned(tau)).count() as f64 / evals.len() as f64
    };
    AttrAlign { value, zero_attribute }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub image_id: String,
    pub category: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
}

/// True-positive flags in descending score order. Each detection takes the
/// unmatched ground truth of its image with the highest IoU at or above
/// `iou_thr`. Ties in score keep input order.
pub fn match_detections(dets: &[&ScoredBox], gts: &[&GtBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&d| {
            let det = dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image_id != det.image_id {
                    continue;
                }
                let iou = iou_unchecked(&det.box_, &gt.box_);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// 101-point interpolated AP from ranked true-positive flags.
pub fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let target = r as f64 / 100.0;
        let k = recall.partition_point(|&x| x < target);
        if k < precision.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// AP of one category at one IoU threshold. `None` without ground truth.
pub fn average_precision(dets: &[&ScoredBox], gts: &[&GtBox], iou_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    Some(interpolated_ap(&match_detections(dets, gts, iou_thr), gts.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub value: Option<f64>,
    pub per_category: BTreeMap<String, f64>,
    /// Categories seen only in detections.
    pub excluded: Vec<String>,
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Mean over categories of the AP averaged over `thresholds`.
pub fn mean_ap(dets: &[ScoredBox], gts: &[GtBox], thresholds: &[f64]) -> MeanAp {
    let cats: BTreeSet<&str> = dets
        .iter()
        .map(|d| d.category.as_str())
        .chain(gts.iter().map(|g| g.category.as_str()))
        .collect();
    let mut per_category = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in cats {
        let d: Vec<&ScoredBox> = dets.iter().filter(|d| d.category == c).collect();
        let g: Vec<&GtBox> = gts.iter().filter(|g| g.category == c).collect();
        if g.is_empty() {
            excluded.push(c.to_string());
            continue;
        }
        let ap = thresholds
            .iter()
            .map(|&t| average_precision(&d, &g, t).unwrap_or(0.0))
            .sum::<f64>()
            / thresholds.len() as f64;
        per_category.insert(c.to_string(), ap);
    }
    let value = (!per_category.is_empty()).then(|| per_category.values().sum::<f64>() / per_category.len() as f64);
    MeanAp {
        value,
        per_category,
        excluded,
    }
}

pub fn ap50(dets: &[ScoredBox], gts: &[GtBox]) -> MeanAp {
    mean_ap(dets, gts, &[0.5])
}

pub fn map_coco(dets: &[ScoredBox], gts: &[GtBox]) -> MeanAp {
    mean_ap(dets, gts, &coco_thresholds())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub expressions: usize,
    pub zero_attribute_expressions: usize,
    pub detections: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_at_05: f64,
    /// Keyed by `tau` printed with two decimals.
    pub attr_align: BTreeMap<String, f64>,
    pub ap50: Option<f64>,
    pub map_coco: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_categories: Vec<String>,
    pub counts: Counts,
}

pub fn tau_key(tau: f64) -> String {
    format!("{tau:.2}")
}

impl MetricReport {
    pub fn from_expressions(evals: &[ExpressionEval], taus: &[f64]) -> Self {
        let mut attr = BTreeMap::new();
        let mut zero = 0;
        for &t in taus {
            let a = attr_align(evals, t);
            zero = a.zero_attribute;
            attr.insert(tau_key(t), a.value);
        }
        Self {
            acc_at_05: acc_at_05(evals),
            attr_align: attr,
            ap50: None,
            map_coco: None,
            excluded_categories: Vec::new(),
            counts: Counts {
                expressions: evals.len(),
                zero_attribute_expressions: zero,
                detections: evals.iter().filter(|e| e.top1.is_some()).count(),
                gt: evals.iter().map(|e| e.gt.len()).sum(),
            },
        }
    }

    pub fn with_detection_metrics(mut self, dets: &[ScoredBox], gts: &[GtBox]) -> Self {
        let a = ap50(dets, gts);
        let m = map_coco(dets, gts);
        self.ap50 = a.value;
        self.map_coco = m.value;
        self.excluded_categories = a.excluded;
        self.counts.detections += dets.len();
        self.counts.gt += gts.len();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Two aligned columns, one metric per row.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut rows: Vec<(String, String)> = vec![("Acc@0.5".into(), fmt(Some(self.acc_at_05)))];
        for (t, v) in &self.attr_align {
            rows.push((format!("Attr-Align@{t}"), fmt(Some(*v))));
        }
        rows.push(("AP50".into(), fmt(self.ap50)));
        rows.push(("mAP".into(), fmt(self.map_coco)));
        rows.push(("expressions".into(), self.counts.expressions.to_string()));
        rows.push(("zero-attribute".into(), self.counts.zero_attribute_expressions.to_string()));
        rows.push(("detections".into(), self.counts.detections.to_string()));
        rows.push(("ground truth".into(), self.counts.gt.to_string()));
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>vw$}");
        }
        out
    }
}

/// Per-expression verdict rows: id, best IoU, localized, attribute mean,
/// and one aligned flag per `tau`.
pub fn verdicts_csv(evals: &[ExpressionEval], taus: &[f64]) -> String {
    let mut out = String::from("id,best_iou,localized,attr_mean");
    for t in taus {
        let _ = write!(out, ",aligned@{}", tau_key(*t));
    }
    out.push('\n');
    for e in evals {
        let id = if e.id.contains([',', '"', '\n']) {
            format!("\"{}\"", e.id.replace('"', "\"\""))
        } else {
            e.id.clone()
        };
        let mean = e.attr_mean().map_or(String::new(), |m| format!("{m:.6}"));
        let _ = write!(out, "{id},{:.6},{},{mean}", e.best_iou(), e.localized());
        for &t in taus {
            let _ = write!(out, ",{}", e.aligned(t));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn b(x: f64) -> BoxXYXY {
        BoxXYXY::pixel(x, 0.0, x + 10.0, 10.0)
    }

    fn expr(top: Option<f64>, gt: &[f64], attrs: &[f64]) -> ExpressionEval {
        ExpressionEval {
            id: "e".into(),
            top1: top.map(b),
            gt: gt.iter().map(|&x| b(x)).collect(),
            attr_scores: attrs.to_vec(),
        }
    }

    #[test]
    fn acc_fixtures() {
        assert_eq!(acc_at_05(&[expr(Some(0.0), &[0.0], &[])]), 1.0);
        // Nested half-height box: intersection 50 over union 100.
        let mut half = expr(Some(0.0), &[0.0], &[]);
        half.top1 = Some(BoxXYXY::pixel(0.0, 0.0, 10.0, 5.0));
        assert_eq!(half.best_iou(), 0.5);
        assert_eq!(acc_at_05(&[half]), 1.0);
        let set = [
            expr(Some(0.0), &[0.0], &[]),
            expr(Some(1.0), &[0.0], &[]),
            expr(Some(50.0), &[0.0], &[]),
            expr(Some(100.0), &[0.0, 100.0], &[]),
        ];
        assert_eq!(acc_at_05(&set), 0.75);
        assert_eq!(acc_at_05(&[expr(None, &[0.0], &[0.9])]), 0.0);
    }

    #[test]
    fn attr_align_fixtures() {
        let all = [expr(Some(0.0), &[0.0], &[0.9, 0.9]), expr(Some(50.0), &[0.0], &[0.9])];
        assert_eq!(attr_align(&all, 0.7).value, acc_at_05(&all));
        let low = [expr(Some(0.0), &[0.0], &[0.5, 0.7])];
        assert_eq!(attr_align(&low, 0.7).value, 0.0);
        let exact = [expr(Some(0.0), &[0.0], &[0.7])];
        assert_eq!(attr_align(&exact, 0.7).value, 0.0);
        let none = [expr(Some(0.0), &[0.0], &[]), expr(Some(0.0), &[0.0], &[0.8])];
        let a = attr_align(&none, 0.5);
        assert_eq!((a.value, a.zero_attribute), (0.5, 1));
    }

    fn sb(img: &str, x: f64, s: f64) -> ScoredBox {
        ScoredBox {
            image_id: img.into(),
            category: "c".into(),
            score: s,
            box_: b(x),
        }
    }

    fn gb(img: &str, x: f64) -> GtBox {
        GtBox {
            image_id: img.into(),
            category: "c".into(),
            box_: b(x),
        }
    }

    #[test]
    fn single_detection_ap() {
        let d = [sb("i", 0.0, 0.9)];
        let g = [gb("i", 0.0)];
        assert_eq!(ap50(&d, &g).value, Some(1.0));
    }

    #[test]
    fn duplicate_is_false_positive() {
        let d = [sb("i", 0.0, 0.9), sb("i", 0.0, 0.8)];
        let g = [gb("i", 0.0)];
        let dr: Vec<&ScoredBox> = d.iter().collect();
        let gr: Vec<&GtBox> = g.iter().collect();
        assert_eq!(match_detections(&dr, &gr, 0.5), vec![true, false]);
    }

    /// Interpolated AP straight from the definition: for each recall level,
    /// the best precision over every rank cutoff reaching it.
    fn oracle_ap(tp_sorted: &[bool], n_gt: usize) -> f64 {
        let mut total = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let mut best: f64 = 0.0;
            for k in 1..=tp_sorted.len() {
                let hits = tp_sorted[..k].iter().filter(|&&t| t).count();
                let recall = hits as f64 / n_gt as f64;
                if recall >= level {
                    best = best.max(hits as f64 / k as f64);
                }
            }
            total += best;
        }
        total / 101.0
    }

    /// Independent flagging: walk detections by score, each grabbing the best
    /// free ground truth.
    fn oracle_flags(dets: &[ScoredBox], gts: &[GtBox], thr: f64) -> Vec<bool> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut taken = vec![false; gts.len()];
        let mut out = Vec::new();
        for i in idx {
            let cand = (0..gts.len())
                .filter(|&g| !taken[g] && gts[g].image_id == dets[i].image_id)
                .map(|g| (g, iou_unchecked(&dets[i].box_, &gts[g].box_)))
                .filter(|&(_, v)| v >= thr)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match cand {
                Some((g, _)) => {
                    taken[g] = true;
                    out.push(true)
                }
                None => out.push(false),
            }
        }
        out
    }

    #[test]
    fn spec_style_fixture_matches_oracle() {
        let d = [sb("i", 0.0, 0.9), sb("i", 300.0, 0.8), sb("i", 100.0, 0.7)];
        let g = [gb("i", 0.0), gb("i", 100.0)];
        let got = ap50(&d, &g).value.unwrap();
        let want = oracle_ap(&[true, false, true], 2);
        assert!((got - want).abs() < 1e-12);
        // Precision 1 up to recall 0.5, then 2/3 up to recall 1.
        let hand = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        assert!((got - hand).abs() < 1e-12);
    }

    #[test]
    fn zero_gt_category_excluded() {
        let mut d = vec![sb("i", 0.0, 0.9)];
        d.push(ScoredBox {
            category: "ghost".into(),
            ..sb("i", 0.0, 0.5)
        });
        let r = map_coco(&d, &[gb("i", 0.0)]);
        assert_eq!(r.excluded, vec!["ghost".to_string()]);
        assert_eq!(r.per_category.len(), 1);
        assert_eq!(map_coco(&[], &[]).value, None);
    }

    #[test]
    fn report_formats() {
        let evals = [expr(Some(0.0), &[0.0], &[0.9]), expr(Some(50.0), &[0.0], &[])];
        let r = MetricReport::from_expressions(&evals, &DEFAULT_TAUS);
        assert_eq!(r.acc_at_05, 0.5);
        assert_eq!(r.counts.zero_attribute_expressions, 1);
        let t = r.to_table();
        assert!(t.contains("Acc@0.5"));
        assert!(t.contains("Attr-Align@0.70"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["attr_align"]["0.50"], 0.5);
        let csv = verdicts_csv(&evals, &DEFAULT_TAUS);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("id,best_iou,localized,attr_mean,aligned@0.50"));
    }

    #[test]
    fn cosine_mode() {
        let a = LogitAffine::new(4.0, -1.0);
        assert!((attribute_score(4.0 * 0.25 - 1.0, &a, SimilarityMode::Cosine) - 0.25).abs() < 1e-12);
        assert_eq!(attribute_score(0.0, &a, SimilarityMode::Sigmoid), 0.5);
    }

    fn random_instance(seed: u64) -> (Vec<ScoredBox>, Vec<GtBox>) {
        let mut rng = rng_from_seed(seed);
        let n_gt = rng.random_range(1..=4);
        let n_det = rng.random_range(0..=8);
        let img = |rng: &mut crate::rng::StreamRng| if rng.random_bool(0.5) { "a" } else { "b" };
        let gts: Vec<GtBox> = (0..n_gt).map(|_| gb(img(&mut rng), rng.random_range(0..4) as f64 * 6.0)).collect();
        let mut scores: Vec<f64> = (0..n_det).map(|k| (k as f64 + 1.0) / 10.0).collect();
        crate::rng::shuffle(&mut rng, &mut scores);
        let dets = scores
            .into_iter()
            .map(|s| sb(img(&mut rng), rng.random_range(0..5) as f64 * 6.0 + rng.random_range(-3.0..3.0), s))
            .collect();
        (dets, gts)
    }

    proptest! {
        #[test]
        fn ap_matches_rank_enumeration(seed in any::<u64>()) {
            let (d, g) = random_instance(seed);
            for thr in [0.3, 0.5, 0.75] {
                let dr: Vec<&ScoredBox> = d.iter().collect();
                let gr: Vec<&GtBox> = g.iter().collect();
                let flags = oracle_flags(&d, &g, thr);
                prop_assert_eq!(&match_detections(&dr, &gr, thr), &flags);
                let got = average_precision(&dr, &gr, thr).unwrap();
                prop_assert!((got - oracle_ap(&flags, g.len())).abs() < 1e-12);
            }
        }

        #[test]
        fn ap_invariant_to_detection_order(seed in any::<u64>()) {
            let (mut d, g) = random_instance(seed);
            let before = map_coco(&d, &g);
            d.reverse();
            prop_assert_eq!(map_coco(&d, &g), before);
        }

        #[test]
        fn attr_align_monotone_and_bounded(
            items in prop::collection::vec((prop::option::of(0.0..20.0f64), prop::collection::vec(0.0..1.0f64, 0..4)), 0..12),
            taus in prop::collection::vec(0.01..0.99f64, 1..6),
        ) {
            let evals: Vec<ExpressionEval> = items.iter().map(|(t, a)| expr(*t, &[0.0], a)).collect();
            let acc = acc_at_05(&evals);
            let mut sorted = taus.clone();
            sorted.sort_by(f64::total_cmp);
            let vals: Vec<f64> = sorted.iter().map(|&t| attr_align(&evals, t).value).collect();
            for w in vals.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(vals.iter().all(|&v| v <= acc));
        }
    }
}
