//! Per-iteration text batches and the object/query/attribute
//! correspondence matrices.
//!
//! Attribute slots use a per-query block layout: slot `j * a_max + k` holds
//! attribute `k` of the query in slot `j`. With that layout
//! `m_a = step(m_q · m_map)` is an identity rather than an approximation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attr_decomp::DEFAULT_A_MAX;
use crate::data::{normalize_text, AggregatedSample, QueryEntry};
use crate::geometry::{to_normalized, BoxCxCyWH};
use crate::matrix::BinaryMatrix;
use crate::rng::{choose_without_replacement, shuffle, uniform_inclusive, StreamRng};

pub const DEFAULT_Q_MAX: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum SupervisionError {
    #[error("q_max and a_max must be at least 1 (got {q_max}, {a_max})")]
    InvalidConfig { q_max: usize, a_max: usize },
    #[error("image {image_id}: {positives} positive queries exceed q_max = {q_max}")]
    TooManyPositives {
        image_id: String,
        positives: usize,
        q_max: usize,
    },
    #[error("image {image_id}: sample has no queries")]
    NoQueries { image_id: String },
    #[error("image {image_id}: category {category:?} is not in the vocabulary")]
    NotInVocabulary { image_id: String, category: String },
    #[error("image {image_id}: {message}")]
    Geometry { image_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub q_max: usize,
    pub a_max: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            q_max: DEFAULT_Q_MAX,
            a_max: DEFAULT_A_MAX,
            seed: 0,
            shuffle: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SupervisionError> {
        if self.q_max == 0 || self.a_max == 0 {
            return Err(SupervisionError::InvalidConfig {
                q_max: self.q_max,
                a_max: self.a_max,
            });
        }
        Ok(())
    }
}

/// Padded text layout for one image and one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBatch {
    pub q_max: usize,
    pub a_max: usize,
    pub query_texts: Vec<String>,
    pub attr_texts: Vec<String>,
    pub query_valid: Vec<bool>,
    pub attr_valid: Vec<bool>,
    /// Original query index per slot. `None` for padding and for sampled
    /// negative categories, which are not queries of the sample.
    pub query_origin: Vec<Option<usize>>,
}

impl TextBatch {
    fn empty(q_max: usize, a_max: usize) -> Self {
        Self {
            q_max,
            a_max,
            query_texts: vec![String::new(); q_max],
            attr_texts: vec![String::new(); q_max * a_max],
            query_valid: vec![false; q_max],
            attr_valid: vec![false; q_max * a_max],
            query_origin: vec![None; q_max],
        }
    }

    fn place(&mut self, slot: usize, query: &QueryEntry, origin: Option<usize>) {
        self.query_texts[slot] = query.text.clone();
        self.query_valid[slot] = true;
        self.query_origin[slot] = origin;
        for (k, a) in query.attributes.iter().take(self.a_max).enumerate() {
            self.attr_texts[slot * self.a_max + k] = a.description.clone();
            self.attr_valid[slot * self.a_max + k] = true;
        }
    }

    /// Every query of `sample` in its own slot, in order, without sampling.
    pub fn full(sample: &AggregatedSample, q_max: usize, a_max: usize) -> Result<Self, SupervisionError> {
        check_dims(q_max, a_max)?;
        if sample.queries.len() > q_max {
            return Err(SupervisionError::TooManyPositives {
                image_id: sample.image_id.clone(),
                positives: sample.queries.len(),
                q_max,
            });
        }
        let mut tb = Self::empty(q_max, a_max);
        for (i, q) in sample.queries.iter().enumerate() {
            tb.place(i, q, Some(i));
        }
        Ok(tb)
    }

    pub fn n_valid_queries(&self) -> usize {
        self.query_valid.iter().filter(|&&v| v).count()
    }

    /// Slot holding original query `index`, if it was sampled.
    pub fn slot_of(&self, index: usize) -> Option<usize> {
        self.query_origin.iter().position(|&o| o == Some(index))
    }

    /// Valid attribute slots of query slot `j`.
    pub fn block(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let start = j * self.a_max;
        (start..start + self.a_max).filter(move |&k| self.attr_valid[k])
    }

    pub fn n_attr_cols(&self) -> usize {
        self.q_max * self.a_max
    }
}

/// Object-level supervision for one [`TextBatch`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub m_q: BinaryMatrix,
    pub m_a: BinaryMatrix,
    pub m_map: BinaryMatrix,
    /// Normalized-frame boxes, one per object row.
    pub gt_boxes: Vec<BoxCxCyWH>,
}

impl CorrespondenceSet {
    pub fn n_obj(&self) -> usize {
        self.gt_boxes.len()
    }

    /// The three matrices in the dense binary export format, in the order
    /// `m_q`, `m_a`, `m_map`.
    pub fn to_binary(&self) -> [Vec<u8>; 3] {
        [self.m_q.to_bytes(), self.m_a.to_bytes(), self.m_map.to_bytes()]
    }
}

fn check_dims(q_max: usize, a_max: usize) -> Result<(), SupervisionError> {
    SamplerConfig {
        q_max,
        a_max,
        seed: 0,
        shuffle: false,
    }
    .validate()
}

/// Builds the matrices for the queries placed in `tb`. Ground truth of
/// queries absent from the batch is dropped. Entries with identical boxes
/// collapse to one object, so a box listed under two queries yields a row
/// with two ones.
pub fn build_correspondence(sample: &AggregatedSample, tb: &TextBatch) -> Result<CorrespondenceSet, SupervisionError> {
    let (q_max, a_max) = (tb.q_max, tb.a_max);
    let mut objects: Vec<([f64; 4], Vec<usize>)> = Vec::new();
    for gt in &sample.ground_truth {
        let Some(slot) = tb.slot_of(gt.query_index) else {
            continue;
        };
        let key = gt.box_.coords();
        match objects.iter_mut().find(|(b, _)| *b == key) {
            Some((_, slots)) => slots.push(slot),
            None => objects.push((key, vec![slot])),
        }
    }

    let mut m_map = BinaryMatrix::zeros(q_max, q_max * a_max);
    for j in 0..q_max {
        for k in tb.block(j) {
            m_map.set(j, k, true);
        }
    }
    let mut m_q = BinaryMatrix::zeros(objects.len(), q_max);
    let mut m_a = BinaryMatrix::zeros(objects.len(), q_max * a_max);
    let mut gt_boxes = Vec::with_capacity(objects.len());
    for (i, (coords, slots)) in objects.iter().enumerate() {
        for &j in slots {
            m_q.set(i, j, true);
            for k in tb.block(j) {
                m_a.set(i, k, true);
            }
        }
        let b = crate::geometry::BoxXYXY::pixel(coords[0], coords[1], coords[2], coords[3]);
        let n = to_normalized(&b, sample.image_size).map_err(|e| SupervisionError::Geometry {
            image_id: sample.image_id.clone(),
            message: e.to_string(),
        })?;
        gt_boxes.push(n.to_cxcywh());
    }
    Ok(CorrespondenceSet {
        m_q,
        m_a,
        m_map,
        gt_boxes,
    })
}

fn place_shuffled(tb: &mut TextBatch, entries: Vec<(QueryEntry, Option<usize>)>, cfg: &SamplerConfig, rng: &mut StreamRng) {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    if cfg.shuffle {
        shuffle(rng, &mut order);
    }
    for (slot, &e) in order.iter().enumerate() {
        tb.place(slot, &entries[e].0, entries[e].1);
    }
}

/// Open-vocabulary detection draw: all positive categories plus a random
/// number of negatives from the rest of the vocabulary.
pub fn sample_ovad(
    sample: &AggregatedSample,
    vocabulary: &[String],
    cfg: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<(TextBatch, CorrespondenceSet), SupervisionError> {
    cfg.validate()?;
    let positives = sample.queries.len();
    if positives > cfg.q_max {
        return Err(SupervisionError::TooManyPositives {
            image_id: sample.image_id.clone(),
            positives,
            q_max: cfg.q_max,
        });
    }
    let vocab: Vec<String> = vocabulary.iter().map(|v| normalize_text(v)).collect();
    let pos: HashSet<String> = sample.queries.iter().map(|q| normalize_text(&q.text)).collect();
    for q in &sample.queries {
        if !vocab.contains(&normalize_text(&q.text)) {
            return Err(SupervisionError::NotInVocabulary {
                image_id: sample.image_id.clone(),
                category: q.text.clone(),
            });
        }
    }
    let mut seen = HashSet::new();
    let negatives: Vec<&String> = vocab
        .iter()
        .filter(|v| !pos.contains(*v) && seen.insert(v.as_str()))
        .collect();

    let mut entries: Vec<(QueryEntry, Option<usize>)> = sample
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.clone(), Some(i)))
        .collect();
    if !negatives.is_empty() {
        let drawn = uniform_inclusive(rng, 1, negatives.len());
        let room = cfg.q_max - positives;
        let n_neg = drawn.min(room);
        for idx in choose_without_replacement(rng, negatives.len(), n_neg) {
            entries.push((QueryEntry::category(negatives[idx]), None));
        }
    }
    let mut tb = TextBatch::empty(cfg.q_max, cfg.a_max);
    place_shuffled(&mut tb, entries, cfg, rng);
    let cs = build_correspondence(sample, &tb)?;
    Ok((tb, cs))
}

/// Visual grounding draw: between one and all expressions, without
/// replacement.
pub fn sample_rsvg(
    sample: &AggregatedSample,
    cfg: &SamplerConfig,
    rng: &mut StreamRng,
) -> Result<(TextBatch, CorrespondenceSet), SupervisionError> {
    cfg.validate()?;
    let k = sample.queries.len();
    if k == 0 {
        return Err(SupervisionError::NoQueries {
            image_id: sample.image_id.clone(),
        });
    }
    let n = uniform_inclusive(rng, 1, k.min(cfg.q_max));
    let mut chosen = choose_without_replacement(rng, k, n);
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|i| (sample.queries[i].clone(), Some(i)))
        .collect();
    let mut tb = TextBatch::empty(cfg.q_max, cfg.a_max);
    place_shuffled(&mut tb, entries, cfg, rng);
    let cs = build_correspondence(sample, &tb)?;
    Ok((tb, cs))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyViolation {
    pub rule: &'static str,
    pub row: usize,
    pub col: usize,
    pub message: String,
}

/// Checks every structural invariant of a batch and its matrices.
pub fn verify_consistency(cs: &CorrespondenceSet, tb: &TextBatch) -> Vec<ConsistencyViolation> {
    let mut out = Vec::new();
    let mut push = |rule: &'static str, row: usize, col: usize, message: String| {
        out.push(ConsistencyViolation {
            rule,
            row,
            col,
            message,
        })
    };
    let (q_max, a_max) = (tb.q_max, tb.a_max);
    let n_attr = q_max * a_max;
    if tb.query_texts.len() != q_max
        || tb.query_valid.len() != q_max
        || tb.query_origin.len() != q_max
        || tb.attr_texts.len() != n_attr
        || tb.attr_valid.len() != n_attr
    {
        push("batch_shape", 0, 0, "text batch vectors do not match q_max/a_max".into());
        return out;
    }
    let n_obj = cs.gt_boxes.len();
    let shapes = [
        ("m_q", &cs.m_q, n_obj, q_max),
        ("m_a", &cs.m_a, n_obj, n_attr),
        ("m_map", &cs.m_map, q_max, n_attr),
    ];
    let mut shape_ok = true;
    for (name, m, r, c) in shapes {
        if m.rows() != r || m.cols() != c {
            push(
                "matrix_shape",
                m.rows(),
                m.cols(),
                format!("{name} is {}x{}, expected {r}x{c}", m.rows(), m.cols()),
            );
            shape_ok = false;
        }
    }

    for j in 0..q_max {
        let block = &tb.attr_valid[j * a_max..(j + 1) * a_max];
        if !tb.query_valid[j] {
            if let Some(k) = block.iter().position(|&v| v) {
                push("attr_of_padded_query", j, j * a_max + k, format!("slot {j} is padding but attribute {k} is valid"));
            }
            if !tb.query_texts[j].is_empty() {
                push("padded_text", j, j, format!("padded query slot {j} holds text"));
            }
        }
        let valid_len = block.iter().take_while(|&&v| v).count();
        if block[valid_len..].iter().any(|&v| v) {
            push("attr_prefix", j, j * a_max + valid_len, format!("valid attributes of slot {j} are not a prefix"));
        }
        for (k, &v) in block.iter().enumerate() {
            if !v && !tb.attr_texts[j * a_max + k].is_empty() {
                push("padded_text", j, j * a_max + k, format!("padded attribute slot {} holds text", j * a_max + k));
            }
        }
    }
    if !shape_ok {
        return out;
    }

    for i in 0..n_obj {
        for j in 0..q_max {
            if cs.m_q.get(i, j) && !tb.query_valid[j] {
                push("m_q_padded_column", i, j, format!("m_q[{i},{j}] is set on a padded column"));
            }
        }
    }
    for j in 0..q_max {
        for k in 0..n_attr {
            if cs.m_map.get(j, k) && (k / a_max != j || !tb.attr_valid[k]) {
                push("m_map_outside_block", j, k, format!("m_map[{j},{k}] is outside the valid block of slot {j}"));
            }
            let expected = k / a_max == j && tb.attr_valid[k];
            if expected && !cs.m_map.get(j, k) {
                push("m_map_missing", j, k, format!("m_map[{j},{k}] should be set"));
            }
        }
    }
    let product = cs.m_q.bool_product(&cs.m_map);
    for i in 0..n_obj {
        for k in 0..n_attr {
            if product.get(i, k) != cs.m_a.get(i, k) {
                push("m_a_identity", i, k, format!("m_a[{i},{k}] differs from step(m_q · m_map)"));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attr_decomp::Attribute;
    use crate::data::{GroundTruth, QueryKind};
    use crate::geometry::BoxXYXY;
    use crate::rng::rng_from_seed;

    fn bx(i: usize) -> BoxXYXY {
        let x = 10.0 * i as f64;
        BoxXYXY::pixel(x, 0.0, x + 5.0, 5.0)
    }

    fn expr(text: &str, n_attr: usize) -> QueryEntry {
        QueryEntry {
            text: text.into(),
            kind: QueryKind::Expression,
            attributes: (0..n_attr)
                .map(|k| Attribute {
                    aspect: "other".into(),
                    description: format!("{text} a{k}"),
                    evidence: Vec::new(),
                    confidence: 1.0,
                })
                .collect(),
        }
    }

    fn sample(queries: Vec<QueryEntry>, gt: &[(usize, usize)]) -> AggregatedSample {
        AggregatedSample {
            image_id: "img".into(),
            image_size: (100, 100),
            queries,
            ground_truth: gt
                .iter()
                .map(|&(b, q)| GroundTruth {
                    box_: bx(b),
                    query_index: q,
                })
                .collect(),
        }
    }

    #[test]
    fn constructed_columns_and_rows() {
        let s = sample(vec![expr("A", 2), expr("B", 1)], &[(0, 0), (2, 0), (1, 1)]);
        let tb = TextBatch::full(&s, 4, 3).unwrap();
        let cs = build_correspondence(&s, &tb).unwrap();
        assert_eq!(cs.n_obj(), 3);
        assert_eq!((cs.m_q.col_sum(0), cs.m_q.col_sum(1)), (2, 1));
        assert!((0..3).all(|i| cs.m_q.row_sum(i) == 1));
        assert!(verify_consistency(&cs, &tb).is_empty());
    }

    #[test]
    fn duplicated_box_is_multi_label() {
        let s = sample(vec![expr("A", 1), expr("B", 1)], &[(0, 0), (0, 1)]);
        let tb = TextBatch::full(&s, 2, 1).unwrap();
        let cs = build_correspondence(&s, &tb).unwrap();
        assert_eq!(cs.n_obj(), 1);
        assert_eq!(cs.m_q.row_sum(0), 2);
        assert_eq!(cs.m_a.row_sum(0), 2);
    }

    #[test]
    fn four_attributes_fill_block() {
        let s = sample(vec![expr("A", 4)], &[(0, 0)]);
        let tb = TextBatch::full(&s, 2, 5).unwrap();
        let cs = build_correspondence(&s, &tb).unwrap();
        assert_eq!(cs.m_map.row_sum(0), 4);
        assert_eq!(cs.m_a.row_sum(0), 4);
        assert!((0..4).all(|k| cs.m_a.get(0, k)));
    }

    #[test]
    fn attributes_beyond_a_max_are_cut() {
        let s = sample(vec![expr("A", 4)], &[(0, 0)]);
        let tb = TextBatch::full(&s, 1, 2).unwrap();
        assert_eq!(tb.block(0).count(), 2);
    }

    #[test]
    fn violations_are_named() {
        let s = sample(vec![expr("A", 2)], &[(0, 0)]);
        let tb = TextBatch::full(&s, 3, 2).unwrap();
        let cs = build_correspondence(&s, &tb).unwrap();

        let mut bad = cs.clone();
        bad.m_q.set(0, 2, true);
        let v = verify_consistency(&bad, &tb);
        assert!(v.iter().any(|v| v.rule == "m_q_padded_column" && (v.row, v.col) == (0, 2)));

        let mut bad = cs.clone();
        bad.m_a.set(0, 1, false);
        let v = verify_consistency(&bad, &tb);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule, v[0].row, v[0].col), ("m_a_identity", 0, 1));

        let mut tb2 = tb.clone();
        tb2.attr_valid[0] = false;
        tb2.attr_texts[0].clear();
        assert!(verify_consistency(&cs, &tb2).iter().any(|v| v.rule == "attr_prefix"));
    }

    fn ovad_sample(cats: &[&str]) -> AggregatedSample {
        let anns: Vec<_> = cats.iter().enumerate().map(|(i, c)| (bx(i), c.to_string())).collect();
        crate::data::from_detection_annotations("img", (1000, 100), &anns).unwrap()
    }

    #[test]
    fn ovad_two_positives_five_words() {
        let s = ovad_sample(&["ship", "plane"]);
        let vocab: Vec<String> = ["ship", "plane", "tank", "bridge", "port"].map(String::from).to_vec();
        let cfg = SamplerConfig::default();
        let mut rng = rng_from_seed(11);
        for _ in 0..1000 {
            let (tb, cs) = sample_ovad(&s, &vocab, &cfg, &mut rng).unwrap();
            let k = tb.n_valid_queries();
            assert!((3..=5).contains(&k), "{k}");
            for q in 0..2 {
                assert!(cs.m_q.col_sum(tb.slot_of(q).unwrap()) >= 1);
            }
            for j in 0..cfg.q_max {
                if tb.query_valid[j] && tb.query_origin[j].is_none() {
                    assert_eq!(cs.m_q.col_sum(j), 0);
                }
            }
            assert!(verify_consistency(&cs, &tb).is_empty());
        }
    }

    #[test]
    fn ovad_edges() {
        let s = ovad_sample(&["ship"]);
        let (tb, _) = sample_ovad(&s, &["ship".into()], &SamplerConfig::default(), &mut rng_from_seed(0)).unwrap();
        assert_eq!(tb.n_valid_queries(), 1);

        let cats: Vec<String> = (0..61).map(|i| format!("c{i}")).collect();
        let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
        let big = ovad_sample(&refs);
        let err = sample_ovad(&big, &cats, &SamplerConfig::default(), &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, SupervisionError::TooManyPositives { positives: 61, .. }));

        let err = sample_ovad(&s, &["plane".into()], &SamplerConfig::default(), &mut rng_from_seed(0)).unwrap_err();
        assert!(matches!(err, SupervisionError::NotInVocabulary { .. }));
    }

    #[test]
    fn ovad_clips_negatives_to_room() {
        let s = ovad_sample(&["a", "b", "c"]);
        let vocab: Vec<String> = (0..20).map(|i| format!("n{i}")).chain(["a", "b", "c"].map(String::from)).collect();
        let cfg = SamplerConfig {
            q_max: 4,
            ..SamplerConfig::default()
        };
        for seed in 0..50 {
            let (tb, _) = sample_ovad(&s, &vocab, &cfg, &mut rng_from_seed(seed)).unwrap();
            assert_eq!(tb.n_valid_queries(), 4);
        }
    }

    #[test]
    fn rsvg_drops_unsampled_gt() {
        let s = sample(vec![expr("A", 1), expr("B", 1), expr("C", 1)], &[(0, 0), (1, 1), (2, 2), (3, 2)]);
        let cfg = SamplerConfig {
            q_max: 5,
            a_max: 2,
            ..SamplerConfig::default()
        };
        let mut rng = rng_from_seed(4);
        let mut saw_partial = false;
        for _ in 0..200 {
            let (tb, cs) = sample_rsvg(&s, &cfg, &mut rng).unwrap();
            let drawn: Vec<usize> = tb.query_origin.iter().flatten().copied().collect();
            let expected: Vec<_> = s
                .ground_truth
                .iter()
                .filter(|g| drawn.contains(&g.query_index))
                .map(|g| to_normalized(&g.box_, s.image_size).unwrap().to_cxcywh())
                .collect();
            assert_eq!(cs.gt_boxes, expected);
            saw_partial |= drawn.len() < 3;
            assert!(verify_consistency(&cs, &tb).is_empty());
        }
        assert!(saw_partial);
    }

    #[test]
    fn rsvg_single_and_deterministic() {
        let s = sample(vec![expr("A", 1)], &[(0, 0)]);
        let cfg = SamplerConfig::default();
        let (tb, _) = sample_rsvg(&s, &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(tb.query_origin.iter().flatten().collect::<Vec<_>>(), vec![&0]);

        let s = sample(vec![expr("A", 1), expr("B", 2), expr("C", 3)], &[(0, 0), (1, 1), (2, 2)]);
        let a = sample_rsvg(&s, &cfg, &mut rng_from_seed(9)).unwrap();
        let b = sample_rsvg(&s, &cfg, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);

        let empty = sample(vec![], &[]);
        assert!(matches!(sample_rsvg(&empty, &cfg, &mut rng_from_seed(0)), Err(SupervisionError::NoQueries { .. })));
    }

    #[test]
    fn binary_export_round_trips() {
        let s = sample(vec![expr("A", 2), expr("B", 1)], &[(0, 0), (1, 1)]);
        let tb = TextBatch::full(&s, 3, 2).unwrap();
        let cs = build_correspondence(&s, &tb).unwrap();
        let [q, a, m] = cs.to_binary();
        assert_eq!(&q[..8], b"OTAMAT01");
        assert_eq!(BinaryMatrix::from_bytes(&q).unwrap(), cs.m_q);
        assert_eq!(BinaryMatrix::from_bytes(&a).unwrap(), cs.m_a);
        assert_eq!(BinaryMatrix::from_bytes(&m).unwrap(), cs.m_map);
        let json = serde_json::to_string(&(&tb, &cs)).unwrap();
        let back: (TextBatch, CorrespondenceSet) = serde_json::from_str(&json).unwrap();
        assert_eq!(back, (tb, cs));
    }
}
