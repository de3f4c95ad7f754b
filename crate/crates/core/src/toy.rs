//! Synthetic end-to-end harness. A seeded world plants queries, attributes
//! and object correspondences; gradient descent on the weighted objective
//! then has to recover them from free visual features.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align_head::{dual_backward, dual_forward, HeadParams, DEFAULT_D_TXT, DEFAULT_D_VIS};
use crate::attr_decomp::Attribute;
use crate::data::{AggregatedSample, GroundTruth, QueryEntry, QueryKind};
use crate::geometry::{to_pixel, BoxCxCyWH, BoxXYXY};
use crate::inference::select_top1_per_query;
use crate::losses::{
    hungarian_match, localization_losses, semantic_losses, total_loss, Assignment, CostWeights, LossParts,
    LossWeights, MalConfig,
};
use crate::matrix::{BinaryMatrix, Matrix};
use crate::metrics::{ExpressionEval, MetricReport, DEFAULT_TAUS};
use crate::rng::{derived_rng, stable_hash, uniform_inclusive};
use crate::supervision::{build_correspondence, sample_rsvg, CorrespondenceSet, SamplerConfig, TextBatch};

pub const IMAGE_SIZE: (u32, u32) = (640, 480);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub n_images: usize,
    pub queries_per_image: usize,
    pub max_attrs_per_query: usize,
    pub objects_per_image: usize,
    /// Prediction slots beyond one per object, placed away from every object.
    pub extra_predictions: usize,
    pub d_vis: usize,
    pub d_txt: usize,
    /// Uniform perturbation of each normalized prediction coordinate.
    pub jitter: f64,
    pub shared_affine: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 4,
            queries_per_image: 3,
            max_attrs_per_query: 3,
            objects_per_image: 3,
            extra_predictions: 2,
            d_vis: DEFAULT_D_VIS,
            d_txt: DEFAULT_D_TXT,
            jitter: 0.002,
            shared_affine: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ToyError {
    #[error("invalid toy configuration: {0}")]
    Config(String),
    #[error("non-finite {component} at step {step}")]
    Diverged { step: usize, component: String },
    #[error("{0}")]
    Internal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub mal: MalConfig,
    pub cost: CostWeights,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            weights: LossWeights::default(),
            mal: MalConfig::default(),
            cost: CostWeights::default(),
            sampler: SamplerConfig {
                q_max: 4,
                a_max: 3,
                seed: 0,
                shuffle: true,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(ToyError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        self.weights.validate().map_err(ToyError::Config)?;
        self.mal.validate().map_err(ToyError::Config)?;
        self.sampler.validate().map_err(|e| ToyError::Config(e.to_string()))
    }
}

/// Per-image learnable visual features, one row per prediction slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub per_image: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub config: ToyConfig,
    pub samples: Vec<AggregatedSample>,
    /// Normalized prediction boxes per image.
    pub pred_boxes: Vec<Vec<BoxCxCyWH>>,
    pub init_params: HeadParams,
    pub init_features: Features,
    embeddings: HashMap<String, Vec<f64>>,
}

/// Unit Gaussian vector keyed by `(text, seed)`.
pub fn embed_text(text: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = derived_rng(seed, text);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn check_config(cfg: &ToyConfig) -> Result<(), ToyError> {
    let bad = |m: &str| Err(ToyError::Config(m.to_string()));
    if cfg.n_images == 0 || cfg.queries_per_image == 0 || cfg.objects_per_image == 0 {
        return bad("images, queries and objects per image must be at least 1");
    }
    if cfg.max_attrs_per_query == 0 || cfg.d_vis == 0 || cfg.d_txt == 0 {
        return bad("attributes per query and dimensions must be at least 1");
    }
    if cfg.objects_per_image > 4 || cfg.extra_predictions > 4 {
        return bad("the box layout fits at most 4 objects and 4 extra predictions per image");
    }
    if !(0.0..0.02).contains(&cfg.jitter) {
        return bad("jitter must lie in [0, 0.02)");
    }
    Ok(())
}

/// Builds the world. Query `j` grounds object `j mod objects`. In image 0,
/// with at least two queries and two objects, query 0 also grounds
/// object 1, so object 1 carries two queries and query 0 two objects.
pub fn generate_world(cfg: &ToyConfig) -> Result<ToyWorld, ToyError> {
    check_config(cfg)?;
    let mut rng = derived_rng(cfg.seed, "toy-world");
    let mut samples = Vec::new();
    let mut pred_boxes = Vec::new();
    let mut features = Vec::new();
    let mut embeddings = HashMap::new();
    let n_obj = cfg.objects_per_image;
    for m in 0..cfg.n_images {
        // Objects in columns along the top band, extras along the bottom.
        let objects: Vec<BoxXYXY> = (0..n_obj)
            .map(|o| {
                let x = 0.03 + 0.24 * o as f64 + rng.random_range(0.0..0.02);
                let y = rng.random_range(0.05..0.35);
                BoxXYXY::normalized(x, y, x + 0.18, y + 0.2)
            })
            .collect();
        let mut queries = Vec::new();
        let mut gt = Vec::new();
        for j in 0..cfg.queries_per_image {
            let text = format!("target {m}-{j}");
            let n_attr = uniform_inclusive(&mut rng, 1, cfg.max_attrs_per_query);
            let attributes = (0..n_attr)
                .map(|k| Attribute {
                    aspect: if k == 0 { "category".into() } else { "other".into() },
                    description: format!("trait {m}-{j}-{k}"),
                    evidence: Vec::new(),
                    confidence: 1.0,
                })
                .collect::<Vec<_>>();
            for t in std::iter::once(&text).chain(attributes.iter().map(|a| &a.description)) {
                embeddings.insert(t.clone(), embed_text(t, cfg.seed, cfg.d_txt));
            }
            queries.push(QueryEntry {
                text,
                kind: QueryKind::Expression,
                attributes,
            });
            let mut grounded = vec![j % n_obj];
            if m == 0 && j == 0 && n_obj >= 2 && cfg.queries_per_image >= 2 {
                grounded.push(1);
            }
            for o in grounded {
                gt.push(GroundTruth {
                    box_: to_pixel(&objects[o], IMAGE_SIZE).expect("valid layout"),
                    query_index: j,
                });
            }
        }
        samples.push(AggregatedSample {
            image_id: format!("toy-{m}"),
            image_size: IMAGE_SIZE,
            queries,
            ground_truth: gt,
        });

        let mut preds = Vec::new();
        for o in &objects {
            let c = o.coords();
            let mut j = || rng.random_range(-cfg.jitter..=cfg.jitter);
            preds.push(BoxXYXY::normalized(c[0] + j(), c[1] + j(), c[2] + j(), c[3] + j()).to_cxcywh());
        }
        for e in 0..cfg.extra_predictions {
            let x = 0.03 + 0.24 * e as f64;
            preds.push(BoxXYXY::normalized(x, 0.75, x + 0.15, 0.95).to_cxcywh());
        }
        let n_pred = preds.len();
        pred_boxes.push(preds);
        features.push(Matrix::from_vec(
            n_pred,
            cfg.d_vis,
            (0..n_pred * cfg.d_vis)
                .map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect(),
        ));
    }
    let init_params = HeadParams::init(cfg.d_vis, cfg.d_txt, cfg.shared_affine, &mut rng);
    Ok(ToyWorld {
        config: cfg.clone(),
        samples,
        pred_boxes,
        init_params,
        init_features: Features { per_image: features },
        embeddings,
    })
}

impl ToyWorld {
    pub fn embedding(&self, text: &str) -> Option<&[f64]> {
        self.embeddings.get(text).map(Vec::as_slice)
    }

    /// Rows for `texts`; padding and unknown texts give zero rows.
    pub fn text_matrix(&self, texts: &[String]) -> Matrix {
        let d = self.config.d_txt;
        let mut m = Matrix::zeros(texts.len(), d);
        for (i, t) in texts.iter().enumerate() {
            if let Some(e) = self.embeddings.get(t) {
                m.row_mut(i).copy_from_slice(e);
            }
        }
        m
    }

    /// Number of prediction slots per image.
    pub fn n_pred(&self) -> usize {
        self.config.objects_per_image + self.config.extra_predictions
    }
}

/// Loss parts and gradients for one image under one text batch.
struct ImagePass {
    parts: LossParts,
    n_pos: usize,
    no_positives: bool,
    grads: Option<crate::align_head::DualGrads>,
}

#[allow(clippy::too_many_arguments)]
fn image_pass(
    world: &ToyWorld,
    m: usize,
    params: &HeadParams,
    feats: &Matrix,
    tb: &TextBatch,
    cs: &CorrespondenceSet,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<ImagePass, ToyError> {
    let fq = world.text_matrix(&tb.query_texts);
    let fa = world.text_matrix(&tb.attr_texts);
    let fwd = dual_forward(feats, &fq, &fa, params, tb).map_err(|e| ToyError::Internal(e.to_string()))?;
    let boxes = &world.pred_boxes[m];
    let a = hungarian_match(boxes, fwd.s_query(), &cs.gt_boxes, &cs.m_q, &cfg.cost);
    let sem = semantic_losses(fwd.s_query(), fwd.s_attr(), &a, boxes, cs, &cfg.mal);
    let (l_box, l_giou, _) = localization_losses(boxes, &cs.gt_boxes, &a);
    let parts = LossParts {
        l_query: sem.l_query,
        l_attr: sem.l_attr,
        l_box,
        l_giou,
        ..LossParts::default()
    };
    let grads = with_grads.then(|| {
        let mut dq = sem.d_query.clone();
        dq.scale(cfg.weights.query);
        let mut da = sem.d_attr.clone();
        da.scale(cfg.weights.attr);
        dual_backward(&fwd, feats, params, &dq, &da)
    });
    Ok(ImagePass {
        parts,
        n_pos: sem.n_pos,
        no_positives: sem.no_positives,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub l_query: f64,
    pub l_attr: f64,
    pub l_box: f64,
    pub l_giou: f64,
    pub n_pos: usize,
    pub no_positives: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: HeadParams,
    pub features: Features,
    /// Per-step losses on the sampled batches, before that step's update.
    pub history: Vec<StepRecord>,
    /// Objective over every query of every image, before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,total,l_query,l_attr,l_box,l_giou\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.step, r.total, r.l_query, r.l_attr, r.l_box, r.l_giou);
        }
        out
    }
}

fn mean_parts(parts: &[LossParts]) -> LossParts {
    let n = parts.len().max(1) as f64;
    let mut acc = LossParts::default();
    for p in parts {
        acc.l_query += p.l_query / n;
        acc.l_attr += p.l_attr / n;
        acc.l_box += p.l_box / n;
        acc.l_giou += p.l_giou / n;
    }
    acc
}

/// Weighted objective averaged over images, each image scored with all of
/// its queries in order.
pub fn full_objective(world: &ToyWorld, params: &HeadParams, features: &Features, cfg: &TrainConfig) -> Result<f64, ToyError> {
    let mut parts = Vec::new();
    for (m, sample) in world.samples.iter().enumerate() {
        let (tb, cs) = full_batch(sample, cfg)?;
        parts.push(image_pass(world, m, params, &features.per_image[m], &tb, &cs, cfg, false)?.parts);
    }
    Ok(total_loss(&mean_parts(&parts), &cfg.weights))
}

fn full_batch(sample: &AggregatedSample, cfg: &TrainConfig) -> Result<(TextBatch, CorrespondenceSet), ToyError> {
    let q_max = cfg.sampler.q_max.max(sample.queries.len());
    let tb = TextBatch::full(sample, q_max, cfg.sampler.a_max).map_err(|e| ToyError::Internal(e.to_string()))?;
    let cs = build_correspondence(sample, &tb).map_err(|e| ToyError::Internal(e.to_string()))?;
    Ok((tb, cs))
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<(), ToyError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ToyError::Diverged {
            step,
            component: name.to_string(),
        })
    }
}

/// Plain gradient descent on features, projection and affines. Each step
/// redraws every image's text batch from a stream keyed by
/// `(cfg.seed, step, image)`.
pub fn train(world: &ToyWorld, cfg: &TrainConfig) -> Result<TrainOutcome, ToyError> {
    cfg.validate()?;
    let mut params = world.init_params.clone();
    let mut features = world.init_features.clone();
    let initial_loss = full_objective(world, &params, &features, cfg)?;
    let mut history = Vec::with_capacity(cfg.steps);
    let n_img = world.samples.len() as f64;
    for step in 0..cfg.steps {
        let mut g_w = Matrix::zeros(params.w.rows(), params.w.cols());
        let mut g_aff = [0.0f64; 4];
        let mut g_feats = Vec::with_capacity(world.samples.len());
        let mut parts = Vec::new();
        let mut n_pos = 0;
        let mut no_positives = false;
        for (m, sample) in world.samples.iter().enumerate() {
            let key = format!("train/{step}/{}", sample.image_id);
            let mut rng = derived_rng(stable_hash(key.as_bytes(), cfg.seed), "rsvg");
            let (tb, cs) = sample_rsvg(sample, &cfg.sampler, &mut rng).map_err(|e| ToyError::Internal(e.to_string()))?;
            let pass = image_pass(world, m, &params, &features.per_image[m], &tb, &cs, cfg, true).map_err(|e| match e {
                ToyError::Internal(msg) if step > 0 => ToyError::Diverged { step, component: msg },
                other => other,
            })?;
            let g = pass.grads.expect("gradients requested");
            g_w.add_assign(&g.params.w);
            g_aff[0] += g.params.query.alpha_raw;
            g_aff[1] += g.params.query.beta;
            g_aff[2] += g.params.attr.alpha_raw;
            g_aff[3] += g.params.attr.beta;
            g_feats.push(g.q_feats);
            parts.push(pass.parts);
            n_pos += pass.n_pos;
            no_positives |= pass.no_positives;
        }
        let p = mean_parts(&parts);
        let total = total_loss(&p, &cfg.weights);
        for (name, v) in [("total", total), ("l_query", p.l_query), ("l_attr", p.l_attr), ("l_box", p.l_box), ("l_giou", p.l_giou)] {
            check_finite(step, name, v)?;
        }
        history.push(StepRecord {
            step,
            total,
            l_query: p.l_query,
            l_attr: p.l_attr,
            l_box: p.l_box,
            l_giou: p.l_giou,
            n_pos,
            no_positives,
        });

        let lr = cfg.lr / n_img;
        params.w.descend(&g_w, lr);
        params.query.alpha_raw -= lr * g_aff[0];
        params.query.beta -= lr * g_aff[1];
        params.attr.alpha_raw -= lr * g_aff[2];
        params.attr.beta -= lr * g_aff[3];
        for (f, g) in features.per_image.iter_mut().zip(&g_feats) {
            f.descend(g, lr);
        }
        if !params.is_finite() || !features.per_image.iter().all(Matrix::is_finite) {
            return Err(ToyError::Diverged {
                step,
                component: "parameters".into(),
            });
        }
    }
    let final_loss = full_objective(world, &params, &features, cfg)?;
    check_finite(cfg.steps, "final objective", final_loss)?;
    Ok(TrainOutcome {
        params,
        features,
        history,
        initial_loss,
        final_loss,
    })
}

/// Binarized agreement between probabilities and a planted 0/1 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Agreement {
    pub entries: usize,
    pub positives: usize,
    /// Fraction of entries where `p > 0.5` equals the planted bit.
    pub raw: f64,
    pub tpr: f64,
    pub tnr: f64,
    /// Mean of `tpr` and `tnr`.
    pub balanced: f64,
    /// Mean probability on planted ones.
    pub positive_margin: f64,
    /// Mean probability on planted zeros.
    pub negative_margin: f64,
}

#[derive(Default)]
struct Tally {
    tp: usize,
    tn: usize,
    pos: usize,
    neg: usize,
    pos_sum: f64,
    neg_sum: f64,
}

impl Tally {
    fn add(&mut self, p: f64, y: bool) {
        let hit = p > 0.5;
        if y {
            self.pos += 1;
            self.pos_sum += p;
            self.tp += usize::from(hit);
        } else {
            self.neg += 1;
            self.neg_sum += p;
            self.tn += usize::from(!hit);
        }
    }

    fn finish(&self) -> Agreement {
        let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
        let tpr = ratio(self.tp, self.pos);
        let tnr = ratio(self.tn, self.neg);
        Agreement {
            entries: self.pos + self.neg,
            positives: self.pos,
            raw: ratio(self.tp + self.tn, self.pos + self.neg),
            tpr,
            tnr,
            balanced: 0.5 * (tpr + tnr),
            positive_margin: if self.pos == 0 { 0.0 } else { self.pos_sum / self.pos as f64 },
            negative_margin: if self.neg == 0 { 0.0 } else { self.neg_sum / self.neg as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedCheck {
    pub image_id: String,
    /// Object row for a multi-label check, query column for one-to-many.
    pub index: usize,
    pub probabilities: Vec<f64>,
    pub recovered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub query: Agreement,
    pub attr: Agreement,
    /// Object carrying two queries: both query columns above 0.5.
    pub multi_label: Option<PlantedCheck>,
    /// Query grounding two objects: its column above 0.5 on both rows.
    pub one_to_many: Option<PlantedCheck>,
    /// Expression-level metrics with every query answered by its top-1.
    pub metrics: MetricReport,
}

impl RecoveryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores every image with all its queries and compares the matched rows
/// against the planted matrices.
pub fn evaluate_recovery(
    world: &ToyWorld,
    params: &HeadParams,
    features: &Features,
    cfg: &TrainConfig,
) -> Result<RecoveryReport, ToyError> {
    let mut q_tally = Tally::default();
    let mut a_tally = Tally::default();
    let mut multi_label = None;
    let mut one_to_many = None;
    let mut evals = Vec::new();
    for (m, sample) in world.samples.iter().enumerate() {
        let (tb, cs) = full_batch(sample, cfg)?;
        let fq = world.text_matrix(&tb.query_texts);
        let fa = world.text_matrix(&tb.attr_texts);
        let fwd = dual_forward(&features.per_image[m], &fq, &fa, params, &tb)
            .map_err(|e| ToyError::Internal(e.to_string()))?;
        let (sq, sa) = (fwd.s_query(), fwd.s_attr());
        let boxes = &world.pred_boxes[m];
        let a: Assignment = hungarian_match(boxes, sq, &cs.gt_boxes, &cs.m_q, &cfg.cost);
        let tally = |t: &mut Tally, s: &crate::align_head::LogitBlock, target: &BinaryMatrix| {
            for &(i, g) in &a.pairs {
                for j in (0..s.n_cols()).filter(|&j| s.mask[j]) {
                    t.add(s.prob(i, j), target.get(g, j));
                }
            }
        };
        tally(&mut q_tally, sq, &cs.m_q);
        tally(&mut a_tally, sa, &cs.m_a);

        for g in 0..cs.n_obj() {
            if multi_label.is_none() && cs.m_q.row_sum(g) >= 2 {
                if let Some(i) = a.pairs.iter().find(|p| p.1 == g).map(|p| p.0) {
                    let probs: Vec<f64> = (0..sq.n_cols()).filter(|&j| cs.m_q.get(g, j)).map(|j| sq.prob(i, j)).collect();
                    multi_label = Some(PlantedCheck {
                        image_id: sample.image_id.clone(),
                        index: g,
                        recovered: probs.iter().all(|&p| p > 0.5),
                        probabilities: probs,
                    });
                }
            }
        }
        for j in 0..sq.n_cols() {
            if one_to_many.is_none() && cs.m_q.col_sum(j) >= 2 {
                let probs: Vec<f64> = a
                    .pairs
                    .iter()
                    .filter(|&&(_, g)| cs.m_q.get(g, j))
                    .map(|&(i, _)| sq.prob(i, j))
                    .collect();
                one_to_many = Some(PlantedCheck {
                    image_id: sample.image_id.clone(),
                    index: j,
                    recovered: probs.len() >= 2 && probs.iter().all(|&p| p > 0.5),
                    probabilities: probs,
                });
            }
        }

        for (q, query) in sample.queries.iter().enumerate() {
            let top = select_top1_per_query(sq, q);
            let gt: Vec<BoxXYXY> = sample
                .ground_truth
                .iter()
                .filter(|g| g.query_index == q)
                .map(|g| g.box_)
                .collect();
            let (top1, attr_scores) = match top {
                Some(t) => (
                    Some(to_pixel(&boxes[t.pred_index].to_xyxy(), sample.image_size).expect("valid box")),
                    tb.block(q).map(|k| sa.prob(t.pred_index, k)).collect(),
                ),
                None => (None, Vec::new()),
            };
            evals.push(ExpressionEval {
                id: format!("{}/{}", sample.image_id, query.text),
                top1,
                gt,
                attr_scores,
            });
        }
    }
    Ok(RecoveryReport {
        query: q_tally.finish(),
        attr: a_tally.finish(),
        multi_label,
        one_to_many,
        metrics: MetricReport::from_expressions(&evals, &DEFAULT_TAUS),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_reproducible_and_unit_norm() {
        let cfg = ToyConfig::default();
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a, b);
        for e in a.embeddings.values() {
            let n: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        for s in &a.samples {
            s.validate().unwrap();
        }
        let c = generate_world(&ToyConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn attribute_counts_bounded() {
        let cfg = ToyConfig {
            queries_per_image: 2,
            max_attrs_per_query: 3,
            ..ToyConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        for s in &w.samples {
            let tb = TextBatch::full(s, 2, 3).unwrap();
            let cs = build_correspondence(s, &tb).unwrap();
            assert!((0..2).all(|j| cs.m_map.row_sum(j) <= 3));
        }
    }

    #[test]
    fn planted_multi_label_and_one_to_many() {
        let w = generate_world(&ToyConfig::default()).unwrap();
        let tb = TextBatch::full(&w.samples[0], 3, 3).unwrap();
        let cs = build_correspondence(&w.samples[0], &tb).unwrap();
        assert_eq!(cs.m_q.row_sum(1), 2);
        assert_eq!(cs.m_q.col_sum(0), 2);
    }

    #[test]
    fn zero_steps_and_zero_lr() {
        let w = generate_world(&ToyConfig::default()).unwrap();
        let out = train(
            &w,
            &TrainConfig {
                steps: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.params, w.init_params);
        assert_eq!(out.features, w.init_features);

        let out = train(
            &w,
            &TrainConfig {
                steps: 3,
                lr: 0.0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.final_loss, out.initial_loss);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let w = generate_world(&ToyConfig::default()).unwrap();
        let err = train(
            &w,
            &TrainConfig {
                steps: 50,
                lr: 1e300,
                ..TrainConfig::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, ToyError::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn untrained_agreement_near_chance() {
        let w = generate_world(&ToyConfig::default()).unwrap();
        let r = evaluate_recovery(&w, &w.init_params, &w.init_features, &TrainConfig::default()).unwrap();
        assert!(r.query.balanced < 0.75, "{:?}", r.query);
        assert!(r.attr.balanced < 0.75, "{:?}", r.attr);
    }

    #[test]
    fn history_csv_header() {
        let w = generate_world(&ToyConfig::default()).unwrap();
        let out = train(
            &w,
            &TrainConfig {
                steps: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let csv = out.history_csv();
        assert!(csv.starts_with("step,total,l_query,l_attr,l_box,l_giou\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
