//! wasm-bindgen exports for the static demo page. Every export returns a
//! JSON string; the plain functions underneath are what the tests call.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ota_core::geometry::{giou, iou, BoxXYXY};
use ota_core::losses::{mal, LossWeights, MalConfig};
use ota_core::toy::{evaluate_recovery, generate_world, train, ToyConfig, TrainConfig};

#[derive(Debug, Serialize)]
pub struct MalCurve {
    pub p: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Loss against predicted probability for a positive with target `q` and
/// for a negative, on `points` interior samples of (0, 1).
pub fn mal_curve(q: f64, gamma: f64, alpha_neg: f64, points: usize) -> Result<MalCurve, String> {
    let cfg = MalConfig { gamma, alpha_neg };
    cfg.validate()?;
    if !(0.0..=1.0).contains(&q) {
        return Err(format!("q must lie in [0, 1], got {q}"));
    }
    let n = points.clamp(2, 1000);
    let p: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    Ok(MalCurve {
        positive: p.iter().map(|&x| mal(x, q, true, &cfg)).collect(),
        negative: p.iter().map(|&x| mal(x, q, false, &cfg)).collect(),
        p,
    })
}

#[derive(Debug, Serialize)]
pub struct Overlap {
    pub iou: f64,
    pub giou: f64,
}

/// IoU and GIoU of two pixel boxes given as `[x1, y1, x2, y2]`.
pub fn box_overlap(a: &[f64], b: &[f64]) -> Result<Overlap, String> {
    let boxed = |v: &[f64]| -> Result<BoxXYXY, String> {
        match v {
            [x1, y1, x2, y2] => Ok(BoxXYXY::pixel(*x1, *y1, *x2, *y2)),
            _ => Err(format!("a box needs 4 coordinates, got {}", v.len())),
        }
    };
    let (a, b) = (boxed(a)?, boxed(b)?);
    Ok(Overlap {
        iou: iou(&a, &b).map_err(|e| e.to_string())?,
        giou: giou(&a, &b).map_err(|e| e.to_string())?,
    })
}

#[derive(Debug, Serialize)]
pub struct ToyRun {
    pub total: Vec<f64>,
    pub l_query: Vec<f64>,
    pub l_attr: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub query_agreement: f64,
    pub attr_agreement: f64,
    pub acc: f64,
    pub attr_align: f64,
}

/// Trains the default synthetic world. Agreements are balanced (mean of
/// true-positive and true-negative rates).
pub fn toy_run(steps: usize, lambda_attr: f64, seed: u64) -> Result<ToyRun, String> {
    let world = generate_world(&ToyConfig {
        seed,
        ..ToyConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: steps.min(2000),
        weights: LossWeights {
            attr: lambda_attr,
            ..LossWeights::default()
        },
        seed,
        ..TrainConfig::default()
    };
    let out = train(&world, &cfg).map_err(|e| e.to_string())?;
    let r = evaluate_recovery(&world, &out.params, &out.features, &cfg).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        total: out.history.iter().map(|h| h.total).collect(),
        l_query: out.history.iter().map(|h| h.l_query).collect(),
        l_attr: out.history.iter().map(|h| h.l_attr).collect(),
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        query_agreement: r.query.balanced,
        attr_agreement: r.attr.balanced,
        acc: r.metrics.acc_at_05,
        attr_align: r.metrics.attr_align.get("0.50").copied().unwrap_or(0.0),
    })
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = malCurve)]
pub fn mal_curve_js(q: f64, gamma: f64, alpha_neg: f64, points: usize) -> Result<String, JsError> {
    to_js(mal_curve(q, gamma, alpha_neg, points))
}

#[wasm_bindgen(js_name = boxOverlap)]
pub fn box_overlap_js(a: Vec<f64>, b: Vec<f64>) -> Result<String, JsError> {
    to_js(box_overlap(&a, &b))
}

#[wasm_bindgen(js_name = toyRun)]
pub fn toy_run_js(steps: usize, lambda_attr: f64, seed: u32) -> Result<String, JsError> {
    to_js(toy_run(steps, lambda_attr, u64::from(seed)))
}
