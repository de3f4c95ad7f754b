//! Dataset records and the two task reformulations that turn grounding
//! triplets and category-annotated boxes into [`AggregatedSample`]s.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::attr_decomp::Attribute;
use crate::geometry::BoxXYXY;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("image {image_id}: expression is empty")]
    EmptyExpression { image_id: String },
    #[error("image {image_id}: box {box_:?} is not inside the {width}x{height} image")]
    BoxOutOfBounds {
        image_id: String,
        box_: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("image {image_id}: invalid image size {width}x{height}")]
    InvalidImageSize { image_id: String, width: u32, height: u32 },
    #[error("image {image_id}: inconsistent image size {first:?} vs {second:?}")]
    InconsistentImageSize {
        image_id: String,
        first: (u32, u32),
        second: (u32, u32),
    },
    #[error("image {image_id}: category text is empty")]
    EmptyCategory { image_id: String },
    #[error("image {image_id}: {message}")]
    InvalidSample { image_id: String, message: String },
    #[error("{path}: file not found or unreadable: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// Unicode NFC, trimmed, internal whitespace collapsed to single spaces.
/// Case is preserved.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One sentence-level grounding record: an expression and its single box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingTriplet {
    pub image_id: String,
    pub image_size: (u32, u32),
    pub expression: String,
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
}

fn check_size(image_id: &str, size: (u32, u32)) -> Result<(), DataError> {
    if size.0 == 0 || size.1 == 0 {
        return Err(DataError::InvalidImageSize {
            image_id: image_id.to_string(),
            width: size.0,
            height: size.1,
        });
    }
    Ok(())
}

fn check_box(image_id: &str, size: (u32, u32), b: &BoxXYXY) -> Result<(), DataError> {
    let err = || DataError::BoxOutOfBounds {
        image_id: image_id.to_string(),
        box_: b.coords(),
        width: size.0,
        height: size.1,
    };
    b.validate().map_err(|_| err())?;
    if !b.within(f64::from(size.0), f64::from(size.1)) {
        return Err(err());
    }
    Ok(())
}

impl GroundingTriplet {
    pub fn validate(&self) -> Result<(), DataError> {
        check_size(&self.image_id, self.image_size)?;
        if self.expression.trim().is_empty() {
            return Err(DataError::EmptyExpression {
                image_id: self.image_id.clone(),
            });
        }
        check_box(&self.image_id, self.image_size, &self.box_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Category,
    Expression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub text: String,
    pub kind: QueryKind,
    #[serde(default)]
    pub attributes: Vec<Attribute>,
}

impl QueryEntry {
    /// A category query; the category is its own single attribute.
    pub fn category(text: &str) -> Self {
        Self {
            text: text.to_string(),
            kind: QueryKind::Category,
            attributes: vec![Attribute::category(text)],
        }
    }

    /// An expression query awaiting decomposition.
    pub fn expression(text: &str) -> Self {
        Self {
            text: text.to_string(),
            kind: QueryKind::Expression,
            attributes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub box_: BoxXYXY,
    pub query_index: usize,
}

/// One image with its query set and the labeled ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSample {
    pub image_id: String,
    pub image_size: (u32, u32),
    pub queries: Vec<QueryEntry>,
    #[serde(rename = "gt")]
    pub ground_truth: Vec<GroundTruth>,
}

impl AggregatedSample {
    /// Samples without queries are representable but skipped by training.
    pub fn is_usable(&self) -> bool {
        !self.queries.is_empty()
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |message: String| DataError::InvalidSample {
            image_id: self.image_id.clone(),
            message,
        };
        check_size(&self.image_id, self.image_size)?;
        let k = self.queries.len();
        let mut seen = HashMap::new();
        for (i, q) in self.queries.iter().enumerate() {
            if let Some(j) = seen.insert(normalize_text(&q.text), i) {
                return Err(bad(format!("queries {j} and {i} have identical text")));
            }
            if q.kind == QueryKind::Category
                && !(q.attributes.len() == 1 && q.attributes[0].description == q.text)
            {
                return Err(bad(format!("category query {i} must carry exactly its own attribute")));
            }
        }
        let mut referenced = vec![false; k];
        for (n, gt) in self.ground_truth.iter().enumerate() {
            if gt.query_index >= k {
                return Err(bad(format!("gt {n} references query {} of {k}", gt.query_index)));
            }
            referenced[gt.query_index] = true;
            check_box(&self.image_id, self.image_size, &gt.box_)?;
        }
        if let Some(i) = referenced.iter().position(|r| !r) {
            return Err(bad(format!("query {i} has no ground-truth box")));
        }
        Ok(())
    }

    /// Lifts the sample back to one triplet per ground-truth entry.
    pub fn to_triplets(&self) -> Vec<GroundingTriplet> {
        self.ground_truth
            .iter()
            .map(|gt| GroundingTriplet {
                image_id: self.image_id.clone(),
                image_size: self.image_size,
                expression: self.queries[gt.query_index].text.clone(),
                box_: gt.box_,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ovad,
    Rsvg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task_kind: TaskKind,
    pub sample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_vocabulary: Option<Vec<String>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), String> {
        match (&self.task_kind, &self.category_vocabulary) {
            (TaskKind::Ovad, None) => return Err("ovad manifest needs a category vocabulary".into()),
            (TaskKind::Rsvg, Some(_)) => return Err("rsvg manifest must not carry a vocabulary".into()),
            _ => {}
        }
        if let Some(v) = &self.category_vocabulary {
            let mut seen = std::collections::HashSet::new();
            for c in v {
                if !seen.insert(normalize_text(c)) {
                    return Err(format!("duplicate vocabulary entry {c:?}"));
                }
            }
        }
        Ok(())
    }
}

/// Groups triplets by image. Expressions with identical normalized text in
/// one image merge into a single query with several boxes. Images and
/// queries keep first-appearance order.
pub fn aggregate_image_level(triplets: &[GroundingTriplet]) -> Result<Vec<AggregatedSample>, DataError> {
    let mut samples: Vec<AggregatedSample> = Vec::new();
    let mut by_image: HashMap<&str, usize> = HashMap::new();
    let mut query_ids: Vec<HashMap<String, usize>> = Vec::new();
    for t in triplets {
        t.validate()?;
        let si = *by_image.entry(t.image_id.as_str()).or_insert_with(|| {
            samples.push(AggregatedSample {
                image_id: t.image_id.clone(),
                image_size: t.image_size,
                queries: Vec::new(),
                ground_truth: Vec::new(),
            });
            query_ids.push(HashMap::new());
            samples.len() - 1
        });
        let sample = &mut samples[si];
        if sample.image_size != t.image_size {
            return Err(DataError::InconsistentImageSize {
                image_id: t.image_id.clone(),
                first: sample.image_size,
                second: t.image_size,
            });
        }
        let text = normalize_text(&t.expression);
        let qi = *query_ids[si].entry(text.clone()).or_insert_with(|| {
            sample.queries.push(QueryEntry::expression(&text));
            sample.queries.len() - 1
        });
        sample.ground_truth.push(GroundTruth {
            box_: t.box_,
            query_index: qi,
        });
    }
    Ok(samples)
}

/// Wraps a single triplet as a one-query sample.
pub fn naive_reformulate(triplet: &GroundingTriplet) -> Result<AggregatedSample, DataError> {
    triplet.validate()?;
    Ok(AggregatedSample {
        image_id: triplet.image_id.clone(),
        image_size: triplet.image_size,
        queries: vec![QueryEntry::expression(&normalize_text(&triplet.expression))],
        ground_truth: vec![GroundTruth {
            box_: triplet.box_,
            query_index: 0,
        }],
    })
}

/// Builds a category-query sample from detection boxes. With no boxes the
/// result has no queries and reports `is_usable() == false`.
pub fn from_detection_annotations(
    image_id: &str,
    image_size: (u32, u32),
    boxes_with_categories: &[(BoxXYXY, String)],
) -> Result<AggregatedSample, DataError> {
    check_size(image_id, image_size)?;
    let mut sample = AggregatedSample {
        image_id: image_id.to_string(),
        image_size,
        queries: Vec::new(),
        ground_truth: Vec::new(),
    };
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (b, cat) in boxes_with_categories {
        let text = normalize_text(cat);
        if text.is_empty() {
            return Err(DataError::EmptyCategory {
                image_id: image_id.to_string(),
            });
        }
        check_box(image_id, image_size, b)?;
        let qi = *ids.entry(text.clone()).or_insert_with(|| {
            sample.queries.push(QueryEntry::category(&text));
            sample.queries.len() - 1
        });
        sample.ground_truth.push(GroundTruth {
            box_: *b,
            query_index: qi,
        });
    }
    Ok(sample)
}

/// How [`load_jsonl`] treats malformed lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

#[derive(Debug)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    /// `(line number, message)` of lines skipped in lenient mode.
    pub skipped: Vec<(usize, String)>,
}

/// Reads one JSON record per non-blank line.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path, mode: ParseMode) -> Result<Loaded<T>, DataError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push(r),
            Err(e) => match mode {
                ParseMode::Strict => {
                    return Err(DataError::Parse {
                        path: display,
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
                ParseMode::Lenient => skipped.push((i + 1, e.to_string())),
            },
        }
    }
    Ok(Loaded { records, skipped })
}

pub fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trip(image: &str, expr: &str, b: [f64; 4]) -> GroundingTriplet {
        GroundingTriplet {
            image_id: image.into(),
            image_size: (100, 100),
            expression: expr.into(),
            box_: b.into(),
        }
    }

    #[test]
    fn two_distinct_expressions() {
        let s = aggregate_image_level(&[
            trip("i", "a car", [0.0, 0.0, 10.0, 10.0]),
            trip("i", "a truck", [20.0, 20.0, 30.0, 30.0]),
        ])
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].queries.len(), 2);
        assert_eq!(s[0].ground_truth.len(), 2);
        s[0].validate().unwrap();
    }

    #[test]
    fn identical_expressions_merge() {
        let s = aggregate_image_level(&[
            trip("i", "a car", [0.0, 0.0, 10.0, 10.0]),
            trip("i", "a  car ", [40.0, 0.0, 50.0, 10.0]),
            trip("i", "a truck", [20.0, 20.0, 30.0, 30.0]),
        ])
        .unwrap();
        assert_eq!(s[0].queries.len(), 2);
        assert_eq!(s[0].queries[0].text, "a car");
        let refs = s[0].ground_truth.iter().filter(|g| g.query_index == 0).count();
        assert_eq!(refs, 2);
    }

    #[test]
    fn case_is_preserved() {
        let s = aggregate_image_level(&[
            trip("i", "A car", [0.0, 0.0, 1.0, 1.0]),
            trip("i", "a car", [0.0, 0.0, 1.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(s[0].queries.len(), 2);
    }

    #[test]
    fn empty_and_errors() {
        assert!(aggregate_image_level(&[]).unwrap().is_empty());
        let mut t = trip("img7", "a car", [0.0, 0.0, 1.0, 1.0]);
        let mut t2 = t.clone();
        t2.image_size = (50, 50);
        let err = aggregate_image_level(&[t.clone(), t2]).unwrap_err();
        assert!(err.to_string().contains("img7"));
        t.expression = "  ".into();
        assert!(matches!(t.validate(), Err(DataError::EmptyExpression { .. })));
        let oob = trip("i", "x", [0.0, 0.0, 101.0, 1.0]);
        assert!(matches!(oob.validate(), Err(DataError::BoxOutOfBounds { .. })));
    }

    #[test]
    fn naive_is_per_triplet() {
        let a = trip("i", "a green taxi on the left", [0.0, 0.0, 5.0, 5.0]);
        let b = trip("i", "a green taxi on the left", [6.0, 0.0, 9.0, 5.0]);
        let sa = naive_reformulate(&a).unwrap();
        let sb = naive_reformulate(&b).unwrap();
        assert_eq!(sa.queries.len(), 1);
        assert_eq!(sa.queries[0].kind, QueryKind::Expression);
        assert_eq!(sa.ground_truth[0].query_index, 0);
        assert_ne!(sa, sb);
    }

    #[test]
    fn detection_annotations() {
        let b = BoxXYXY::pixel(0.0, 0.0, 5.0, 5.0);
        let s = from_detection_annotations(
            "d",
            (10, 10),
            &[(b, "vehicle".into()), (b, "vehicle".into()), (b, "ship".into())],
        )
        .unwrap();
        assert_eq!(s.queries.len(), 2);
        assert!(s.queries.iter().all(|q| q.kind == QueryKind::Category));
        s.validate().unwrap();

        let one = from_detection_annotations("d", (10, 10), &[(b, "airport".into())]).unwrap();
        assert_eq!(one.queries[0].attributes.len(), 1);
        assert_eq!(one.queries[0].attributes[0].description, "airport");

        let empty = from_detection_annotations("d", (10, 10), &[]).unwrap();
        assert!(!empty.is_usable());
        assert!(from_detection_annotations("d", (10, 10), &[(b, " ".into())]).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let samples: Vec<_> = (0..10)
            .map(|i| {
                let b = BoxXYXY::pixel(i as f64, 0.0, i as f64 + 1.5, 2.25);
                from_detection_annotations(&format!("img{i}"), (64, 48), &[(b, format!("cat{i}"))]).unwrap()
            })
            .collect();
        save_jsonl(&path, &samples).unwrap();
        let loaded = load_jsonl::<AggregatedSample>(&path, ParseMode::Strict).unwrap();
        assert_eq!(loaded.records, samples);

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert!(v["image_size"].is_array());
        assert!(v["gt"][0]["box"].is_array());
        assert_eq!(v["queries"][0]["kind"], "category");

        std::fs::write(&path, format!("{first}\n{{broken\n{first}\n")).unwrap();
        let lenient = load_jsonl::<AggregatedSample>(&path, ParseMode::Lenient).unwrap();
        assert_eq!(lenient.records.len(), 2);
        assert_eq!(lenient.skipped.len(), 1);
        assert_eq!(lenient.skipped[0].0, 2);
        match load_jsonl::<AggregatedSample>(&path, ParseMode::Strict) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let missing = load_jsonl::<AggregatedSample>(&dir.path().join("nope"), ParseMode::Strict);
        assert!(matches!(missing, Err(DataError::Io { .. })));
    }

    fn arb_triplets() -> impl Strategy<Value = Vec<GroundingTriplet>> {
        let exprs = prop::sample::select(vec!["a car", "a  car", "the ship", "red roof", "tank"]);
        prop::collection::vec((0..3usize, exprs, 0.0..50.0f64, 0.0..50.0f64), 0..12).prop_map(|v| {
            v.into_iter()
                .map(|(img, e, x, y)| GroundingTriplet {
                    image_id: format!("im{img}"),
                    image_size: (100, 100),
                    expression: e.to_string(),
                    box_: BoxXYXY::pixel(x, y, x + 10.0, y + 10.0),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn aggregation_invariants(ts in arb_triplets()) {
            let samples = aggregate_image_level(&ts).unwrap();
            let total: usize = samples.iter().map(|s| s.ground_truth.len()).sum();
            prop_assert_eq!(total, ts.len());
            for s in &samples {
                s.validate().unwrap();
            }
            let flat: Vec<_> = samples.iter().flat_map(|s| s.to_triplets()).collect();
            prop_assert_eq!(aggregate_image_level(&flat).unwrap(), samples.clone());
            prop_assert_eq!(aggregate_image_level(&ts).unwrap(), samples);
        }
    }
}
