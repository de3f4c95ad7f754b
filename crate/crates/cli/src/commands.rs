use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::Serialize;

use ota_core::attr_decomp::{
    decompose_many, truncate_attributes, validate, Backoff, ChatClient, DecomposeError, DecompositionResult,
    MockClient, ValidationReport, DEFAULT_A_MAX,
};
use ota_core::data::{
    aggregate_image_level, load_jsonl, naive_reformulate, normalize_text, save_jsonl, AggregatedSample,
    GroundingTriplet, ParseMode, QueryKind,
};
use ota_core::geometry::BoxXYXY;
use ota_core::gradcheck::{Fault, GradcheckConfig};
use ota_core::inference::ImagePredictions;
use ota_core::metrics::{verdicts_csv, ExpressionEval, GtBox, MetricReport, ScoredBox};
use ota_core::rng::derived_rng;
use ota_core::supervision::{sample_ovad, sample_rsvg, verify_consistency, CorrespondenceSet, TextBatch};
use ota_core::toy::{evaluate_recovery, generate_world, train, ToyConfig, TrainConfig};

use crate::config::AppConfig;
use crate::{
    AggregateArgs, BuildSupervisionArgs, CmdResult, DecomposeArgs, EvalArgs, Fail, Format, GradcheckArgs, ReportArgs,
    Task, TrainToyArgs, ValidateAttrsArgs,
};

/// Writes to stdout; a closed pipe is not an error worth a panic.
macro_rules! emit {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! emit_raw {
    ($($t:tt)*) => {{
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

pub struct Ctx {
    pub cfg: AppConfig,
    pub strict: bool,
}

impl Ctx {
    fn mode(&self) -> ParseMode {
        if self.strict {
            ParseMode::Strict
        } else {
            ParseMode::Lenient
        }
    }

    fn input(&self, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        flag.or_else(|| self.cfg.paths.input.clone())
            .ok_or_else(|| anyhow!("no input path: pass --input or set paths.input"))
    }

    fn output(&self, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        flag.or_else(|| self.cfg.paths.output.clone())
            .ok_or_else(|| anyhow!("no output path: pass --output or set paths.output"))
    }

    fn load<T: serde::de::DeserializeOwned>(&self, path: &Path) -> anyhow::Result<Vec<T>> {
        let loaded = load_jsonl::<T>(path, self.mode())?;
        for (line, msg) in &loaded.skipped {
            log::warn!("{}:{line}: skipped: {msg}", path.display());
        }
        Ok(loaded.records)
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T], append: bool) -> anyhow::Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn aggregate(ctx: &Ctx, a: AggregateArgs) -> CmdResult {
    let input = ctx.input(a.input)?;
    let output = ctx.output(a.output)?;
    let mut triplets: Vec<GroundingTriplet> = ctx.load(&input)?;
    if !ctx.strict {
        triplets.retain(|t| match t.validate() {
            Ok(()) => true,
            Err(e) => {
                log::warn!("skipping triplet for {}: {e}", t.image_id);
                false
            }
        });
    }
    let samples = if a.naive {
        triplets.iter().map(naive_reformulate).collect::<Result<Vec<_>, _>>()?
    } else {
        aggregate_image_level(&triplets)?
    };
    save_jsonl(&output, &samples)?;
    emit!("{} triplets -> {} samples", triplets.len(), samples.len());
    Ok(())
}

/// Expression texts still lacking attributes, in first-appearance order.
fn pending_captions(samples: &[AggregatedSample]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in samples {
        for q in &s.queries {
            if q.kind == QueryKind::Expression && q.attributes.is_empty() && seen.insert(q.text.clone()) {
                out.push(q.text.clone());
            }
        }
    }
    out
}

fn apply_attributes(samples: &mut [AggregatedSample], known: &HashMap<String, Vec<ota_core::attr_decomp::Attribute>>) {
    for s in samples {
        for q in &mut s.queries {
            if q.kind == QueryKind::Expression && q.attributes.is_empty() {
                if let Some(attrs) = known.get(&q.text) {
                    q.attributes = attrs.clone();
                }
            }
        }
    }
}

#[derive(Serialize)]
struct RejectRecord<'a> {
    caption: &'a str,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<&'a ValidationReport>,
}

fn build_client(ctx: &Ctx, a: &DecomposeArgs) -> anyhow::Result<Box<dyn ChatClient + Sync>> {
    if a.mock {
        return Ok(Box::new(MockClient));
    }
    let mut llm = ctx.cfg.llm.clone();
    // File < flag < environment.
    if let Some(e) = &a.endpoint {
        llm.endpoint = Some(e.clone());
    }
    if let Some(m) = &a.model {
        llm.model = Some(m.clone());
    }
    llm.endpoint = std::env::var(crate::config::ENV_ENDPOINT).ok().filter(|v| !v.is_empty()).or(llm.endpoint);
    llm.model = std::env::var(crate::config::ENV_MODEL).ok().filter(|v| !v.is_empty()).or(llm.model);
    let Some(url) = llm.endpoint else {
        bail!("no decomposition backend: pass --mock, --endpoint, or set {}", crate::config::ENV_ENDPOINT);
    };
    let model = llm
        .model
        .ok_or_else(|| anyhow!("no model name: pass --model or set {}", crate::config::ENV_MODEL))?;
    Ok(Box::new(ota_core::attr_decomp::HttpChatClient::new(
        ota_core::attr_decomp::LlmEndpoint {
            url,
            model,
            api_key: llm.key,
            timeout_secs: llm.timeout_secs.unwrap_or(120),
        },
    )))
}

pub fn decompose(ctx: &Ctx, a: DecomposeArgs) -> CmdResult {
    let input = ctx.input(a.input.clone())?;
    let output = ctx.output(a.output.clone())?;
    let client = build_client(ctx, &a)?;
    let a_max = a.a_max.or(ctx.cfg.sampler.a_max).unwrap_or(DEFAULT_A_MAX);
    let mut samples: Vec<AggregatedSample> = ctx.load(&input)?;

    let mut known: HashMap<String, Vec<ota_core::attr_decomp::Attribute>> = HashMap::new();
    if a.resume && output.exists() {
        let previous: Vec<AggregatedSample> = ctx.load(&output)?;
        for q in previous.iter().flat_map(|s| &s.queries) {
            if q.kind == QueryKind::Expression && !q.attributes.is_empty() {
                known.insert(q.text.clone(), q.attributes.clone());
            }
        }
        apply_attributes(&mut samples, &known);
        log::info!("resume: {} captions already decomposed", known.len());
    }

    let pending = pending_captions(&samples);
    let jobs: Vec<(String, String)> = pending.iter().map(|c| (c.clone(), c.clone())).collect();
    let concurrency = a.concurrency.or(ctx.cfg.llm.concurrency).unwrap_or(4);
    let retries = a.retries.or(ctx.cfg.llm.retries).unwrap_or(2);
    let backoff = if a.mock { Backoff::NONE } else { Backoff::default() };
    let results = decompose_many(client.as_ref(), &jobs, concurrency, retries, a.seed, a_max, backoff);

    let mut transcripts = Vec::new();
    let mut rejects = Vec::new();
    let mut fresh = HashMap::new();
    for (caption, r) in &results {
        match r {
            Ok(out) => {
                transcripts.extend(out.transcript.iter().cloned());
                let kept = truncate_attributes(out.result.clone(), a_max);
                fresh.insert(caption.clone(), kept.attributes);
            }
            Err(e) => {
                transcripts.extend(e.transcript().iter().cloned());
                let report = match e {
                    DecomposeError::AllRejected { report, .. } => report.as_ref(),
                    _ => None,
                };
                rejects.push(RejectRecord {
                    caption,
                    error: e.to_string(),
                    report,
                });
            }
        }
    }
    apply_attributes(&mut samples, &fresh);
    save_jsonl(&output, &samples)?;
    if let Some(p) = a.transcripts.as_ref().or(ctx.cfg.paths.transcripts.as_ref()) {
        write_jsonl(p, &transcripts, a.resume)?;
    }
    if let Some(p) = a.rejects.as_ref().or(ctx.cfg.paths.rejects.as_ref()) {
        write_jsonl(p, &rejects, false)?;
    }
    for r in &rejects {
        log::warn!("rejected caption {:?}: {}", r.caption, r.error);
    }
    emit!(
        "{} captions decomposed, {} reused, {} rejected",
        fresh.len(),
        known.len(),
        rejects.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct AttrCheck<'a> {
    image_id: &'a str,
    query_index: usize,
    text: &'a str,
    report: ValidationReport,
}

pub fn validate_attrs(ctx: &Ctx, a: ValidateAttrsArgs) -> CmdResult {
    let input = ctx.input(a.input)?;
    let a_max = a.a_max.or(ctx.cfg.sampler.a_max).unwrap_or(DEFAULT_A_MAX);
    let samples: Vec<AggregatedSample> = ctx.load(&input)?;
    let mut checks = Vec::new();
    for s in &samples {
        for (qi, q) in s.queries.iter().enumerate() {
            let result = DecompositionResult {
                primary_target: String::new(),
                attributes: q.attributes.clone(),
                analysis: String::new(),
            };
            checks.push(AttrCheck {
                image_id: &s.image_id,
                query_index: qi,
                text: &q.text,
                report: validate(&q.text, &result, a_max),
            });
        }
    }
    let rejected: Vec<&AttrCheck> = checks.iter().filter(|c| !c.report.accepted()).collect();
    match a.output {
        Some(p) => write_jsonl(&p, &checks, false)?,
        None => {
            for c in &rejected {
                emit!("{}", serde_json::to_string(c).expect("serializes"));
            }
        }
    }
    emit!("{} queries checked, {} rejected", checks.len(), rejected.len());
    if rejected.is_empty() {
        Ok(())
    } else {
        Err(Fail::Check(format!("{} queries have invalid attributes", rejected.len())))
    }
}

#[derive(Serialize)]
struct SupervisionDump<'a> {
    image_id: &'a str,
    text_batch: &'a TextBatch,
    correspondence: &'a CorrespondenceSet,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    violations: Vec<ota_core::supervision::ConsistencyViolation>,
}

fn file_stem(image_id: &str) -> String {
    image_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn build_supervision(ctx: &Ctx, a: BuildSupervisionArgs) -> CmdResult {
    let input = ctx.input(a.input)?;
    let output = ctx.output(a.output)?;
    let mut sampler = ctx.cfg.sampler_config();
    if let Some(v) = a.q_max {
        sampler.q_max = v;
    }
    if let Some(v) = a.a_max {
        sampler.a_max = v;
    }
    if let Some(v) = a.seed {
        sampler.seed = v;
    }
    if a.no_shuffle {
        sampler.shuffle = false;
    }
    sampler.validate()?;
    let samples: Vec<AggregatedSample> = ctx.load(&input)?;
    let vocabulary: Vec<String> = match &a.vocabulary {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .lines()
            .map(normalize_text)
            .filter(|l| !l.is_empty())
            .collect(),
        None => {
            let set: BTreeSet<String> = samples
                .iter()
                .flat_map(|s| &s.queries)
                .filter(|q| q.kind == QueryKind::Category)
                .map(|q| normalize_text(&q.text))
                .collect();
            set.into_iter().collect()
        }
    };
    if let Some(d) = &a.matrices_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    let mut dumps = Vec::new();
    let mut batches = Vec::new();
    for s in &samples {
        if !s.is_usable() {
            log::warn!("skipping {}: no queries or boxes", s.image_id);
            continue;
        }
        s.validate().with_context(|| format!("sample {}", s.image_id))?;
        let mut rng = derived_rng(sampler.seed, &s.image_id);
        let (tb, cs) = match a.task {
            Task::Ovad => sample_ovad(s, &vocabulary, &sampler, &mut rng),
            Task::Rsvg => sample_rsvg(s, &sampler, &mut rng),
        }
        .with_context(|| format!("sample {}", s.image_id))?;
        if let Some(d) = &a.matrices_dir {
            let [mq, ma, mm] = cs.to_binary();
            let stem = file_stem(&s.image_id);
            for (name, bytes) in [("m_q", mq), ("m_a", ma), ("m_map", mm)] {
                let p = d.join(format!("{stem}.{name}.bin"));
                fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        batches.push((s.image_id.as_str(), tb, cs));
    }
    let mut n_violations = 0;
    for (id, tb, cs) in &batches {
        let violations = verify_consistency(cs, tb);
        n_violations += violations.len();
        dumps.push(SupervisionDump {
            image_id: id,
            text_batch: tb,
            correspondence: cs,
            violations,
        });
    }
    write_jsonl(&output, &dumps, false)?;
    emit!("{} samples, {} consistency violations", dumps.len(), n_violations);
    if n_violations > 0 {
        return Err(Fail::Check(format!("{n_violations} consistency violations")));
    }
    Ok(())
}

pub fn gradcheck(ctx: &Ctx, a: GradcheckArgs) -> CmdResult {
    let cfg = GradcheckConfig {
        seed: a.seed,
        trials: a.trials,
        eps: a.eps,
        mal: ctx.cfg.mal_config(),
        fault: if a.inject_fault { Fault::FlipBetaSign } else { Fault::None },
        ..GradcheckConfig::default()
    };
    if cfg.trials == 0 || cfg.eps.is_nan() || cfg.eps <= 0.0 {
        return Err(Fail::Input(anyhow!("--trials and --eps must be positive")));
    }
    let report = ota_core::gradcheck::gradcheck(&cfg);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &a.output {
        Some(p) => write_text(p, &json)?,
        None => emit!("{json}"),
    }
    if report.passed {
        Ok(())
    } else {
        Err(Fail::Check(format!("gradient mismatch in {}", report.failing_groups.join(", "))))
    }
}

pub fn train_toy(ctx: &Ctx, a: TrainToyArgs) -> CmdResult {
    let cfg = &ctx.cfg;
    let base = TrainConfig::default();
    let mut weights = cfg.loss_weights();
    if let Some(l) = a.lambda_attr {
        weights.attr = l;
    }
    let train_cfg = TrainConfig {
        steps: a.steps.or(cfg.train.steps).unwrap_or(base.steps),
        lr: a.lr.or(cfg.train.lr).unwrap_or(base.lr),
        weights,
        mal: cfg.mal_config(),
        sampler: cfg.sampler_over(base.sampler.clone()),
        seed: a.seed.or(cfg.train.seed).unwrap_or(base.seed),
        ..base
    };
    let world_cfg = ToyConfig {
        seed: a.world_seed.or(cfg.train.world_seed).unwrap_or(0),
        d_vis: cfg.head.d_vis.unwrap_or(ota_core::align_head::DEFAULT_D_VIS),
        d_txt: cfg.head.d_txt.unwrap_or(ota_core::align_head::DEFAULT_D_TXT),
        shared_affine: a.shared_affine || cfg.head.shared_affine.unwrap_or(false),
        ..ToyConfig::default()
    };
    let world = generate_world(&world_cfg)?;
    let out = match train(&world, &train_cfg) {
        Ok(o) => o,
        Err(e @ ota_core::toy::ToyError::Diverged { .. }) => return Err(Fail::Check(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let recovery = evaluate_recovery(&world, &out.params, &out.features, &train_cfg)?;
    if let Some(p) = &a.history {
        write_text(p, &out.history_csv())?;
    }
    let checkpoint = a
        .checkpoint
        .clone()
        .or_else(|| cfg.paths.checkpoints.as_ref().map(|d| d.join("head.bin")));
    if let Some(p) = checkpoint {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let f = fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        out.params.write_checkpoint(std::io::BufWriter::new(f))?;
    }
    match &a.report {
        Some(p) => write_text(p, &recovery.to_json())?,
        None => emit!("{}", recovery.to_json()),
    }
    eprintln!(
        "loss {:.6} -> {:.6}; M_Q agreement {:.3} (balanced {:.3}); M_A agreement {:.3} (balanced {:.3})",
        out.initial_loss, out.final_loss, recovery.query.raw, recovery.query.balanced, recovery.attr.raw, recovery.attr.balanced
    );
    Ok(())
}

/// Expression-level evaluations plus category-level detection lists.
fn build_evals(
    samples: &[AggregatedSample],
    preds: &[ImagePredictions],
) -> anyhow::Result<(Vec<ExpressionEval>, Vec<ScoredBox>, Vec<GtBox>)> {
    let by_image: BTreeMap<&str, &ImagePredictions> = preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let known: BTreeSet<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
    for p in preds {
        if !known.contains(p.image_id.as_str()) {
            log::warn!("predictions for unknown image {}", p.image_id);
        }
    }
    let mut evals = Vec::new();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for s in samples {
        let pred = by_image.get(s.image_id.as_str());
        for d in pred.map(|p| p.detections.as_slice()).unwrap_or_default() {
            if d.query_index >= s.queries.len() {
                bail!("{}: detection refers to query {} of {}", s.image_id, d.query_index, s.queries.len());
            }
        }
        for (qi, q) in s.queries.iter().enumerate() {
            let gt: Vec<BoxXYXY> = s.ground_truth.iter().filter(|g| g.query_index == qi).map(|g| g.box_).collect();
            let own: Vec<_> = pred
                .map(|p| p.detections.iter().filter(|d| d.query_index == qi).collect())
                .unwrap_or_default();
            if q.kind == QueryKind::Category {
                for d in &own {
                    dets.push(ScoredBox {
                        image_id: s.image_id.clone(),
                        category: q.text.clone(),
                        score: d.query_score,
                        box_: d.box_,
                    });
                }
                for b in &gt {
                    gts.push(GtBox {
                        image_id: s.image_id.clone(),
                        category: q.text.clone(),
                        box_: *b,
                    });
                }
                continue;
            }
            let top = own
                .iter()
                .copied()
                .reduce(|best, d| if d.query_score > best.query_score { d } else { best });
            evals.push(ExpressionEval {
                id: format!("{}/{}", s.image_id, qi),
                top1: top.map(|d| d.box_),
                gt,
                attr_scores: top.map(|d| d.attr_labels.iter().map(|l| l.score).collect()).unwrap_or_default(),
            });
        }
    }
    Ok((evals, dets, gts))
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> CmdResult {
    if !a.gt.exists() {
        return Err(Fail::Input(anyhow!("ground-truth file {} does not exist", a.gt.display())));
    }
    if !a.predictions.exists() {
        return Err(Fail::Input(anyhow!("predictions file {} does not exist", a.predictions.display())));
    }
    if a.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Fail::Input(anyhow!("every tau must lie in [0, 1]")));
    }
    let samples: Vec<AggregatedSample> = ctx.load(&a.gt)?;
    let preds: Vec<ImagePredictions> = ctx.load(&a.predictions)?;
    let (evals, dets, gts) = build_evals(&samples, &preds)?;
    let mut report = MetricReport::from_expressions(&evals, &a.taus);
    if !gts.is_empty() || !dets.is_empty() {
        report = report.with_detection_metrics(&dets, &gts);
    }
    if let Some(p) = &a.verdicts {
        write_text(p, &verdicts_csv(&evals, &a.taus))?;
    }
    if let Some(p) = &a.output {
        write_text(p, &report.to_json())?;
    }
    match a.format {
        Format::Json => emit!("{}", report.to_json()),
        Format::Table => emit_raw!("{}", report.to_table()),
    }
    Ok(())
}

pub fn report(_ctx: &Ctx, a: ReportArgs) -> CmdResult {
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let report: MetricReport =
        serde_json::from_str(&text).with_context(|| format!("{} is not a metric report", a.input.display()))?;
    match a.format {
        Format::Json => emit!("{}", report.to_json()),
        Format::Table => emit_raw!("{}", report.to_table()),
    }
    Ok(())
}
