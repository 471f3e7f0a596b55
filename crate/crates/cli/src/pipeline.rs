use std::collections::BTreeMap;
use std::path::Path;

use counsel_core::corpus::{
    extract_intervention_points, generate_synthetic_corpus, read_jsonl, split_corpus, write_jsonl, Session, Split, Strategy,
};
use counsel_core::evaluation::{
    analyze_judgments, build_pairwise_tasks, embedding_similarity, summarize_generation, AssignmentMap, EvalRecord,
    HistoryTurn, Judgment, PairwiseSource, SimilarityScore,
};
use counsel_core::generator::{
    pretrain_decoder, prompt_strategies, train_generator, Condition, GenerationExample, GenerationInput, GeneratorModel,
    PromptText, Tokenizer,
};
use counsel_core::hgt::{
    build_points, calibrate_thresholds, evaluate_classifier, macro_f1, predict_points, train_classifier, HgtModel,
    LabeledPoint, ThresholdSet,
};
use counsel_core::numerics::Checkpoint;
use counsel_core::session_graph::{build_graph, point_subgraph, GraphAblation, GraphInputs, GraphMode, HashingEncoder};
use serde::{Deserialize, Serialize};

use crate::config::SplitPart;
use crate::{CliError, Run};

type Result<T> = std::result::Result<T, CliError>;

pub const CLASSIFIER: &str = "classifier.ckpt.json";
pub const BASE_DECODER: &str = "decoder_base.ckpt.json";

/// Checkpoint artifact holding the generator for `c`.
pub fn generator_artifact(c: Condition) -> String {
    match c {
        Condition::Vanilla => BASE_DECODER.to_string(),
        c => format!("generator_{}.ckpt.json", c.name()),
    }
}

fn inputs(run: &Run) -> GraphInputs<'_> {
    GraphInputs {
        lexicon: &run.lexicon,
        taxonomy: &run.taxonomy,
        encoder: &run.encoder,
    }
}

fn load_corpus(run: &mut Run) -> Result<(Vec<Session>, Split)> {
    let raw = run.read("corpus.jsonl")?;
    let sessions = read_jsonl(raw.as_slice(), &run.taxonomy)?;
    let split: Split = run.read_json("split.json")?;
    Ok((sessions, split))
}

fn part<'a>(sessions: &'a [Session], split: &Split, p: SplitPart) -> Vec<&'a Session> {
    match p {
        SplitPart::Val => split.select(sessions, &split.val),
        SplitPart::Test => split.select(sessions, &split.test),
    }
}

fn load_checkpoint(run: &mut Run, artifact: &str, over: Option<&Path>) -> Result<Checkpoint> {
    let b = run.read_from(artifact, over)?;
    let s = std::str::from_utf8(&b).map_err(|e| CliError::Input(format!("{artifact}: {e}")))?;
    Ok(Checkpoint::from_json(s)?)
}

fn load_classifier(run: &mut Run, over: Option<&Path>) -> Result<HgtModel> {
    let ck = load_checkpoint(run, CLASSIFIER, over)?;
    Ok(HgtModel::from_checkpoint(&ck)?)
}

fn load_generator(run: &mut Run, c: Condition) -> Result<GeneratorModel> {
    let ck = load_checkpoint(run, &generator_artifact(c), None)?;
    let m = GeneratorModel::from_checkpoint(&ck)?;
    if m.condition != c {
        return Err(CliError::Input(format!("{} holds {} rather than {c}", generator_artifact(c), m.condition)));
    }
    Ok(m)
}

fn labels(points: &[LabeledPoint]) -> Vec<[bool; 3]> {
    points.iter().map(|p| p.labels).collect()
}

fn points(run: &Run, sessions: &[&Session], mode: GraphMode, ablation: GraphAblation) -> Result<Vec<LabeledPoint>> {
    Ok(build_points(sessions, inputs(run), mode, ablation)?)
}

pub fn gen_corpus(run: &mut Run) -> Result<()> {
    let c = &run.config;
    let sessions = generate_synthetic_corpus(&c.corpus, &run.lexicon, &run.taxonomy, c.seed)?;
    let split = split_corpus(&sessions, c.split_ratios, c.seed)?;
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &sessions)?;
    run.write("corpus.jsonl", &buf)?;
    run.write_json("split.json", &split)
}

pub fn build_graph_cmd(run: &mut Run) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let train = split.select(&sessions, &split.train);
    let owned: Vec<Session> = train.into_iter().cloned().collect();
    let graph = build_graph(&owned, inputs(run), GraphMode::Train)?;
    graph.validate()?;
    let lex: Vec<String> = run.lexicon.categories().iter().map(|c| c.id.clone()).collect();
    let export = graph.export(&lex, &run.taxonomy.distress_catalogue);
    run.write_json("graph_stats.json", &graph.stats())?;
    run.write_json("graph.json", &export)
}

pub fn train_classifier_cmd(run: &mut Run) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let ablation = run.config.classifier.ablation;
    let train = points(run, &split.select(&sessions, &split.train), GraphMode::Train, ablation)?;
    let val = points(run, &split.select(&sessions, &split.val), GraphMode::Infer, ablation)?;
    let mut model = HgtModel::new(run.config.classifier.clone())?;
    let report = train_classifier(&mut model, &train, &val, &run.config.classifier_training)?;
    let ck = model.to_checkpoint(serde_json::json!({ "encoder": run.config.encoder }))?;
    run.write(CLASSIFIER, ck.to_json()?.as_bytes())?;
    run.write_json("classifier_train.json", &report)
}

#[derive(Serialize)]
struct Calibration {
    thresholds: ThresholdSet,
    val_points: usize,
    uniform_macro_f1: f64,
    calibrated_macro_f1: f64,
}

pub fn calibrate(run: &mut Run, checkpoint: Option<&Path>) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let model = load_classifier(run, checkpoint)?;
    let val = points(run, &split.select(&sessions, &split.val), GraphMode::Infer, model.config.ablation)?;
    let probs = predict_points(&model, &val, 64)?;
    let y = labels(&val);
    let t = calibrate_thresholds(&probs, &y)?;
    run.write_json("thresholds.json", &t)?;
    run.write_json(
        "calibration.json",
        &Calibration {
            thresholds: t,
            val_points: val.len(),
            uniform_macro_f1: macro_f1(&ThresholdSet::default().apply_all(&probs), &y),
            calibrated_macro_f1: macro_f1(&t.apply_all(&probs), &y),
        },
    )
}

#[derive(Deserialize)]
struct PredictionRow {
    point_id: String,
    probabilities: [f64; 3],
}

pub fn eval_classifier(run: &mut Run, checkpoint: Option<&Path>, predictions: Option<&Path>) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let thresholds: ThresholdSet = run.read_json("thresholds.json")?;
    let test_sessions = split.select(&sessions, &split.test);
    let (probs, y) = match predictions {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let mut by_id = BTreeMap::new();
            for (i, l) in raw.lines().filter(|l| !l.trim().is_empty()).enumerate() {
                let r: PredictionRow =
                    serde_json::from_str(l).map_err(|e| CliError::Input(format!("{} line {}: {e}", p.display(), i + 1)))?;
                by_id.insert(r.point_id, r.probabilities);
            }
            let mut probs = Vec::new();
            let mut y = Vec::new();
            for s in &test_sessions {
                for pt in extract_intervention_points(s).0 {
                    let pr = by_id
                        .get(&pt.id())
                        .ok_or_else(|| CliError::Input(format!("no prediction for point {}", pt.id())))?;
                    probs.push(*pr);
                    y.push(pt.targets.0);
                }
            }
            (probs, y)
        }
        None => {
            let model = load_classifier(run, checkpoint)?;
            let test = points(run, &test_sessions, GraphMode::Infer, model.config.ablation)?;
            (predict_points(&model, &test, 64)?, labels(&test))
        }
    };
    let report = evaluate_classifier(&thresholds.apply_all(&probs), &y)?;
    run.write("classifier_confusion.csv", report.confusion_csv().as_bytes())?;
    run.write_json("classifier_report.json", &report)
}

#[derive(Serialize)]
struct PretrainSummary {
    tokenizer_vocab: usize,
    report: counsel_core::generator::PretrainReport,
}

pub fn pretrain(run: &mut Run) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let train = split.select(&sessions, &split.train);
    let mut texts: Vec<&str> = train.iter().flat_map(|s| s.utterances.iter().map(|u| u.text.as_str())).collect();
    for d in &run.taxonomy.strategies {
        for _ in 0..run.config.tokenizer.definition_repeats {
            texts.push(&d.definition);
        }
    }
    let tok = Tokenizer::train(texts, run.config.tokenizer.vocab_size)?;
    run.write("tokenizer.txt", tok.serialize().as_bytes())?;
    let mut base = GeneratorModel::base(run.config.generator.clone(), tok)?;
    let report = pretrain_decoder(&mut base, &train, &run.config.pretrain)?;
    run.write(BASE_DECODER, base.to_checkpoint()?.to_json()?.as_bytes())?;
    run.write_json(
        "pretrain.json",
        &PretrainSummary {
            tokenizer_vocab: base.tokenizer.vocab_size(),
            report,
        },
    )
}

pub fn train_generator_cmd(run: &mut Run, checkpoint: Option<&Path>) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let base = load_generator(run, Condition::Vanilla)?;
    let hgt = load_classifier(run, checkpoint)?;
    let window = run.config.generator.window;
    let train = counsel_core::generator::build_examples(
        &split.select(&sessions, &split.train),
        &run.taxonomy,
        inputs(run),
        GraphMode::Train,
        window,
    )?;
    let val = counsel_core::generator::build_examples(
        &split.select(&sessions, &split.val),
        &run.taxonomy,
        inputs(run),
        GraphMode::Infer,
        window,
    )?;
    let mut reports = BTreeMap::new();
    for &c in &run.config.conditions.clone() {
        if c == Condition::Vanilla {
            continue;
        }
        let mut m = GeneratorModel::for_condition(&base, c, Some(&hgt))?;
        let mut val_c = val.clone();
        m.prepare(val_c.iter_mut().map(|e| &mut e.input))?;
        let report = train_generator(&mut m, &train, &val_c, &run.config.finetune)?;
        run.write(&generator_artifact(c), m.to_checkpoint()?.to_json()?.as_bytes())?;
        reports.insert(c.name().to_string(), report);
    }
    run.write_json("generator_train.json", &reports)
}

/// One evaluated intervention point with its strategies from the classifier.
struct EvalPoint {
    example: GenerationExample,
}

fn eval_points(run: &Run, sessions: &[&Session], hgt: &HgtModel, t: &ThresholdSet, cap: Option<usize>) -> Result<Vec<EvalPoint>> {
    let mut out = Vec::new();
    for s in sessions {
        for p in extract_intervention_points(s).0 {
            if cap.is_some_and(|c| out.len() >= c) {
                return Ok(out);
            }
            let cls = point_subgraph(s, p.seeker_index, inputs(run), GraphMode::Infer, hgt.config.ablation)?;
            let strategies = prompt_strategies(hgt.predict(&cls)?, t);
            let example = GenerationExample {
                point_id: p.id(),
                input: GenerationInput {
                    prompt: PromptText::for_point(s, p.seeker_index, &strategies, &run.taxonomy, run.config.generator.window)?,
                    graph: point_subgraph(s, p.seeker_index, inputs(run), GraphMode::Infer, GraphAblation::Full)?,
                    context: None,
                },
                response: s.utterances[p.caregiver_index].text.clone(),
            };
            out.push(EvalPoint { example });
        }
    }
    Ok(out)
}

fn similarity(candidate: &str, reference: &str, enc: &HashingEncoder) -> Result<SimilarityScore> {
    if counsel_core::evaluation::tokens(candidate).is_empty() {
        return Ok(SimilarityScore { precision: 0.0, recall: 0.0, f1: 0.0 });
    }
    Ok(embedding_similarity(candidate, reference, enc)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningChecks {
    pub condition: Condition,
    pub points: usize,
    /// Points whose greedy output differs between two single-strategy prompts.
    pub strategy_swap_changed: usize,
    /// Points whose greedy output changes when the gate is set to zero.
    pub zero_gate_changed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub perplexity: f64,
    pub similarity_f1: f64,
    pub mean_gate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    pub split: SplitPart,
    pub points: usize,
    pub similarity_metric: String,
    pub conditions: Vec<ConditionResult>,
    pub checks: Option<ConditioningChecks>,
}

/// Strategy-swap and zero-gate checks for a soft-prompted, strategy-prompted model.
pub fn conditioning_checks(model: &GeneratorModel, examples: &[GenerationExample], taxonomy: &counsel_core::corpus::Taxonomy) -> Result<ConditioningChecks> {
    let mut zero = model.clone();
    let has_gate = zero.gate().is_some();
    if has_gate {
        zero.set_gate(0.0)?;
    }
    let (mut swapped, mut gated) = (0, 0);
    for ex in examples {
        let mut input = ex.input.clone();
        model.prepare(std::iter::once(&mut input))?;
        let with = |s: Strategy| {
            let mut i = input.clone();
            i.prompt.strategies = vec![(s, taxonomy.definition(s).to_string())];
            i
        };
        let a = model.generate(&with(Strategy::Reflection), None)?.text;
        let b = model.generate(&with(Strategy::Exploration), None)?.text;
        swapped += usize::from(a != b);
        if has_gate {
            let out = model.generate(&input, None)?.text;
            gated += usize::from(zero.generate(&input, None)?.text != out);
        }
    }
    Ok(ConditioningChecks {
        condition: model.condition,
        points: examples.len(),
        strategy_swap_changed: swapped,
        zero_gate_changed: gated,
    })
}

pub fn eval_generation(run: &mut Run, checkpoint: Option<&Path>) -> Result<()> {
    let (sessions, split) = load_corpus(run)?;
    let hgt = load_classifier(run, checkpoint)?;
    let thresholds: ThresholdSet = run.read_json("thresholds.json")?;
    let conditions = run.config.conditions.clone();
    let mut models = Vec::new();
    for &c in &conditions {
        models.push(load_generator(run, c)?);
    }
    let ecfg = run.config.evaluation.clone();
    let pts = eval_points(run, &part(&sessions, &split, ecfg.split), &hgt, &thresholds, ecfg.max_points)?;
    if pts.is_empty() {
        return Err(CliError::Input("no intervention points to evaluate".into()));
    }
    let enc = run.config.encoder.clone();
    let mut records = Vec::with_capacity(pts.len());
    let mut gates: Vec<Vec<f64>> = vec![Vec::new(); models.len()];
    for p in &pts {
        let mut rec = EvalRecord {
            point_id: p.example.point_id.clone(),
            gold: p.example.response.clone(),
            generated: BTreeMap::new(),
            similarity: BTreeMap::new(),
            token_nll: BTreeMap::new(),
        };
        for (k, m) in models.iter().enumerate() {
            let mut ex = p.example.clone();
            m.prepare(std::iter::once(&mut ex.input))?;
            let out = m.generate(&ex.input, None)?;
            if let Some(g) = out.gate {
                gates[k].push(g);
            }
            rec.similarity.insert(m.condition, similarity(&out.text, &ex.response, &enc)?);
            rec.token_nll.insert(m.condition, m.token_nll(&ex)?);
            rec.generated.insert(m.condition, out.text);
        }
        records.push(rec);
    }
    let summary = summarize_generation(&records, &conditions, ecfg.alpha)?;
    let checks = match models.iter().find(|m| m.condition.preset().soft_prompt && m.condition.preset().strategy_prompt) {
        Some(m) => {
            let val = eval_points(run, &part(&sessions, &split, SplitPart::Val), &hgt, &thresholds, Some(ecfg.check_points))?;
            let examples: Vec<GenerationExample> = val.into_iter().map(|p| p.example).collect();
            Some(conditioning_checks(m, &examples, &run.taxonomy)?)
        }
        None => None,
    };
    let mut lines = Vec::new();
    for r in &records {
        serde_json::to_writer(&mut lines, r).map_err(|e| CliError::Compute(e.to_string()))?;
        lines.push(b'\n');
    }
    run.write("eval_records.jsonl", &lines)?;
    run.write_json(
        "generation_eval.json",
        &GenerationEval {
            split: ecfg.split,
            points: records.len(),
            similarity_metric: summary.similarity_metric.clone(),
            conditions: summary
                .conditions
                .iter()
                .zip(&gates)
                .map(|(c, g)| ConditionResult {
                    condition: c.condition,
                    perplexity: c.perplexity,
                    similarity_f1: c.similarity_f1,
                    mean_gate: (!g.is_empty()).then(|| g.iter().sum::<f64>() / g.len() as f64),
                })
                .collect(),
            checks,
        },
    )
}

fn read_records(run: &mut Run) -> Result<Vec<EvalRecord>> {
    let raw = run.read("eval_records.jsonl")?;
    let text = String::from_utf8(raw).map_err(|e| CliError::Input(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Input(format!("eval_records.jsonl: {e}"))))
        .collect()
}

pub fn eval_stats(run: &mut Run) -> Result<()> {
    let records = read_records(run)?;
    let conditions = run.config.conditions.clone();
    let summary = summarize_generation(&records, &conditions, run.config.evaluation.alpha)?;
    run.write_json("generation_stats.json", &summary)
}

pub fn export_pairwise(run: &mut Run) -> Result<()> {
    let (sessions, _) = load_corpus(run)?;
    let records = read_records(run)?;
    let mut by_id = BTreeMap::new();
    for s in &sessions {
        for p in extract_intervention_points(s).0 {
            by_id.insert(p.id(), (s, p));
        }
    }
    let pc = run.config.evaluation.pairwise.clone();
    let mut sources = Vec::with_capacity(records.len());
    for r in &records {
        let (s, p) = by_id
            .get(&r.point_id)
            .ok_or_else(|| CliError::Input(format!("record {} is not a corpus point", r.point_id)))?;
        sources.push(PairwiseSource {
            point_id: r.point_id.clone(),
            history: s.utterances[..=p.seeker_index]
                .iter()
                .map(|u| HistoryTurn {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            normalized_position: p.normalized_position,
            responses: r.generated.clone(),
        });
    }
    let bundle = build_pairwise_tasks(&sources, (pc.focus, pc.baseline), pc.repeat_fraction, run.config.seed)?;
    let mut lines = Vec::new();
    for t in &bundle.tasks {
        serde_json::to_writer(&mut lines, t).map_err(|e| CliError::Compute(e.to_string()))?;
        lines.push(b'\n');
    }
    run.write("pairwise_tasks.jsonl", &lines)?;
    run.write_json("pairwise_map.json", &bundle.map)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JudgmentLine {
    Plain(Judgment),
    Logged { judgment: Judgment },
}

/// Judgment file: `--judgments`, else the run directory's, else the
/// service store under `service/`.
pub fn eval_report(run: &mut Run, judgments: Option<&Path>) -> Result<()> {
    let map: AssignmentMap = run.read_json("pairwise_map.json")?;
    let service_log = run.path("service").join(counsel_service::eval::JUDGMENT_LOG);
    let over = match judgments {
        Some(p) => Some(p.to_path_buf()),
        None if !run.exists("judgments.jsonl") && service_log.exists() => Some(service_log),
        None => None,
    };
    let raw = run.read_from("judgments.jsonl", over.as_deref())?;
    let text = String::from_utf8(raw).map_err(|e| CliError::Input(e.to_string()))?;
    let mut js = Vec::new();
    for (i, l) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let j: JudgmentLine = serde_json::from_str(l).map_err(|e| CliError::Input(format!("judgment line {}: {e}", i + 1)))?;
        js.push(match j {
            JudgmentLine::Plain(j) | JudgmentLine::Logged { judgment: j } => j,
        });
    }
    let report = analyze_judgments(&map, &js)?;
    run.write("preference_flow.csv", report.flow_csv().as_bytes())?;
    run.write_json("pairwise_report.json", &report)
}

/// Service settings drawn from a run directory.
pub fn service_config(run: &mut Run, bind: &str, checkpoint: Option<&Path>) -> Result<counsel_service::ServiceConfig> {
    let mut c = counsel_service::ServiceConfig::new(run.path("service"));
    c.bind = bind.to_string();
    c.lexicon = run.config.lexicon.clone();
    c.taxonomy = run.config.taxonomy.clone();
    let focus = run.config.evaluation.pairwise.focus;
    let classifier = checkpoint.map_or_else(|| run.path(CLASSIFIER), Path::to_path_buf);
    for (artifact, path) in [(CLASSIFIER.to_string(), classifier.clone()), (generator_artifact(focus), run.path(&generator_artifact(focus)))] {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                producer: crate::run::producer(&artifact).to_string(),
                artifact,
            });
        }
    }
    c.classifier_checkpoint = Some(classifier);
    c.generator_checkpoint = Some(run.path(&generator_artifact(focus)));
    if run.exists("thresholds.json") {
        c.thresholds = Some(run.path("thresholds.json"));
    }
    if run.exists("pairwise_tasks.jsonl") && run.exists("pairwise_map.json") {
        c.eval_tasks = Some(run.path("pairwise_tasks.jsonl"));
        c.eval_map = Some(run.path("pairwise_map.json"));
    }
    Ok(c)
}
