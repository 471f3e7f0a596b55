//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use counsel_cli::config::PipelineConfig;
use counsel_core::corpus::*;
use counsel_core::evaluation::stats::*;
use counsel_core::evaluation::*;
use counsel_core::generator::*;
use counsel_core::hgt::*;
use counsel_core::lexicon::Lexicon;
use counsel_core::numerics::gradcheck::check_store;
use counsel_core::numerics::{causal_mask, multi_head_attention, Graph, NumericsError, SeedStream, Tensor};
use counsel_core::session_graph::*;
use rand::Rng;
use serde_json::Value;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)*));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

struct Fixture {
    lexicon: Lexicon,
    taxonomy: Taxonomy,
    encoder: UtteranceEncoder,
    sessions: Vec<Session>,
}

impl Fixture {
    fn new(sessions: usize, width: usize, seed: u64) -> Self {
        let lexicon = Lexicon::bundled();
        let taxonomy = Taxonomy::bundled();
        let cfg = SyntheticConfig {
            sessions,
            mean_turns: 10,
            turn_spread: 2,
            ..Default::default()
        };
        let sessions = generate_synthetic_corpus(&cfg, &lexicon, &taxonomy, seed).unwrap();
        Self {
            lexicon,
            taxonomy,
            encoder: UtteranceEncoder::Hashing(HashingEncoder::new(width, 0)),
            sessions,
        }
    }

    fn inputs(&self) -> GraphInputs<'_> {
        GraphInputs {
            lexicon: &self.lexicon,
            taxonomy: &self.taxonomy,
            encoder: &self.encoder,
        }
    }

    fn refs(&self) -> Vec<&Session> {
        self.sessions.iter().collect()
    }

    fn hgt(&self, seed: u64) -> HgtModel {
        HgtModel::new(HgtConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            category_width: 4,
            utterance_input: self.encoder.width() + 1,
            conversation_input: conversation_width(&self.taxonomy),
            lexicon_categories: self.lexicon.len(),
            distress_categories: self.taxonomy.distress_catalogue.len(),
            ablation: GraphAblation::Full,
            seed,
        })
        .unwrap()
    }

    fn generator(&self, hgt: &HgtModel) -> (GeneratorModel, GeneratorModel, Vec<GenerationExample>) {
        let mut tax = self.taxonomy.clone();
        for s in &mut tax.strategies {
            s.definition = format!("{} step", s.name.to_lowercase());
        }
        let texts: Vec<&str> = self.sessions.iter().flat_map(|s| s.utterances.iter().map(|u| u.text.as_str())).collect();
        let tok = Tokenizer::train(texts, 400).unwrap();
        let cfg = GeneratorConfig {
            decoder: DecoderConfig {
                vocab_size: 400,
                width: 16,
                layers: 1,
                heads: 2,
                context: 256,
                seed: 4,
            },
            adapters: AdapterConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.1,
            },
            soft_prompt: SoftPromptConfig {
                heads: 2,
                projector_hidden: 8,
                gate_init: 0.5,
            },
            max_new_tokens: 6,
            ..Default::default()
        };
        let base = GeneratorModel::base(cfg, tok).unwrap();
        let mut sage = GeneratorModel::for_condition(&base, Condition::Sage, Some(hgt)).unwrap();
        randomize(&mut sage, ADAPTER_GROUP, 1);
        randomize(&mut sage, PROJECTOR_GROUP, 2);
        let examples = build_examples(&self.refs(), &tax, self.inputs(), GraphMode::Infer, 5).unwrap();
        (base, sage, examples)
    }
}

fn randomize(model: &mut GeneratorModel, group: &str, seed: u64) {
    let mut rng = SeedStream::new(seed).rng(0);
    let ids: Vec<_> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.group == group)
        .map(|e| model.store.id(&e.name).unwrap())
        .collect();
    for id in ids {
        model.store.update(id, |t| t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)));
    }
}

fn numerics(err: GeneratorError) -> NumericsError {
    match err {
        GeneratorError::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

fn text_logits(m: &GeneratorModel, input: &GenerationInput, virtual_tokens: bool) -> Tensor<f64> {
    let ids = m.prompt_ids(input, 0).unwrap();
    let g = Graph::inference();
    let p = m.store.bind(&g);
    let v = if virtual_tokens { m.virtual_tokens(&g, &p, None, input).unwrap() } else { None };
    (*g.value(m.decoder.logits(&g, &p, v, &ids).unwrap())).clone()
}

fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let f = Fixture::new(6, 12, 5);
    let hgt = f.hgt(3);
    let points = build_points(&f.refs(), f.inputs(), GraphMode::Train, GraphAblation::Full).map_err(e)?;
    let covers = |b: &BatchedGraph| b.graph.edges.iter().all(|e| !e.is_empty());
    let batched = (0..points.len())
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| batch(&[&points[i].graph, &points[j].graph]))
        .filter(covers)
        .min_by_key(|b| b.graph.utterances.len())
        .ok_or("no fixture pair covers every meta-relation")?;
    let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let mut worst = Vec::new();
    let r = check_store(&hgt.store, 1e-5, 4, |_, g, p| {
        let logits = hgt.logits(g, p, &batched).map_err(|err| match err {
            HgtError::Numerics(n) => n,
            other => panic!("{other}"),
        })?;
        g.bce_with_logits(logits, &targets, &[1.0, 2.0, 0.5])
    })
    .map_err(e)?;
    worst.push(("hgt+head", r));

    let (base, sage, examples) = f.generator(&hgt);
    let ex = &examples[0];
    let r = check_store(&sage.store, 1e-5, 4, |s, g, p| {
        let mut m = sage.clone();
        m.store = s.clone();
        m.example_loss(g, p, None, ex).map(|(l, _)| l).map_err(numerics)
    })
    .map_err(e)?;
    worst.push(("adapters+soft prompt through decoder", r));

    // graph-aware attention, projector and gate on unit-scale inputs
    let mut rng = SeedStream::new(6).rng(0);
    let mut rand_t = |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (q, nodes) = (rand_t(1, 8), rand_t(5, 8));
    let head = sage.soft_prompt.clone().ok_or("no soft prompt")?;
    let weights = rand_t(VIRTUAL_TOKENS, sage.config.decoder.width);
    let r = check_store(&sage.store, 1e-5, 6, |_, g, p| {
        let out = head.soft_prompt(g, p, g.constant(q.clone()), g.constant(nodes.clone())).map_err(numerics)?;
        Ok(g.sum(g.mul(out, g.constant(weights.clone()))?))
    })
    .map_err(e)?;
    worst.push(("graph attention+projector+gate", r));
    let r = check_store(&base.store, 1e-5, 3, |s, g, p| {
        let mut m = base.clone();
        m.store = s.clone();
        m.example_loss(g, p, None, ex).map(|(l, _)| l).map_err(numerics)
    })
    .map_err(e)?;
    worst.push(("decoder", r));

    let elapsed = t0.elapsed().as_secs_f64();
    let mut detail = Vec::new();
    for (name, r) in &worst {
        ensure!(
            r.passes(1e-4),
            "{name}: max relative error {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
            r.max_relative_error,
            r.worst,
            r.worst_values.0,
            r.worst_values.1
        );
        detail.push(format!("{name} {} entries max {:.1e} ({})", r.checked, r.max_relative_error, r.worst));
    }
    ensure!(elapsed < 300.0, "took {elapsed:.0}s");
    Ok(format!("{}; {elapsed:.1}s", detail.join(", ")))
}

fn structural_invariants() -> Check {
    let f = Fixture::new(6, 16, 7);
    let hgt = f.hgt(5);
    let mut worst_row: f64 = 0.0;
    let points = build_points(&f.refs(), f.inputs(), GraphMode::Infer, GraphAblation::Full).map_err(e)?;
    for pt in &points {
        let g = Graph::inference();
        let p = hgt.store.bind(&g);
        let states = hgt.forward(&g, &p, &pt.graph.graph).map_err(e)?;
        for rec in &states.attention {
            let w = g.value(rec.weights);
            let n_t = pt.graph.graph.node_count(rec.target_type);
            for h in 0..hgt.config.heads {
                let mut sums = vec![0.0; n_t];
                let mut seen = vec![false; n_t];
                for (row, &(_, _, t)) in rec.edges.iter().enumerate() {
                    sums[t] += w.at(row, h);
                    seen[t] = true;
                }
                for t in (0..n_t).filter(|&t| seen[t]) {
                    worst_row = worst_row.max((sums[t] - 1.0).abs());
                }
            }
        }
    }
    // decoder self-attention and graph-aware attention
    let mut rng = SeedStream::new(2).rng(0);
    let mut rand_t = |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let (base, mut sage, examples) = f.generator(&hgt);
    for n in [1, 5, 17] {
        let g = Graph::inference();
        let (q, k, v) = (g.constant(rand_t(n, 8)), g.constant(rand_t(n, 8)), g.constant(rand_t(n, 8)));
        let (_, weights) = multi_head_attention(&g, q, k, v, 2, Some(&causal_mask::<f64>(n, &[]))).map_err(e)?;
        for w in weights {
            let w = g.value(w);
            for i in 0..n {
                worst_row = worst_row.max((w.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
        let head = sage.soft_prompt.as_ref().unwrap();
        let p = sage.store.bind(&g);
        let (_, weights) = head.attend(&g, &p, g.constant(rand_t(1, 8)), g.constant(rand_t(n, 8))).map_err(e)?;
        for w in weights {
            worst_row = worst_row.max((g.value(w).data().iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst_row <= 1e-9, "attention row sum off by {worst_row:.2e}");

    let ex = &examples[1];
    let mut fresh_base = base.clone();
    randomize(&mut fresh_base, BASE_GROUP, 9);
    let ft = GeneratorModel::for_condition(&fresh_base, Condition::VanillaFt, None).map_err(e)?;
    let adapter_gap = text_logits(&fresh_base, &ex.input, false).max_abs_diff(&text_logits(&ft, &ex.input, false));
    ensure!(adapter_gap == 0.0, "fresh adapters move logits by {adapter_gap:.2e}");

    randomize(&mut sage, PROJECTOR_GROUP, 4);
    let without = text_logits(&sage, &ex.input, false);
    let live_gap = text_logits(&sage, &ex.input, true).max_abs_diff(&without);
    ensure!(live_gap > 1e-6, "virtual tokens have no effect");
    sage.set_gate(0.0).map_err(e)?;
    let gate_gap = text_logits(&sage, &ex.input, true).max_abs_diff(&without);
    ensure!(gate_gap < 1e-12, "zero gate differs by {gate_gap:.2e}");

    let mut graphs = 0;
    let train = build_graph(&f.sessions, f.inputs(), GraphMode::Train).map_err(e)?;
    let mut all: Vec<HeteroGraph> = vec![train];
    all.extend(points.into_iter().map(|p| p.graph.graph));
    for gr in &all {
        let s = gr.stats();
        ensure!(s.hierarchical_edges == s.utterance_nodes, "hierarchical {} vs utterances {}", s.hierarchical_edges, s.utterance_nodes);
        graphs += 1;
    }
    Ok(format!(
        "max row-sum error {worst_row:.1e}; adapter-init gap {adapter_gap:.0e}; zero-gate gap {gate_gap:.1e}; {graphs} graphs with hierarchical = utterances"
    ))
}

struct AblationRun {
    ablation: GraphAblation,
    f1: f64,
    mcc: f64,
    uniform_val_f1: f64,
    calibrated_val_f1: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
}

fn ablation_runs() -> Result<(Vec<AblationRun>, f64), String> {
    let t0 = Instant::now();
    let desk = PipelineConfig::default();
    let lexicon = Lexicon::bundled();
    let taxonomy = Taxonomy::bundled();
    let encoder = UtteranceEncoder::Hashing(desk.encoder.clone());
    let inputs = GraphInputs {
        lexicon: &lexicon,
        taxonomy: &taxonomy,
        encoder: &encoder,
    };
    let mut runs = Vec::new();
    for seed in [1u64, 2, 3] {
        let sessions = generate_synthetic_corpus(&desk.corpus, &lexicon, &taxonomy, seed).map_err(e)?;
        let split = split_corpus(&sessions, desk.split_ratios, seed).map_err(e)?;
        for ablation in [GraphAblation::Full, GraphAblation::TemporalOnly, GraphAblation::NoGraph] {
            let pts = |part: &[String], mode| build_points(&split.select(&sessions, part), inputs, mode, ablation).map_err(e);
            let (tr, va, te) = (pts(&split.train, GraphMode::Train)?, pts(&split.val, GraphMode::Infer)?, pts(&split.test, GraphMode::Infer)?);
            let cfg = desk.clone().resolve(&lexicon, &taxonomy).map_err(e)?;
            let mut model = HgtModel::new(HgtConfig { ablation, seed, ..cfg.classifier }).map_err(e)?;
            train_classifier(&mut model, &tr, &va, &TrainConfig { seed, ..cfg.classifier_training }).map_err(e)?;
            let labels = |p: &[LabeledPoint]| p.iter().map(|x| x.labels).collect::<Vec<_>>();
            let vp = predict_points(&model, &va, 64).map_err(e)?;
            let th = calibrate_thresholds(&vp, &labels(&va)).map_err(e)?;
            let tp = predict_points(&model, &te, 64).map_err(e)?;
            let rep = evaluate_classifier(&th.apply_all(&tp), &labels(&te)).map_err(e)?;
            runs.push(AblationRun {
                ablation,
                f1: rep.macro_f1,
                mcc: rep.macro_mcc,
                uniform_val_f1: macro_f1(&ThresholdSet::default().apply_all(&vp), &labels(&va)),
                calibrated_val_f1: macro_f1(&th.apply_all(&vp), &labels(&va)),
            });
        }
    }
    Ok((runs, t0.elapsed().as_secs_f64()))
}

fn ablation_ordering(runs: &[AblationRun], secs: f64) -> Check {
    let med = |a: GraphAblation, m: fn(&AblationRun) -> f64| median(runs.iter().filter(|r| r.ablation == a).map(m).collect());
    let f1 = [GraphAblation::Full, GraphAblation::TemporalOnly, GraphAblation::NoGraph].map(|a| med(a, |r| r.f1));
    let mcc = [GraphAblation::Full, GraphAblation::TemporalOnly, GraphAblation::NoGraph].map(|a| med(a, |r| r.mcc));
    let detail = format!(
        "median macro-F1 full {:.3} > temporal {:.3} > text-only {:.3}; MCC {:.3} > {:.3} > {:.3}; 3 seeds in {secs:.0}s",
        f1[0], f1[1], f1[2], mcc[0], mcc[1], mcc[2]
    );
    ensure!(f1[0] > f1[1] && f1[1] > f1[2] && mcc[0] > mcc[1] && mcc[1] > mcc[2], "{detail}");
    ensure!(secs < 1800.0, "{detail}");
    Ok(detail)
}

fn calibration(runs: &[AblationRun]) -> Check {
    for r in runs {
        ensure!(r.calibrated_val_f1 >= r.uniform_val_f1, "{:?}: calibrated {} < uniform {}", r.ablation, r.calibrated_val_f1, r.uniform_val_f1);
    }
    // separable: positives score in [0.3, 0.45), negatives below 0.25
    let mut rng = SeedStream::new(8).rng(0);
    let labels: Vec<[bool; 3]> = (0..200).map(|i| [i % 2 == 0, i % 3 == 0, i % 5 == 0]).collect();
    let probs: Vec<[f64; 3]> = labels
        .iter()
        .map(|l| l.map(|b| if b { rng.random_range(0.3..0.45) } else { rng.random_range(0.0..0.25) }))
        .collect();
    let th = calibrate_thresholds(&probs, &labels).map_err(e)?;
    let uniform = macro_f1(&ThresholdSet::default().apply_all(&probs), &labels);
    let fitted = macro_f1(&th.apply_all(&probs), &labels);
    ensure!(fitted == 1.0, "separable fixture reaches {fitted}");
    let gains: Vec<f64> = runs.iter().map(|r| r.calibrated_val_f1 - r.uniform_val_f1).collect();
    Ok(format!(
        "calibrated >= uniform on {} runs (median gain {:.3}); separable fixture {uniform:.3} -> {fitted:.1}",
        runs.len(),
        median(gains)
    ))
}

fn counsel(out: &Path, config: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_counsel"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--config")
        .arg(config)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e)?;
    ensure!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim());
    Ok(())
}

fn write_config(path: &Path, c: &PipelineConfig) -> PathBuf {
    std::fs::write(path, serde_json::to_vec_pretty(c).unwrap()).unwrap();
    path.to_path_buf()
}

fn generation_conditioning(work: &Path) -> Check {
    let t0 = Instant::now();
    let mut c = PipelineConfig::default();
    c.conditions = vec![Condition::Vanilla, Condition::Sage];
    c.evaluation.pairwise.baseline = Condition::Vanilla;
    let cfg = write_config(&work.join("generation.json"), &c);
    let out = work.join("generation");
    for sub in ["gen-corpus", "train-classifier", "calibrate", "pretrain-decoder", "train-generator", "eval-generation"] {
        counsel(&out, &cfg, &[sub])?;
    }
    let v: Value = serde_json::from_slice(&std::fs::read(out.join("generation_eval.json")).map_err(e)?).map_err(e)?;
    let ppl = |name: &str| {
        v["conditions"].as_array().unwrap().iter().find(|x| x["condition"] == name).unwrap()["perplexity"].as_f64().unwrap()
    };
    let (base, ft) = (ppl("Vanilla"), ppl("SAGE"));
    let checks = &v["checks"];
    let n = checks["points"].as_u64().unwrap();
    let swapped = checks["strategy_swap_changed"].as_u64().unwrap();
    let gated = checks["zero_gate_changed"].as_u64().unwrap();
    let detail = format!(
        "perplexity base {base:.2} -> fine-tuned {ft:.2}; strategy swap changes {swapped}/{n}; zero gate changes {gated}/{n}; {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    ensure!(ft < base && 2 * swapped >= n && 2 * gated >= n && n > 0, "{detail}");
    Ok(detail)
}

fn exhaustive_wilcoxon(diffs: &[f64]) -> f64 {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let ranks: Vec<f64> = nz
        .iter()
        .map(|x| {
            let less = nz.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let eq = nz.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect();
    let w: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let centre = ranks.iter().sum::<f64>() / 2.0;
    let n = nz.len();
    let extreme = (0u64..1 << n)
        .filter(|mask| {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            (s - centre).abs() >= (w - centre).abs() - 1e-9
        })
        .count();
    extreme as f64 / (1u64 << n) as f64
}

fn choose(n: u64, k: u64) -> u128 {
    (0..k).fold(1u128, |c, i| c * (n - i) as u128 / (i + 1) as u128)
}

fn statistics_oracle() -> Check {
    let mut rng = SeedStream::new(21).rng(0);
    let mut worst_w: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-4..5) as f64).collect();
        let y = vec![0.0; n];
        if x.iter().all(|v| *v == 0.0) {
            continue;
        }
        let got = wilcoxon_signed_rank(&x, &y, WilcoxonMethod::Exact).map_err(e)?;
        worst_w = worst_w.max((got.p_value - exhaustive_wilcoxon(&x)).abs());
    }
    ensure!(worst_w <= 0.01, "Wilcoxon off by {worst_w}");

    let mut worst_b: f64 = 0.0;
    for n in 1..=60u64 {
        for k in 0..=n {
            let obs = choose(n, k);
            let tail: u128 = (0..=n).map(|i| choose(n, i)).filter(|&c| c <= obs).sum();
            let closed = (tail as f64 / 2f64.powi(n as i32)).min(1.0);
            let got: f64 = binomial_two_sided(k, n).map_err(e)?;
            worst_b = worst_b.max((got - closed).abs());
        }
    }
    ensure!(worst_b < 1e-12, "binomial off by {worst_b}");

    let fr = friedman(&vec![vec![1.0f64, 2.0, 3.0]; 3]).map_err(e)?;
    ensure!((fr.statistic - 6.0).abs() < 1e-12 && (fr.p_value - 0.0498).abs() < 1e-3, "Friedman {} p {}", fr.statistic, fr.p_value);

    let a: Vec<u8> = vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
    let b: Vec<u8> = vec![1, 1, 1, 1, 0, 0, 1, 0, 0, 0];
    let k: f64 = cohens_kappa(&a, &b).map_err(e)?;
    ensure!((k - 0.4).abs() < 1e-15, "kappa {k}");

    let adj = holm(&[0.01f64, 0.04, 0.03, 0.005]);
    // sorted: 0.005*4, 0.01*3, 0.03*2, 0.04*1 with running maximum
    let hand = [0.03, 0.06, 0.06, 0.02];
    ensure!(adj.iter().zip(hand).all(|(a, h)| (a - h).abs() < 1e-15), "Holm {adj:?}");
    Ok(format!(
        "Wilcoxon exact vs permutation max gap {worst_w:.1e}; binomial max gap {worst_b:.1e}; Friedman chi2 {:.1} p {:.4}; kappa {k:.1}; Holm matches",
        fr.statistic, fr.p_value
    ))
}

fn source(i: usize, position: f64) -> PairwiseSource {
    let mut responses = BTreeMap::new();
    responses.insert(Condition::Sage, format!("reply a {i}"));
    responses.insert(Condition::VanillaFt, format!("reply b {i}"));
    PairwiseSource {
        point_id: format!("p{i}"),
        history: vec![HistoryTurn {
            speaker: Speaker::HelpSeeker,
            text: format!("message {i}"),
        }],
        normalized_position: position,
        responses,
    }
}

fn verdict_for(a: &Assignment, winner: Option<Condition>) -> Verdict {
    match winner {
        None => Verdict::Tie,
        Some(c) if c == a.left => Verdict::Left,
        Some(_) => Verdict::Right,
    }
}

fn aggregate_replay() -> Check {
    let points: Vec<_> = (0..307).map(|i| source(i, 0.5)).collect();
    let b = build_pairwise_tasks(&points, (Condition::Sage, Condition::VanillaFt), 0.0, 5).map_err(e)?;
    let judgments: Vec<Judgment> = b
        .map
        .assignments
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let o = match i {
                0..154 => Some(Condition::Sage),
                154..260 => Some(Condition::VanillaFt),
                _ => None,
            };
            Judgment {
                task_id: a.task_id.clone(),
                verdict: verdict_for(a, o),
                criteria: if o.is_some() { vec![Criterion::Empathy] } else { vec![] },
            }
        })
        .collect();
    let r = analyze_judgments(&b.map, &judgments).map_err(e)?;
    ensure!((r.wins, r.losses, r.ties) == (154, 106, 47), "counts {:?}", (r.wins, r.losses, r.ties));
    let shares = (r.win_percent, r.loss_percent, r.tie_percent);
    ensure!(shares == (50.2, 34.5, 15.3), "shares {shares:?}");
    let bin = r.binomial.clone().ok_or("no binomial test")?;
    ensure!((0.002..=0.01).contains(&bin.p_value), "p {}", bin.p_value);
    ensure!((bin.ci95.0 - 0.52).abs() <= 0.02 && (bin.ci95.1 - 0.64).abs() <= 0.02, "Wilson {:?}", bin.ci95);

    // 100 primary/repeat pairs with 94 agreements
    let mut map = b.map.clone();
    map.assignments.clear();
    let mut js = Vec::new();
    let (s, f) = (Some(Condition::Sage), Some(Condition::VanillaFt));
    for i in 0..100usize {
        let pair = match i {
            0..=46 => (s, s),
            47..=49 => (s, f),
            50..=81 => (f, f),
            82..=84 => (f, None),
            _ => (None, None),
        };
        for (k, o) in [pair.0, pair.1].into_iter().enumerate() {
            let left_focus = (i + k) % 2 == 0;
            let a = Assignment {
                task_id: format!("t{i}-{k}"),
                point_id: format!("p{i}"),
                left: if left_focus { Condition::Sage } else { Condition::VanillaFt },
                right: if left_focus { Condition::VanillaFt } else { Condition::Sage },
                normalized_position: 0.5,
                repeat_of: (k == 1).then(|| format!("t{i}-0")),
            };
            js.push(Judgment {
                task_id: a.task_id.clone(),
                verdict: verdict_for(&a, o),
                criteria: if o.is_some() { vec![Criterion::Empathy] } else { vec![] },
            });
            map.assignments.push(a);
        }
    }
    let kr = analyze_judgments(&map, &js).map_err(e)?;
    let kappa = kr.kappa.ok_or("kappa undefined")?;
    ensure!((kappa - 0.91).abs() <= 0.01, "kappa {kappa}");
    Ok(format!(
        "shares {:.1}/{:.1}/{:.1}; binomial p {:.4}; Wilson [{:.3}, {:.3}]; repeat kappa {kappa:.3}",
        shares.0, shares.1, shares.2, bin.p_value, bin.ci95.0, bin.ci95.1
    ))
}

const PIPELINE: [&str; 10] = [
    "gen-corpus",
    "build-graph",
    "train-classifier",
    "calibrate",
    "eval-classifier",
    "pretrain-decoder",
    "train-generator",
    "eval-generation",
    "eval-stats",
    "export-pairwise",
];

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_determinism(work: &Path) -> Result<(String, PathBuf), String> {
    let cfg = write_config(&work.join("smoke.json"), &PipelineConfig::smoke());
    let (a, b) = (work.join("det-a"), work.join("det-b"));
    for out in [&a, &b] {
        for sub in PIPELINE {
            counsel(out, &cfg, &[sub])?;
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    ensure!(fa.keys().eq(fb.keys()), "artifact sets differ");
    let differing: Vec<_> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differing.is_empty(), "differing artifacts: {differing:?}");
    let bytes: usize = fa.values().map(Vec::len).sum();
    Ok((format!("{} artifacts ({bytes} bytes) byte-identical across two runs", fa.len()), a))
}

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(run: &Path, port: u16) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_counsel"))
            .args(["serve", "--bind", &format!("127.0.0.1:{port}"), "--out"])
            .arg(run)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(e)?;
        let base = format!("http://127.0.0.1:{port}/v1");
        let client = reqwest::blocking::Client::new();
        let deadline = Instant::now() + Duration::from_secs(60);
        while Instant::now() < deadline {
            if client.get(format!("{base}/health")).send().is_ok_and(|r| r.status().is_success()) {
                return Ok(Self { child, base });
            }
            if let Some(status) = child.try_wait().map_err(e)? {
                let mut err = String::new();
                if let Some(s) = child.stderr.take() {
                    BufReader::new(s).lines().map_while(Result::ok).for_each(|l| err.push_str(&l));
                }
                return Err(format!("serve exited with {status}: {err}"));
            }
            std::thread::sleep(Duration::from_millis(100));
        }
        let _ = child.kill();
        Err("serve did not become healthy".into())
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn service_durability(run: &Path) -> Check {
    let http = reqwest::blocking::Client::new();
    let get = |base: &str, path: &str| -> Result<String, String> {
        let r = http.get(format!("{base}{path}")).send().map_err(e)?;
        ensure!(r.status().is_success(), "GET {path}: {}", r.status());
        r.text().map_err(e)
    };
    let port = free_port();
    let server = Server::start(run, port)?;
    let created: Value = http
        .post(format!("{}/sessions", server.base))
        .json(&serde_json::json!({ "age": 24, "gender": "female" }))
        .send()
        .map_err(e)?
        .json()
        .map_err(e)?;
    let id = created["session_id"].as_str().ok_or("no session id")?.to_string();
    let texts = [
        "i feel so alone lately",
        "nobody would notice if i was gone",
        "i cannot sleep and everything feels heavy",
        "i have been thinking about ending it",
        "my family says i am a burden",
    ];
    let mut server = Some(server);
    let mut recommendations = BTreeMap::new();
    for turn in 0..50usize {
        if turn == 25 {
            // hard kill mid-session; the log alone must carry the state
            let before = get(&server.as_ref().unwrap().base, &format!("/sessions/{id}"))?;
            server.take().unwrap().kill();
            server = Some(Server::start(run, port)?);
            let after = get(&server.as_ref().unwrap().base, &format!("/sessions/{id}"))?;
            ensure!(before == after, "state differs after restart at turn 25");
        }
        let base = server.as_ref().unwrap().base.clone();
        let speaker = if turn % 2 == 1 { "help_seeker" } else { "caregiver" };
        let text = match turn {
            0 => "hi, thank you for reaching out. what is on your mind?".to_string(),
            t if t % 2 == 1 => texts[t / 2 % texts.len()].to_string(),
            t => format!("i hear you, tell me more ({t})"),
        };
        let r = http
            .post(format!("{base}/sessions/{id}/utterances"))
            .json(&serde_json::json!({ "speaker": speaker, "text": text }))
            .send()
            .map_err(e)?;
        ensure!(r.status().as_u16() == 201, "append {turn}: {}", r.status());
        let index = r.json::<Value>().map_err(e)?["index"].as_u64().ok_or("no index")?;
        ensure!(index == turn as u64, "index {index} for turn {turn}");
        if turn % 10 == 5 {
            let first = get(&base, &format!("/sessions/{id}/recommendation"))?;
            let second = get(&base, &format!("/sessions/{id}/recommendation"))?;
            ensure!(first == second, "recommendation not idempotent at {turn}");
            recommendations.insert(turn, first);
        }
    }
    let base = server.as_ref().unwrap().base.clone();
    let final_state = get(&base, &format!("/sessions/{id}"))?;
    let last_rec = get(&base, &format!("/sessions/{id}/recommendation"))?;
    server.take().unwrap().kill();
    let server = Server::start(run, port)?;
    let restored = get(&server.base, &format!("/sessions/{id}"))?;
    ensure!(restored == final_state, "final state differs after restart");
    ensure!(get(&server.base, &format!("/sessions/{id}/recommendation"))? == last_rec, "recommendation changed across restart");
    let v: Value = serde_json::from_str(&restored).map_err(e)?;
    let utterances = v["utterances"].as_array().ok_or("no utterances")?;
    ensure!(utterances.len() == 50, "{} utterances after restart", utterances.len());
    server.kill();
    Ok(format!(
        "50-turn session survives two SIGKILL restarts with identical state; {} recommendation checks idempotent",
        recommendations.len() + 1
    ))
}

fn main() {
    let t0 = Instant::now();
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Check)> = Vec::new();
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let wanted = |name: &str| only.as_deref().is_none_or(|o| name.contains(o));
    let mut report = |name: &'static str, r: Check| {
        let line = match &r {
            Ok(d) => format!("PASS {name}: {d}"),
            Err(d) => format!("FAIL {name}: {d}"),
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        results.push((name, r));
    };
    if wanted("gradient") {
        report("gradient integrity", gradient_integrity());
    }
    if wanted("structural") {
        report("structural invariants", structural_invariants());
    }
    if wanted("ablation") || wanted("calibration") {
        match ablation_runs() {
            Ok((runs, secs)) => {
                report("classifier ablation ordering", ablation_ordering(&runs, secs));
                report("threshold calibration", calibration(&runs));
            }
            Err(err) => {
                report("classifier ablation ordering", Err(err.clone()));
                report("threshold calibration", Err(err));
            }
        }
    }
    if wanted("generation") {
        report("generation conditioning", generation_conditioning(work.path()));
    }
    if wanted("statistics") {
        report("statistics oracle equivalence", statistics_oracle());
    }
    if wanted("aggregate") {
        report("reported-aggregate replay", aggregate_replay());
    }
    if wanted("determinism") || wanted("service") {
        match pipeline_determinism(work.path()) {
            Ok((detail, run)) => {
                report("pipeline determinism", Ok(detail));
                report("service durability", service_durability(&run));
            }
            Err(err) => {
                report("pipeline determinism", Err(err));
                report("service durability", Err("no pipeline run to serve".into()));
            }
        }
    }
    let failed = results.iter().filter(|(_, r)| r.is_err()).count();
    println!("acceptance: {} of {} criteria pass in {:.0}s", results.len() - failed, results.len(), t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
