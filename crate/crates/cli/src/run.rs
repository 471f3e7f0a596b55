use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use counsel_core::corpus::Taxonomy;
use counsel_core::lexicon::Lexicon;
use counsel_core::session_graph::UtteranceEncoder;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, PipelineConfig};

pub const CONFIG_FILE: &str = "config.json";

/// Subcommand that writes each artifact.
pub fn producer(artifact: &str) -> &'static str {
    match artifact {
        "corpus.jsonl" | "split.json" => "gen-corpus",
        "graph.json" | "graph_stats.json" => "build-graph",
        "classifier.ckpt.json" | "classifier_train.json" => "train-classifier",
        "thresholds.json" | "calibration.json" => "calibrate",
        "classifier_report.json" | "classifier_confusion.csv" => "eval-classifier",
        "decoder_base.ckpt.json" | "pretrain.json" | "tokenizer.txt" => "pretrain-decoder",
        "eval_records.jsonl" | "generation_eval.json" => "eval-generation",
        "generation_stats.json" => "eval-stats",
        "pairwise_tasks.jsonl" | "pairwise_map.json" => "export-pairwise",
        "judgments.jsonl" => "serve",
        "pairwise_report.json" | "preference_flow.csv" => "eval-report",
        a if a.starts_with("generator_") => "train-generator",
        _ => "unknown",
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    seed: u64,
    config_sha256: String,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// One subcommand invocation against a run directory.
pub struct Run {
    pub dir: PathBuf,
    pub config: PipelineConfig,
    pub lexicon: Lexicon,
    pub taxonomy: Taxonomy,
    pub encoder: UtteranceEncoder,
    subcommand: String,
    config_bytes: Vec<u8>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    /// Loads the config (flag, then the run directory's, then defaults),
    /// applies the seed override and records the resolved config. A run
    /// directory keeps one config for all of its subcommands.
    pub fn start(subcommand: &str, dir: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir.join("runs")).map_err(|e| CliError::io(dir, e))?;
        let recorded = dir.join(CONFIG_FILE);
        let mut cfg = match config {
            Some(p) => PipelineConfig::load(p)?,
            None if recorded.exists() => PipelineConfig::load(&recorded)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let (lexicon, taxonomy) = cfg.resources()?;
        let cfg = cfg.resolve(&lexicon, &taxonomy)?;
        let mut bytes = serde_json::to_vec_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        bytes.push(b'\n');
        if recorded.exists() {
            let old = std::fs::read(&recorded).map_err(|e| CliError::io(&recorded, e))?;
            if old != bytes {
                return Err(CliError::ConfigMismatch(format!(
                    "{} differs from the resolved config; use a fresh --out directory",
                    recorded.display()
                )));
            }
        } else {
            std::fs::write(&recorded, &bytes).map_err(|e| CliError::io(&recorded, e))?;
        }
        let encoder = UtteranceEncoder::Hashing(cfg.encoder.clone());
        Ok(Self {
            dir: dir.to_path_buf(),
            config: cfg,
            lexicon,
            taxonomy,
            encoder,
            subcommand: subcommand.to_string(),
            config_bytes: bytes,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.dir.join(artifact)
    }

    pub fn exists(&self, artifact: &str) -> bool {
        self.path(artifact).exists()
    }

    /// Reads an upstream artifact, or `over` in its place when given.
    pub fn read_from(&mut self, artifact: &str, over: Option<&Path>) -> Result<Vec<u8>, CliError> {
        let path = over.map_or_else(|| self.path(artifact), Path::to_path_buf);
        if !path.exists() {
            return Err(match over {
                Some(_) => CliError::Input(format!("{} does not exist", path.display())),
                None => CliError::MissingArtifact {
                    artifact: artifact.to_string(),
                    producer: producer(artifact).to_string(),
                },
            });
        }
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        self.inputs.insert(artifact.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read(&mut self, artifact: &str) -> Result<Vec<u8>, CliError> {
        self.read_from(artifact, None)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, artifact: &str) -> Result<T, CliError> {
        let b = self.read(artifact)?;
        serde_json::from_slice(&b).map_err(|e| CliError::Input(format!("{artifact}: {e}")))
    }

    pub fn write(&mut self, artifact: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(artifact);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.insert(artifact.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, artifact: &str, value: &T) -> Result<(), CliError> {
        let mut b = serde_json::to_vec_pretty(value).map_err(|e| CliError::Compute(e.to_string()))?;
        b.push(b'\n');
        self.write(artifact, &b)
    }

    /// Records inputs and outputs under `runs/` and returns the summary.
    pub fn finish(self) -> Result<serde_json::Value, CliError> {
        let record = RunRecord {
            subcommand: &self.subcommand,
            seed: self.config.seed,
            config_sha256: sha256_hex(&self.config_bytes),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let path = self.dir.join("runs").join(format!("{}.json", self.subcommand));
        let mut b = serde_json::to_vec_pretty(&record).map_err(|e| CliError::Compute(e.to_string()))?;
        b.push(b'\n');
        std::fs::write(&path, b).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::json!({
            "subcommand": self.subcommand,
            "run_dir": self.dir.display().to_string(),
            "outputs": self.outputs.keys().collect::<Vec<_>>(),
        }))
    }
}
