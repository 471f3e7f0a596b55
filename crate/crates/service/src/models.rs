use std::path::Path;

use counsel_core::corpus::Taxonomy;
use counsel_core::generator::GeneratorModel;
use counsel_core::hgt::{HgtModel, ThresholdSet};
use counsel_core::lexicon::Lexicon;
use counsel_core::numerics::Checkpoint;
use counsel_core::recommend::Recommender;
use counsel_core::session_graph::{HashingEncoder, UtteranceEncoder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub classifier: String,
    pub thresholds: String,
    pub generator: String,
}

impl ModelVersions {
    pub fn cache_key(&self) -> String {
        format!("{}/{}/{}", self.classifier, self.thresholds, self.generator)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct LoadedModels {
    pub recommender: Recommender,
    pub versions: ModelVersions,
}

/// Encoder recorded with a classifier checkpoint, or a hashing encoder
/// sized from its input width.
pub fn checkpoint_encoder(ck: &Checkpoint, classifier: &HgtModel) -> Result<UtteranceEncoder, ServiceError> {
    match ck.extra.get("encoder") {
        Some(v) => serde_json::from_value::<HashingEncoder>(v.clone())
            .map(UtteranceEncoder::Hashing)
            .map_err(|e| ServiceError::Config(format!("classifier encoder: {e}"))),
        None => Ok(UtteranceEncoder::Hashing(HashingEncoder::new(
            classifier.config.utterance_input.saturating_sub(1),
            0,
        ))),
    }
}

pub fn load_models(
    classifier: &Path,
    thresholds: Option<&Path>,
    generator: &Path,
    lexicon: Lexicon,
    taxonomy: Taxonomy,
) -> Result<LoadedModels, ServiceError> {
    let cls_bytes = std::fs::read(classifier)?;
    let cls_ck = Checkpoint::from_json(std::str::from_utf8(&cls_bytes).map_err(|e| ServiceError::Config(e.to_string()))?)
        .map_err(|e| ServiceError::Config(format!("{}: {e}", classifier.display())))?;
    let hgt = HgtModel::from_checkpoint(&cls_ck).map_err(|e| ServiceError::Config(format!("{}: {e}", classifier.display())))?;
    let encoder = checkpoint_encoder(&cls_ck, &hgt)?;
    let (thresholds, th_version) = match thresholds {
        Some(p) => {
            let b = std::fs::read(p)?;
            let t: ThresholdSet = serde_json::from_slice(&b).map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?;
            (t, sha256_hex(&b))
        }
        None => (ThresholdSet::default(), "default".to_string()),
    };
    let gen_bytes = std::fs::read(generator)?;
    let gen_ck = Checkpoint::from_json(std::str::from_utf8(&gen_bytes).map_err(|e| ServiceError::Config(e.to_string()))?)
        .map_err(|e| ServiceError::Config(format!("{}: {e}", generator.display())))?;
    let generator_model =
        GeneratorModel::from_checkpoint(&gen_ck).map_err(|e| ServiceError::Config(format!("{}: {e}", generator.display())))?;
    Ok(LoadedModels {
        recommender: Recommender {
            lexicon,
            taxonomy,
            encoder,
            classifier: hgt,
            thresholds,
            generator: generator_model,
        },
        versions: ModelVersions {
            classifier: sha256_hex(&cls_bytes),
            thresholds: th_version,
            generator: sha256_hex(&gen_bytes),
        },
    })
}
