//! Experiment configuration files.
//!
//! Configs are validated by hand from a `serde_json::Value` so that every
//! error names the JSON path that caused it (`.technique.sigma`).

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::circuits::{GroundTruth, ToyCircuitKind};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::TinyTransformer;
use crate::patch::{Direction, Granularity, PromptPair, SweepSpec, Technique};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    Builtin(ToyCircuitKind),
    WeightFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Required for weight files; builtin circuits default to their own pair.
    pub pair: Option<PromptPair>,
    pub direction: Direction,
    pub technique: Technique,
    pub granularity: Granularity,
    pub metrics: Vec<MetricKind>,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Loads the model and resolves the prompt pair into a sweep spec.
    pub fn resolve(&self) -> Result<(TinyTransformer, SweepSpec)> {
        let (model, truth): (TinyTransformer, Option<GroundTruth>) = match &self.model {
            ModelSource::Builtin(kind) => {
                let (m, t) = kind.build()?;
                (m, Some(t))
            }
            ModelSource::WeightFile(path) => (TinyTransformer::load(path)?, None),
        };
        let pair = match (&self.pair, truth) {
            (Some(p), _) => p.clone(),
            (None, Some(t)) => t.pair(),
            (None, None) => return Err(Error::config(".pair", "required when loading a weight file")),
        };
        pair.validate(&model)
            .map_err(|e| Error::config(".pair", e.to_string()))?;
        let spec = SweepSpec {
            pair,
            direction: self.direction,
            technique: self.technique.clone(),
            granularity: self.granularity,
            metrics: self.metrics.clone(),
        };
        Ok((model, spec))
    }
}

/// Parses and validates a config document.
pub fn load_config(text: &str) -> Result<ExperimentConfig> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::config(".", format!("invalid JSON: {e}")))?;
    let obj = object(&root, "")?;
    known_keys(obj, "", &["model", "pair", "direction", "technique", "granularity", "metrics", "output"])?;

    let model = parse_model(field(obj, "", "model")?)?;
    let pair = obj.get("pair").map(|v| parse_pair(v, ".pair")).transpose()?;
    let direction = match string(field(obj, "", "direction")?, ".direction")? {
        "denoise" => Direction::Denoise,
        "noise" => Direction::Noise,
        other => {
            return Err(Error::config(
                ".direction",
                format!("unknown direction {other:?}; valid: denoise, noise"),
            ))
        }
    };
    let technique = parse_technique(field(obj, "", "technique")?)?;
    let granularity = string(field(obj, "", "granularity")?, ".granularity")?
        .parse::<Granularity>()
        .map_err(|e| Error::config(".granularity", e.to_string()))?;

    let metrics_val = field(obj, "", "metrics")?;
    let list = array(metrics_val, ".metrics")?;
    if list.is_empty() {
        return Err(Error::config(".metrics", "at least one metric is required"));
    }
    let mut metrics = Vec::with_capacity(list.len());
    for (i, v) in list.iter().enumerate() {
        let path = format!(".metrics[{i}]");
        let kind = string(v, &path)?
            .parse::<MetricKind>()
            .map_err(|e| Error::config(&path, e.to_string()))?;
        if metrics.contains(&kind) {
            return Err(Error::config(&path, format!("metric {kind} listed twice")));
        }
        metrics.push(kind);
    }
    if let Some(pair) = &pair {
        if metrics.contains(&MetricKind::LogitDiff) && pair.foils.is_empty() {
            return Err(Error::config(".pair.foils", "logit_diff needs at least one foil"));
        }
    }

    let output = obj
        .get("output")
        .map(|v| string(v, ".output").map(PathBuf::from))
        .transpose()?;

    Ok(ExperimentConfig {
        model,
        pair,
        direction,
        technique,
        granularity,
        metrics,
        output,
    })
}

/// Reads a config file; a relative weight-file path is taken relative to the
/// config's directory.
pub fn load_config_file(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = load_config(&text)?;
    if let ModelSource::WeightFile(weights) = &config.model {
        if weights.is_relative() {
            if let Some(dir) = path.parent() {
                config.model = ModelSource::WeightFile(dir.join(weights));
            }
        }
    }
    Ok(config)
}

fn parse_model(v: &Value) -> Result<ModelSource> {
    let obj = object(v, ".model")?;
    known_keys(obj, ".model", &["builtin", "path"])?;
    match (obj.get("builtin"), obj.get("path")) {
        (Some(b), None) => {
            let name = string(b, ".model.builtin")?;
            name.parse::<ToyCircuitKind>()
                .map(ModelSource::Builtin)
                .map_err(|e| Error::config(".model.builtin", e.to_string()))
        }
        (None, Some(p)) => Ok(ModelSource::WeightFile(PathBuf::from(string(p, ".model.path")?))),
        _ => Err(Error::config(".model", "expected exactly one of \"builtin\" or \"path\"")),
    }
}

fn parse_pair(v: &Value, path: &str) -> Result<PromptPair> {
    let obj = object(v, path)?;
    known_keys(obj, path, &["clean", "corrupt", "answer", "foils", "eval_position"])?;
    let clean = tokens(field(obj, path, "clean")?, &format!("{path}.clean"))?;
    let corrupt = tokens(field(obj, path, "corrupt")?, &format!("{path}.corrupt"))?;
    let answer = index(field(obj, path, "answer")?, &format!("{path}.answer"))?;
    let foils = match obj.get("foils") {
        Some(f) => tokens(f, &format!("{path}.foils"))?,
        None => Vec::new(),
    };
    let eval_position = obj
        .get("eval_position")
        .map(|v| index(v, &format!("{path}.eval_position")))
        .transpose()?;
    if clean.is_empty() {
        return Err(Error::config(format!("{path}.clean"), "prompt is empty"));
    }
    if clean.len() != corrupt.len() {
        return Err(Error::config(
            format!("{path}.corrupt"),
            format!("length {} differs from clean length {}", corrupt.len(), clean.len()),
        ));
    }
    if foils.contains(&answer) {
        return Err(Error::config(format!("{path}.foils"), "answer is also listed as a foil"));
    }
    if let Some(p) = eval_position {
        if p >= clean.len() {
            return Err(Error::config(
                format!("{path}.eval_position"),
                format!("{p} is outside a prompt of length {}", clean.len()),
            ));
        }
    }
    Ok(PromptPair {
        clean,
        corrupt,
        answer,
        foils,
        eval_position,
    })
}

fn parse_technique(v: &Value) -> Result<Technique> {
    let path = ".technique";
    let obj = object(v, path)?;
    let kind = string(field(obj, path, "kind")?, ".technique.kind")?;
    match kind {
        "patch" => {
            known_keys(obj, path, &["kind"])?;
            Ok(Technique::Patch)
        }
        "zero_ablate" => {
            known_keys(obj, path, &["kind"])?;
            Ok(Technique::ZeroAblate)
        }
        "mean_ablate" => {
            known_keys(obj, path, &["kind", "dataset"])?;
            let list = array(field(obj, path, "dataset")?, ".technique.dataset")?;
            if list.is_empty() {
                return Err(Error::config(".technique.dataset", "dataset must not be empty"));
            }
            let dataset = list
                .iter()
                .enumerate()
                .map(|(i, v)| tokens(v, &format!(".technique.dataset[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            Ok(Technique::MeanAblate { dataset })
        }
        "gaussian" => {
            known_keys(obj, path, &["kind", "sigma", "seed"])?;
            let sigma = number(field(obj, path, "sigma")?, ".technique.sigma")?;
            if sigma.is_nan() || sigma < 0.0 {
                return Err(Error::config(".technique.sigma", format!("must be >= 0, got {sigma}")));
            }
            let seed = field(obj, path, "seed")?
                .as_u64()
                .ok_or_else(|| Error::config(".technique.seed", "expected a non-negative integer"))?;
            Ok(Technique::Gaussian { sigma, seed })
        }
        other => Err(Error::config(
            ".technique.kind",
            format!("unknown technique {other:?}; valid: patch, zero_ablate, mean_ablate, gaussian"),
        )),
    }
}

fn object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| Error::config(display(path), "expected an object"))
}

fn field<'a>(obj: &'a Map<String, Value>, path: &str, key: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::config(format!("{path}.{key}"), "missing required field"))
}

fn known_keys(obj: &Map<String, Value>, path: &str, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::config(format!("{path}.{k}"), "unknown field")),
        None => Ok(()),
    }
}

fn string<'a>(v: &'a Value, path: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::config(path, "expected a string"))
}

fn number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::config(path, "expected a number"))
}

fn array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| Error::config(path, "expected an array"))
}

fn index(v: &Value, path: &str) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::config(path, "expected a non-negative integer"))
}

fn tokens(v: &Value, path: &str) -> Result<Vec<usize>> {
    array(v, path)?
        .iter()
        .enumerate()
        .map(|(i, t)| index(t, &format!("{path}[{i}]")))
        .collect()
}

fn display(path: &str) -> &str {
    if path.is_empty() {
        "."
    } else {
        path
    }
}
