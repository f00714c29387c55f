//! Hand-built toy models whose circuits are known exactly.
//!
//! Every model shares one residual layout (`d_model = 32`): dims 0..4 are a
//! one-hot position code, dim 4 is a constant 1 written by the positional
//! embedding, dims 5..16 carry circuit features and dims 16..32 belong to
//! filler. Filler heads and neurons get seeded random weights but only write
//! filler dims, and circuit components only read circuit dims, so filler has
//! exactly zero effect on the answer and foil logits while still changing the
//! rest of the distribution.
//!
//! Logit differences are arranged so that clean runs score 3 and corrupt runs
//! score -1: the foil logit is the constant dim, the answer logit is whatever
//! the circuit writes into its answer dim.

mod builders;

pub use builders::{
    build_backup_circuit, build_gate_circuit, build_negative_head_circuit, build_nobel_circuit,
    nobel_partial_corruption, Gate,
};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::model::TinyTransformer;
use crate::patch::{Granularity, PathPatchSpec, PromptPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyCircuitKind {
    AndGate,
    OrGate,
    Nobel,
    Backup,
    NegativeHead,
}

impl ToyCircuitKind {
    pub const ALL: [ToyCircuitKind; 5] = [
        ToyCircuitKind::AndGate,
        ToyCircuitKind::OrGate,
        ToyCircuitKind::Nobel,
        ToyCircuitKind::Backup,
        ToyCircuitKind::NegativeHead,
    ];

    /// Short name used on the command line and in configs.
    pub fn name(self) -> &'static str {
        match self {
            ToyCircuitKind::AndGate => "and",
            ToyCircuitKind::OrGate => "or",
            ToyCircuitKind::Nobel => "nobel",
            ToyCircuitKind::Backup => "backup",
            ToyCircuitKind::NegativeHead => "negative",
        }
    }

    /// Builds the model with default parameters.
    pub fn build(self) -> Result<(TinyTransformer, GroundTruth)> {
        match self {
            ToyCircuitKind::AndGate => build_gate_circuit(Gate::And),
            ToyCircuitKind::OrGate => build_gate_circuit(Gate::Or),
            ToyCircuitKind::Nobel => build_nobel_circuit(),
            ToyCircuitKind::Backup => build_backup_circuit(builders::DEFAULT_COMPENSATION),
            ToyCircuitKind::NegativeHead => build_negative_head_circuit(),
        }
    }
}

impl fmt::Display for ToyCircuitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyCircuitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ToyCircuitKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = ToyCircuitKind::ALL.iter().map(|k| k.name()).collect();
                Error::Input(format!("unknown circuit {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

/// Primary/backup pair of a self-repairing circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupInfo {
    pub primary: HookId,
    pub backup: HookId,
    pub compensation: f64,
    /// Answer-logit boost `X` written by the primary.
    pub boost: f64,
    /// Fraction of `X` still visible when the primary is ablated.
    pub expected_visibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub kind: ToyCircuitKind,
    pub circuit_hooks: BTreeSet<HookId>,
    pub expected_denoise_hits: BTreeSet<HookId>,
    pub expected_noise_hits: BTreeSet<HookId>,
    /// Components that work against the behaviour.
    #[serde(default)]
    pub negative_hooks: BTreeSet<HookId>,
    pub clean_prompt: Vec<usize>,
    pub corrupt_prompt: Vec<usize>,
    pub answer: usize,
    pub foils: Vec<usize>,
    #[serde(default)]
    pub circuit_paths: Vec<PathPatchSpec>,
    /// Sweeps over which the expected hit sets are defined.
    pub granularities: Vec<Granularity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup: Option<BackupInfo>,
    pub filler_seed: u64,
}

impl GroundTruth {
    pub fn pair(&self) -> PromptPair {
        PromptPair {
            clean: self.clean_prompt.clone(),
            corrupt: self.corrupt_prompt.clone(),
            answer: self.answer,
            foils: self.foils.clone(),
            eval_position: None,
        }
    }

    pub fn validate(&self, model: &TinyTransformer) -> Result<()> {
        self.pair().validate(model)?;
        for (name, set) in [
            ("expected_denoise_hits", &self.expected_denoise_hits),
            ("expected_noise_hits", &self.expected_noise_hits),
        ] {
            if let Some(h) = set.difference(&self.circuit_hooks).next() {
                return Err(Error::Input(format!("{name} contains {h}, not in circuit_hooks")));
            }
        }
        let all = self
            .circuit_hooks
            .iter()
            .chain(&self.negative_hooks)
            .chain(self.circuit_paths.iter().map(|p| &p.sender))
            .chain(self.circuit_paths.iter().flat_map(|p| &p.receivers));
        for h in all {
            if !model.has_hook(h) {
                return Err(Error::Input(format!("ground truth names unknown hook {h}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes the JSON sidecar for a circuit's weight file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
