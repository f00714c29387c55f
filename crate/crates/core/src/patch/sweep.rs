use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    gaussian_corrupt, noisy_embeddings, run_with_patches, Direction, MeanActivations, PatchSource,
    PatchSpec, PatchTarget, Positions, PromptPair,
};
use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::metrics::{evaluate_all, BaselineLogits, MetricKind, MetricSpec};
use crate::model::{ActivationCache, TinyTransformer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// `resid_pre` of every layer at every position.
    Resid,
    /// Token embedding at every position.
    Embed,
    Head,
    Mlp,
    Neuron,
    /// Every head and MLP layer, layer by layer.
    Component,
}

impl Granularity {
    pub const ALL: [Granularity; 6] = [
        Granularity::Resid,
        Granularity::Embed,
        Granularity::Head,
        Granularity::Mlp,
        Granularity::Neuron,
        Granularity::Component,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Resid => "resid",
            Granularity::Embed => "embed",
            Granularity::Head => "head",
            Granularity::Mlp => "mlp",
            Granularity::Neuron => "neuron",
            Granularity::Component => "component",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Granularity::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = Granularity::ALL.iter().map(|g| g.name()).collect();
                Error::Input(format!(
                    "unknown granularity {s:?}; valid: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// The patch targets a sweep visits, in a fixed order.
pub fn targets_for(model: &TinyTransformer, granularity: Granularity, seq_len: usize) -> Vec<PatchTarget> {
    let c = model.config();
    let mut out = Vec::new();
    match granularity {
        Granularity::Resid => {
            for l in 0..c.n_layers {
                out.extend((0..seq_len).map(|p| PatchTarget::at(HookId::resid_pre(l), p)));
            }
        }
        Granularity::Embed => {
            out.extend((0..seq_len).map(|p| PatchTarget::at(HookId::embed(), p)));
        }
        Granularity::Head => {
            for l in 0..c.n_layers {
                out.extend((0..c.n_heads).map(|h| PatchTarget::all(HookId::attn_head_out(l, h))));
            }
        }
        Granularity::Mlp => {
            out.extend((0..c.n_layers).map(|l| PatchTarget::all(HookId::mlp_out(l))));
        }
        Granularity::Neuron => {
            for l in 0..c.n_layers {
                out.extend((0..c.d_mlp).map(|n| PatchTarget::all(HookId::mlp_neuron_act(l, n))));
            }
        }
        Granularity::Component => {
            for l in 0..c.n_layers {
                out.extend((0..c.n_heads).map(|h| PatchTarget::all(HookId::attn_head_out(l, h))));
                out.push(PatchTarget::all(HookId::mlp_out(l)));
            }
        }
    }
    out
}

/// How a target activation is replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Technique {
    /// Activation from the other prompt of the pair.
    Patch,
    ZeroAblate,
    /// Per-site mean over the runs of `dataset`.
    MeanAblate { dataset: Vec<Vec<usize>> },
    /// The corrupt run is the clean prompt with `N(0, sigma^2)` noise on the
    /// token embeddings; the pair's corrupt prompt is unused.
    Gaussian { sigma: f64, seed: u64 },
}

impl Technique {
    pub fn name(&self) -> &'static str {
        match self {
            Technique::Patch => "patch",
            Technique::ZeroAblate => "zero_ablate",
            Technique::MeanAblate { .. } => "mean_ablate",
            Technique::Gaussian { .. } => "gaussian",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub pair: PromptPair,
    pub direction: Direction,
    pub technique: Technique,
    pub granularity: Granularity,
    pub metrics: Vec<MetricKind>,
}

/// One row of sweep output: one target under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub hook: HookId,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub neuron: Option<usize>,
    /// Empty when the target covers every position.
    pub position: Option<usize>,
    pub direction: Direction,
    pub metric: MetricKind,
    pub raw: f64,
    pub normalized: Option<f64>,
    pub clean_baseline: Option<f64>,
    pub corrupt_baseline: Option<f64>,
}

enum Prepared {
    Patch { source: ActivationCache },
    Zero,
    Mean(MeanActivations),
    GaussianDenoise { noisy: Tensor, clean: ActivationCache },
    GaussianNoise { source: ActivationCache },
}

pub fn sweep(model: &TinyTransformer, spec: &SweepSpec) -> Result<Vec<ExperimentRecord>> {
    let targets = targets_for(model, spec.granularity, spec.pair.clean.len());
    sweep_targets(model, spec, &targets)
}

/// Runs one patched forward pass per target (in parallel) and evaluates every
/// metric on it. Records come back in target order, metrics in the order listed.
pub fn sweep_targets(
    model: &TinyTransformer,
    spec: &SweepSpec,
    targets: &[PatchTarget],
) -> Result<Vec<ExperimentRecord>> {
    let pair = &spec.pair;
    pair.validate(model)?;
    if spec.metrics.is_empty() {
        return Err(Error::Input("sweep needs at least one metric".into()));
    }

    let (clean_logits, clean_cache) = model.run_with_cache(&pair.clean)?;
    let (prepared, corrupt_logits) = match &spec.technique {
        Technique::Gaussian { sigma, seed } => {
            let (logits, cache) = gaussian_corrupt(model, &pair.clean, *sigma, *seed)?;
            let prepared = match spec.direction {
                Direction::Denoise => Prepared::GaussianDenoise {
                    noisy: noisy_embeddings(model, &pair.clean, *sigma, *seed)?,
                    clean: clean_cache,
                },
                Direction::Noise => Prepared::GaussianNoise { source: cache },
            };
            (prepared, logits)
        }
        technique => {
            let (corrupt_logits, corrupt_cache) = model.run_with_cache(&pair.corrupt)?;
            let prepared = match technique {
                Technique::Patch => Prepared::Patch {
                    source: match spec.direction {
                        Direction::Denoise => clean_cache,
                        Direction::Noise => corrupt_cache,
                    },
                },
                Technique::ZeroAblate => Prepared::Zero,
                Technique::MeanAblate { dataset } => {
                    Prepared::Mean(MeanActivations::from_dataset(model, dataset)?)
                }
                Technique::Gaussian { .. } => unreachable!(),
            };
            (prepared, corrupt_logits)
        }
    };

    let reference = clean_logits.row(pair.eval_pos()).to_vec();
    let metric_specs: Vec<MetricSpec> = spec
        .metrics
        .iter()
        .map(|&k| MetricSpec::for_pair(k, pair, Some(&reference)))
        .collect();
    let baselines = BaselineLogits {
        clean: clean_logits,
        corrupt: corrupt_logits,
    };

    let base: &[usize] = match (&spec.technique, spec.direction) {
        (Technique::Gaussian { .. }, _) => &pair.clean,
        (_, direction) => pair.roles(direction).0,
    };
    let seq_len = base.len();

    let per_target: Vec<Vec<ExperimentRecord>> = targets
        .par_iter()
        .map(|target| {
            let mut patches: Vec<PatchSpec<'_>> = Vec::with_capacity(2);
            match &prepared {
                Prepared::Patch { source } | Prepared::GaussianNoise { source } => {
                    patches.push(target.with_source(PatchSource::Cache(source)));
                }
                Prepared::Zero => patches.push(target.with_source(PatchSource::Zero)),
                Prepared::Mean(mean) => patches.push(target.with_source(PatchSource::Mean(mean))),
                Prepared::GaussianDenoise { noisy, clean } => {
                    // The target wins wherever it overlaps the noisy embedding.
                    let restored = if target.hook == HookId::embed() {
                        target.positions.resolve(seq_len)
                    } else {
                        Vec::new()
                    };
                    let rest: std::collections::BTreeSet<usize> =
                        (0..seq_len).filter(|p| !restored.contains(p)).collect();
                    if !rest.is_empty() {
                        patches.push(PatchSpec::new(
                            HookId::embed(),
                            Positions::Set(rest),
                            PatchSource::Values(noisy),
                        ));
                    }
                    patches.push(target.with_source(PatchSource::Cache(clean)));
                }
            }
            let logits = run_with_patches(model, base, &patches)?;
            let results = evaluate_all(&logits, pair, &metric_specs, Some(&baselines))?;
            Ok(results
                .into_iter()
                .map(|r| ExperimentRecord {
                    hook: target.hook,
                    layer: target.hook.layer,
                    head: target.hook.head,
                    neuron: target.hook.neuron,
                    position: target.positions.single(),
                    direction: spec.direction,
                    metric: r.kind,
                    raw: r.raw,
                    normalized: r.normalized,
                    clean_baseline: r.baselines.map(|b| b.0),
                    corrupt_baseline: r.baselines.map(|b| b.1),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_target.into_iter().flatten().collect())
}
