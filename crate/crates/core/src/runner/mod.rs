//! Config-driven experiments: sweeps, circuit verification, CSV records,
//! SVG plots and the demo suite.

mod config;
mod demo;
mod plot;
mod records;

pub use config::{load_config, load_config_file, ExperimentConfig, ModelSource};
pub use demo::{gaussian_survival, run_demo, sweep_hits, DemoCheck, GAUSSIAN_SEEDS, GAUSSIAN_SIGMAS};
pub use plot::{
    figure2_series, lines_from_records, render_heatmap_svg, render_lines_svg, score_color,
    HeatmapAxes, LineSeries,
};
pub use records::{parse_csv, read_csv, records_to_csv, write_csv, CSV_HEADER};

use std::collections::BTreeSet;
use std::fmt;

use crate::circuits::GroundTruth;
use crate::error::Result;
use crate::hook::{HookId, Site};
use crate::metrics::{logit_diff, normalize_score};
use crate::model::TinyTransformer;
use crate::patch::{
    component_edges, path_patch, run_with_patches, sweep, Direction, ExperimentRecord, PatchSource,
    PatchTarget, PathPatchSpec, PromptPair,
};
use crate::metrics::MetricKind;

pub const HIT_THRESHOLD: f64 = 0.9;
pub const MISS_THRESHOLD: f64 = 0.1;

/// Runs the sweep a config describes.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    let (model, spec) = config.resolve()?;
    sweep(&model, &spec)
}

/// Hooks flagged by single-target sweep records under `metric`: denoising
/// flags restoration (score >= 0.9), noising flags breakage (score <= 0.1).
/// Per-position embedding targets are reported as the `embed` site.
pub fn hit_set(records: &[ExperimentRecord], metric: MetricKind) -> BTreeSet<HookId> {
    records
        .iter()
        .filter(|r| r.metric == metric)
        .filter_map(|r| {
            let s = r.normalized?;
            let hit = match r.direction {
                Direction::Denoise => s >= HIT_THRESHOLD,
                Direction::Noise => s <= MISS_THRESHOLD,
            };
            hit.then(|| match r.hook.site {
                Site::Embed => HookId::embed(),
                _ => r.hook,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub score: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub threshold: f64,
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let score = c.score.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
            writeln!(
                f,
                "{:<12} {:<4} score={score:<8} {}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.detail
            )?;
        }
        write!(
            f,
            "overall      {} (threshold {})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.threshold
        )
    }
}

/// Every component outside `circuit`, as noising targets over all positions.
/// A layer's neurons are covered by `mlp_out` of that layer being in the
/// circuit.
pub fn non_circuit_targets(model: &TinyTransformer, circuit: &BTreeSet<HookId>) -> Vec<PatchTarget> {
    let c = model.config();
    let mut hooks = vec![HookId::embed(), HookId::pos_embed()];
    for l in 0..c.n_layers {
        hooks.extend((0..c.n_heads).map(|h| HookId::attn_head_out(l, h)));
        if !circuit.contains(&HookId::mlp_out(l)) {
            hooks.extend((0..c.d_mlp).map(|n| HookId::mlp_neuron_act(l, n)));
        }
    }
    hooks
        .into_iter()
        .filter(|h| !circuit.contains(h))
        .map(PatchTarget::all)
        .collect()
}

fn ld_at(logits: &crate::tensor::Tensor, pair: &PromptPair) -> Result<f64> {
    logit_diff(logits.row(pair.eval_pos()), pair.answer, &pair.foils)
}

/// Checks that the ground-truth circuit is sufficient: noising everything
/// else at once (and, when paths are given, every edge outside them) must
/// keep the normalized logit difference at or above `threshold`.
pub fn verify_circuit(
    model: &TinyTransformer,
    truth: &GroundTruth,
    threshold: f64,
) -> Result<VerificationReport> {
    let pair = truth.pair();
    pair.validate(model)?;
    let (clean_logits, _) = model.run_with_cache(&pair.clean)?;
    let (corrupt_logits, corrupt_cache) = model.run_with_cache(&pair.corrupt)?;
    let argmax = |row: &[f64]| (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
    let pos = pair.eval_pos();
    let clean_top = argmax(clean_logits.row(pos));
    let corrupt_top = argmax(corrupt_logits.row(pos));
    let clean_ld = ld_at(&clean_logits, &pair)?;
    let corrupt_ld = ld_at(&corrupt_logits, &pair)?;

    let mut checks = vec![Check {
        name: "baseline".into(),
        passed: clean_top == pair.answer && corrupt_top != pair.answer,
        score: None,
        detail: format!(
            "clean argmax {} (answer {}), corrupt argmax {}",
            model.token_name(clean_top),
            model.token_name(pair.answer),
            model.token_name(corrupt_top)
        ),
    }];
    let score_of = |logits: &crate::tensor::Tensor| -> Result<Option<f64>> {
        Ok(normalize_score(ld_at(logits, &pair)?, clean_ld, corrupt_ld).ok())
    };

    let targets = non_circuit_targets(model, &truth.circuit_hooks);
    let patches: Vec<_> = targets
        .iter()
        .map(|t| t.with_source(PatchSource::Cache(&corrupt_cache)))
        .collect();
    let noised = run_with_patches(model, &pair.clean, &patches)?;
    let score = score_of(&noised)?;
    checks.push(Check {
        name: "sufficiency".into(),
        passed: score.is_some_and(|s| s >= threshold),
        score,
        detail: format!("noised {} non-circuit components", targets.len()),
    });

    if !truth.circuit_paths.is_empty() {
        let seq = pair.clean.len();
        let outside: Vec<PathPatchSpec> = component_edges(model, seq)
            .into_iter()
            .filter(|e| !truth.circuit_paths.iter().any(|p| p.covers(e, seq)))
            .collect();
        let noised = path_patch(model, &outside, &pair, Direction::Noise)?;
        let score = score_of(&noised)?;
        checks.push(Check {
            name: "paths".into(),
            passed: score.is_some_and(|s| s >= threshold),
            score,
            detail: format!("noised {} edges outside the circuit paths", outside.len()),
        });
    }
    Ok(VerificationReport { threshold, checks })
}

#[cfg(test)]
mod tests;
