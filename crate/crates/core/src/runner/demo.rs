//! The toy-circuit suite behind `patchbench demo`: every circuit, every
//! patching claim about it, one pass/fail line each.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{hit_set, records_to_csv, verify_circuit};
use crate::circuits::{build_backup_circuit, GroundTruth, ToyCircuitKind};
use crate::error::Result;
use crate::hook::HookId;
use crate::metrics::{kl_div, logit_diff, MetricKind};
use crate::model::TinyTransformer;
use crate::patch::{
    ablate, denoise, direct_consumers, gaussian_corrupt, noise, path_patch, run_with_patches,
    sweep, AblationMode, Direction, PatchSource, PatchSpec, PatchTarget, PathPatchSpec, Positions,
    SweepSpec, Technique,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn ld(logits: &Tensor, truth: &GroundTruth) -> Result<f64> {
    let row = logits.row(truth.clean_prompt.len() - 1);
    logit_diff(row, truth.answer, &truth.foils)
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

/// Hits of single-target patch sweeps over the circuit's granularities.
pub fn sweep_hits(model: &TinyTransformer, truth: &GroundTruth, direction: Direction) -> Result<BTreeSet<HookId>> {
    let mut hits = BTreeSet::new();
    for &granularity in &truth.granularities {
        let spec = SweepSpec {
            pair: truth.pair(),
            direction,
            technique: Technique::Patch,
            granularity,
            metrics: vec![MetricKind::LogitDiff],
        };
        hits.extend(hit_set(&sweep(model, &spec)?, MetricKind::LogitDiff));
    }
    Ok(hits)
}

/// Fraction of `seeds` Gaussian corruptions of `tokens` that keep the clean
/// top-1 token at the last position.
pub fn gaussian_survival(model: &TinyTransformer, tokens: &[usize], sigma: f64, seeds: u64) -> Result<f64> {
    let last = tokens.len() - 1;
    let clean_top = argmax(model.forward(tokens)?.row(last));
    let mut kept = 0;
    for seed in 0..seeds {
        let (logits, _) = gaussian_corrupt(model, tokens, sigma, seed)?;
        if argmax(logits.row(last)) == clean_top {
            kept += 1;
        }
    }
    Ok(kept as f64 / seeds as f64)
}

pub const GAUSSIAN_SIGMAS: [f64; 10] = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0];
pub const GAUSSIAN_SEEDS: u64 = 32;

type CheckFn = Box<dyn Fn() -> Result<(bool, String)>>;

fn checks() -> Vec<(String, CheckFn)> {
    let mut out: Vec<(String, CheckFn)> = Vec::new();

    for kind in ToyCircuitKind::ALL {
        out.push((
            format!("{kind}: sweep hit sets"),
            Box::new(move || {
                let (model, truth) = kind.build()?;
                let d = sweep_hits(&model, &truth, Direction::Denoise)?;
                let n = sweep_hits(&model, &truth, Direction::Noise)?;
                let ok = d == truth.expected_denoise_hits && n == truth.expected_noise_hits;
                Ok((ok, format!("denoise {} / noise {}", names(&d), names(&n))))
            }),
        ));
        out.push((
            format!("{kind}: circuit verification"),
            Box::new(move || {
                let (model, truth) = kind.build()?;
                let report = verify_circuit(&model, &truth, 0.9)?;
                let scores: Vec<String> = report
                    .checks
                    .iter()
                    .filter_map(|c| c.score.map(|s| format!("{}={s:.3}", c.name)))
                    .collect();
                Ok((report.passed(), scores.join(" ")))
            }),
        ));
    }

    for kind in [ToyCircuitKind::AndGate, ToyCircuitKind::Nobel] {
        out.push((
            format!("{kind}: every circuit hook is necessary"),
            Box::new(move || {
                let (model, truth) = kind.build()?;
                let mut failed = Vec::new();
                for hook in &truth.circuit_hooks {
                    let mut reduced = truth.clone();
                    reduced.circuit_hooks.remove(hook);
                    reduced.circuit_paths.clear();
                    if !verify_circuit(&model, &reduced, 0.9)?.passed() {
                        failed.push(*hook);
                    }
                }
                let ok = failed.len() == truth.circuit_hooks.len();
                Ok((ok, format!("{}/{} removals break it", failed.len(), truth.circuit_hooks.len())))
            }),
        ));
    }

    out.push((
        "nobel: path cross-section restores".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::Nobel.build()?;
            let pair = truth.pair();
            let logits = path_patch(&model, &truth.circuit_paths, &pair, Direction::Denoise)?;
            let clean = ld(&model.forward(&pair.clean)?, &truth)?;
            let corrupt = ld(&model.forward(&pair.corrupt)?, &truth)?;
            let score = (ld(&logits, &truth)? - corrupt) / (clean - corrupt);
            Ok((score >= 0.9, format!("score {score:.4}")))
        }),
    ));

    out.push((
        "nobel: all outgoing paths equal component patching".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::Nobel.build()?;
            let pair = truth.pair();
            let mut worst: f64 = 0.0;
            for sender in [
                HookId::embed(),
                HookId::attn_head_out(0, 0),
                HookId::attn_head_out(0, 2),
                HookId::mlp_out(1),
                HookId::mlp_neuron_act(1, 42),
            ] {
                let spec = PathPatchSpec::new(sender, direct_consumers(&model, &sender)?, Positions::All);
                for direction in [Direction::Denoise, Direction::Noise] {
                    let via = path_patch(&model, std::slice::from_ref(&spec), &pair, direction)?;
                    let target = [PatchTarget::all(sender)];
                    let direct = match direction {
                        Direction::Denoise => denoise(&model, &pair, &target)?,
                        Direction::Noise => noise(&model, &pair, &target)?,
                    };
                    for (a, b) in via.data().iter().zip(direct.data()) {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
            Ok((worst <= 1e-9, format!("max |diff| {worst:.2e}")))
        }),
    ));

    out.push((
        "backup: ablation effect is 0.3 X".into(),
        Box::new(|| {
            let (model, truth) = build_backup_circuit(0.7)?;
            let Some(info) = truth.backup.clone() else {
                return Ok((false, "no backup info".into()));
            };
            let clean = model.forward(&truth.clean_prompt)?;
            let ablated = ablate(
                &model,
                &truth.clean_prompt,
                &[PatchTarget::all(info.primary)],
                AblationMode::Zero,
                None,
            )?;
            let last = truth.clean_prompt.len() - 1;
            let effect = clean.get2(last, truth.answer) - ablated.get2(last, truth.answer);
            let ratio = effect / info.boost;
            Ok(((ratio - 0.3).abs() <= 0.05, format!("effect {effect:.4} = {ratio:.4} X")))
        }),
    ));

    out.push((
        "negative: noising the negative head overshoots".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::NegativeHead.build()?;
            let pair = truth.pair();
            let Some(&negative) = truth.negative_hooks.iter().next() else {
                return Ok((false, "no negative hook".into()));
            };
            let clean_logits = model.forward(&pair.clean)?;
            let clean = ld(&clean_logits, &truth)?;
            let corrupt = ld(&model.forward(&pair.corrupt)?, &truth)?;
            let noised = noise(&model, &pair, &[PatchTarget::all(negative)])?;
            let score = (ld(&noised, &truth)? - corrupt) / (clean - corrupt);
            let last = pair.eval_pos();
            let kl = kl_div(clean_logits.row(last), noised.row(last))?;
            Ok((score > 1.0 && kl > 0.0, format!("score {score:.4}, kl {kl:.4}")))
        }),
    ));

    out.push((
        "nobel: residual linearity (100 injections)".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::Nobel.build()?;
            let tokens = &truth.clean_prompt;
            let last = tokens.len() - 1;
            let n_layers = model.config().n_layers;
            let (logits, cache) = model.run_with_cache(tokens)?;
            let base_ld = ld(&logits, &truth)?;
            let resid = cache.require(&HookId::resid_post(n_layers - 1))?;
            let w_u = &model.params().w_u;
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let normal = Normal::new(0.0, 1.0).map_err(|e| crate::Error::Input(e.to_string()))?;
            let mut worst: f64 = 0.0;
            for _ in 0..100 {
                let w: Vec<f64> = (0..resid.row_width()).map(|_| normal.sample(&mut rng)).collect();
                let mut injected = resid.clone();
                for (v, d) in injected.row_mut(last).iter_mut().zip(&w) {
                    *v += d;
                }
                let patch = PatchSpec::new(
                    HookId::resid_post(n_layers - 1),
                    Positions::one(last),
                    PatchSource::Values(&injected),
                );
                let patched = run_with_patches(&model, tokens, &[patch])?;
                let proj = |t: usize| (0..w.len()).map(|j| w[j] * w_u.get2(j, t)).sum::<f64>();
                let foil_mean =
                    truth.foils.iter().map(|&f| proj(f)).sum::<f64>() / truth.foils.len() as f64;
                let expected = proj(truth.answer) - foil_mean;
                worst = worst.max((ld(&patched, &truth)? - base_ld - expected).abs());
            }
            Ok((worst <= 1e-9, format!("max error {worst:.2e}")))
        }),
    ));

    out.push((
        "engine: identity, override and determinism".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::Nobel.build()?;
            let pair = truth.pair();
            let (clean, cache) = model.run_with_cache(&pair.clean)?;
            let all: Vec<_> = model
                .list_hooks()
                .into_iter()
                .filter(|h| h.site.is_patchable())
                .map(|h| PatchSpec::new(h, Positions::All, PatchSource::Cache(&cache)))
                .collect();
            let identity = run_with_patches(&model, &pair.clean, &all)? == clean;
            let last = HookId::resid_post(model.config().n_layers - 1);
            let corrupt = model.forward(&pair.corrupt)?;
            let overridden = noise(&model, &pair, &[PatchTarget::all(last)])? == corrupt;
            let spec = SweepSpec {
                pair: pair.clone(),
                direction: Direction::Denoise,
                technique: Technique::Patch,
                granularity: crate::patch::Granularity::Neuron,
                metrics: MetricKind::ALL.to_vec(),
            };
            let a = records_to_csv(&sweep(&model, &spec)?)?;
            let b = records_to_csv(&sweep(&model, &spec)?)?;
            let ok = identity && overridden && a == b;
            Ok((ok, format!("identity {identity}, override {overridden}, csv stable {}", a == b)))
        }),
    ));

    out.push((
        "nobel: gaussian noise has survive and destroy regimes".into(),
        Box::new(|| {
            let (model, truth) = ToyCircuitKind::Nobel.build()?;
            let mut survive = None;
            let mut destroy = None;
            for sigma in GAUSSIAN_SIGMAS {
                let kept = gaussian_survival(&model, &truth.clean_prompt, sigma, GAUSSIAN_SEEDS)?;
                if sigma > 0.0 && kept == 1.0 {
                    survive = Some(sigma);
                }
                if kept <= 0.5 && destroy.is_none() {
                    destroy = Some(sigma);
                }
            }
            let ok = matches!((survive, destroy), (Some(s), Some(d)) if s < d);
            Ok((ok, format!("survives up to sigma {survive:?}, destroyed from {destroy:?}")))
        }),
    ));

    out
}

fn names(set: &BTreeSet<HookId>) -> String {
    let parts: Vec<String> = set.iter().map(|h| h.to_string()).collect();
    format!("{{{}}}", parts.join(", "))
}

/// Runs every demo check; errors inside a check count as failures.
pub fn run_demo() -> Vec<DemoCheck> {
    checks()
        .into_iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            DemoCheck {
                name,
                passed,
                detail,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
