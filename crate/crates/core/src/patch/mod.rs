//! Activation patching: overwrite activation slices during a forward pass and
//! let every downstream computation react.
//!
//! Denoising runs the corrupt prompt with clean activations patched in (what
//! is sufficient to restore behaviour); noising runs the clean prompt with
//! corrupt activations patched in (what is necessary to keep it).

mod path;
mod sweep;

pub use path::{component_edges, direct_consumers, path_patch, path_patch_from, PathPatchSpec};
pub use sweep::{sweep, sweep_targets, targets_for, ExperimentRecord, Granularity, SweepSpec, Technique};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::model::{ActivationCache, Interventions, TinyTransformer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Positions {
    All,
    Set(BTreeSet<usize>),
}

impl Serialize for Positions {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Positions::All => s.serialize_str("all"),
            Positions::Set(set) => set.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Positions {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(BTreeSet<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "all" => Ok(Positions::All),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected \"all\" or a list of positions, got {w:?}"
            ))),
            Raw::List(set) => Ok(Positions::Set(set)),
        }
    }
}

impl Positions {
    pub fn one(p: usize) -> Self {
        Positions::Set([p].into())
    }

    pub fn resolve(&self, seq_len: usize) -> Vec<usize> {
        match self {
            Positions::All => (0..seq_len).collect(),
            Positions::Set(s) => s.iter().copied().collect(),
        }
    }

    /// The single position, if this is a one-element set.
    pub fn single(&self) -> Option<usize> {
        match self {
            Positions::Set(s) if s.len() == 1 => s.iter().next().copied(),
            _ => None,
        }
    }

    pub fn contains(&self, p: usize) -> bool {
        match self {
            Positions::All => true,
            Positions::Set(s) => s.contains(&p),
        }
    }

    /// Every position of `other` (resolved against `seq_len`) is in `self`.
    pub fn covers(&self, other: &Positions, seq_len: usize) -> bool {
        other.resolve(seq_len).into_iter().all(|p| self.contains(p))
    }
}

impl fmt::Display for Positions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Positions::All => f.write_str("all"),
            Positions::Set(s) => {
                let parts: Vec<String> = s.iter().map(|p| p.to_string()).collect();
                write!(f, "{{{}}}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Clean activations into the corrupt run.
    Denoise,
    /// Corrupt activations into the clean run.
    Noise,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Denoise => "denoise",
            Direction::Noise => "noise",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A clean prompt, a position-aligned corrupt prompt and the answer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    pub answer: usize,
    pub foils: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_position: Option<usize>,
}

impl PromptPair {
    pub fn eval_pos(&self) -> usize {
        self.eval_position
            .unwrap_or_else(|| self.clean.len().saturating_sub(1))
    }

    pub fn validate(&self, model: &TinyTransformer) -> Result<()> {
        if self.clean.len() != self.corrupt.len() {
            return Err(Error::Input(format!(
                "clean ({}) and corrupt ({}) prompts must have equal length",
                self.clean.len(),
                self.corrupt.len()
            )));
        }
        if self.foils.contains(&self.answer) {
            return Err(Error::Input(format!("answer {} is also a foil", self.answer)));
        }
        model.check_tokens(&self.clean)?;
        model.check_tokens(&self.corrupt)?;
        let vocab = model.config().vocab_size;
        if let Some(t) = std::iter::once(&self.answer)
            .chain(&self.foils)
            .find(|&&t| t >= vocab)
        {
            return Err(Error::Input(format!("answer/foil id {t} out of range")));
        }
        if self.eval_pos() >= self.clean.len() {
            return Err(Error::Input(format!(
                "eval_position {} outside prompt of length {}",
                self.eval_pos(),
                self.clean.len()
            )));
        }
        Ok(())
    }

    /// `(base tokens, source tokens)` for a direction.
    pub fn roles(&self, direction: Direction) -> (&[usize], &[usize]) {
        match direction {
            Direction::Denoise => (&self.corrupt, &self.clean),
            Direction::Noise => (&self.clean, &self.corrupt),
        }
    }
}

/// Per-site mean activation (one vector per site).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanActivations {
    entries: BTreeMap<HookId, Vec<f64>>,
}

impl MeanActivations {
    /// Averages every patchable site over all dataset runs and positions.
    pub fn from_dataset(model: &TinyTransformer, dataset: &[Vec<usize>]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Input("mean ablation needs a non-empty dataset".into()));
        }
        let mut sums: BTreeMap<HookId, Vec<f64>> = BTreeMap::new();
        let mut count = 0usize;
        for tokens in dataset {
            let (_, cache) = model.run_with_cache(tokens)?;
            for (hook, t) in cache.iter() {
                if !hook.site.is_patchable() {
                    continue;
                }
                let acc = sums.entry(*hook).or_insert_with(|| vec![0.0; t.row_width()]);
                for i in 0..t.rows() {
                    for (a, v) in acc.iter_mut().zip(t.row(i)) {
                        *a += v;
                    }
                }
            }
            count += tokens.len();
        }
        let n = count as f64;
        for v in sums.values_mut() {
            for x in v.iter_mut() {
                *x /= n;
            }
        }
        Ok(Self { entries: sums })
    }

    pub fn get(&self, hook: &HookId) -> Option<&[f64]> {
        self.entries.get(hook).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PatchSource<'a> {
    Cache(&'a ActivationCache),
    Zero,
    Mean(&'a MeanActivations),
    /// Explicit `[seq, width]` values.
    Values(&'a Tensor),
}

/// What to overwrite, where, and from which source.
#[derive(Debug, Clone)]
pub struct PatchSpec<'a> {
    pub hook: HookId,
    pub positions: Positions,
    pub source: PatchSource<'a>,
}

impl<'a> PatchSpec<'a> {
    pub fn new(hook: HookId, positions: Positions, source: PatchSource<'a>) -> Self {
        Self {
            hook,
            positions,
            source,
        }
    }
}

/// A hook plus positions, without a source yet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchTarget {
    pub hook: HookId,
    pub positions: Positions,
}

impl PatchTarget {
    pub fn all(hook: HookId) -> Self {
        Self {
            hook,
            positions: Positions::All,
        }
    }

    pub fn at(hook: HookId, position: usize) -> Self {
        Self {
            hook,
            positions: Positions::one(position),
        }
    }

    pub fn with_source<'a>(&self, source: PatchSource<'a>) -> PatchSpec<'a> {
        PatchSpec::new(self.hook, self.positions.clone(), source)
    }
}

struct ResolvedPatch<'a> {
    positions: Vec<usize>,
    source: PatchSource<'a>,
}

/// Applies resolved patches at their hooks and optionally records a cache.
struct Patcher<'a> {
    patches: BTreeMap<HookId, Vec<ResolvedPatch<'a>>>,
    capture: Option<BTreeMap<HookId, Tensor>>,
}

impl Interventions for Patcher<'_> {
    fn wants(&self, hook: &HookId) -> bool {
        self.capture.is_some() || self.patches.contains_key(hook)
    }

    fn visit(&mut self, hook: &HookId, act: &mut Tensor) -> Result<()> {
        if let Some(list) = self.patches.get(hook) {
            for patch in list {
                for &p in &patch.positions {
                    let row = act.row_mut(p);
                    match patch.source {
                        PatchSource::Cache(cache) => row.copy_from_slice(cache.require(hook)?.row(p)),
                        PatchSource::Zero => row.fill(0.0),
                        PatchSource::Mean(mean) => row.copy_from_slice(
                            mean.get(hook).ok_or_else(|| Error::Input(format!("no mean for {hook}")))?,
                        ),
                        PatchSource::Values(values) => row.copy_from_slice(values.row(p)),
                    }
                }
            }
        }
        if let Some(cache) = &mut self.capture {
            cache.insert(*hook, act.clone());
        }
        Ok(())
    }
}

fn resolve_patches<'a>(
    model: &TinyTransformer,
    seq_len: usize,
    patches: &[PatchSpec<'a>],
) -> Result<BTreeMap<HookId, Vec<ResolvedPatch<'a>>>> {
    let mut seen: BTreeSet<(HookId, usize)> = BTreeSet::new();
    let mut out: BTreeMap<HookId, Vec<ResolvedPatch<'a>>> = BTreeMap::new();
    for spec in patches {
        let hook = spec.hook;
        if !model.has_hook(&hook) {
            return Err(Error::Input(format!("model has no hook {hook}")));
        }
        if !hook.site.is_patchable() {
            return Err(Error::Input(format!("{hook} is not a patchable site")));
        }
        let width = model.hook_width(&hook, seq_len);
        let positions = spec.positions.resolve(seq_len);
        for &p in &positions {
            if p >= seq_len {
                return Err(Error::Input(format!(
                    "patch position {p} outside destination of length {seq_len}"
                )));
            }
            if !seen.insert((hook, p)) {
                return Err(Error::Conflict(format!("{hook} at position {p} patched twice")));
            }
        }
        let src_width_rows = match spec.source {
            PatchSource::Cache(cache) => {
                let t = cache.require(&hook)?;
                Some((t.row_width(), cache.seq_len()))
            }
            PatchSource::Values(t) => Some((t.row_width(), t.rows())),
            PatchSource::Mean(mean) => {
                let v = mean
                    .get(&hook)
                    .ok_or_else(|| Error::Input(format!("mean activations lack {hook}")))?;
                Some((v.len(), usize::MAX))
            }
            PatchSource::Zero => None,
        };
        if let Some((w, rows)) = src_width_rows {
            if w != width {
                return Err(Error::Shape {
                    op: "patch slice",
                    lhs: vec![width],
                    rhs: vec![w],
                });
            }
            if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
                return Err(Error::Input(format!(
                    "patch position {p} outside source of length {rows}"
                )));
            }
        }
        out.entry(hook).or_default().push(ResolvedPatch {
            positions,
            source: spec.source,
        });
    }
    Ok(out)
}

/// Forward pass on `tokens` with every patch applied before downstream use.
pub fn run_with_patches(
    model: &TinyTransformer,
    tokens: &[usize],
    patches: &[PatchSpec<'_>],
) -> Result<Tensor> {
    model.check_tokens(tokens)?;
    let mut patcher = Patcher {
        patches: resolve_patches(model, tokens.len(), patches)?,
        capture: None,
    };
    model.forward_with(tokens, &mut patcher)
}

/// Like [`run_with_patches`], also returning the (patched) activation cache.
pub fn run_with_patches_cached(
    model: &TinyTransformer,
    tokens: &[usize],
    patches: &[PatchSpec<'_>],
) -> Result<(Tensor, ActivationCache)> {
    model.check_tokens(tokens)?;
    let mut patcher = Patcher {
        patches: resolve_patches(model, tokens.len(), patches)?,
        capture: Some(BTreeMap::new()),
    };
    let logits = model.forward_with(tokens, &mut patcher)?;
    let entries = patcher.capture.take().unwrap_or_default();
    Ok((logits, ActivationCache::from_entries(entries, tokens.len())))
}

fn patch_pair(
    model: &TinyTransformer,
    pair: &PromptPair,
    targets: &[PatchTarget],
    direction: Direction,
) -> Result<Tensor> {
    pair.validate(model)?;
    let (base, source) = pair.roles(direction);
    let (_, cache) = model.run_with_cache(source)?;
    let patches: Vec<PatchSpec<'_>> = targets
        .iter()
        .map(|t| t.with_source(PatchSource::Cache(&cache)))
        .collect();
    run_with_patches(model, base, &patches)
}

/// Corrupt prompt with clean activations patched in at `targets`.
pub fn denoise(model: &TinyTransformer, pair: &PromptPair, targets: &[PatchTarget]) -> Result<Tensor> {
    patch_pair(model, pair, targets, Direction::Denoise)
}

/// Clean prompt with corrupt activations patched in at `targets`.
pub fn noise(model: &TinyTransformer, pair: &PromptPair, targets: &[PatchTarget]) -> Result<Tensor> {
    patch_pair(model, pair, targets, Direction::Noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Zero,
    Mean,
}

pub fn ablate(
    model: &TinyTransformer,
    tokens: &[usize],
    targets: &[PatchTarget],
    mode: AblationMode,
    dataset: Option<&[Vec<usize>]>,
) -> Result<Tensor> {
    match mode {
        AblationMode::Zero => {
            let patches: Vec<_> = targets.iter().map(|t| t.with_source(PatchSource::Zero)).collect();
            run_with_patches(model, tokens, &patches)
        }
        AblationMode::Mean => {
            let dataset = dataset.unwrap_or_default();
            let mean = MeanActivations::from_dataset(model, dataset)?;
            let patches: Vec<_> = targets
                .iter()
                .map(|t| t.with_source(PatchSource::Mean(&mean)))
                .collect();
            run_with_patches(model, tokens, &patches)
        }
    }
}

/// Token embeddings of `tokens` plus seeded `N(0, sigma^2)` noise; positional
/// embeddings are left alone.
pub fn noisy_embeddings(model: &TinyTransformer, tokens: &[usize], sigma: f64, seed: u64) -> Result<Tensor> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Input(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    model.check_tokens(tokens)?;
    let d = model.config().d_model;
    let w_e = &model.params().w_e;
    let mut embed = Tensor::zeros(vec![tokens.len(), d]);
    for (i, &t) in tokens.iter().enumerate() {
        embed.row_mut(i).copy_from_slice(w_e.row(t));
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Input(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in embed.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(embed)
}

/// Runs `tokens` with Gaussian noise on the token embeddings and caches every
/// site, producing a corrupt run for later denoising.
pub fn gaussian_corrupt(
    model: &TinyTransformer,
    tokens: &[usize],
    sigma: f64,
    seed: u64,
) -> Result<(Tensor, ActivationCache)> {
    let noisy = noisy_embeddings(model, tokens, sigma, seed)?;
    let patch = PatchSpec::new(HookId::embed(), Positions::All, PatchSource::Values(&noisy));
    run_with_patches_cached(model, tokens, &[patch])
}

#[cfg(test)]
mod tests;
