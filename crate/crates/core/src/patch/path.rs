//! Path patching: swap in the source run's contribution along chosen
//! sender -> receiver edges only.
//!
//! Each receiver's input becomes its natural input plus, for every edge that
//! ends at it, `source_out(sender) - current_out(sender)` at the edge's
//! positions. Everything else in the base run is recomputed normally, so a
//! receiver whose output changes propagates that change downstream.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Direction, Positions, PromptPair};
use crate::error::{Error, Result};
use crate::hook::{HookId, Site};
use crate::model::{ActivationCache, Interventions, TinyTransformer};
use crate::tensor::Tensor;

/// One sender feeding one or more receivers at a set of positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PathPatchSpec {
    pub sender: HookId,
    pub receivers: Vec<HookId>,
    pub positions: Positions,
}

impl PathPatchSpec {
    pub fn new(sender: HookId, receivers: Vec<HookId>, positions: Positions) -> Self {
        Self {
            sender,
            receivers,
            positions,
        }
    }

    pub fn edge(sender: HookId, receiver: HookId, positions: Positions) -> Self {
        Self::new(sender, vec![receiver], positions)
    }

    /// Whether every receiver and position of `edge` is part of this path.
    /// An `mlp_out.L` receiver stands for all neurons of layer `L`.
    pub fn covers(&self, edge: &PathPatchSpec, seq_len: usize) -> bool {
        if self.sender != edge.sender || !self.positions.covers(&edge.positions, seq_len) {
            return false;
        }
        edge.receivers.iter().all(|r| {
            self.receivers.iter().any(|mine| {
                mine == r
                    || (mine.site == Site::MlpOut
                        && r.site == Site::MlpNeuronAct
                        && mine.layer == r.layer)
            })
        })
    }
}

fn is_sender_site(site: Site) -> bool {
    matches!(
        site,
        Site::Embed | Site::PosEmbed | Site::AttnHeadOut | Site::MlpOut | Site::MlpNeuronAct
    )
}

fn is_receiver_site(site: Site) -> bool {
    matches!(
        site,
        Site::AttnHeadOut | Site::MlpOut | Site::MlpNeuronAct | Site::Logits
    )
}

/// Order in which components read and write the residual stream.
fn stage(hook: &HookId, n_layers: usize) -> usize {
    match (hook.site, hook.layer) {
        (Site::AttnHeadOut, Some(l)) => 2 * l + 1,
        (Site::MlpOut | Site::MlpNeuronAct, Some(l)) => 2 * l + 2,
        (Site::Logits, _) => 2 * n_layers + 1,
        _ => 0,
    }
}

/// Components that read `sender`'s output directly: later heads, later MLP
/// layers and the unembedding, in forward order.
pub fn direct_consumers(model: &TinyTransformer, sender: &HookId) -> Result<Vec<HookId>> {
    if !model.has_hook(sender) || !is_sender_site(sender.site) {
        return Err(Error::Graph(format!("{sender} is not a path sender")));
    }
    let c = model.config();
    let s = stage(sender, c.n_layers);
    let mut out = Vec::new();
    for l in 0..c.n_layers {
        if 2 * l + 1 > s {
            out.extend((0..c.n_heads).map(|h| HookId::attn_head_out(l, h)));
        }
        if 2 * l + 2 > s {
            out.push(HookId::mlp_out(l));
        }
    }
    out.push(HookId::logits());
    Ok(out)
}

/// Every component-to-component edge of the model: senders are the token
/// embedding at each position, the positional embedding, every head and every
/// neuron; receivers are every later head and neuron.
pub fn component_edges(model: &TinyTransformer, seq_len: usize) -> Vec<PathPatchSpec> {
    let c = model.config();
    let mut senders: Vec<(HookId, Positions)> = (0..seq_len)
        .map(|p| (HookId::embed(), Positions::one(p)))
        .collect();
    senders.push((HookId::pos_embed(), Positions::All));
    let mut receivers = Vec::new();
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            senders.push((HookId::attn_head_out(l, h), Positions::All));
            receivers.push(HookId::attn_head_out(l, h));
        }
        for n in 0..c.d_mlp {
            senders.push((HookId::mlp_neuron_act(l, n), Positions::All));
            receivers.push(HookId::mlp_neuron_act(l, n));
        }
    }
    let mut edges = Vec::new();
    for (sender, positions) in &senders {
        let s = stage(sender, c.n_layers);
        for r in &receivers {
            if stage(r, c.n_layers) > s {
                edges.push(PathPatchSpec::edge(*sender, *r, positions.clone()));
            }
        }
    }
    edges
}

struct Edge {
    sender: HookId,
    positions: Vec<usize>,
}

fn validate(
    model: &TinyTransformer,
    seq_len: usize,
    specs: &[PathPatchSpec],
) -> Result<BTreeMap<HookId, Vec<Edge>>> {
    let n_layers = model.config().n_layers;
    let mut used: BTreeMap<(HookId, HookId), BTreeSet<usize>> = BTreeMap::new();
    let mut by_receiver: BTreeMap<HookId, Vec<Edge>> = BTreeMap::new();

    for spec in specs {
        let sender = spec.sender;
        if !model.has_hook(&sender) {
            return Err(Error::Input(format!("model has no hook {sender}")));
        }
        if !is_sender_site(sender.site) {
            return Err(Error::Graph(format!("{sender} cannot be a path sender")));
        }
        if spec.receivers.is_empty() {
            return Err(Error::Graph(format!("path from {sender} has no receivers")));
        }
        let positions = spec.positions.resolve(seq_len);
        if let Some(p) = positions.iter().find(|&&p| p >= seq_len) {
            return Err(Error::Input(format!(
                "path position {p} outside prompt of length {seq_len}"
            )));
        }
        for receiver in &spec.receivers {
            if !model.has_hook(receiver) {
                return Err(Error::Input(format!("model has no hook {receiver}")));
            }
            if !is_receiver_site(receiver.site) {
                return Err(Error::Graph(format!("{receiver} cannot be a path receiver")));
            }
            if stage(receiver, n_layers) <= stage(&sender, n_layers) {
                return Err(Error::Graph(format!(
                    "{receiver} is not downstream of {sender}"
                )));
            }
            let set = used.entry((sender, *receiver)).or_default();
            for &p in &positions {
                if !set.insert(p) {
                    return Err(Error::Conflict(format!(
                        "edge {sender} -> {receiver} at position {p} given twice"
                    )));
                }
            }
            by_receiver.entry(*receiver).or_default().push(Edge {
                sender,
                positions: positions.clone(),
            });
        }
    }

    // An MLP layer and one of its neurons overlap, so using both on the same
    // side of an edge would count the neuron's contribution twice.
    let overlaps = |a: &HookId, b: &HookId| {
        a.site == Site::MlpOut && b.site == Site::MlpNeuronAct && a.layer == b.layer
    };
    let layered: Vec<_> = used
        .iter()
        .filter(|((s, r), _)| s.site == Site::MlpOut || r.site == Site::MlpOut)
        .collect();
    for ((s1, r1), p1) in layered {
        for ((s2, r2), p2) in &used {
            if (overlaps(s1, s2) && r1 == r2) || (overlaps(r1, r2) && s1 == s2) {
                if p1.intersection(p2).next().is_none() {
                    continue;
                }
                return Err(Error::Conflict(format!(
                    "edges {s1} -> {r1} and {s2} -> {r2} overlap"
                )));
            }
        }
    }
    Ok(by_receiver)
}

/// Residual contribution of `hook` in a finished run.
fn sender_contribution(model: &TinyTransformer, cache: &ActivationCache, hook: &HookId) -> Result<Tensor> {
    if hook.site != Site::MlpNeuronAct {
        return Ok(cache.require(hook)?.clone());
    }
    let (l, n) = (hook.layer.unwrap_or(0), hook.neuron.unwrap_or(0));
    let act = cache.require(hook)?;
    let w_row = model.params().blocks[l].w_out.row(n);
    let seq = act.rows();
    let mut out = Tensor::zeros(vec![seq, w_row.len()]);
    for i in 0..seq {
        let a = act.data()[i];
        for (o, w) in out.row_mut(i).iter_mut().zip(w_row) {
            *o = a * w;
        }
    }
    Ok(out)
}

struct PathPatcher {
    by_receiver: BTreeMap<HookId, Vec<Edge>>,
    senders: BTreeSet<HookId>,
    source_out: BTreeMap<HookId, Tensor>,
    current_out: BTreeMap<HookId, Tensor>,
    d_model: usize,
    seq_len: usize,
}

impl Interventions for PathPatcher {
    fn wants(&self, _hook: &HookId) -> bool {
        false
    }

    fn visit(&mut self, _hook: &HookId, _act: &mut Tensor) -> Result<()> {
        Ok(())
    }

    fn wants_sender(&self, hook: &HookId) -> bool {
        self.senders.contains(hook)
    }

    fn sender_output(&mut self, hook: &HookId, out: &Tensor) -> Result<()> {
        self.current_out.insert(*hook, out.clone());
        Ok(())
    }

    fn receiver_delta(&mut self, receiver: &HookId) -> Option<Tensor> {
        let edges = self.by_receiver.get(receiver)?;
        let mut delta = Tensor::zeros(vec![self.seq_len, self.d_model]);
        for edge in edges {
            let (Some(src), Some(cur)) = (
                self.source_out.get(&edge.sender),
                self.current_out.get(&edge.sender),
            ) else {
                continue;
            };
            for &p in &edge.positions {
                for ((d, s), c) in delta.row_mut(p).iter_mut().zip(src.row(p)).zip(cur.row(p)) {
                    *d += s - c;
                }
            }
        }
        Some(delta)
    }
}

/// Runs `base_tokens` with the edges in `specs` carrying the contributions
/// recorded in `source_cache`.
pub fn path_patch_from(
    model: &TinyTransformer,
    base_tokens: &[usize],
    source_cache: &ActivationCache,
    specs: &[PathPatchSpec],
) -> Result<Tensor> {
    model.check_tokens(base_tokens)?;
    let seq_len = base_tokens.len();
    if source_cache.seq_len() != seq_len {
        return Err(Error::Input(format!(
            "source run has length {}, base prompt has length {seq_len}",
            source_cache.seq_len()
        )));
    }
    let by_receiver = validate(model, seq_len, specs)?;
    let senders: BTreeSet<HookId> = specs.iter().map(|s| s.sender).collect();
    let source_out = senders
        .iter()
        .map(|h| Ok((*h, sender_contribution(model, source_cache, h)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut patcher = PathPatcher {
        by_receiver,
        senders,
        source_out,
        current_out: BTreeMap::new(),
        d_model: model.config().d_model,
        seq_len,
    };
    model.forward_with(base_tokens, &mut patcher)
}

/// Path patching on a prompt pair: denoising sends clean contributions into
/// the corrupt run, noising sends corrupt contributions into the clean run.
pub fn path_patch(
    model: &TinyTransformer,
    specs: &[PathPatchSpec],
    pair: &PromptPair,
    direction: Direction,
) -> Result<Tensor> {
    pair.validate(model)?;
    let (base, source) = pair.roles(direction);
    let (_, cache) = model.run_with_cache(source)?;
    path_patch_from(model, base, &cache, specs)
}
