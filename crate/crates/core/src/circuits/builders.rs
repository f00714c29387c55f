use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackupInfo, GroundTruth, ToyCircuitKind};
use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::model::{ModelConfig, Parameters, TinyTransformer};
use crate::patch::{Granularity, PathPatchSpec, Positions, PromptPair};

const D_MODEL: usize = 32;
const N_HEADS: usize = 4;
const D_HEAD: usize = 8;
const MAX_SEQ: usize = 4;

const POS: usize = 0;
const CONST: usize = 4;
const FILLER: std::ops::Range<usize> = 16..32;

const FILLER_STD: f64 = 0.2;
const TOKEN_FILLER_STD: f64 = 0.05;
const UNEMBED_FILLER_STD: f64 = 0.05;
/// Pre-softmax score of a pinned attention target after the 1/sqrt(d_head)
/// scaling; every other score is 0, so leakage is about e^-40.
const PIN_SCORE: f64 = 40.0;
/// Head dimension used for the value/output path of circuit heads.
const OV_DIM: usize = D_HEAD - 1;

pub(super) const DEFAULT_COMPENSATION: f64 = 0.7;

const GATE_SEED: u64 = 11;
const NOBEL_SEED: u64 = 42;
const BACKUP_SEED: u64 = 7;
const NEGATIVE_SEED: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    And,
    Or,
}

struct Toy {
    config: ModelConfig,
    params: Parameters,
}

impl Toy {
    fn new(n_layers: usize, d_mlp: usize, vocab_size: usize, seed: u64) -> Self {
        let config = ModelConfig {
            n_layers,
            n_heads: N_HEADS,
            d_model: D_MODEL,
            d_head: D_HEAD,
            d_mlp,
            vocab_size,
            max_seq: MAX_SEQ,
            use_final_layernorm: false,
            use_block_layernorm: false,
        };
        let mut p = Parameters::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |std: f64| Normal::new(0.0, std).unwrap().sample(&mut rng);

        for pos in 0..MAX_SEQ {
            p.w_pos.set2(pos, POS + pos, 1.0);
            p.w_pos.set2(pos, CONST, 1.0);
        }
        for t in 0..vocab_size {
            for d in FILLER {
                p.w_e.set2(t, d, draw(TOKEN_FILLER_STD));
                p.w_u.set2(d, t, draw(UNEMBED_FILLER_STD));
            }
        }
        for block in &mut p.blocks {
            for h in 0..N_HEADS {
                for w in [&mut block.w_q[h], &mut block.w_k[h], &mut block.w_v[h]] {
                    for v in w.data_mut() {
                        *v = draw(FILLER_STD);
                    }
                }
                for i in 0..D_HEAD {
                    for d in FILLER {
                        block.w_o[h].set2(i, d, draw(FILLER_STD));
                    }
                }
            }
            for v in block.w_in.data_mut() {
                *v = draw(FILLER_STD);
            }
            for n in 0..d_mlp {
                block.b_in[n] = draw(FILLER_STD);
                for d in FILLER {
                    block.w_out.set2(n, d, draw(FILLER_STD));
                }
            }
        }
        Self { config, params: p }
    }

    fn clear_head(&mut self, l: usize, h: usize) {
        let b = &mut self.params.blocks[l];
        for w in [&mut b.w_q[h], &mut b.w_k[h], &mut b.w_v[h], &mut b.w_o[h]] {
            w.data_mut().fill(0.0);
        }
    }

    fn pin_scale() -> f64 {
        PIN_SCORE * (D_HEAD as f64).sqrt()
    }

    /// Every query attends to position `target` (or to itself while
    /// `target` is still in the future).
    fn attend_to(&mut self, l: usize, h: usize, target: usize) {
        self.clear_head(l, h);
        let b = &mut self.params.blocks[l];
        b.w_q[h].set2(CONST, 0, Self::pin_scale());
        b.w_k[h].set2(POS + target, 0, 1.0);
    }

    /// Position p attends to p - 1; position 0 attends to itself.
    fn attend_previous(&mut self, l: usize, h: usize) {
        self.clear_head(l, h);
        let b = &mut self.params.blocks[l];
        for p in 0..MAX_SEQ {
            b.w_k[h].set2(POS + p, p, 1.0);
            if p > 0 {
                b.w_q[h].set2(POS + p, p - 1, Self::pin_scale());
            }
        }
    }

    fn attend_self(&mut self, l: usize, h: usize) {
        self.clear_head(l, h);
        let b = &mut self.params.blocks[l];
        for p in 0..MAX_SEQ {
            b.w_q[h].set2(POS + p, p, Self::pin_scale());
            b.w_k[h].set2(POS + p, p, 1.0);
        }
    }

    /// OV circuit: read `from` at the attended position, write `to`.
    fn copy(&mut self, l: usize, h: usize, from: usize, to: &[(usize, f64)]) {
        let b = &mut self.params.blocks[l];
        b.w_v[h].set2(from, OV_DIM, 1.0);
        for &(d, w) in to {
            b.w_o[h].set2(OV_DIM, d, w);
        }
    }

    fn neuron(&mut self, l: usize, n: usize, reads: &[(usize, f64)], bias: f64, writes: &[(usize, f64)]) {
        let b = &mut self.params.blocks[l];
        for d in 0..D_MODEL {
            b.w_in.set2(d, n, 0.0);
            b.w_out.set2(n, d, 0.0);
        }
        for &(d, w) in reads {
            b.w_in.set2(d, n, w);
        }
        b.b_in[n] = bias;
        for &(d, w) in writes {
            b.w_out.set2(n, d, w);
        }
    }

    fn feature(&mut self, token: usize, dim: usize) {
        self.params.w_e.set2(token, dim, 1.0);
    }

    /// Answer logit reads `answer_dim`; the foil logit is the constant 1.
    fn unembed(&mut self, answer: usize, answer_dim: usize, foil: usize) {
        for t in [answer, foil] {
            for d in 0..D_MODEL {
                self.params.w_u.set2(d, t, 0.0);
            }
        }
        self.params.w_u.set2(answer_dim, answer, 1.0);
        self.params.w_u.set2(CONST, foil, 1.0);
    }

    fn finish(self, vocab: Vec<String>) -> Result<TinyTransformer> {
        TinyTransformer::new(self.config, self.params)?.with_vocab(vocab)
    }
}

fn filler_vocab(named: &[&str], size: usize) -> Vec<String> {
    named
        .iter()
        .map(|s| s.to_string())
        .chain((named.len()..size).map(|i| format!("t{i}")))
        .collect()
}

/// Seeded two-token prompt avoiding `excluded`.
fn random_pair(seed: u64, vocab_size: usize, excluded: &[usize]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|_| loop {
            let t = rng.random_range(0..vocab_size);
            if !excluded.contains(&t) {
                break t;
            }
        })
        .collect()
}

fn set<const N: usize>(hooks: [HookId; N]) -> BTreeSet<HookId> {
    hooks.into_iter().collect()
}

fn edge(sender: HookId, receiver: HookId, positions: Positions) -> PathPatchSpec {
    PathPatchSpec::edge(sender, receiver, positions)
}

/// Two parallel layer-0 heads feed a layer-1 MLP that computes AND or OR.
///
/// A (`L0H0`) attends to position 0 and copies feature `a`; B (`L0H1`)
/// attends to its own position and copies feature `b`. C (`mlp_out.L1`) is
/// `4 relu(A + B - 1)` for AND and `4 relu(A + B) - 4 relu(A + B - 1)`
/// (= `4 min(A + B, 1)` on {0,1} inputs) for OR.
pub fn build_gate_circuit(gate: Gate) -> Result<(TinyTransformer, GroundTruth)> {
    const VOCAB: usize = 12;
    let (tok_a, tok_b, yes, no) = (0, 1, 2, 3);
    let (fa, fb, a_out, b_out, ans) = (5, 6, 7, 8, 9);

    let mut toy = Toy::new(2, 8, VOCAB, GATE_SEED);
    toy.feature(tok_a, fa);
    toy.feature(tok_b, fb);
    toy.attend_to(0, 0, 0);
    toy.copy(0, 0, fa, &[(a_out, 1.0)]);
    toy.attend_self(0, 1);
    toy.copy(0, 1, fb, &[(b_out, 1.0)]);
    let both = [(a_out, 1.0), (b_out, 1.0)];
    match gate {
        Gate::And => toy.neuron(1, 0, &both, -1.0, &[(ans, 4.0)]),
        Gate::Or => {
            toy.neuron(1, 0, &both, 0.0, &[(ans, 4.0)]);
            toy.neuron(1, 1, &both, -1.0, &[(ans, -4.0)]);
        }
    }
    toy.unembed(yes, ans, no);
    let model = toy.finish(filler_vocab(&["a", "b", "yes", "no"], VOCAB))?;

    let (a, b, c) = (
        HookId::attn_head_out(0, 0),
        HookId::attn_head_out(0, 1),
        HookId::mlp_out(1),
    );
    let (kind, denoise_hits, noise_hits) = match gate {
        Gate::And => (ToyCircuitKind::AndGate, set([c]), set([a, b, c])),
        Gate::Or => (ToyCircuitKind::OrGate, set([a, b, c]), set([c])),
    };
    let truth = GroundTruth {
        kind,
        circuit_hooks: set([HookId::embed(), a, b, c]),
        expected_denoise_hits: denoise_hits,
        expected_noise_hits: noise_hits,
        negative_hooks: BTreeSet::new(),
        clean_prompt: vec![tok_a, tok_b],
        corrupt_prompt: random_pair(GATE_SEED + 1, VOCAB, &[tok_a, tok_b]),
        answer: yes,
        foils: vec![no],
        circuit_paths: vec![
            edge(HookId::embed(), a, Positions::one(0)),
            edge(HookId::embed(), b, Positions::one(1)),
            edge(a, c, Positions::All),
            edge(b, c, Positions::All),
        ],
        granularities: vec![Granularity::Component],
        backup: None,
        filler_seed: GATE_SEED,
    };
    truth.validate(&model)?;
    Ok((model, truth))
}

const NOBEL_WORDS: [&str; 16] = [
    "Nobel", "Peace", "Prize", "the", "a", "of", "and", "to", "in", "is", "was", "for", "on",
    "with", "as", "by",
];
const NOBEL: usize = 0;
const PEACE: usize = 1;
const NOBEL_NEURON: usize = 42;
/// Keeps the neuron silent unless both inputs are present; a lone input
/// leaks `1 - 0.95` so single-input patches score slightly above zero.
const NOBEL_THRESHOLD: f64 = 0.95;

/// "Nobel Peace" -> "Prize".
///
/// `L0H0` is a previous-token head that copies the Nobel direction into the
/// Peace position. Neuron 42 of layer 1 fires on `nobel + peace - 0.95` and
/// writes the Prize direction. Layer 2 is filler only.
pub fn build_nobel_circuit() -> Result<(TinyTransformer, GroundTruth)> {
    let vocab = NOBEL_WORDS.len();
    let (prize, the) = (2, 3);
    let (d_nobel, d_peace, d_prize) = (5, 6, 7);

    let mut toy = Toy::new(3, 48, vocab, NOBEL_SEED);
    toy.feature(NOBEL, d_nobel);
    toy.feature(PEACE, d_peace);
    toy.attend_previous(0, 0);
    toy.copy(0, 0, d_nobel, &[(d_nobel, 1.0)]);
    // clean activation is 2 - 0.95, scaled so the Prize logit is exactly 4
    let out = 4.0 / (2.0 - NOBEL_THRESHOLD);
    toy.neuron(
        1,
        NOBEL_NEURON,
        &[(d_nobel, 1.0), (d_peace, 1.0)],
        -NOBEL_THRESHOLD,
        &[(d_prize, out)],
    );
    toy.unembed(prize, d_prize, the);
    let model = toy.finish(NOBEL_WORDS.iter().map(|s| s.to_string()).collect())?;

    let head = HookId::attn_head_out(0, 0);
    let neuron = HookId::mlp_neuron_act(1, NOBEL_NEURON);
    let truth = GroundTruth {
        kind: ToyCircuitKind::Nobel,
        circuit_hooks: set([HookId::embed(), head, neuron]),
        expected_denoise_hits: set([neuron]),
        expected_noise_hits: set([HookId::embed(), head, neuron]),
        negative_hooks: BTreeSet::new(),
        clean_prompt: vec![NOBEL, PEACE],
        corrupt_prompt: random_pair(NOBEL_SEED + 1, vocab, &[NOBEL, PEACE]),
        answer: prize,
        foils: vec![the],
        circuit_paths: vec![
            edge(HookId::embed(), head, Positions::one(0)),
            edge(head, neuron, Positions::All),
            edge(HookId::embed(), neuron, Positions::one(1)),
        ],
        granularities: vec![Granularity::Embed, Granularity::Head, Granularity::Neuron],
        backup: None,
        filler_seed: NOBEL_SEED,
    };
    truth.validate(&model)?;
    Ok((model, truth))
}

/// "X Peace" corruption of the Nobel prompt: only the first word changes.
pub fn nobel_partial_corruption(truth: &GroundTruth) -> PromptPair {
    let mut pair = truth.pair();
    pair.corrupt[1] = pair.clean[1];
    pair
}

/// A primary head that also raises an "I handled it" flag, and a backup
/// neuron inhibited by that flag.
///
/// The primary (`L0H0`) writes `X = 4` to the answer dim and 1 to the flag
/// dim. The backup (`mlp_neuron_act.L1.N0`) computes `relu(g2 - flag)` and
/// writes `compensation * X`, so it is silent on clean runs and exactly
/// replaces `compensation * X` when the primary is ablated.
pub fn build_backup_circuit(compensation: f64) -> Result<(TinyTransformer, GroundTruth)> {
    if !(0.0..1.0).contains(&compensation) {
        return Err(Error::Input(format!(
            "compensation must be in [0, 1), got {compensation}"
        )));
    }
    const VOCAB: usize = 12;
    const BOOST: f64 = 4.0;
    let (tok_g, tok_h, yes, no) = (0, 1, 2, 3);
    let (g, g2, ans, flag) = (5, 6, 7, 8);

    let mut toy = Toy::new(2, 8, VOCAB, BACKUP_SEED);
    toy.feature(tok_g, g);
    toy.feature(tok_h, g2);
    toy.attend_to(0, 0, 0);
    toy.copy(0, 0, g, &[(ans, BOOST), (flag, 1.0)]);
    toy.neuron(1, 0, &[(g2, 1.0), (flag, -1.0)], 0.0, &[(ans, compensation * BOOST)]);
    toy.unembed(yes, ans, no);
    let model = toy.finish(filler_vocab(&["g", "h", "yes", "no"], VOCAB))?;

    let primary = HookId::attn_head_out(0, 0);
    let backup = HookId::mlp_neuron_act(1, 0);
    let truth = GroundTruth {
        kind: ToyCircuitKind::Backup,
        circuit_hooks: set([HookId::embed(), primary, backup]),
        expected_denoise_hits: set([primary]),
        expected_noise_hits: BTreeSet::new(),
        negative_hooks: BTreeSet::new(),
        clean_prompt: vec![tok_g, tok_h],
        corrupt_prompt: random_pair(BACKUP_SEED + 1, VOCAB, &[tok_g, tok_h]),
        answer: yes,
        foils: vec![no],
        circuit_paths: vec![
            edge(HookId::embed(), primary, Positions::one(0)),
            edge(HookId::embed(), backup, Positions::one(1)),
            edge(primary, backup, Positions::All),
        ],
        granularities: vec![Granularity::Head, Granularity::Neuron],
        backup: Some(BackupInfo {
            primary,
            backup,
            compensation,
            boost: BOOST,
            expected_visibility: 1.0 - compensation,
        }),
        filler_seed: BACKUP_SEED,
    };
    truth.validate(&model)?;
    Ok((model, truth))
}

/// A positive head writing `+6` and a negative head writing `-2` to the
/// answer dim whenever feature `f` sits at position 0.
pub fn build_negative_head_circuit() -> Result<(TinyTransformer, GroundTruth)> {
    const VOCAB: usize = 12;
    let (tok_f, yes, no, filler) = (0, 1, 2, 3);
    let (f, ans) = (5, 6);

    let mut toy = Toy::new(2, 8, VOCAB, NEGATIVE_SEED);
    toy.feature(tok_f, f);
    toy.attend_to(0, 0, 0);
    toy.copy(0, 0, f, &[(ans, 6.0)]);
    toy.attend_to(0, 1, 0);
    toy.copy(0, 1, f, &[(ans, -2.0)]);
    toy.unembed(yes, ans, no);
    let model = toy.finish(filler_vocab(&["f", "yes", "no"], VOCAB))?;

    let positive = HookId::attn_head_out(0, 0);
    let negative = HookId::attn_head_out(0, 1);
    let truth = GroundTruth {
        kind: ToyCircuitKind::NegativeHead,
        circuit_hooks: set([HookId::embed(), positive]),
        expected_denoise_hits: set([positive]),
        expected_noise_hits: set([positive]),
        negative_hooks: set([negative]),
        clean_prompt: vec![tok_f, filler],
        corrupt_prompt: random_pair(NEGATIVE_SEED + 1, VOCAB, &[tok_f]),
        answer: yes,
        foils: vec![no],
        circuit_paths: vec![edge(HookId::embed(), positive, Positions::one(0))],
        granularities: vec![Granularity::Head, Granularity::Mlp],
        backup: None,
        filler_seed: NEGATIVE_SEED,
    };
    truth.validate(&model)?;
    Ok((model, truth))
}
