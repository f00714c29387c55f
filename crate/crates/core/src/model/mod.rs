//! A minimal pre-norm decoder-only transformer with hookable activation sites.
//!
//! Residual convention: `resid_pre[L] = embed + pos_embed + outputs of all
//! earlier blocks`, each head writes its own `attn_head_out` (already projected
//! into `d_model`), and `resid_post[L] = resid_pre[L] + sum(heads) + mlp_out`.
//! Block layernorms and the final layernorm are both optional; toy circuits run
//! without them so the logit difference is exactly linear in the residual.

mod cache;
mod forward;
mod io;

pub use cache::ActivationCache;
pub(crate) use forward::Interventions;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hook::HookId;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub use_final_layernorm: bool,
    #[serde(default)]
    pub use_block_layernorm: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("model config: {name} must be >= 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Input(format!(
                "model config: n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if (self.use_final_layernorm || self.use_block_layernorm) && self.d_model < 2 {
            return Err(Error::Input("layernorm needs d_model >= 2".into()));
        }
        Ok(())
    }
}

/// Scale and shift of one layernorm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormParams {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// Per head `[d_model, d_head]`.
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    /// Per head `[d_head, d_model]`.
    pub w_o: Vec<Tensor>,
    /// `[d_model, d_mlp]`
    pub w_in: Tensor,
    pub b_in: Vec<f64>,
    /// `[d_mlp, d_model]`
    pub w_out: Tensor,
    pub b_out: Vec<f64>,
    pub ln1: Option<LayerNormParams>,
    pub ln2: Option<LayerNormParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// `[vocab_size, d_model]`
    pub w_e: Tensor,
    /// `[max_seq, d_model]`
    pub w_pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub ln_final: Option<LayerNormParams>,
    /// `[d_model, vocab_size]`
    pub w_u: Tensor,
}

impl Parameters {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let block = || BlockParams {
            w_q: vec![Tensor::zeros(vec![c.d_model, c.d_head]); c.n_heads],
            w_k: vec![Tensor::zeros(vec![c.d_model, c.d_head]); c.n_heads],
            w_v: vec![Tensor::zeros(vec![c.d_model, c.d_head]); c.n_heads],
            w_o: vec![Tensor::zeros(vec![c.d_head, c.d_model]); c.n_heads],
            w_in: Tensor::zeros(vec![c.d_model, c.d_mlp]),
            b_in: vec![0.0; c.d_mlp],
            w_out: Tensor::zeros(vec![c.d_mlp, c.d_model]),
            b_out: vec![0.0; c.d_model],
            ln1: c
                .use_block_layernorm
                .then(|| LayerNormParams::identity(c.d_model)),
            ln2: c
                .use_block_layernorm
                .then(|| LayerNormParams::identity(c.d_model)),
        };
        Self {
            w_e: Tensor::zeros(vec![c.vocab_size, c.d_model]),
            w_pos: Tensor::zeros(vec![c.max_seq, c.d_model]),
            blocks: (0..c.n_layers).map(|_| block()).collect(),
            ln_final: c
                .use_final_layernorm
                .then(|| LayerNormParams::identity(c.d_model)),
            w_u: Tensor::zeros(vec![c.d_model, c.vocab_size]),
        }
    }

    fn check(&self, c: &ModelConfig) -> Result<()> {
        fn expect(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Input(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        }
        fn expect_len(name: &str, v: &[f64], len: usize) -> Result<()> {
            if v.len() != len {
                return Err(Error::Input(format!(
                    "parameter {name} has length {}, expected {len}",
                    v.len()
                )));
            }
            Ok(())
        }
        fn expect_ln(name: &str, ln: &Option<LayerNormParams>, on: bool, d: usize) -> Result<()> {
            match (ln, on) {
                (Some(p), true) => {
                    expect_len(&format!("{name}.w"), &p.gamma, d)?;
                    expect_len(&format!("{name}.b"), &p.beta, d)
                }
                (None, false) => Ok(()),
                (None, true) => Err(Error::Input(format!("missing parameter {name}"))),
                (Some(_), false) => Err(Error::Input(format!(
                    "parameter {name} present but layernorm disabled in config"
                ))),
            }
        }

        expect("embed.W_E", &self.w_e, &[c.vocab_size, c.d_model])?;
        expect("pos_embed.W_pos", &self.w_pos, &[c.max_seq, c.d_model])?;
        expect("unembed.W_U", &self.w_u, &[c.d_model, c.vocab_size])?;
        if self.blocks.len() != c.n_layers {
            return Err(Error::Input(format!(
                "{} blocks for n_layers = {}",
                self.blocks.len(),
                c.n_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, ws, shape) in [
                ("W_Q", &b.w_q, [c.d_model, c.d_head]),
                ("W_K", &b.w_k, [c.d_model, c.d_head]),
                ("W_V", &b.w_v, [c.d_model, c.d_head]),
                ("W_O", &b.w_o, [c.d_head, c.d_model]),
            ] {
                if ws.len() != c.n_heads {
                    return Err(Error::Input(format!(
                        "blocks.{l}.attn.{name}: {} heads, expected {}",
                        ws.len(),
                        c.n_heads
                    )));
                }
                for (h, w) in ws.iter().enumerate() {
                    expect(&format!("blocks.{l}.attn.{name}[{h}]"), w, &shape)?;
                }
            }
            expect(&format!("blocks.{l}.mlp.W_in"), &b.w_in, &[c.d_model, c.d_mlp])?;
            expect_len(&format!("blocks.{l}.mlp.b_in"), &b.b_in, c.d_mlp)?;
            expect(&format!("blocks.{l}.mlp.W_out"), &b.w_out, &[c.d_mlp, c.d_model])?;
            expect_len(&format!("blocks.{l}.mlp.b_out"), &b.b_out, c.d_model)?;
            expect_ln(&format!("blocks.{l}.ln1"), &b.ln1, c.use_block_layernorm, c.d_model)?;
            expect_ln(&format!("blocks.{l}.ln2"), &b.ln2, c.use_block_layernorm, c.d_model)?;
        }
        expect_ln("ln_final", &self.ln_final, c.use_final_layernorm, c.d_model)?;

        let all_finite = [&self.w_e, &self.w_pos, &self.w_u]
            .into_iter()
            .all(Tensor::is_finite)
            && self.blocks.iter().all(|b| {
                b.w_q
                    .iter()
                    .chain(&b.w_k)
                    .chain(&b.w_v)
                    .chain(&b.w_o)
                    .chain([&b.w_in, &b.w_out])
                    .all(Tensor::is_finite)
                    && b.b_in.iter().chain(&b.b_out).all(|v| v.is_finite())
            });
        if !all_finite {
            return Err(Error::Input("parameters contain NaN or infinity".into()));
        }
        Ok(())
    }
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyTransformer {
    config: ModelConfig,
    params: Parameters,
    vocab: Option<Vec<String>>,
}

impl TinyTransformer {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self {
            config,
            params,
            vocab: None,
        })
    }

    /// Attaches a cosmetic token-string table.
    pub fn with_vocab(mut self, vocab: Vec<String>) -> Result<Self> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Input(format!(
                "vocab table has {} entries, model has {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        self.vocab = Some(vocab);
        Ok(self)
    }

    /// Gaussian-initialized weights, for tests and experiments on unstructured models.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Input(e.to_string()))?;
        let mut fill = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v = normal.sample(&mut rng);
            }
        };
        let mut p = Parameters::zeros(&config);
        fill(&mut p.w_e);
        fill(&mut p.w_pos);
        fill(&mut p.w_u);
        for b in &mut p.blocks {
            for w in b.w_q.iter_mut().chain(&mut b.w_k).chain(&mut b.w_v).chain(&mut b.w_o) {
                fill(w);
            }
            fill(&mut b.w_in);
            fill(&mut b.w_out);
            let mut bias = Tensor::vector(std::mem::take(&mut b.b_in));
            fill(&mut bias);
            b.b_in = bias.into_data();
        }
        Self::new(config, p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn vocab(&self) -> Option<&[String]> {
        self.vocab.as_deref()
    }

    pub fn token_name(&self, token: usize) -> String {
        self.vocab
            .as_ref()
            .and_then(|v| v.get(token).cloned())
            .unwrap_or_else(|| token.to_string())
    }

    /// Every hook site, layer-major, then site order, then head/neuron.
    pub fn list_hooks(&self) -> Vec<HookId> {
        let c = &self.config;
        let mut hooks = vec![HookId::embed(), HookId::pos_embed()];
        for l in 0..c.n_layers {
            hooks.push(HookId::resid_pre(l));
            hooks.extend((0..c.n_heads).map(|h| HookId::attn_head_out(l, h)));
            hooks.extend((0..c.n_heads).map(|h| HookId::attn_pattern(l, h)));
            hooks.extend((0..c.d_mlp).map(|n| HookId::mlp_neuron_act(l, n)));
            hooks.push(HookId::mlp_out(l));
            hooks.push(HookId::resid_post(l));
        }
        hooks.push(HookId::logits());
        hooks
    }

    /// Whether `hook` names a site that exists in this model.
    pub fn has_hook(&self, hook: &HookId) -> bool {
        let c = &self.config;
        hook.is_well_formed()
            && hook.layer.is_none_or(|l| l < c.n_layers)
            && hook.head.is_none_or(|h| h < c.n_heads)
            && hook.neuron.is_none_or(|n| n < c.d_mlp)
    }

    /// Per-position width of the activation stored at `hook`.
    pub fn hook_width(&self, hook: &HookId, seq_len: usize) -> usize {
        use crate::hook::Site;
        match hook.site {
            Site::AttnPattern => seq_len,
            Site::MlpNeuronAct => 1,
            Site::Logits => self.config.vocab_size,
            _ => self.config.d_model,
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `[seq, vocab]` at every position.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_with(tokens, &mut forward::NoHooks)
    }

    /// Logits plus a snapshot of every hook site.
    pub fn run_with_cache(&self, tokens: &[usize]) -> Result<(Tensor, ActivationCache)> {
        let mut collector = forward::CacheCollector::default();
        let logits = self.forward_with(tokens, &mut collector)?;
        Ok((logits, ActivationCache::from_entries(collector.entries, tokens.len())))
    }
}
