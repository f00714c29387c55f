//! JSON weight file: `{config, parameters: {name -> {shape, data}}, vocab?}`.
//!
//! Parameter names follow the usual hooked-transformer layout; per-head
//! attention weights are stacked along a leading `n_heads` axis.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockParams, LayerNormParams, ModelConfig, Parameters, TinyTransformer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct WeightFile {
    config: ModelConfig,
    parameters: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<Vec<String>>,
}

fn stack(ts: &[Tensor]) -> Tensor {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts[0].shape());
    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stacked shapes agree")
}

fn unstack(t: &Tensor, name: &str, n: usize) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != n {
        return Err(Error::Input(format!(
            "parameter {name} has shape {shape:?}, expected [{n}, _, _]"
        )));
    }
    let inner = vec![shape[1], shape[2]];
    let w = shape[1] * shape[2];
    (0..n)
        .map(|h| Tensor::new(inner.clone(), t.data()[h * w..(h + 1) * w].to_vec()))
        .collect()
}

impl TinyTransformer {
    pub fn to_json(&self) -> Result<String> {
        let p = &self.params;
        let mut map = BTreeMap::new();
        map.insert("embed.W_E".to_string(), p.w_e.clone());
        map.insert("pos_embed.W_pos".to_string(), p.w_pos.clone());
        map.insert("unembed.W_U".to_string(), p.w_u.clone());
        let put_ln = |map: &mut BTreeMap<String, Tensor>, name: &str, ln: &Option<LayerNormParams>| {
            if let Some(ln) = ln {
                map.insert(format!("{name}.w"), Tensor::vector(ln.gamma.clone()));
                map.insert(format!("{name}.b"), Tensor::vector(ln.beta.clone()));
            }
        };
        for (l, b) in p.blocks.iter().enumerate() {
            map.insert(format!("blocks.{l}.attn.W_Q"), stack(&b.w_q));
            map.insert(format!("blocks.{l}.attn.W_K"), stack(&b.w_k));
            map.insert(format!("blocks.{l}.attn.W_V"), stack(&b.w_v));
            map.insert(format!("blocks.{l}.attn.W_O"), stack(&b.w_o));
            map.insert(format!("blocks.{l}.mlp.W_in"), b.w_in.clone());
            map.insert(format!("blocks.{l}.mlp.b_in"), Tensor::vector(b.b_in.clone()));
            map.insert(format!("blocks.{l}.mlp.W_out"), b.w_out.clone());
            map.insert(format!("blocks.{l}.mlp.b_out"), Tensor::vector(b.b_out.clone()));
            put_ln(&mut map, &format!("blocks.{l}.ln1"), &b.ln1);
            put_ln(&mut map, &format!("blocks.{l}.ln2"), &b.ln2);
        }
        put_ln(&mut map, "ln_final", &p.ln_final);
        let file = WeightFile {
            config: self.config.clone(),
            parameters: map,
            vocab: self.vocab.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WeightFile = serde_json::from_str(text)?;
        let c = file.config;
        c.validate()?;
        let mut map = file.parameters;
        for (name, t) in &map {
            if t.len() != t.shape().iter().product::<usize>() {
                return Err(Error::Input(format!("parameter {name}: data length does not match shape")));
            }
        }
        let mut take = |name: String| -> Result<Tensor> {
            map.remove(&name)
                .ok_or_else(|| Error::Input(format!("missing parameter {name}")))
        };
        let vec_of = |t: Tensor| t.into_data();

        let w_e = take("embed.W_E".into())?;
        let w_pos = take("pos_embed.W_pos".into())?;
        let w_u = take("unembed.W_U".into())?;
        let mut blocks = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let mut ln = |which: &str| -> Result<Option<LayerNormParams>> {
                if !c.use_block_layernorm {
                    return Ok(None);
                }
                Ok(Some(LayerNormParams {
                    gamma: vec_of(take(format!("blocks.{l}.{which}.w"))?),
                    beta: vec_of(take(format!("blocks.{l}.{which}.b"))?),
                }))
            };
            let ln1 = ln("ln1")?;
            let ln2 = ln("ln2")?;
            let heads = |name: &str, t: Tensor| unstack(&t, name, c.n_heads);
            blocks.push(BlockParams {
                w_q: heads("W_Q", take(format!("blocks.{l}.attn.W_Q"))?)?,
                w_k: heads("W_K", take(format!("blocks.{l}.attn.W_K"))?)?,
                w_v: heads("W_V", take(format!("blocks.{l}.attn.W_V"))?)?,
                w_o: heads("W_O", take(format!("blocks.{l}.attn.W_O"))?)?,
                w_in: take(format!("blocks.{l}.mlp.W_in"))?,
                b_in: vec_of(take(format!("blocks.{l}.mlp.b_in"))?),
                w_out: take(format!("blocks.{l}.mlp.W_out"))?,
                b_out: vec_of(take(format!("blocks.{l}.mlp.b_out"))?),
                ln1,
                ln2,
            });
        }
        let ln_final = if c.use_final_layernorm {
            Some(LayerNormParams {
                gamma: vec_of(take("ln_final.w".into())?),
                beta: vec_of(take("ln_final.b".into())?),
            })
        } else {
            None
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Input(format!("unknown parameter {extra}")));
        }
        let params = Parameters {
            w_e,
            w_pos,
            blocks,
            ln_final,
            w_u,
        };
        let model = TinyTransformer::new(c, params)?;
        match file.vocab {
            Some(v) => model.with_vocab(v),
            None => Ok(model),
        }
    }

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
