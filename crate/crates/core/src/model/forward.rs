use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{LayerNormParams, TinyTransformer, LN_EPS};
use crate::error::Result;
use crate::hook::HookId;
use crate::tensor::{layer_norm, matmul, relu, softmax, Tensor};

/// Callbacks invoked by the forward pass at every hook site.
///
/// `visit` may overwrite the activation in place; everything downstream is
/// computed from the overwritten value. Senders and receivers support path
/// patching: a sender reports its additive contribution to the residual
/// stream, a receiver may get an extra delta added to its input.
pub(crate) trait Interventions {
    fn wants(&self, hook: &HookId) -> bool;

    fn visit(&mut self, hook: &HookId, act: &mut Tensor) -> Result<()>;

    fn wants_sender(&self, _hook: &HookId) -> bool {
        false
    }

    fn sender_output(&mut self, _hook: &HookId, _out: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Extra `[seq, d_model]` input for the component named by `receiver`
    /// (`attn_head_out.*` for a head, `mlp_out.*` for a whole MLP,
    /// `mlp_neuron_act.*` for one neuron, `logits` for the unembedding).
    fn receiver_delta(&mut self, _receiver: &HookId) -> Option<Tensor> {
        None
    }
}

pub(crate) struct NoHooks;

impl Interventions for NoHooks {
    fn wants(&self, _hook: &HookId) -> bool {
        false
    }

    fn visit(&mut self, _hook: &HookId, _act: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct CacheCollector {
    pub entries: BTreeMap<HookId, Tensor>,
}

impl Interventions for CacheCollector {
    fn wants(&self, _hook: &HookId) -> bool {
        true
    }

    fn visit(&mut self, hook: &HookId, act: &mut Tensor) -> Result<()> {
        self.entries.insert(*hook, act.clone());
        Ok(())
    }
}

fn visit(iv: &mut dyn Interventions, hook: HookId, act: &mut Tensor) -> Result<()> {
    if iv.wants(&hook) {
        iv.visit(&hook, act)?;
    }
    Ok(())
}

fn send(iv: &mut dyn Interventions, hook: HookId, out: &Tensor) -> Result<()> {
    if iv.wants_sender(&hook) {
        iv.sender_output(&hook, out)?;
    }
    Ok(())
}

fn ln_rows(x: &Tensor, ln: &LayerNormParams) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        out.extend(layer_norm(x.row(i), &ln.gamma, &ln.beta, LN_EPS)?);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn with_delta<'a>(base: &'a Tensor, delta: Option<Tensor>) -> Result<Cow<'a, Tensor>> {
    Ok(match delta {
        Some(d) => Cow::Owned(base.add(&d)?),
        None => Cow::Borrowed(base),
    })
}

fn maybe_ln<'a>(x: Cow<'a, Tensor>, ln: Option<&LayerNormParams>) -> Result<Cow<'a, Tensor>> {
    Ok(match ln {
        Some(p) => Cow::Owned(ln_rows(&x, p)?),
        None => x,
    })
}

impl TinyTransformer {
    pub(crate) fn forward_with(&self, tokens: &[usize], iv: &mut dyn Interventions) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let p = &self.params;
        let seq = tokens.len();

        let mut embed = Tensor::zeros(vec![seq, c.d_model]);
        for (i, &t) in tokens.iter().enumerate() {
            embed.row_mut(i).copy_from_slice(p.w_e.row(t));
        }
        visit(iv, HookId::embed(), &mut embed)?;
        send(iv, HookId::embed(), &embed)?;

        let mut pos = Tensor::zeros(vec![seq, c.d_model]);
        for i in 0..seq {
            pos.row_mut(i).copy_from_slice(p.w_pos.row(i));
        }
        visit(iv, HookId::pos_embed(), &mut pos)?;
        send(iv, HookId::pos_embed(), &pos)?;

        let mut resid = embed.add(&pos)?;
        let scale = 1.0 / (c.d_head as f64).sqrt();

        for (l, block) in p.blocks.iter().enumerate() {
            visit(iv, HookId::resid_pre(l), &mut resid)?;

            let mut attn_sum = Tensor::zeros(vec![seq, c.d_model]);
            for h in 0..c.n_heads {
                let head_id = HookId::attn_head_out(l, h);
                let input = with_delta(&resid, iv.receiver_delta(&head_id))?;
                let x = maybe_ln(input, block.ln1.as_ref())?;
                let q = matmul(&x, &block.w_q[h])?;
                let k = matmul(&x, &block.w_k[h])?;
                let v = matmul(&x, &block.w_v[h])?;

                let mut pattern = Tensor::zeros(vec![seq, seq]);
                for i in 0..seq {
                    // causal: position i sees 0..=i only
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    let probs = softmax(&scores)?;
                    pattern.row_mut(i)[..=i].copy_from_slice(&probs);
                }
                visit(iv, HookId::attn_pattern(l, h), &mut pattern)?;

                let z = matmul(&pattern, &v)?;
                let mut out = matmul(&z, &block.w_o[h])?;
                visit(iv, head_id, &mut out)?;
                send(iv, head_id, &out)?;
                attn_sum.add_assign(&out)?;
            }
            let resid_mid = resid.add(&attn_sum)?;

            let mlp_id = HookId::mlp_out(l);
            let mlp_in = with_delta(&resid_mid, iv.receiver_delta(&mlp_id))?;
            let x2 = maybe_ln(mlp_in.clone(), block.ln2.as_ref())?;
            let mut pre = matmul(&x2, &block.w_in)?;
            for i in 0..seq {
                for (v, b) in pre.row_mut(i).iter_mut().zip(&block.b_in) {
                    *v += b;
                }
            }
            for n in 0..c.d_mlp {
                let neuron_id = HookId::mlp_neuron_act(l, n);
                if let Some(delta) = iv.receiver_delta(&neuron_id) {
                    let xn = maybe_ln(Cow::Owned(mlp_in.add(&delta)?), block.ln2.as_ref())?;
                    for i in 0..seq {
                        let dot: f64 = xn
                            .row(i)
                            .iter()
                            .enumerate()
                            .map(|(j, x)| x * block.w_in.get2(j, n))
                            .sum();
                        pre.set2(i, n, dot + block.b_in[n]);
                    }
                }
            }
            let mut act = relu(&pre);

            for n in 0..c.d_mlp {
                let neuron_id = HookId::mlp_neuron_act(l, n);
                if iv.wants(&neuron_id) {
                    let mut col =
                        Tensor::new(vec![seq, 1], (0..seq).map(|i| act.get2(i, n)).collect())?;
                    iv.visit(&neuron_id, &mut col)?;
                    for i in 0..seq {
                        act.set2(i, n, col.data()[i]);
                    }
                }
                if iv.wants_sender(&neuron_id) {
                    let w_row = block.w_out.row(n);
                    let mut contrib = Tensor::zeros(vec![seq, c.d_model]);
                    for i in 0..seq {
                        let a = act.get2(i, n);
                        for (o, w) in contrib.row_mut(i).iter_mut().zip(w_row) {
                            *o = a * w;
                        }
                    }
                    iv.sender_output(&neuron_id, &contrib)?;
                }
            }

            let mut mlp_out = matmul(&act, &block.w_out)?;
            for i in 0..seq {
                for (v, b) in mlp_out.row_mut(i).iter_mut().zip(&block.b_out) {
                    *v += b;
                }
            }
            visit(iv, mlp_id, &mut mlp_out)?;
            send(iv, mlp_id, &mlp_out)?;

            resid = resid_mid.add(&mlp_out)?;
            visit(iv, HookId::resid_post(l), &mut resid)?;
        }

        let final_in = with_delta(&resid, iv.receiver_delta(&HookId::logits()))?;
        let x = maybe_ln(final_in, p.ln_final.as_ref())?;
        let mut logits = matmul(&x, &p.w_u)?;
        visit(iv, HookId::logits(), &mut logits)?;
        Ok(logits)
    }
}
