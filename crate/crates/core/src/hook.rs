//! Names of instrumentation sites in the forward pass.
//!
//! Canonical string form: `site[.L<layer>][.H<head>|.N<neuron>]`, for example
//! `resid_pre.L3`, `attn_head_out.L0.H0`, `mlp_neuron_act.L1.N42`, `logits`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Embed,
    PosEmbed,
    ResidPre,
    AttnHeadOut,
    AttnPattern,
    MlpNeuronAct,
    MlpOut,
    ResidPost,
    Logits,
}

impl Site {
    pub const ALL: [Site; 9] = [
        Site::Embed,
        Site::PosEmbed,
        Site::ResidPre,
        Site::AttnHeadOut,
        Site::AttnPattern,
        Site::MlpNeuronAct,
        Site::MlpOut,
        Site::ResidPost,
        Site::Logits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::Embed => "embed",
            Site::PosEmbed => "pos_embed",
            Site::ResidPre => "resid_pre",
            Site::AttnHeadOut => "attn_head_out",
            Site::AttnPattern => "attn_pattern",
            Site::MlpNeuronAct => "mlp_neuron_act",
            Site::MlpOut => "mlp_out",
            Site::ResidPost => "resid_post",
            Site::Logits => "logits",
        }
    }

    fn has_layer(self) -> bool {
        !matches!(self, Site::Embed | Site::PosEmbed | Site::Logits)
    }

    fn has_head(self) -> bool {
        matches!(self, Site::AttnHeadOut | Site::AttnPattern)
    }

    /// Vector-valued sites whose per-position slices may be overwritten.
    pub fn is_patchable(self) -> bool {
        self != Site::AttnPattern
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HookId {
    pub site: Site,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub neuron: Option<usize>,
}

impl HookId {
    fn bare(site: Site) -> Self {
        Self {
            site,
            layer: None,
            head: None,
            neuron: None,
        }
    }

    fn layered(site: Site, layer: usize) -> Self {
        Self {
            layer: Some(layer),
            ..Self::bare(site)
        }
    }

    pub fn embed() -> Self {
        Self::bare(Site::Embed)
    }

    pub fn pos_embed() -> Self {
        Self::bare(Site::PosEmbed)
    }

    pub fn logits() -> Self {
        Self::bare(Site::Logits)
    }

    pub fn resid_pre(layer: usize) -> Self {
        Self::layered(Site::ResidPre, layer)
    }

    pub fn resid_post(layer: usize) -> Self {
        Self::layered(Site::ResidPost, layer)
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self::layered(Site::MlpOut, layer)
    }

    pub fn attn_head_out(layer: usize, head: usize) -> Self {
        Self {
            head: Some(head),
            ..Self::layered(Site::AttnHeadOut, layer)
        }
    }

    pub fn attn_pattern(layer: usize, head: usize) -> Self {
        Self {
            head: Some(head),
            ..Self::layered(Site::AttnPattern, layer)
        }
    }

    pub fn mlp_neuron_act(layer: usize, neuron: usize) -> Self {
        Self {
            neuron: Some(neuron),
            ..Self::layered(Site::MlpNeuronAct, layer)
        }
    }

    /// Checks the field-presence rules for the site.
    pub fn is_well_formed(&self) -> bool {
        self.layer.is_some() == self.site.has_layer()
            && self.head.is_some() == self.site.has_head()
            && self.neuron.is_some() == (self.site == Site::MlpNeuronAct)
    }
}

impl fmt::Display for HookId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.site.name())?;
        if let Some(l) = self.layer {
            write!(f, ".L{l}")?;
        }
        if let Some(h) = self.head {
            write!(f, ".H{h}")?;
        }
        if let Some(n) = self.neuron {
            write!(f, ".N{n}")?;
        }
        Ok(())
    }
}

impl FromStr for HookId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fail = |token: &str| Error::HookParse {
            input: s.to_string(),
            token: token.to_string(),
        };
        let mut parts = s.split('.');
        let site_tok = parts.next().unwrap_or_default();
        let site = Site::ALL
            .into_iter()
            .find(|site| site.name() == site_tok)
            .ok_or_else(|| fail(site_tok))?;

        let mut id = HookId::bare(site);
        let index = |tok: &str, prefix: char| -> Option<usize> {
            let digits = tok.strip_prefix(prefix)?;
            // reject "+1", "01" and friends so that format(parse(s)) == s
            if digits.is_empty()
                || !digits.bytes().all(|b| b.is_ascii_digit())
                || (digits.len() > 1 && digits.starts_with('0'))
            {
                return None;
            }
            digits.parse().ok()
        };

        if site.has_layer() {
            let tok = parts.next().ok_or_else(|| fail("<missing layer>"))?;
            id.layer = Some(index(tok, 'L').ok_or_else(|| fail(tok))?);
        }
        if site.has_head() {
            let tok = parts.next().ok_or_else(|| fail("<missing head>"))?;
            id.head = Some(index(tok, 'H').ok_or_else(|| fail(tok))?);
        }
        if site == Site::MlpNeuronAct {
            let tok = parts.next().ok_or_else(|| fail("<missing neuron>"))?;
            id.neuron = Some(index(tok, 'N').ok_or_else(|| fail(tok))?);
        }
        if let Some(extra) = parts.next() {
            return Err(fail(extra));
        }
        Ok(id)
    }
}

impl Serialize for HookId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HookId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn formats_named_components() {
        assert_eq!(HookId::attn_head_out(0, 0).to_string(), "attn_head_out.L0.H0");
        assert_eq!(HookId::mlp_neuron_act(1, 42).to_string(), "mlp_neuron_act.L1.N42");
        assert_eq!(HookId::logits().to_string(), "logits");
    }

    #[test]
    fn parses_resid_pre() {
        let h: HookId = "resid_pre.L3".parse().unwrap();
        assert_eq!(h, HookId::resid_pre(3));
    }

    #[test]
    fn parse_errors_name_offending_token() {
        for (input, token) in [
            ("resid_pre", "<missing layer>"),
            ("resid_pre.X3", "X3"),
            ("attn_head_out.L0.N1", "N1"),
            ("logits.L0", "L0"),
            ("mlp_neuron_act.L1.N042", "N042"),
            ("bogus.L1", "bogus"),
        ] {
            match input.parse::<HookId>() {
                Err(Error::HookParse { token: t, .. }) => assert_eq!(t, token, "{input}"),
                other => panic!("{input}: {other:?}"),
            }
        }
    }

    fn arb_hook() -> impl Strategy<Value = HookId> {
        (0usize..9, 0usize..64, 0usize..64, 0usize..4096).prop_map(|(s, l, h, n)| {
            let site = Site::ALL[s];
            let mut id = HookId::bare(site);
            if site.has_layer() {
                id.layer = Some(l);
            }
            if site.has_head() {
                id.head = Some(h);
            }
            if site == Site::MlpNeuronAct {
                id.neuron = Some(n);
            }
            id
        })
    }

    proptest! {
        #[test]
        fn codec_round_trips(h in arb_hook()) {
            prop_assert!(h.is_well_formed());
            let s = h.to_string();
            prop_assert_eq!(s.parse::<HookId>().unwrap(), h);
        }
    }
}
