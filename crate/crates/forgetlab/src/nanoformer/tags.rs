//! Canonical addresses for every parameter matrix, and the two module
//! groupings used by the freeze/update experiments: by position (layer pairs
//! plus the output layer) and by type (Emb / SA / CA / FFN / Out).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    fn short(self) -> &'static str {
        match self {
            Side::Encoder => "enc",
            Side::Decoder => "dec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sublayer {
    Emb,
    SelfAttn,
    CrossAttn,
    Ffn,
    LayerNorm,
    Out,
}

impl Sublayer {
    fn short(self) -> &'static str {
        match self {
            Sublayer::Emb => "emb",
            Sublayer::SelfAttn => "sa",
            Sublayer::CrossAttn => "ca",
            Sublayer::Ffn => "ffn",
            Sublayer::LayerNorm => "ln",
            Sublayer::Out => "out",
        }
    }
}

/// Canonical address of one parameter tensor.
///
/// `layer` is None for the embedding tables and the output layer. Layer-norm
/// tensors carry their host sublayer in the role prefix (`sa_g`, `ffn_b`,
/// ...); the stack-final norm of the pre-norm variant lives on the last
/// layer with roles `final_g` / `final_b` and is grouped with that layer's
/// FFN block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamTag {
    pub side: Side,
    pub layer: Option<usize>,
    pub sublayer: Sublayer,
    pub role: String,
}

impl ParamTag {
    pub fn new(side: Side, layer: Option<usize>, sublayer: Sublayer, role: &str) -> Self {
        ParamTag {
            side,
            layer,
            sublayer,
            role: role.to_string(),
        }
    }
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(
                f,
                "{}.l{}.{}.{}",
                self.side.short(),
                l,
                self.sublayer.short(),
                self.role
            ),
            None => write!(f, "{}.{}.{}", self.side.short(), self.sublayer.short(), self.role),
        }
    }
}

impl FromStr for ParamTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let bad = || Error::config(format!("malformed parameter tag '{s}'"));
        let side = match parts.first() {
            Some(&"enc") => Side::Encoder,
            Some(&"dec") => Side::Decoder,
            _ => return Err(bad()),
        };
        let sub = |t: &str| -> Result<Sublayer> {
            Ok(match t {
                "emb" => Sublayer::Emb,
                "sa" => Sublayer::SelfAttn,
                "ca" => Sublayer::CrossAttn,
                "ffn" => Sublayer::Ffn,
                "ln" => Sublayer::LayerNorm,
                "out" => Sublayer::Out,
                _ => return Err(bad()),
            })
        };
        match parts.as_slice() {
            [_, s1, role] => Ok(ParamTag::new(side, None, sub(s1)?, role)),
            [_, l, s1, role] if l.starts_with('l') => {
                let layer = l[1..].parse::<usize>().map_err(|_| bad())?;
                Ok(ParamTag::new(side, Some(layer), sub(s1)?, role))
            }
            _ => Err(bad()),
        }
    }
}

const ATTN_ROLES: [&str; 8] = ["q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "out_w", "out_b"];
const FFN_ROLES: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// All trainable tags for a config, in canonical sorted order.
pub fn enumerate_tags(cfg: &ModelConfig) -> Vec<ParamTag> {
    let mut tags = Vec::new();
    for side in [Side::Encoder, Side::Decoder] {
        for role in ["word", "pos"] {
            tags.push(ParamTag::new(side, None, Sublayer::Emb, role));
        }
        for layer in 0..cfg.num_layers {
            for role in ATTN_ROLES {
                tags.push(ParamTag::new(side, Some(layer), Sublayer::SelfAttn, role));
            }
            if side == Side::Decoder {
                for role in ATTN_ROLES {
                    tags.push(ParamTag::new(side, Some(layer), Sublayer::CrossAttn, role));
                }
            }
            for role in FFN_ROLES {
                tags.push(ParamTag::new(side, Some(layer), Sublayer::Ffn, role));
            }
            let mut ln_roles = vec!["sa_g", "sa_b", "ffn_g", "ffn_b"];
            if side == Side::Decoder {
                ln_roles.extend(["ca_g", "ca_b"]);
            }
            if !cfg.post_norm && layer == cfg.num_layers - 1 {
                ln_roles.extend(["final_g", "final_b"]);
            }
            for role in ln_roles {
                tags.push(ParamTag::new(side, Some(layer), Sublayer::LayerNorm, role));
            }
        }
    }
    tags.push(ParamTag::new(Side::Decoder, None, Sublayer::Out, "w"));
    tags.push(ParamTag::new(Side::Decoder, None, Sublayer::Out, "b"));
    tags.sort();
    tags
}

/// Tensor shape for a tag under a config.
pub fn tag_shape(cfg: &ModelConfig, tag: &ParamTag) -> Vec<usize> {
    let d = cfg.d_model;
    match (tag.sublayer, tag.role.as_str()) {
        (Sublayer::Emb, "word") => match tag.side {
            Side::Encoder => vec![cfg.src_vocab, d],
            Side::Decoder => vec![cfg.tgt_vocab, d],
        },
        (Sublayer::Emb, "pos") => vec![cfg.max_len, d],
        (Sublayer::SelfAttn | Sublayer::CrossAttn, r) if r.ends_with("_w") => vec![d, d],
        (Sublayer::SelfAttn | Sublayer::CrossAttn, _) => vec![d],
        (Sublayer::Ffn, "w1") => vec![d, cfg.d_ffn],
        (Sublayer::Ffn, "b1") => vec![cfg.d_ffn],
        (Sublayer::Ffn, "w2") => vec![cfg.d_ffn, d],
        (Sublayer::Ffn, "b2") => vec![d],
        (Sublayer::LayerNorm, _) => vec![d],
        (Sublayer::Out, "w") => vec![d, cfg.tgt_vocab],
        (Sublayer::Out, "b") => vec![cfg.tgt_vocab],
        _ => unreachable!("unknown tag {tag}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Position,
    Type,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupingOptions {
    /// Attach layer-norm parameters to their host sublayer's group. The
    /// alternative (false) leaves them out of every group, for probing
    /// whether norm parameters should ride along with a frozen sublayer.
    pub ln_with_host: bool,
}

impl Default for GroupingOptions {
    fn default() -> Self {
        GroupingOptions { ln_with_host: true }
    }
}

/// Host sublayer for a layer-norm role prefix. The stack-final norm is
/// grouped with the FFN block it follows.
fn ln_host(role: &str) -> Sublayer {
    match role.split('_').next() {
        Some("sa") => Sublayer::SelfAttn,
        Some("ca") => Sublayer::CrossAttn,
        _ => Sublayer::Ffn,
    }
}

/// Named tag groups under one grouping scheme.
///
/// Position mirrors the layer-pair sweep: consecutive layer pairs per side
/// (`Enc_01`, `Enc_23`, ..., with a final singleton group when the layer
/// count is odd) plus `Dec_out`; embeddings are not part of any position
/// group. Type mirrors the sublayer-type sweep and partitions every
/// trainable tag.
pub fn enumerate_groups(
    cfg: &ModelConfig,
    grouping: Grouping,
    opts: GroupingOptions,
) -> Vec<(String, BTreeSet<ParamTag>)> {
    let tags = enumerate_tags(cfg);
    let included = |t: &ParamTag| opts.ln_with_host || t.sublayer != Sublayer::LayerNorm;
    let mut groups: Vec<(String, BTreeSet<ParamTag>)> = Vec::new();
    match grouping {
        Grouping::Position => {
            for side in [Side::Encoder, Side::Decoder] {
                let prefix = match side {
                    Side::Encoder => "Enc",
                    Side::Decoder => "Dec",
                };
                let mut layer = 0;
                while layer < cfg.num_layers {
                    let pair: Vec<usize> = if layer + 1 < cfg.num_layers {
                        vec![layer, layer + 1]
                    } else {
                        vec![layer]
                    };
                    let name = format!(
                        "{prefix}_{}",
                        pair.iter().map(|l| l.to_string()).collect::<String>()
                    );
                    let set: BTreeSet<ParamTag> = tags
                        .iter()
                        .filter(|t| {
                            t.side == side
                                && t.layer.map(|l| pair.contains(&l)).unwrap_or(false)
                                && included(t)
                        })
                        .cloned()
                        .collect();
                    groups.push((name, set));
                    layer += pair.len();
                }
            }
            let out: BTreeSet<ParamTag> = tags
                .iter()
                .filter(|t| t.sublayer == Sublayer::Out)
                .cloned()
                .collect();
            groups.push(("Dec_out".to_string(), out));
        }
        Grouping::Type => {
            let type_of = |t: &ParamTag| -> Sublayer {
                if t.sublayer == Sublayer::LayerNorm {
                    ln_host(&t.role)
                } else {
                    t.sublayer
                }
            };
            let spec: [(&str, Side, Sublayer); 8] = [
                ("Emb(enc)", Side::Encoder, Sublayer::Emb),
                ("Emb(dec)", Side::Decoder, Sublayer::Emb),
                ("SA(enc)", Side::Encoder, Sublayer::SelfAttn),
                ("SA(dec)", Side::Decoder, Sublayer::SelfAttn),
                ("CA", Side::Decoder, Sublayer::CrossAttn),
                ("FFN(enc)", Side::Encoder, Sublayer::Ffn),
                ("FFN(dec)", Side::Decoder, Sublayer::Ffn),
                ("Out", Side::Decoder, Sublayer::Out),
            ];
            for (name, side, sub) in spec {
                let set: BTreeSet<ParamTag> = tags
                    .iter()
                    .filter(|t| t.side == side && type_of(t) == sub && included(t))
                    .cloned()
                    .collect();
                groups.push((name.to_string(), set));
            }
        }
    }
    groups
}

/// Tags for a named group, with a config error listing the valid names when
/// the group does not exist.
pub fn resolve_group(
    cfg: &ModelConfig,
    grouping: Grouping,
    name: &str,
    opts: GroupingOptions,
) -> Result<BTreeSet<ParamTag>> {
    let groups = enumerate_groups(cfg, grouping, opts);
    for (n, set) in &groups {
        if n == name {
            return Ok(set.clone());
        }
    }
    let valid: Vec<&str> = groups.iter().map(|(n, _)| n.as_str()).collect();
    Err(Error::config(format!(
        "unknown group '{name}'; valid groups for this grouping: {}",
        valid.join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> ModelConfig {
        let mut c = ModelConfig::tiny(50, 60);
        c.num_layers = n;
        c
    }

    #[test]
    fn tag_strings_round_trip() {
        for tag in enumerate_tags(&cfg(3)) {
            let s = tag.to_string();
            let back: ParamTag = s.parse().unwrap();
            assert_eq!(back, tag, "{s}");
        }
        assert!("enc.l0.zz.q_w".parse::<ParamTag>().is_err());
        assert!("mid.l0.sa.q_w".parse::<ParamTag>().is_err());
    }

    #[test]
    fn tags_are_unique_and_cross_attention_is_decoder_only() {
        let tags = enumerate_tags(&cfg(2));
        let set: BTreeSet<&ParamTag> = tags.iter().collect();
        assert_eq!(set.len(), tags.len());
        for t in &tags {
            if t.sublayer == Sublayer::CrossAttn {
                assert_eq!(t.side, Side::Decoder);
            }
            if t.sublayer == Sublayer::Out {
                assert_eq!((t.side, t.layer), (Side::Decoder, None));
            }
        }
    }

    #[test]
    fn position_groups_match_figure_axis_for_six_layers() {
        let names: Vec<String> = enumerate_groups(&cfg(6), Grouping::Position, Default::default())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            names,
            vec!["Enc_01", "Enc_23", "Enc_45", "Dec_01", "Dec_23", "Dec_45", "Dec_out"]
        );
    }

    #[test]
    fn position_groups_for_two_layers_and_odd_counts() {
        let names: Vec<String> = enumerate_groups(&cfg(2), Grouping::Position, Default::default())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["Enc_01", "Dec_01", "Dec_out"]);

        let names: Vec<String> = enumerate_groups(&cfg(3), Grouping::Position, Default::default())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(names, vec!["Enc_01", "Enc_2", "Dec_01", "Dec_2", "Dec_out"]);
    }

    #[test]
    fn position_groups_partition_what_they_cover() {
        let c = cfg(4);
        let groups = enumerate_groups(&c, Grouping::Position, Default::default());
        let mut seen = BTreeSet::new();
        for (_, set) in &groups {
            for t in set {
                assert!(seen.insert(t.clone()), "tag {t} in two groups");
            }
        }
        // Everything but the embeddings is covered.
        let all: BTreeSet<ParamTag> = enumerate_tags(&c)
            .into_iter()
            .filter(|t| t.sublayer != Sublayer::Emb)
            .collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn type_groups_partition_all_tags() {
        let c = cfg(2);
        let groups = enumerate_groups(&c, Grouping::Type, Default::default());
        assert_eq!(groups.len(), 8);
        let mut seen = BTreeSet::new();
        for (_, set) in &groups {
            assert!(!set.is_empty());
            for t in set {
                assert!(seen.insert(t.clone()), "tag {t} in two groups");
            }
        }
        let all: BTreeSet<ParamTag> = enumerate_tags(&c).into_iter().collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn dec_out_group_is_exactly_the_output_matrices() {
        let c = cfg(2);
        let groups = enumerate_groups(&c, Grouping::Position, Default::default());
        let (_, out) = groups.iter().find(|(n, _)| n == "Dec_out").unwrap();
        let names: Vec<String> = out.iter().map(|t| t.to_string()).collect();
        assert_eq!(names, vec!["dec.out.b", "dec.out.w"]);
    }

    #[test]
    fn ln_detachment_switch_removes_norms_from_groups() {
        let c = cfg(2);
        let opts = GroupingOptions { ln_with_host: false };
        for grouping in [Grouping::Position, Grouping::Type] {
            for (_, set) in enumerate_groups(&c, grouping, opts) {
                assert!(set.iter().all(|t| t.sublayer != Sublayer::LayerNorm));
            }
        }
    }

    #[test]
    fn resolve_group_lists_valid_names_on_error() {
        let c = cfg(2);
        let err = resolve_group(&c, Grouping::Position, "Enc_99", Default::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Enc_01") && msg.contains("Dec_out"), "{msg}");
        assert!(resolve_group(&c, Grouping::Type, "CA", Default::default()).is_ok());
    }
}
