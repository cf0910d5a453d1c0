//! Forward passes: a tape-building path for training and a kernel-direct
//! path for inference. Both call the same kernels in the same order, so a
//! single sentence produces bit-identical logits either way.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpusgen::{Batch, BOS, PAD};
use crate::error::{Error, Result};
use crate::ndgrad::{kernels, AttnMask, Graph, NodeId, Tensor};

use super::tags::{ParamTag, Side, Sublayer};
use super::{Model, ModelConfig};

/// Graph leaves for every model parameter.
pub struct Bound {
    pub nodes: BTreeMap<ParamTag, NodeId>,
}

impl Bound {
    fn get(&self, side: Side, layer: Option<usize>, sub: Sublayer, role: &str) -> NodeId {
        let tag = ParamTag::new(side, layer, sub, role);
        *self.nodes.get(&tag).expect("parameter tag exists")
    }
}

/// A built loss graph plus the handles needed to read values and gradients.
pub struct LossGraph {
    pub graph: Graph,
    pub bound: Bound,
    pub logits: NodeId,
    pub loss: NodeId,
}

fn position_ids(batch: usize, width: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(batch * width);
    for _ in 0..batch {
        for p in 0..width {
            ids.push(p as u32);
        }
    }
    ids
}

fn check_len(cfg: &ModelConfig, width: usize, what: &str) -> Result<()> {
    if width > cfg.max_len {
        return Err(Error::contract(format!(
            "{what} length {width} exceeds max_len {}",
            cfg.max_len
        )));
    }
    Ok(())
}

struct GraphCtx<'m, 'r> {
    cfg: &'m ModelConfig,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl GraphCtx<'_, '_> {
    /// Inverted dropout when training with a positive rate; identity otherwise.
    fn dropout(&mut self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let p = self.cfg.dropout;
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 - p;
                let mask: Vec<f64> = (0..g.value(x).len())
                    .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn linear(&self, g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = g.matmul(x, w)?;
        g.add_row_bias(xw, b)
    }

    fn attn_block(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        layer: usize,
        sub: Sublayer,
        x_q: NodeId,
        x_kv: NodeId,
        batch: usize,
        q_len: usize,
        k_len: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let p = |role: &str| bound.get(side, Some(layer), sub, role);
        let q = self.linear(g, x_q, p("q_w"), p("q_b"))?;
        let k = self.linear(g, x_kv, p("k_w"), p("k_b"))?;
        let v = self.linear(g, x_kv, p("v_w"), p("v_b"))?;
        let att = g.attention(q, k, v, batch, q_len, k_len, self.cfg.num_heads, mask)?;
        self.linear(g, att, p("out_w"), p("out_b"))
    }

    fn ffn_block(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        layer: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = |role: &str| bound.get(side, Some(layer), Sublayer::Ffn, role);
        let h = self.linear(g, x, p("w1"), p("b1"))?;
        let h = g.relu(h);
        self.linear(g, h, p("w2"), p("b2"))
    }

    fn norm(
        &self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        layer: usize,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = bound.get(side, Some(layer), Sublayer::LayerNorm, &format!("{prefix}_g"));
        let bias = bound.get(side, Some(layer), Sublayer::LayerNorm, &format!("{prefix}_b"));
        g.layer_norm(x, gain, bias)
    }

    /// One residual sublayer in either norm arrangement.
    #[allow(clippy::too_many_arguments)]
    fn residual<F>(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        layer: usize,
        ln_prefix: &str,
        x: NodeId,
        body: F,
    ) -> Result<NodeId>
    where
        F: FnOnce(&mut Self, &mut Graph, NodeId) -> Result<NodeId>,
    {
        if self.cfg.post_norm {
            let out = body(self, g, x)?;
            let out = self.dropout(g, out)?;
            let sum = g.add(x, out)?;
            self.norm(g, bound, side, layer, ln_prefix, sum)
        } else {
            let h = self.norm(g, bound, side, layer, ln_prefix, x)?;
            let out = body(self, g, h)?;
            let out = self.dropout(g, out)?;
            g.add(x, out)
        }
    }

    fn embed(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        side: Side,
        ids: &[u32],
        batch: usize,
        width: usize,
    ) -> Result<NodeId> {
        let word = g.embed(bound.get(side, None, Sublayer::Emb, "word"), ids)?;
        let pos = g.embed(
            bound.get(side, None, Sublayer::Emb, "pos"),
            &position_ids(batch, width),
        )?;
        let sum = g.add(word, pos)?;
        self.dropout(g, sum)
    }

    fn encode(&mut self, g: &mut Graph, bound: &Bound, batch: &Batch) -> Result<NodeId> {
        let mut x = self.embed(g, bound, Side::Encoder, &batch.src, batch.size, batch.src_width)?;
        let pad = AttnMask::KeyPadding(batch.src_len.clone());
        for layer in 0..self.cfg.num_layers {
            let (b, w) = (batch.size, batch.src_width);
            let m = pad.clone();
            x = self.residual(g, bound, Side::Encoder, layer, "sa", x, |me, g, h| {
                me.attn_block(g, bound, Side::Encoder, layer, Sublayer::SelfAttn, h, h, b, w, w, m)
            })?;
            x = self.residual(g, bound, Side::Encoder, layer, "ffn", x, |me, g, h| {
                me.ffn_block(g, bound, Side::Encoder, layer, h)
            })?;
        }
        if !self.cfg.post_norm {
            x = self.norm(g, bound, Side::Encoder, self.cfg.num_layers - 1, "final", x)?;
        }
        Ok(x)
    }

    fn decode(
        &mut self,
        g: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        enc: NodeId,
    ) -> Result<NodeId> {
        let mut x = self.embed(g, bound, Side::Decoder, &batch.dec_in, batch.size, batch.tgt_width)?;
        let pad = AttnMask::KeyPadding(batch.src_len.clone());
        for layer in 0..self.cfg.num_layers {
            let (b, lt, ls) = (batch.size, batch.tgt_width, batch.src_width);
            x = self.residual(g, bound, Side::Decoder, layer, "sa", x, |me, g, h| {
                me.attn_block(
                    g,
                    bound,
                    Side::Decoder,
                    layer,
                    Sublayer::SelfAttn,
                    h,
                    h,
                    b,
                    lt,
                    lt,
                    AttnMask::Causal,
                )
            })?;
            let m = pad.clone();
            x = self.residual(g, bound, Side::Decoder, layer, "ca", x, |me, g, h| {
                me.attn_block(g, bound, Side::Decoder, layer, Sublayer::CrossAttn, h, enc, b, lt, ls, m)
            })?;
            x = self.residual(g, bound, Side::Decoder, layer, "ffn", x, |me, g, h| {
                me.ffn_block(g, bound, Side::Decoder, layer, h)
            })?;
        }
        if !self.cfg.post_norm {
            x = self.norm(g, bound, Side::Decoder, self.cfg.num_layers - 1, "final", x)?;
        }
        Ok(x)
    }
}

impl Model {
    /// Teacher-forced logits for a batch, as a graph ready for backward.
    /// Passing an RNG enables dropout when the config rate is positive.
    pub fn logits_graph(
        &self,
        batch: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Graph, Bound, NodeId)> {
        let cfg = self.config();
        check_len(cfg, batch.src_width, "source")?;
        check_len(cfg, batch.tgt_width, "target")?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let mut ctx = GraphCtx { cfg, rng };
        let enc = ctx.encode(&mut g, &bound, batch)?;
        let dec = ctx.decode(&mut g, &bound, batch, enc)?;
        let w = bound.get(Side::Decoder, None, Sublayer::Out, "w");
        let b = bound.get(Side::Decoder, None, Sublayer::Out, "b");
        let logits = ctx.linear(&mut g, dec, w, b)?;
        Ok((g, bound, logits))
    }

    /// Mean per-token cross-entropy over the batch's non-pad targets.
    pub fn loss_graph(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<LossGraph> {
        let (mut graph, bound, logits) = self.logits_graph(batch, rng)?;
        let loss = graph.cross_entropy(logits, &batch.dec_tgt, PAD)?;
        Ok(LossGraph {
            graph,
            bound,
            logits,
            loss,
        })
    }

    /// Loss value only (no backward), via the graph path.
    pub fn loss_on_batch(&self, batch: &Batch) -> Result<f64> {
        let lg = self.loss_graph(batch, None)?;
        Ok(lg.graph.scalar_value(lg.loss))
    }

    // ------------------------------------------------------------------
    // Kernel-direct inference path (single sentence, no padding, no tape).
    // ------------------------------------------------------------------

    fn eval_embed(&self, side: Side, ids: &[u32]) -> Result<Vec<f64>> {
        let cfg = self.config();
        let word = self.param(&ParamTag::new(side, None, Sublayer::Emb, "word"))?;
        let pos = self.param(&ParamTag::new(side, None, Sublayer::Emb, "pos"))?;
        let d = cfg.d_model;
        let vocab = word.shape()[0];
        let mut x = Vec::with_capacity(ids.len() * d);
        for (p, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Index(format!(
                    "token id {id} out of range for vocab {vocab}"
                )));
            }
            let wrow = &word.data()[id as usize * d..(id as usize + 1) * d];
            let prow = &pos.data()[p * d..(p + 1) * d];
            for (a, b) in wrow.iter().zip(prow) {
                x.push(a + b);
            }
        }
        Ok(x)
    }

    fn eval_linear(&self, x: &[f64], rows: usize, tag_w: &ParamTag, tag_b: &ParamTag) -> Result<Vec<f64>> {
        let w = self.param(tag_w)?;
        let b = self.param(tag_b)?;
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let xw = kernels::matmul(x, w.data(), rows, k, n);
        Ok(kernels::add_row_bias(&xw, b.data(), rows, n))
    }

    fn eval_norm(&self, x: &[f64], rows: usize, side: Side, layer: usize, prefix: &str) -> Result<Vec<f64>> {
        let g = self.param(&ParamTag::new(side, Some(layer), Sublayer::LayerNorm, &format!("{prefix}_g")))?;
        let b = self.param(&ParamTag::new(side, Some(layer), Sublayer::LayerNorm, &format!("{prefix}_b")))?;
        let (y, _) = kernels::layer_norm(x, g.data(), b.data(), rows, self.config().d_model);
        Ok(y)
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_attn(
        &self,
        side: Side,
        layer: usize,
        sub: Sublayer,
        x_q: &[f64],
        x_kv: &[f64],
        q_len: usize,
        k_len: usize,
        mask: &AttnMask,
    ) -> Result<Vec<f64>> {
        let cfg = self.config();
        let p = |role: &str| ParamTag::new(side, Some(layer), sub, role);
        let q = self.eval_linear(x_q, q_len, &p("q_w"), &p("q_b"))?;
        let k = self.eval_linear(x_kv, k_len, &p("k_w"), &p("k_b"))?;
        let v = self.eval_linear(x_kv, k_len, &p("v_w"), &p("v_b"))?;
        let (att, _) =
            kernels::attention_forward(&q, &k, &v, 1, q_len, k_len, cfg.d_model, cfg.num_heads, mask);
        self.eval_linear(&att, q_len, &p("out_w"), &p("out_b"))
    }

    fn eval_ffn(&self, side: Side, layer: usize, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let p = |role: &str| ParamTag::new(side, Some(layer), Sublayer::Ffn, role);
        let h = self.eval_linear(x, rows, &p("w1"), &p("b1"))?;
        let h = kernels::relu(&h);
        self.eval_linear(&h, rows, &p("w2"), &p("b2"))
    }

    fn eval_residual<F>(
        &self,
        side: Side,
        layer: usize,
        prefix: &str,
        x: Vec<f64>,
        rows: usize,
        body: F,
    ) -> Result<Vec<f64>>
    where
        F: FnOnce(&[f64]) -> Result<Vec<f64>>,
    {
        if self.config().post_norm {
            let out = body(&x)?;
            let sum: Vec<f64> = x.iter().zip(&out).map(|(&a, &b)| a + b).collect();
            self.eval_norm(&sum, rows, side, layer, prefix)
        } else {
            let h = self.eval_norm(&x, rows, side, layer, prefix)?;
            let out = body(&h)?;
            Ok(x.iter().zip(&out).map(|(&a, &b)| a + b).collect())
        }
    }

    /// Source hidden states H for one encoded sentence, [len × d_model].
    pub fn encode_eval(&self, src: &[u32]) -> Result<Vec<f64>> {
        let cfg = self.config();
        if src.is_empty() {
            return Err(Error::contract("cannot encode an empty source"));
        }
        check_len(cfg, src.len(), "source")?;
        let rows = src.len();
        let mut x = self.eval_embed(Side::Encoder, src)?;
        for layer in 0..cfg.num_layers {
            x = self.eval_residual(Side::Encoder, layer, "sa", x, rows, |h| {
                self.eval_attn(
                    Side::Encoder,
                    layer,
                    Sublayer::SelfAttn,
                    h,
                    h,
                    rows,
                    rows,
                    &AttnMask::KeyPadding(vec![rows]),
                )
            })?;
            x = self.eval_residual(Side::Encoder, layer, "ffn", x, rows, |h| {
                self.eval_ffn(Side::Encoder, layer, h, rows)
            })?;
        }
        if !cfg.post_norm {
            x = self.eval_norm(&x, rows, Side::Encoder, cfg.num_layers - 1, "final")?;
        }
        Ok(x)
    }

    /// Logits and final decoder states for a decoder input sequence, given
    /// precomputed encoder states.
    pub fn decode_eval(
        &self,
        enc: &[f64],
        src_len: usize,
        dec_in: &[u32],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = self.config();
        if dec_in.is_empty() {
            return Err(Error::contract("decoder input must be non-empty"));
        }
        check_len(cfg, dec_in.len(), "target")?;
        let rows = dec_in.len();
        let mut x = self.eval_embed(Side::Decoder, dec_in)?;
        for layer in 0..cfg.num_layers {
            x = self.eval_residual(Side::Decoder, layer, "sa", x, rows, |h| {
                self.eval_attn(
                    Side::Decoder,
                    layer,
                    Sublayer::SelfAttn,
                    h,
                    h,
                    rows,
                    rows,
                    &AttnMask::Causal,
                )
            })?;
            x = self.eval_residual(Side::Decoder, layer, "ca", x, rows, |h| {
                self.eval_attn(
                    Side::Decoder,
                    layer,
                    Sublayer::CrossAttn,
                    h,
                    enc,
                    rows,
                    src_len,
                    &AttnMask::KeyPadding(vec![src_len]),
                )
            })?;
            x = self.eval_residual(Side::Decoder, layer, "ffn", x, rows, |h| {
                self.eval_ffn(Side::Decoder, layer, h, rows)
            })?;
        }
        if !cfg.post_norm {
            x = self.eval_norm(&x, rows, Side::Decoder, cfg.num_layers - 1, "final")?;
        }
        let logits = self.eval_linear(
            &x,
            rows,
            &ParamTag::new(Side::Decoder, None, Sublayer::Out, "w"),
            &ParamTag::new(Side::Decoder, None, Sublayer::Out, "b"),
        )?;
        Ok((logits, x))
    }

    /// Teacher-forced logits for one sentence: row i is the distribution over
    /// the (i+1)-th target token given BOS + tgt_prefix[..i].
    pub fn forward(&self, src: &[u32], tgt_prefix: &[u32]) -> Result<Tensor> {
        let (logits, _) = self.forward_states(src, tgt_prefix)?;
        Ok(logits)
    }

    /// Like [`Model::forward`], also returning the final decoder hidden states.
    pub fn forward_states(&self, src: &[u32], tgt_prefix: &[u32]) -> Result<(Tensor, Tensor)> {
        let enc = self.encode_eval(src)?;
        let mut dec_in = Vec::with_capacity(tgt_prefix.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(tgt_prefix);
        let (logits, states) = self.decode_eval(&enc, src.len(), &dec_in)?;
        let rows = dec_in.len();
        Ok((
            Tensor::new(vec![rows, self.config().tgt_vocab], logits)?,
            Tensor::new(vec![rows, self.config().d_model], states)?,
        ))
    }

    /// Summed negative log-likelihood and token count for one (src, tgt) pair
    /// under teacher forcing; tgt carries neither BOS nor EOS.
    pub fn sentence_nll(&self, src: &[u32], tgt: &[u32]) -> Result<(f64, usize)> {
        let enc = self.encode_eval(src)?;
        let mut dec_in = Vec::with_capacity(tgt.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(tgt);
        let (logits, _) = self.decode_eval(&enc, src.len(), &dec_in)?;
        let mut targets = Vec::with_capacity(tgt.len() + 1);
        targets.extend_from_slice(tgt);
        targets.push(crate::corpusgen::EOS);
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= self.config().tgt_vocab) {
            return Err(Error::Index(format!(
                "target id {bad} out of range for vocab {}",
                self.config().tgt_vocab
            )));
        }
        let (mean, _, count) = kernels::cross_entropy(&logits, &targets, self.config().tgt_vocab, PAD);
        Ok((mean * count as f64, count))
    }

    /// Token-weighted mean teacher-forced loss over (src, tgt) pairs.
    pub fn mean_loss_eval(&self, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::contract("mean_loss_eval needs at least one pair"));
        }
        let mut total = 0.0;
        let mut tokens = 0usize;
        for (src, tgt) in pairs {
            let enc_src = with_eos(src);
            let (nll, count) = self.sentence_nll(&enc_src, tgt)?;
            total += nll;
            tokens += count;
        }
        Ok(total / tokens as f64)
    }
}

/// Source sequence as the encoder sees it: tokens plus EOS.
pub fn with_eos(src: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(src.len() + 1);
    v.extend_from_slice(src);
    v.push(crate::corpusgen::EOS);
    v
}
