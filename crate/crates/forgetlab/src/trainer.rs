//! Optimization loops: initial general-domain training and continual
//! in-domain training under the module-frozen / module-updated strategies.
//!
//! Freezing works by excluding tags from the optimizer's parameter set, not
//! by zeroing gradients: frozen tensors stay byte-identical and accumulate
//! no Adam moments.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpusgen::{encode_batches, Batch, ParallelCorpus};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nanoformer::{resolve_group, Grouping, GroupingOptions, Model, ParamTag};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;
pub const DEFAULT_LR: f64 = 3e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    None,
    FreezeOnly,
    UpdateOnly,
}

/// Which tags are excluded from (or exclusively included in) updates.
#[derive(Debug, Clone)]
pub struct FreezeSpec {
    pub mode: FreezeMode,
    pub tags: BTreeSet<ParamTag>,
}

impl FreezeSpec {
    pub fn none() -> Self {
        FreezeSpec {
            mode: FreezeMode::None,
            tags: BTreeSet::new(),
        }
    }

    pub fn freeze_only(tags: BTreeSet<ParamTag>) -> Self {
        FreezeSpec {
            mode: FreezeMode::FreezeOnly,
            tags,
        }
    }

    pub fn update_only(tags: BTreeSet<ParamTag>) -> Self {
        FreezeSpec {
            mode: FreezeMode::UpdateOnly,
            tags,
        }
    }

    /// Resolve a named group of the given grouping into a freeze spec.
    pub fn from_group(
        model: &Model,
        grouping: Grouping,
        group: &str,
        mode: FreezeMode,
        opts: GroupingOptions,
    ) -> Result<FreezeSpec> {
        if mode == FreezeMode::None {
            return Ok(FreezeSpec::none());
        }
        let tags = resolve_group(model.config(), grouping, group, opts)?;
        Ok(FreezeSpec { mode, tags })
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.mode != FreezeMode::None && self.tags.is_empty() {
            return Err(Error::config("freeze_only/update_only need a non-empty tag set"));
        }
        for tag in &self.tags {
            model.param(tag)?;
        }
        Ok(())
    }

    /// The tags the optimizer is allowed to update.
    pub fn updatable(&self, all: &BTreeSet<ParamTag>) -> BTreeSet<ParamTag> {
        match self.mode {
            FreezeMode::None => all.clone(),
            FreezeMode::FreezeOnly => all.difference(&self.tags).cloned().collect(),
            FreezeMode::UpdateOnly => all.intersection(&self.tags).cloned().collect(),
        }
    }

    pub fn describe(&self) -> String {
        match self.mode {
            FreezeMode::None => "none".to_string(),
            FreezeMode::FreezeOnly => format!("freeze_only({} tags)", self.tags.len()),
            FreezeMode::UpdateOnly => format!("update_only({} tags)", self.tags.len()),
        }
    }
}

/// Adam over an explicit updatable tag set. Moments exist only for
/// updatable tags, so unfreezing later starts from clean state.
pub struct Adam {
    lr: f64,
    step: u64,
    moments: BTreeMap<ParamTag, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, updatable: &BTreeSet<ParamTag>, model: &Model) -> Self {
        let moments = updatable
            .iter()
            .map(|t| {
                let n = model.param(t).expect("updatable tag exists").numel();
                (t.clone(), (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        Adam {
            lr,
            step: 0,
            moments,
        }
    }

    pub fn has_moments_for(&self, tag: &ParamTag) -> bool {
        self.moments.contains_key(tag)
    }

    /// One update from the gradients currently stored on the model.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (tag, (m, v)) in self.moments.iter_mut() {
            let t = model.param_mut(tag)?;
            let Some(grad) = t.grad() else { continue };
            let grad = grad.to_vec();
            let data = t.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOpts {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Evaluate every this many epochs (the final epoch is always evaluated).
    pub eval_each: usize,
    pub seed: u64,
    /// Also record test-set BLEU at evaluation points.
    pub record_test: bool,
    /// Cap on generated tokens during evaluation decoding.
    pub decode_max_len: usize,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            epochs: 10,
            lr: DEFAULT_LR,
            batch_size: 32,
            eval_each: 1,
            seed: 1,
            record_test: false,
            decode_max_len: 24,
        }
    }
}

/// A named evaluation domain; BLEU is reported per domain at eval points.
pub struct EvalDomain<'a> {
    pub label: String,
    pub corpus: &'a ParallelCorpus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Teacher-forced loss on the trained corpus's dev split (eval points only).
    pub dev_loss: Option<f64>,
    /// "{label}_dev" / "{label}_test" -> BLEU at eval points.
    pub bleu: BTreeMap<String, f64>,
    /// Wall-clock seconds for the epoch. Deliberately not serialized:
    /// emitted artifacts must be byte-identical across reruns.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub strategy: String,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with one row per epoch; BLEU columns in first-seen order.
    pub fn to_csv(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        for rec in &self.epochs {
            for k in rec.bleu.keys() {
                if !cols.contains(k) {
                    cols.push(k.clone());
                }
            }
        }
        let mut out = String::from("epoch,train_loss,dev_loss");
        for c in &cols {
            let _ = write!(out, ",bleu_{c}");
        }
        out.push('\n');
        for rec in &self.epochs {
            let _ = write!(out, "{},{}", rec.epoch, rec.train_loss);
            match rec.dev_loss {
                Some(l) => {
                    let _ = write!(out, ",{l}");
                }
                None => out.push(','),
            }
            for c in &cols {
                match rec.bleu.get(c) {
                    Some(b) => {
                        let _ = write!(out, ",{b}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Final state plus the best-dev checkpoint of one run.
pub struct TrainOutcome {
    pub log: TrainLog,
    /// Snapshot at the best primary-domain dev BLEU (ties: earliest epoch).
    pub best: Model,
    pub best_epoch: usize,
}

/// Train on `corpus`'s train split; `evals[0]` is the primary domain whose
/// dev BLEU selects the best checkpoint.
pub fn train(
    model: &mut Model,
    corpus: &ParallelCorpus,
    evals: &[EvalDomain],
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    continual_train(model, corpus, evals, &FreezeSpec::none(), opts)
}

/// Continual training under a freeze strategy. Frozen tags end byte-identical
/// to their pre-call values; `update_only(T)` freezes everything outside `T`.
pub fn continual_train(
    model: &mut Model,
    corpus: &ParallelCorpus,
    evals: &[EvalDomain],
    freeze: &FreezeSpec,
    opts: &TrainOpts,
) -> Result<TrainOutcome> {
    if opts.eval_each == 0 || opts.batch_size == 0 {
        return Err(Error::config("eval_each and batch_size must be positive"));
    }
    let cfg = model.config();
    if cfg.src_vocab != corpus.src_vocab_size() || cfg.tgt_vocab != corpus.tgt_vocab_size() {
        return Err(Error::config(format!(
            "model vocab ({}, {}) does not match corpus vocab ({}, {})",
            cfg.src_vocab,
            cfg.tgt_vocab,
            corpus.src_vocab_size(),
            corpus.tgt_vocab_size()
        )));
    }
    freeze.validate(model)?;
    if evals.is_empty() {
        return Err(Error::config("at least one evaluation domain is required"));
    }

    let vocab = (corpus.src_vocab_size(), corpus.tgt_vocab_size());
    let batches: Vec<Batch> = encode_batches(corpus.train(), opts.batch_size, vocab)?;
    let all_tags: BTreeSet<ParamTag> = model.tags().cloned().collect();
    let updatable = freeze.updatable(&all_tags);
    let mut adam = Adam::new(opts.lr, &updatable, model);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_d40f);
    let use_dropout = model.config().dropout > 0.0;

    let mut log = TrainLog {
        strategy: freeze.describe(),
        seed: opts.seed,
        lr: opts.lr,
        batch_size: opts.batch_size,
        epochs: Vec::new(),
    };
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;
        for &bi in &order {
            let batch = &batches[bi];
            model.zero_grads();
            let lg = model.loss_graph(batch, if use_dropout { Some(&mut dropout_rng) } else { None })?;
            let loss = lg.graph.scalar_value(lg.loss);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {bi} (shuffle seed {})",
                    opts.seed
                )));
            }
            let mut graph = lg.graph;
            graph.backward(lg.loss)?;
            model.absorb_grads(&graph, &lg.bound);
            adam.step(model)?;
            nll_sum += loss * batch.tokens as f64;
            token_sum += batch.tokens;
        }
        let train_loss = nll_sum / token_sum.max(1) as f64;

        let at_eval = epoch % opts.eval_each == 0 || epoch == opts.epochs;
        let mut rec = EpochRecord {
            epoch,
            train_loss,
            dev_loss: None,
            bleu: BTreeMap::new(),
            wall_secs: 0.0,
        };
        if at_eval {
            rec.dev_loss = Some(model.mean_loss_eval(corpus.dev())?);
            for ev in evals {
                let dev = metrics::bleu_on_pairs(model, ev.corpus.dev(), opts.decode_max_len)?;
                rec.bleu.insert(format!("{}_dev", ev.label), dev.bleu);
                if opts.record_test {
                    let test = metrics::bleu_on_pairs(model, ev.corpus.test(), opts.decode_max_len)?;
                    rec.bleu.insert(format!("{}_test", ev.label), test.bleu);
                }
            }
            let primary = rec.bleu[&format!("{}_dev", evals[0].label)];
            if best.as_ref().map(|(b, _, _)| primary > *b).unwrap_or(true) {
                best = Some((primary, epoch, model.clone()));
            }
        }
        rec.wall_secs = started.elapsed().as_secs_f64();
        log.epochs.push(rec);
    }

    let (_, best_epoch, best_model) = best.unwrap_or_else(|| (f64::NEG_INFINITY, 0, model.clone()));
    Ok(TrainOutcome {
        log,
        best: best_model,
        best_epoch,
    })
}

/// One cell of the strategy sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub group: String,
    pub strategy: String,
    /// Test BLEU of the final-epoch model.
    pub final_g_bleu: f64,
    pub final_i_bleu: f64,
    /// Test BLEU at the best-I-dev checkpoint.
    pub best_g_bleu: f64,
    pub best_i_bleu: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    /// Test BLEU of the shared pre-continual checkpoint (the solid line).
    pub pre_g_bleu: f64,
    pub pre_i_bleu: f64,
    pub grouping: String,
    pub cells: Vec<SweepCell>,
}

/// For every group of the grouping and both strategies, continually train a
/// copy of `checkpoint` on domain I with identical seeds, plus one vanilla
/// (mode = none) baseline row. Cells run in parallel.
pub fn run_strategy_sweep(
    checkpoint: &Model,
    general: &ParallelCorpus,
    indomain: &ParallelCorpus,
    grouping: Grouping,
    opts: &TrainOpts,
    grouping_opts: GroupingOptions,
) -> Result<SweepTable> {
    let groups = crate::nanoformer::enumerate_groups(checkpoint.config(), grouping, grouping_opts);
    let mut plan: Vec<(String, String, FreezeSpec)> =
        vec![("(vanilla)".into(), "none".into(), FreezeSpec::none())];
    for (name, tags) in &groups {
        plan.push((
            name.clone(),
            "freeze_only".into(),
            FreezeSpec::freeze_only(tags.clone()),
        ));
        plan.push((
            name.clone(),
            "update_only".into(),
            FreezeSpec::update_only(tags.clone()),
        ));
    }

    let pre_g = metrics::bleu_on_pairs(checkpoint, general.test(), opts.decode_max_len)?;
    let pre_i = metrics::bleu_on_pairs(checkpoint, indomain.test(), opts.decode_max_len)?;

    let cells: Result<Vec<SweepCell>> = plan
        .par_iter()
        .map(|(group, strategy, freeze)| {
            let mut model = checkpoint.clone();
            let evals = [
                EvalDomain {
                    label: "I".into(),
                    corpus: indomain,
                },
                EvalDomain {
                    label: "G".into(),
                    corpus: general,
                },
            ];
            let mut cell_opts = opts.clone();
            cell_opts.record_test = true;
            let outcome = continual_train(&mut model, indomain, &evals, freeze, &cell_opts)?;
            let last = outcome
                .log
                .epochs
                .last()
                .ok_or_else(|| Error::config("sweep needs at least one epoch"))?;
            let at_best = outcome
                .log
                .epochs
                .iter()
                .find(|r| r.epoch == outcome.best_epoch)
                .unwrap_or(last);
            Ok(SweepCell {
                group: group.clone(),
                strategy: strategy.clone(),
                final_g_bleu: last.bleu["G_test"],
                final_i_bleu: last.bleu["I_test"],
                best_g_bleu: at_best.bleu["G_test"],
                best_i_bleu: at_best.bleu["I_test"],
                best_epoch: outcome.best_epoch,
            })
        })
        .collect();

    Ok(SweepTable {
        pre_g_bleu: pre_g.bleu,
        pre_i_bleu: pre_i.bleu,
        grouping: format!("{grouping:?}"),
        cells: cells?,
    })
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "group,strategy,final_g_bleu,final_i_bleu,best_g_bleu,best_i_bleu,best_epoch,pre_g_bleu,pre_i_bleu\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.group,
                c.strategy,
                c.final_g_bleu,
                c.final_i_bleu,
                c.best_g_bleu,
                c.best_i_bleu,
                c.best_epoch,
                self.pre_g_bleu,
                self.pre_i_bleu
            );
        }
        out
    }
}
