//! Deterministic generator of two synthetic translation "domains".
//!
//! Each domain is a lexical substitution plus a reordering rule, so the task
//! is learnable to near-perfection and forgetting is unambiguous to measure.
//! The two domains of a pair share a core lexicon and differ on the tail
//! plus the reorder rule; the vocabulary table spans both domains (built once
//! from the general domain), so in-domain tail tokens have ids but never
//! occur in general-domain data.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id available to lexicon tokens.
pub const FIRST_TOKEN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReorderRule {
    Identity,
    Reverse,
    Rotate(usize),
    SwapAdjacent,
}

impl ReorderRule {
    pub fn apply(&self, xs: &[u32]) -> Vec<u32> {
        match self {
            ReorderRule::Identity => xs.to_vec(),
            ReorderRule::Reverse => xs.iter().rev().copied().collect(),
            ReorderRule::Rotate(k) => {
                let n = xs.len();
                if n == 0 {
                    return Vec::new();
                }
                let k = k % n;
                let mut out = Vec::with_capacity(n);
                out.extend_from_slice(&xs[k..]);
                out.extend_from_slice(&xs[..k]);
                out
            }
            ReorderRule::SwapAdjacent => {
                let mut out = xs.to_vec();
                let mut i = 0;
                while i + 1 < out.len() {
                    out.swap(i, i + 1);
                    i += 2;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.dev + self.test
    }
}

/// One synthetic domain: which source lexemes it uses, how they translate,
/// and how the target is reordered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub vocab_core: usize,
    pub vocab_tail: usize,
    /// Source token id -> target token id, over this domain's core + tail.
    pub lexicon: BTreeMap<u32, u32>,
    pub reorder: ReorderRule,
    pub len: LengthRange,
    pub seed: u64,
    /// Size of the shared vocabulary table (per side, excluding reserved ids).
    pub vocab_total: usize,
}

/// A pair of domains sharing `overlap` of their per-domain lexicon of size
/// `vocab_size`. G keeps identity order; I reverses.
pub fn make_domain_pair(
    shared_seed: u64,
    overlap: f64,
    vocab_size: usize,
) -> Result<(DomainSpec, DomainSpec)> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::config(format!(
            "overlap must be in [0, 1], got {overlap}"
        )));
    }
    if vocab_size < 2 {
        return Err(Error::config("domain vocab must hold at least 2 tokens"));
    }
    let core = (overlap * vocab_size as f64).round() as usize;
    let tail = vocab_size - core;
    let total = core + 2 * tail;

    // One target permutation over the whole table keeps the core lexicon
    // identical across domains and the tails disjoint but consistent.
    let mut rng = ChaCha8Rng::seed_from_u64(shared_seed);
    let mut perm: Vec<u32> = (0..total as u32).collect();
    perm.shuffle(&mut rng);

    let lexeme = |i: usize| FIRST_TOKEN + i as u32;
    let entry = |i: usize| (lexeme(i), FIRST_TOKEN + perm[i]);
    let core_entries: BTreeMap<u32, u32> = (0..core).map(entry).collect();
    let mut lex_g = core_entries.clone();
    lex_g.extend((core..core + tail).map(entry));
    let mut lex_i = core_entries;
    lex_i.extend((core + tail..total).map(entry));

    let len = LengthRange { min: 4, max: 12 };
    let g = DomainSpec {
        name: "G".into(),
        vocab_core: core,
        vocab_tail: tail,
        lexicon: lex_g,
        reorder: ReorderRule::Identity,
        len,
        seed: shared_seed.wrapping_add(1),
        vocab_total: total,
    };
    let i = DomainSpec {
        name: "I".into(),
        vocab_core: core,
        vocab_tail: tail,
        lexicon: lex_i,
        reorder: ReorderRule::Reverse,
        len,
        seed: shared_seed.wrapping_add(2),
        vocab_total: total,
    };
    Ok((g, i))
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub name: String,
    /// Encoded (id-space) pairs, laid out train ++ dev ++ test.
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
    pub src_vocab: Vec<String>,
    pub tgt_vocab: Vec<String>,
    pub splits: SplitSizes,
}

impl ParallelCorpus {
    pub fn train(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs[..self.splits.train]
    }

    pub fn dev(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs[self.splits.train..self.splits.train + self.splits.dev]
    }

    pub fn test(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs[self.splits.train + self.splits.dev..]
    }

    pub fn src_vocab_size(&self) -> usize {
        self.src_vocab.len()
    }

    pub fn tgt_vocab_size(&self) -> usize {
        self.tgt_vocab.len()
    }

    /// One line per pair: space-joined source tokens, tab, target tokens.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (src, tgt) in &self.pairs {
            let mut first = true;
            for &id in src {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{}", self.src_vocab[id as usize]);
                first = false;
            }
            out.push('\t');
            first = true;
            for &id in tgt {
                if !first {
                    out.push(' ');
                }
                let _ = write!(out, "{}", self.tgt_vocab[id as usize]);
                first = false;
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn vocab_tables(total: usize) -> (Vec<String>, Vec<String>) {
    let mut src = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string()];
    let mut tgt = src.clone();
    for i in 0..total {
        src.push(format!("x{i:03}"));
        tgt.push(format!("y{i:03}"));
    }
    (src, tgt)
}

/// Deterministic corpus with explicit split sizes. Source sentences are
/// unique across the whole corpus, so the splits are disjoint.
pub fn sample_with_splits(spec: &DomainSpec, splits: SplitSizes, seed: u64) -> Result<ParallelCorpus> {
    let n = splits.total();
    if n < 1 {
        return Err(Error::config("corpus must contain at least one pair"));
    }
    if spec.len.min < 1 || spec.len.min > spec.len.max {
        return Err(Error::config(format!(
            "bad length range {:?}",
            spec.len
        )));
    }
    let source_lexemes: Vec<u32> = spec.lexicon.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while pairs.len() < n {
        attempts += 1;
        if attempts > 50 * n + 1000 {
            return Err(Error::config(format!(
                "cannot draw {n} distinct sentences from domain '{}'",
                spec.name
            )));
        }
        let len = rng.gen_range(spec.len.min..=spec.len.max);
        let src: Vec<u32> = (0..len)
            .map(|_| source_lexemes[rng.gen_range(0..source_lexemes.len())])
            .collect();
        if !seen.insert(src.clone()) {
            continue;
        }
        let mapped: Vec<u32> = src.iter().map(|t| spec.lexicon[t]).collect();
        let tgt = spec.reorder.apply(&mapped);
        pairs.push((src, tgt));
    }
    let (src_vocab, tgt_vocab) = vocab_tables(spec.vocab_total);
    Ok(ParallelCorpus {
        name: spec.name.clone(),
        pairs,
        src_vocab,
        tgt_vocab,
        splits,
    })
}

/// Corpus of `n` pairs with the default split rule:
/// dev = test = min(n/10, 500); train = the rest.
pub fn sample_corpus(spec: &DomainSpec, n: usize, seed: u64) -> Result<ParallelCorpus> {
    if n < 1 {
        return Err(Error::config("corpus must contain at least one pair"));
    }
    let held = (n / 10).min(500);
    let splits = SplitSizes {
        train: n - 2 * held,
        dev: held,
        test: held,
    };
    sample_with_splits(spec, splits, seed)
}

/// One teacher-forcing batch: all rows padded to the batch max lengths.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub src_width: usize,
    pub tgt_width: usize,
    /// [size × src_width]; source tokens + EOS, then PAD.
    pub src: Vec<u32>,
    pub src_len: Vec<usize>,
    /// [size × tgt_width]; BOS + target tokens, then PAD.
    pub dec_in: Vec<u32>,
    /// [size × tgt_width]; target tokens + EOS, then PAD.
    pub dec_tgt: Vec<u32>,
    pub tgt_len: Vec<usize>,
    /// Total non-pad target positions in the batch.
    pub tokens: usize,
}

/// Length-bucketed teacher-forcing batches over encoded pairs.
pub fn encode_batches(
    pairs: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
    vocab_limit: (usize, usize),
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let (src_vocab, tgt_vocab) = vocab_limit;
    for (src, tgt) in pairs {
        if let Some(&bad) = src.iter().find(|&&t| (t as usize) >= src_vocab) {
            return Err(Error::config(format!(
                "source token id {bad} overflows vocab of {src_vocab}"
            )));
        }
        if let Some(&bad) = tgt.iter().find(|&&t| (t as usize) >= tgt_vocab) {
            return Err(Error::config(format!(
                "target token id {bad} overflows vocab of {tgt_vocab}"
            )));
        }
        if src.iter().chain(tgt.iter()).any(|&t| t < FIRST_TOKEN) {
            return Err(Error::config(
                "reserved ids (pad/bos/eos) may not appear inside sentences",
            ));
        }
    }
    // Stable bucketing keeps padding waste small without disturbing determinism.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].1.len(), pairs[i].0.len(), i));

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let size = chunk.len();
        let src_width = chunk.iter().map(|&i| pairs[i].0.len() + 1).max().unwrap();
        let tgt_width = chunk.iter().map(|&i| pairs[i].1.len() + 1).max().unwrap();
        let mut b = Batch {
            size,
            src_width,
            tgt_width,
            src: vec![PAD; size * src_width],
            src_len: Vec::with_capacity(size),
            dec_in: vec![PAD; size * tgt_width],
            dec_tgt: vec![PAD; size * tgt_width],
            tgt_len: Vec::with_capacity(size),
            tokens: 0,
        };
        for (r, &i) in chunk.iter().enumerate() {
            let (src, tgt) = &pairs[i];
            let srow = &mut b.src[r * src_width..(r + 1) * src_width];
            srow[..src.len()].copy_from_slice(src);
            srow[src.len()] = EOS;
            b.src_len.push(src.len() + 1);
            let irow = &mut b.dec_in[r * tgt_width..(r + 1) * tgt_width];
            irow[0] = BOS;
            irow[1..=tgt.len()].copy_from_slice(tgt);
            let trow = &mut b.dec_tgt[r * tgt_width..(r + 1) * tgt_width];
            trow[..tgt.len()].copy_from_slice(tgt);
            trow[tgt.len()] = EOS;
            b.tgt_len.push(tgt.len() + 1);
            b.tokens += tgt.len() + 1;
        }
        batches.push(b);
    }
    Ok(batches)
}

/// Inverse of `encode_batches` for one batch: the original (src, tgt) pairs.
pub fn decode_batch(b: &Batch) -> Vec<(Vec<u32>, Vec<u32>)> {
    (0..b.size)
        .map(|r| {
            let src: Vec<u32> = b.src[r * b.src_width..(r + 1) * b.src_width]
                .iter()
                .copied()
                .filter(|&t| t >= FIRST_TOKEN)
                .collect();
            let tgt: Vec<u32> = b.dec_tgt[r * b.tgt_width..(r + 1) * b.tgt_width]
                .iter()
                .copied()
                .filter(|&t| t >= FIRST_TOKEN)
                .collect();
            (src, tgt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_bounds_are_enforced() {
        assert!(make_domain_pair(1, -0.1, 100).is_err());
        assert!(make_domain_pair(1, 1.5, 100).is_err());
    }

    #[test]
    fn full_overlap_with_same_rule_is_degenerate() {
        let (g, mut i) = make_domain_pair(5, 1.0, 100).unwrap();
        i.reorder = ReorderRule::Identity;
        assert_eq!(g.lexicon, i.lexicon);
        assert_eq!(g.vocab_tail, 0);
    }

    #[test]
    fn zero_overlap_shares_nothing() {
        let (g, i) = make_domain_pair(5, 0.0, 100).unwrap();
        assert!(g.lexicon.keys().all(|k| !i.lexicon.contains_key(k)));
    }

    #[test]
    fn default_pair_shares_core_and_splits_tails() {
        let (g, i) = make_domain_pair(7, 0.7, 200).unwrap();
        assert_eq!(g.vocab_core, 140);
        assert_eq!(g.vocab_tail, 60);
        assert_eq!(g.vocab_total, 260);
        let shared: Vec<&u32> = g.lexicon.keys().filter(|k| i.lexicon.contains_key(k)).collect();
        assert_eq!(shared.len(), 140);
        // Shared entries translate identically (core lexicon is common).
        for k in shared {
            assert_eq!(g.lexicon[k], i.lexicon[k]);
        }
        // Lexicons are injective.
        for lex in [&g.lexicon, &i.lexicon] {
            let vals: HashSet<u32> = lex.values().copied().collect();
            assert_eq!(vals.len(), lex.len());
        }
    }

    #[test]
    fn unseen_in_domain_token_fraction_matches_tail_share() {
        // Counting oracle: the fraction of I-domain tokens that never occur
        // in G data equals I's tail share of its lexicon, up to sampling noise.
        let (g, i) = make_domain_pair(9, 0.7, 200).unwrap();
        let gc = sample_corpus(&g, 3000, 41).unwrap();
        let ic = sample_corpus(&i, 3000, 42).unwrap();
        let g_tokens: HashSet<u32> = gc
            .train()
            .iter()
            .flat_map(|(s, _)| s.iter().copied())
            .collect();
        let (mut unseen, mut total) = (0usize, 0usize);
        for (s, _) in ic.test() {
            for t in s {
                total += 1;
                if !g_tokens.contains(t) {
                    unseen += 1;
                }
            }
        }
        let frac = unseen as f64 / total as f64;
        let expected = i.vocab_tail as f64 / (i.vocab_core + i.vocab_tail) as f64;
        assert!(
            (frac - expected).abs() < 0.05,
            "unseen fraction {frac} vs tail share {expected}"
        );
    }

    #[test]
    fn sampling_is_deterministic_and_constructive() {
        let (g, _) = make_domain_pair(3, 0.5, 60).unwrap();
        let a = sample_corpus(&g, 500, 9).unwrap();
        let b = sample_corpus(&g, 500, 9).unwrap();
        assert_eq!(a.pairs, b.pairs);
        for (src, tgt) in &a.pairs {
            let mapped: Vec<u32> = src.iter().map(|t| g.lexicon[t]).collect();
            assert_eq!(&g.reorder.apply(&mapped), tgt);
        }
        // Splits are disjoint by construction: all source sides unique.
        let uniq: HashSet<&Vec<u32>> = a.pairs.iter().map(|(s, _)| s).collect();
        assert_eq!(uniq.len(), a.pairs.len());
    }

    #[test]
    fn mean_length_approaches_midpoint() {
        let (g, _) = make_domain_pair(11, 0.7, 200).unwrap();
        let c = sample_corpus(&g, 10_000, 13).unwrap();
        let mean: f64 = c.pairs.iter().map(|(s, _)| s.len() as f64).sum::<f64>()
            / c.pairs.len() as f64;
        assert!((mean - 8.0).abs() < 0.2, "mean source length {mean}");
    }

    #[test]
    fn reorder_rules_behave() {
        let xs = [10, 11, 12, 13, 14];
        assert_eq!(ReorderRule::Identity.apply(&xs), xs.to_vec());
        assert_eq!(ReorderRule::Reverse.apply(&xs), vec![14, 13, 12, 11, 10]);
        assert_eq!(ReorderRule::Rotate(2).apply(&xs), vec![12, 13, 14, 10, 11]);
        assert_eq!(ReorderRule::SwapAdjacent.apply(&xs), vec![11, 10, 13, 12, 14]);
    }

    #[test]
    fn batches_round_trip_and_conserve_tokens() {
        let (g, _) = make_domain_pair(17, 0.6, 80).unwrap();
        let c = sample_corpus(&g, 300, 23).unwrap();
        let vocab = (c.src_vocab_size(), c.tgt_vocab_size());
        let batches = encode_batches(c.train(), 16, vocab).unwrap();

        let mut decoded: Vec<(Vec<u32>, Vec<u32>)> =
            batches.iter().flat_map(decode_batch).collect();
        decoded.sort();
        let mut original = c.train().to_vec();
        original.sort();
        assert_eq!(decoded, original);

        let corpus_tokens: usize = c
            .train()
            .iter()
            .map(|(s, t)| s.len() + t.len())
            .sum();
        let batch_tokens: usize = batches
            .iter()
            .flat_map(decode_batch)
            .map(|(s, t)| s.len() + t.len())
            .sum();
        assert_eq!(batch_tokens, corpus_tokens);

        // Every row padded to its batch's width.
        for b in &batches {
            assert_eq!(b.src.len(), b.size * b.src_width);
            assert_eq!(b.dec_in.len(), b.size * b.tgt_width);
            for r in 0..b.size {
                let row = &b.src[r * b.src_width..(r + 1) * b.src_width];
                assert!(row[b.src_len[r] - 1] == EOS);
                assert!(row[b.src_len[r]..].iter().all(|&t| t == PAD));
            }
        }
    }

    #[test]
    fn vocab_overflow_is_a_config_error() {
        let pairs = vec![(vec![99u32], vec![5u32])];
        assert!(matches!(
            encode_batches(&pairs, 4, (50, 50)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tsv_dump_writes_tokens() {
        let (g, _) = make_domain_pair(19, 0.5, 30).unwrap();
        let c = sample_with_splits(
            &g,
            SplitSizes { train: 3, dev: 1, test: 1 },
            3,
        )
        .unwrap();
        let dir = std::env::temp_dir().join("forgetlab_tsv_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dump.tsv");
        c.write_tsv(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        let first = text.lines().next().unwrap();
        assert!(first.contains('\t') && first.starts_with('x'));
        fs::remove_dir_all(&dir).ok();
    }
}
