//! Sequence augmentations for building contrastive positive views.
//!
//! Every strategy is a pure function of its input and an RNG. The
//! [`AugmentationPipeline`] fires each strategy independently with its
//! configured probability, in a fixed order, and is the identity outside
//! training mode.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Step, PAD};
use crate::difficulty::DifficultyTable;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CutoffMode {
    Token,
    Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskTarget {
    Question,
    Concept,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Higher,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Element,
    Segment,
}

/// Keep one uniformly chosen element when a strategy would empty `seq`.
fn protect_empty<R: Rng + ?Sized>(out: Vec<Step>, original: &[Step], rng: &mut R) -> Vec<Step> {
    if out.is_empty() && !original.is_empty() {
        vec![original[rng.random_range(0..original.len())]]
    } else {
        out
    }
}

/// Token mode drops each position with probability `rate`; span mode drops
/// one contiguous run of `round(rate * len)` positions.
pub fn cutoff<R: Rng + ?Sized>(seq: &[Step], mode: CutoffMode, rate: f64, rng: &mut R) -> Vec<Step> {
    let n = seq.len();
    let out: Vec<Step> = match mode {
        CutoffMode::Token => seq.iter().filter(|_| !rng.random_bool(rate.clamp(0.0, 1.0))).copied().collect(),
        CutoffMode::Span => {
            let gap = ((rate * n as f64).round() as usize).min(n);
            if gap == 0 {
                seq.to_vec()
            } else {
                let start = rng.random_range(0..=n - gap);
                seq[..start].iter().chain(&seq[start + gap..]).copied().collect()
            }
        }
    };
    protect_empty(out, seq, rng)
}

/// Replace the question or concept of each position with `mask_index`
/// with probability `rate`. Responses are untouched.
pub fn mask_items<R: Rng + ?Sized>(seq: &[Step], target: MaskTarget, rate: f64, mask_index: usize, rng: &mut R) -> Vec<Step> {
    let rate = rate.clamp(0.0, 1.0);
    seq.iter()
        .map(|&s| {
            if rng.random_bool(rate) {
                match target {
                    MaskTarget::Question => Step { question: mask_index, ..s },
                    MaskTarget::Concept => Step { concept: mask_index, ..s },
                }
            } else {
                s
            }
        })
        .collect()
}

fn keep_count(len: usize, keep_rate: f64) -> usize {
    ((keep_rate.clamp(0.0, 1.0) * len as f64).ceil() as usize).clamp(1, len.max(1))
}

/// One contiguous window of `ceil(keep_rate * len)` steps at a random offset.
pub fn crop<R: Rng + ?Sized>(seq: &[Step], keep_rate: f64, rng: &mut R) -> Vec<Step> {
    if seq.is_empty() {
        return Vec::new();
    }
    let w = keep_count(seq.len(), keep_rate);
    let off = rng.random_range(0..=seq.len() - w);
    seq[off..off + w].to_vec()
}

/// `ceil(keep_rate * len)` positions sampled uniformly without replacement,
/// kept in their original order.
pub fn summarize<R: Rng + ?Sized>(seq: &[Step], keep_rate: f64, rng: &mut R) -> Vec<Step> {
    if seq.is_empty() {
        return Vec::new();
    }
    let k = keep_count(seq.len(), keep_rate);
    let mut idx = index::sample(rng, seq.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| seq[i]).collect()
}

pub fn reverse(seq: &[Step]) -> Vec<Step> {
    seq.iter().rev().copied().collect()
}

/// Element mode shuffles positions; segment mode cuts consecutive blocks of
/// `segment_len` (the last may be shorter) and shuffles block order.
pub fn permute<R: Rng + ?Sized>(seq: &[Step], granularity: Granularity, segment_len: usize, rng: &mut R) -> Vec<Step> {
    match granularity {
        Granularity::Element => {
            let mut out = seq.to_vec();
            out.shuffle(rng);
            out
        }
        Granularity::Segment => {
            let mut blocks: Vec<&[Step]> = seq.chunks(segment_len.max(1)).collect();
            blocks.shuffle(rng);
            blocks.concat()
        }
    }
}

/// Questions sorted by stored difficulty, with each question's concept.
/// Only questions with a known concept (i.e. observed in training) are
/// replacement candidates.
#[derive(Clone, Debug, Default)]
pub struct ReplacementIndex {
    sorted: Vec<(f64, usize)>,
    by_question: HashMap<usize, f64>,
    question_concepts: Vec<usize>,
}

impl ReplacementIndex {
    pub fn new(table: &DifficultyTable, question_concepts: Vec<usize>) -> Self {
        let known = |q: usize| question_concepts.get(q).is_some_and(|&c| c != PAD);
        let sorted: Vec<(f64, usize)> = table.sorted_questions().into_iter().filter(|&(_, q)| known(q)).collect();
        Self {
            by_question: sorted.iter().map(|&(d, q)| (q, d)).collect(),
            sorted,
            question_concepts,
        }
    }

    fn difficulty(&self, q: usize) -> Option<f64> {
        self.by_question.get(&q).copied()
    }

    /// Candidates strictly above or below `d`.
    fn candidates(&self, d: f64, dir: Direction) -> &[(f64, usize)] {
        match dir {
            Direction::Higher => {
                let lo = self.sorted.partition_point(|(v, _)| *v <= d);
                &self.sorted[lo..]
            }
            Direction::Lower => {
                let hi = self.sorted.partition_point(|(v, _)| *v < d);
                &self.sorted[..hi]
            }
        }
    }

    fn concept_of(&self, q: usize) -> Option<usize> {
        self.question_concepts.get(q).copied().filter(|&c| c != PAD)
    }
}

/// With probability `rate` per position, swap the question for one drawn
/// uniformly among those with strictly higher (or lower) stored difficulty,
/// inheriting that question's concept. Positions with no candidate, or
/// whose question has no stored difficulty, are left alone.
pub fn replace_by_difficulty<R: Rng + ?Sized>(
    seq: &[Step],
    direction: Direction,
    rate: f64,
    idx: &ReplacementIndex,
    rng: &mut R,
) -> Vec<Step> {
    let rate = rate.clamp(0.0, 1.0);
    seq.iter()
        .map(|&s| {
            if !rng.random_bool(rate) {
                return s;
            }
            let Some(d) = idx.difficulty(s.question) else { return s };
            let cands = idx.candidates(d, direction);
            if cands.is_empty() {
                return s;
            }
            let (_, q) = cands[rng.random_range(0..cands.len())];
            Step {
                question: q,
                concept: idx.concept_of(q).unwrap_or(s.concept),
                ..s
            }
        })
        .collect()
}

/// `a` followed by `b`, keeping the last `max_len` steps.
pub fn concat_sequences(a: &[Step], b: &[Step], max_len: usize) -> Vec<Step> {
    let joined: Vec<Step> = a.iter().chain(b).copied().collect();
    joined[joined.len().saturating_sub(max_len)..].to_vec()
}

// ----- pipeline -----

/// The strategies in application order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Cutoff,
    SpanCutoff,
    Mask,
    Crop,
    Summarize,
    Reverse,
    Permute,
    SegmentPermute,
    ReplaceHigher,
    ReplaceLower,
    Concat,
}

impl Strategy {
    pub const ALL: [Strategy; 11] = [
        Strategy::Cutoff,
        Strategy::SpanCutoff,
        Strategy::Mask,
        Strategy::Crop,
        Strategy::Summarize,
        Strategy::Reverse,
        Strategy::Permute,
        Strategy::SegmentPermute,
        Strategy::ReplaceHigher,
        Strategy::ReplaceLower,
        Strategy::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cutoff => "cutoff",
            Strategy::SpanCutoff => "span_cutoff",
            Strategy::Mask => "mask",
            Strategy::Crop => "crop",
            Strategy::Summarize => "summarize",
            Strategy::Reverse => "reverse",
            Strategy::Permute => "permute",
            Strategy::SegmentPermute => "segment_permute",
            Strategy::ReplaceHigher => "replace_higher_diff",
            Strategy::ReplaceLower => "replace_lower_diff",
            Strategy::Concat => "concat_seq",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

/// Set of strategies that fired on one sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fired(u16);

impl Fired {
    pub fn contains(self, s: Strategy) -> bool {
        self.0 & s.bit() != 0
    }

    fn insert(&mut self, s: Strategy) {
        self.0 |= s.bit();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Per-strategy firing probabilities plus the strength of each strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub mask_prob: f64,
    pub crop_prob: f64,
    pub summarize_prob: f64,
    pub reverse_prob: f64,
    pub permute_prob: f64,
    pub segment_permute_prob: f64,
    pub replace_higher_diff_prob: f64,
    pub replace_lower_diff_prob: f64,
    pub concat_seq_prob: f64,
    pub cutoff_prob: f64,
    pub span_cutoff_prob: f64,
    /// Per-position masking rate once `mask` fires (BERT's 15%).
    pub mask_rate: f64,
    pub cutoff_rate: f64,
    pub span_cutoff_rate: f64,
    pub crop_keep: f64,
    pub summarize_keep: f64,
    pub segment_len: usize,
    pub replace_rate: f64,
    pub rng_seed: u64,
}

impl Default for AugmentationConfig {
    /// Probabilities used for the main training runs.
    fn default() -> Self {
        Self {
            mask_prob: 0.2,
            crop_prob: 0.1,
            summarize_prob: 0.2,
            reverse_prob: 0.1,
            permute_prob: 0.1,
            segment_permute_prob: 0.1,
            replace_higher_diff_prob: 0.1,
            replace_lower_diff_prob: 0.1,
            concat_seq_prob: 0.1,
            cutoff_prob: 0.03,
            span_cutoff_prob: 0.0,
            ..Self::none()
        }
    }
}

impl AugmentationConfig {
    /// Every probability zero.
    pub fn none() -> Self {
        Self {
            mask_prob: 0.0,
            crop_prob: 0.0,
            summarize_prob: 0.0,
            reverse_prob: 0.0,
            permute_prob: 0.0,
            segment_permute_prob: 0.0,
            replace_higher_diff_prob: 0.0,
            replace_lower_diff_prob: 0.0,
            concat_seq_prob: 0.0,
            cutoff_prob: 0.0,
            span_cutoff_prob: 0.0,
            mask_rate: 0.15,
            cutoff_rate: 0.1,
            span_cutoff_rate: 0.1,
            crop_keep: 0.7,
            summarize_keep: 0.7,
            segment_len: 5,
            replace_rate: 0.3,
            rng_seed: 0,
        }
    }

    /// The mixed setting of the augmentation ablation.
    pub fn mixed() -> Self {
        Self {
            mask_prob: 0.2,
            crop_prob: 0.2,
            summarize_prob: 0.2,
            reverse_prob: 0.2,
            permute_prob: 0.3,
            segment_permute_prob: 0.2,
            replace_higher_diff_prob: 0.3,
            replace_lower_diff_prob: 0.2,
            concat_seq_prob: 0.2,
            cutoff_prob: 0.03,
            span_cutoff_prob: 0.0,
            ..Self::none()
        }
    }

    /// Only `strategy` enabled, at probability `p`.
    pub fn single(strategy: Strategy, p: f64) -> Self {
        let mut c = Self::none();
        *c.prob_mut(strategy) = p;
        c
    }

    pub fn prob(&self, s: Strategy) -> f64 {
        match s {
            Strategy::Cutoff => self.cutoff_prob,
            Strategy::SpanCutoff => self.span_cutoff_prob,
            Strategy::Mask => self.mask_prob,
            Strategy::Crop => self.crop_prob,
            Strategy::Summarize => self.summarize_prob,
            Strategy::Reverse => self.reverse_prob,
            Strategy::Permute => self.permute_prob,
            Strategy::SegmentPermute => self.segment_permute_prob,
            Strategy::ReplaceHigher => self.replace_higher_diff_prob,
            Strategy::ReplaceLower => self.replace_lower_diff_prob,
            Strategy::Concat => self.concat_seq_prob,
        }
    }

    pub fn prob_mut(&mut self, s: Strategy) -> &mut f64 {
        match s {
            Strategy::Cutoff => &mut self.cutoff_prob,
            Strategy::SpanCutoff => &mut self.span_cutoff_prob,
            Strategy::Mask => &mut self.mask_prob,
            Strategy::Crop => &mut self.crop_prob,
            Strategy::Summarize => &mut self.summarize_prob,
            Strategy::Reverse => &mut self.reverse_prob,
            Strategy::Permute => &mut self.permute_prob,
            Strategy::SegmentPermute => &mut self.segment_permute_prob,
            Strategy::ReplaceHigher => &mut self.replace_higher_diff_prob,
            Strategy::ReplaceLower => &mut self.replace_lower_diff_prob,
            Strategy::Concat => &mut self.concat_seq_prob,
        }
    }

    pub fn is_identity(&self) -> bool {
        Strategy::ALL.iter().all(|&s| self.prob(s) == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for s in Strategy::ALL {
            let p = self.prob(s);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{}_prob = {p} outside [0, 1]", s.name())));
            }
        }
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("cutoff_rate", self.cutoff_rate),
            ("span_cutoff_rate", self.span_cutoff_rate),
            ("crop_keep", self.crop_keep),
            ("summarize_keep", self.summarize_keep),
            ("replace_rate", self.replace_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.cutoff_prob > 0.0 && self.span_cutoff_prob > 0.0 {
            return Err(Error::Config(
                "token cutoff and span cutoff are mutually exclusive; set one probability to 0".into(),
            ));
        }
        if self.segment_len == 0 {
            return Err(Error::Config("segment_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub sequences: Vec<Vec<Step>>,
    pub fired: Vec<Fired>,
}

/// Applies an [`AugmentationConfig`] to batches of sequences.
#[derive(Debug)]
pub struct AugmentationPipeline {
    cfg: AugmentationConfig,
    replacement: ReplacementIndex,
    question_mask: usize,
    concept_mask: usize,
    max_len: usize,
    mode: Mode,
    calls: AtomicUsize,
}

impl AugmentationPipeline {
    pub fn new(
        cfg: AugmentationConfig,
        replacement: ReplacementIndex,
        question_mask: usize,
        concept_mask: usize,
        max_len: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            replacement,
            question_mask,
            concept_mask,
            max_len,
            mode: Mode::Train,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &AugmentationConfig {
        &self.cfg
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of [`apply`](Self::apply) invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Augment every sequence. Sequence `i` draws from its own ChaCha
    /// stream seeded by one value taken from `rng`, so the result does not
    /// depend on processing order.
    pub fn apply<R: RngCore + ?Sized>(&self, batch: &[Vec<Step>], rng: &mut R) -> AugmentedBatch {
        self.calls.fetch_add(1, Ordering::Relaxed);
        if self.mode == Mode::Eval || self.cfg.is_identity() {
            return AugmentedBatch {
                sequences: batch.to_vec(),
                fired: vec![Fired::default(); batch.len()],
            };
        }
        let base = rng.next_u64();
        let (sequences, fired) = batch
            .iter()
            .enumerate()
            .map(|(i, seq)| {
                let mut r = ChaCha8Rng::seed_from_u64(base);
                r.set_stream(i as u64);
                self.augment_one(seq, batch, i, &mut r)
            })
            .unzip();
        AugmentedBatch { sequences, fired }
    }

    fn augment_one(&self, seq: &[Step], batch: &[Vec<Step>], i: usize, rng: &mut ChaCha8Rng) -> (Vec<Step>, Fired) {
        let c = &self.cfg;
        let mut fired = Fired::default();
        let mut s = seq.to_vec();
        for strat in Strategy::ALL {
            let p = c.prob(strat);
            if p == 0.0 || !rng.random_bool(p) {
                continue;
            }
            fired.insert(strat);
            s = match strat {
                Strategy::Cutoff => cutoff(&s, CutoffMode::Token, c.cutoff_rate, rng),
                Strategy::SpanCutoff => cutoff(&s, CutoffMode::Span, c.span_cutoff_rate, rng),
                Strategy::Mask => {
                    let q = mask_items(&s, MaskTarget::Question, c.mask_rate, self.question_mask, rng);
                    mask_items(&q, MaskTarget::Concept, c.mask_rate, self.concept_mask, rng)
                }
                Strategy::Crop => crop(&s, c.crop_keep, rng),
                Strategy::Summarize => summarize(&s, c.summarize_keep, rng),
                Strategy::Reverse => reverse(&s),
                Strategy::Permute => permute(&s, Granularity::Element, 0, rng),
                Strategy::SegmentPermute => permute(&s, Granularity::Segment, c.segment_len, rng),
                Strategy::ReplaceHigher => replace_by_difficulty(&s, Direction::Higher, c.replace_rate, &self.replacement, rng),
                Strategy::ReplaceLower => replace_by_difficulty(&s, Direction::Lower, c.replace_rate, &self.replacement, rng),
                Strategy::Concat => {
                    let j = if batch.len() > 1 {
                        let k = rng.random_range(0..batch.len() - 1);
                        if k >= i { k + 1 } else { k }
                    } else {
                        i
                    };
                    concat_sequences(&s, &batch[j], self.max_len)
                }
            };
        }
        if s.len() > self.max_len {
            s.drain(..s.len() - self.max_len);
        }
        (s, fired)
    }
}
