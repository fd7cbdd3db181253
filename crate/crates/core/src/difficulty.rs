//! Classical-test-theory item difficulty.
//!
//! "Difficulty" here follows the knowledge-tracing convention of a
//! correctness rate: `correct / attempts` in `[0, 1]`, so a *higher* value is
//! an *easier* item. Values are stored as reals and only quantised to the
//! integer bins `0..=100` at embedding time.
//!
//! The hard negative of a difficulty `d` is `1 - d`; for bins it is
//! `100 - bin`, which keeps the mapping an exact involution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Vocab, PAD, PAD_BIN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Question,
    Concept,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Question => "question",
            ItemKind::Concept => "concept",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "question" => Some(ItemKind::Question),
            "concept" => Some(ItemKind::Concept),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Positive,
    Negative,
}

/// Where a difficulty value came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultySource {
    Ctt,
    TextModel,
    Constant,
}

impl DifficultySource {
    pub fn as_str(self) -> &'static str {
        match self {
            DifficultySource::Ctt => "ctt",
            DifficultySource::TextModel => "text_model",
            DifficultySource::Constant => "constant",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub value: f64,
    pub source: DifficultySource,
}

/// Supplies difficulties for items absent from the table, e.g. a text
/// regressor over question wording.
pub trait ItemPredictor: Send + Sync {
    fn predict(&self, kind: ItemKind, item: usize) -> Option<f64>;
}

/// Default positive-view difficulty for unseen items.
pub const DEFAULT_FALLBACK_POSITIVE: f64 = 0.75;
/// Default negative-view difficulty for unseen items.
pub const DEFAULT_FALLBACK_NEGATIVE: f64 = 0.25;

#[derive(Clone)]
pub struct DifficultyTable {
    question: BTreeMap<usize, Entry>,
    concept: BTreeMap<usize, Entry>,
    pub fallback_positive: f64,
    pub fallback_negative: f64,
    source: DifficultySource,
    predictor: Option<Arc<dyn ItemPredictor>>,
}

impl fmt::Debug for DifficultyTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DifficultyTable")
            .field("questions", &self.question.len())
            .field("concepts", &self.concept.len())
            .field("fallback_positive", &self.fallback_positive)
            .field("fallback_negative", &self.fallback_negative)
            .field("source", &self.source)
            .field("predictor", &self.predictor.is_some())
            .finish()
    }
}

impl Default for DifficultyTable {
    /// Empty table: every lookup uses the constant fallbacks.
    fn default() -> Self {
        Self {
            question: BTreeMap::new(),
            concept: BTreeMap::new(),
            fallback_positive: DEFAULT_FALLBACK_POSITIVE,
            fallback_negative: DEFAULT_FALLBACK_NEGATIVE,
            source: DifficultySource::Constant,
            predictor: None,
        }
    }
}

/// Optional Laplace smoothing for [`compute_ctt_with`]: the estimate becomes
/// `(correct + alpha) / (attempts + 2 alpha)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CttOptions {
    pub laplace_alpha: Option<f64>,
}

/// Correctness rate per question and concept observed in `train`.
pub fn compute_ctt(train: &Dataset) -> DifficultyTable {
    compute_ctt_with(train, CttOptions::default())
}

pub fn compute_ctt_with(train: &Dataset, opts: CttOptions) -> DifficultyTable {
    let mut q: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    let mut c: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for s in &train.students {
        for st in &s.steps {
            let e = q.entry(st.question).or_default();
            e.0 += u64::from(st.response);
            e.1 += 1;
            let e = c.entry(st.concept).or_default();
            e.0 += u64::from(st.response);
            e.1 += 1;
        }
    }
    let rate = |(correct, total): (u64, u64)| match opts.laplace_alpha {
        Some(a) => (correct as f64 + a) / (total as f64 + 2.0 * a),
        None => correct as f64 / total as f64,
    };
    let to_entries = |m: BTreeMap<usize, (u64, u64)>| {
        m.into_iter()
            .map(|(k, v)| {
                (
                    k,
                    Entry {
                        value: rate(v),
                        source: DifficultySource::Ctt,
                    },
                )
            })
            .collect()
    };
    DifficultyTable {
        question: to_entries(q),
        concept: to_entries(c),
        source: DifficultySource::Ctt,
        ..DifficultyTable::default()
    }
}

/// Round-half-up of `d * 100` to an integer bin.
pub fn quantize(d: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::OutOfRange { value: d });
    }
    // The tolerance absorbs representation error in decimal inputs such
    // as 0.015, whose nearest double lies just below the half.
    Ok(((d * 100.0) + 0.5 + 1e-9).floor().min(100.0) as u8)
}

pub fn dequantize(bin: u8) -> f64 {
    f64::from(bin) / 100.0
}

/// `1 - d`; applies equally to difficulties and binary responses.
pub fn hard_negative(d: f64) -> f64 {
    1.0 - d
}

/// `100 - bin`; padding stays padding.
pub fn hard_negative_bin(bin: u8) -> u8 {
    if bin == PAD_BIN {
        PAD_BIN
    } else {
        100 - bin
    }
}

impl DifficultyTable {
    /// Override the unseen-item constants. `0.75 / 0.75` turns the hard
    /// negative off for unseen items.
    pub fn with_fallbacks(mut self, positive: f64, negative: f64) -> Result<Self> {
        for v in [positive, negative] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { value: v });
            }
        }
        self.fallback_positive = positive;
        self.fallback_negative = negative;
        Ok(self)
    }

    /// Whether the unseen-item constants are hard negatives of each other.
    pub fn fallbacks_symmetric(&self) -> bool {
        (self.fallback_positive + self.fallback_negative - 1.0).abs() < 1e-12
    }

    pub fn source(&self) -> DifficultySource {
        self.source
    }

    pub fn set_source(&mut self, source: DifficultySource) {
        self.source = source;
    }

    pub fn attach_predictor(&mut self, predictor: Arc<dyn ItemPredictor>) {
        self.predictor = Some(predictor);
    }

    pub fn has_predictor(&self) -> bool {
        self.predictor.is_some()
    }

    fn map(&self, kind: ItemKind) -> &BTreeMap<usize, Entry> {
        match kind {
            ItemKind::Question => &self.question,
            ItemKind::Concept => &self.concept,
        }
    }

    fn map_mut(&mut self, kind: ItemKind) -> &mut BTreeMap<usize, Entry> {
        match kind {
            ItemKind::Question => &mut self.question,
            ItemKind::Concept => &mut self.concept,
        }
    }

    pub fn get(&self, kind: ItemKind, item: usize) -> Option<Entry> {
        self.map(kind).get(&item).copied()
    }

    pub fn contains(&self, kind: ItemKind, item: usize) -> bool {
        self.map(kind).contains_key(&item)
    }

    pub fn insert(&mut self, kind: ItemKind, item: usize, entry: Entry) -> Result<()> {
        if !(0.0..=1.0).contains(&entry.value) {
            return Err(Error::OutOfRange { value: entry.value });
        }
        if entry.source == DifficultySource::TextModel {
            self.source = DifficultySource::TextModel;
        }
        self.map_mut(kind).insert(item, entry);
        Ok(())
    }

    pub fn entries(&self, kind: ItemKind) -> impl Iterator<Item = (usize, Entry)> + '_ {
        self.map(kind).iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self, kind: ItemKind) -> usize {
        self.map(kind).len()
    }

    /// Stored value, else the attached predictor, else `None`.
    fn resolved(&self, kind: ItemKind, item: usize) -> Option<f64> {
        self.get(kind, item)
            .map(|e| e.value)
            .or_else(|| self.predictor.as_ref().and_then(|p| p.predict(kind, item)).map(|v| v.clamp(0.0, 1.0)))
    }

    /// Difficulty seen by the given view. Known items return their value
    /// (positive) or its hard negative (negative); unknown items return the
    /// matching fallback constant.
    pub fn lookup(&self, item: usize, kind: ItemKind, view: View) -> f64 {
        match (self.resolved(kind, item), view) {
            (Some(v), View::Positive) => v,
            (Some(v), View::Negative) => hard_negative(v),
            (None, View::Positive) => self.fallback_positive,
            (None, View::Negative) => self.fallback_negative,
        }
    }

    /// Embedding bin for the given view; [`PAD_BIN`] for the padding index.
    pub fn bin(&self, item: usize, kind: ItemKind, view: View) -> u8 {
        if item == PAD {
            return PAD_BIN;
        }
        let q = |v: f64| quantize(v.clamp(0.0, 1.0)).expect("clamped");
        match (self.resolved(kind, item), view) {
            (Some(v), View::Positive) => q(v),
            (Some(v), View::Negative) => hard_negative_bin(q(v)),
            (None, View::Positive) => q(self.fallback_positive),
            (None, View::Negative) => q(self.fallback_negative),
        }
    }

    /// Question indices with stored values, sorted by ascending difficulty
    /// (ties by index).
    pub fn sorted_questions(&self) -> Vec<(f64, usize)> {
        let mut v: Vec<(f64, usize)> = self.question.iter().map(|(&k, e)| (e.value, k)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    }

    /// Write `(item_id, kind, value)` rows.
    pub fn write_csv(&self, path: &Path, questions: &Vocab, concepts: &Vocab) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["item_id", "kind", "value"]).map_err(|e| Error::csv(path, e))?;
        for (kind, vocab) in [(ItemKind::Question, questions), (ItemKind::Concept, concepts)] {
            for (idx, e) in self.entries(kind) {
                let id = vocab.id_of(idx).unwrap_or("<unk>");
                w.write_record([id, kind.as_str(), &format!("{}", e.value)])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a table written by [`write_csv`](Self::write_csv). Ids not in
    /// the vocabularies are skipped.
    pub fn read_csv(path: &Path, questions: &Vocab, concepts: &Vocab, source: DifficultySource) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut table = DifficultyTable {
            source,
            ..Default::default()
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let (Some(id), Some(kind), Some(value)) = (rec.get(0), rec.get(1).and_then(ItemKind::parse), rec.get(2))
            else {
                continue;
            };
            let value: f64 = value
                .parse()
                .map_err(|_| Error::Config(format!("bad difficulty value {value:?} in {}", path.display())))?;
            let vocab = match kind {
                ItemKind::Question => questions,
                ItemKind::Concept => concepts,
            };
            if let Some(idx) = vocab.index_of(id) {
                table.insert(kind, idx, Entry { value, source })?;
            }
        }
        table.source = source;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use std::collections::HashMap;

    fn row(s: &str, q: &str, c: &str, r: u8) -> Interaction {
        Interaction {
            student_id: s.into(),
            question_id: q.into(),
            concept_id: c.into(),
            response: r,
            timestamp: None,
        }
    }

    #[test]
    fn ctt_is_correct_over_total() {
        let rows = vec![
            row("a", "q1", "c1", 1),
            row("b", "q1", "c1", 1),
            row("c", "q1", "c1", 0),
            row("d", "q1", "c2", 1),
            row("a", "q2", "c2", 1),
        ];
        let d = Dataset::from_interactions(&rows).unwrap();
        let t = compute_ctt(&d);
        let q1 = d.question_vocab.index_of("q1").unwrap();
        let c2 = d.concept_vocab.index_of("c2").unwrap();
        assert_eq!(t.get(ItemKind::Question, q1).unwrap().value, 0.75);
        assert_eq!(t.get(ItemKind::Concept, c2).unwrap().value, 1.0);
        assert_eq!(t.source(), DifficultySource::Ctt);
    }

    #[test]
    fn unseen_item_is_absent_and_falls_back() {
        let d = Dataset::from_interactions(&[row("a", "q1", "c1", 1)]).unwrap();
        let t = compute_ctt(&d);
        assert!(!t.contains(ItemKind::Question, 5));
        assert_eq!(t.lookup(5, ItemKind::Question, View::Positive), 0.75);
        assert_eq!(t.lookup(5, ItemKind::Question, View::Negative), 0.25);
    }

    #[test]
    fn laplace_smoothing_is_optional() {
        let d = Dataset::from_interactions(&[row("a", "q1", "c1", 1)]).unwrap();
        assert_eq!(compute_ctt(&d).get(ItemKind::Question, 1).unwrap().value, 1.0);
        let s = compute_ctt_with(&d, CttOptions { laplace_alpha: Some(1.0) });
        assert!((s.get(ItemKind::Question, 1).unwrap().value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.75).unwrap(), 75);
        assert_eq!(quantize(0.0).unwrap(), 0);
        assert_eq!(quantize(1.0).unwrap(), 100);
        assert_eq!(quantize(0.005).unwrap(), 1);
        assert!(quantize(1.01).is_err());
        assert!(quantize(-0.1).is_err());
        assert!(quantize(f64::NAN).is_err());
    }

    #[test]
    fn quantize_half_steps_round_up() {
        // integer oracle: k/200 lies on bin k/2, halves round up
        for k in 0..=200u32 {
            let d = f64::from(k) / 200.0;
            let expect = k.div_ceil(2) as u8;
            assert_eq!(quantize(d).unwrap(), expect, "k = {k}");
        }
    }

    #[test]
    fn hard_negative_examples() {
        assert_eq!(hard_negative(0.75), 0.25);
        assert_eq!(hard_negative(0.5), 0.5);
        assert_eq!(hard_negative(1.0), 0.0);
        assert_eq!(hard_negative_bin(75), 25);
        assert_eq!(hard_negative_bin(50), 50);
        assert_eq!(hard_negative_bin(PAD_BIN), PAD_BIN);
    }

    #[test]
    fn lookup_views() {
        let mut t = DifficultyTable::default();
        t.insert(ItemKind::Question, 3, Entry { value: 0.6, source: DifficultySource::Ctt }).unwrap();
        assert_eq!(t.lookup(3, ItemKind::Question, View::Positive), 0.6);
        assert!((t.lookup(3, ItemKind::Question, View::Negative) - 0.4).abs() < 1e-12);
        assert_eq!(t.bin(3, ItemKind::Question, View::Negative), 40);
        assert_eq!(t.bin(PAD, ItemKind::Question, View::Positive), PAD_BIN);
    }

    struct Constant(f64);
    impl ItemPredictor for Constant {
        fn predict(&self, _: ItemKind, _: usize) -> Option<f64> {
            Some(self.0)
        }
    }

    #[test]
    fn predictor_fills_unseen_lookups() {
        let mut t = DifficultyTable::default();
        t.insert(ItemKind::Question, 1, Entry { value: 0.3, source: DifficultySource::Ctt }).unwrap();
        t.attach_predictor(Arc::new(Constant(0.62)));
        assert_eq!(t.lookup(9, ItemKind::Question, View::Positive), 0.62);
        assert!((t.lookup(9, ItemKind::Question, View::Negative) - 0.38).abs() < 1e-12);
        assert_eq!(t.lookup(1, ItemKind::Question, View::Positive), 0.3);
    }

    #[test]
    fn non_diff_fallbacks_are_asymmetric() {
        let t = DifficultyTable::default().with_fallbacks(0.75, 0.75).unwrap();
        assert!(!t.fallbacks_symmetric());
        assert_eq!(t.bin(4, ItemKind::Concept, View::Negative), 75);
        assert!(DifficultyTable::default().fallbacks_symmetric());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("a", "q1", "c1", 1), row("b", "q1", "c1", 0), row("a", "q2", "c2", 1)];
        let d = Dataset::from_interactions(&rows).unwrap();
        let t = compute_ctt(&d);
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_csv(f.path(), &d.question_vocab, &d.concept_vocab).unwrap();
        let back = DifficultyTable::read_csv(f.path(), &d.question_vocab, &d.concept_vocab, DifficultySource::Ctt).unwrap();
        for kind in [ItemKind::Question, ItemKind::Concept] {
            let a: Vec<_> = t.entries(kind).collect();
            let b: Vec<_> = back.entries(kind).collect();
            assert_eq!(a, b);
        }
    }

    /// Independent counter over raw rows: `HashMap<id, (correct, total)>`.
    fn brute_force(rows: &[Interaction]) -> HashMap<String, f64> {
        let mut m: HashMap<String, (u32, u32)> = HashMap::new();
        for r in rows {
            let e = m.entry(r.question_id.clone()).or_default();
            e.0 += r.response as u32;
            e.1 += 1;
        }
        m.into_iter().map(|(k, (c, t))| (k, c as f64 / t as f64)).collect()
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn involution(d in 0.0f64..=1.0) {
                prop_assert!((hard_negative(hard_negative(d)) - d).abs() <= f64::EPSILON);
            }

            #[test]
            fn bin_involution(b in 0u8..=100) {
                prop_assert_eq!(hard_negative_bin(hard_negative_bin(b)), b);
            }

            #[test]
            fn quantize_error_bounded(d in 0.0f64..=1.0) {
                let err = (dequantize(quantize(d).unwrap()) - d).abs();
                prop_assert!(err <= 0.005 + 1e-9);
            }

            #[test]
            fn ctt_matches_counting(rows in prop::collection::vec((0u8..20, 0u8..30, 0u8..5, 0u8..2), 1..2000)) {
                let rows: Vec<Interaction> = rows.into_iter()
                    .map(|(s, q, c, r)| row(&format!("s{s}"), &format!("q{q}"), &format!("c{c}"), r))
                    .collect();
                let d = Dataset::from_interactions(&rows).unwrap();
                let t = compute_ctt(&d);
                let oracle = brute_force(&rows);
                prop_assert_eq!(t.len(ItemKind::Question), oracle.len());
                for (id, v) in oracle {
                    let idx = d.question_vocab.index_of(&id).unwrap();
                    prop_assert_eq!(t.get(ItemKind::Question, idx).unwrap().value, v);
                }
            }
        }
    }
}
