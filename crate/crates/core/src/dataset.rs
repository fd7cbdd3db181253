//! Interaction logs: loading, vocabularies, student-level splits and
//! fixed-length windowing into [`SequenceBatch`]es.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::difficulty::{DifficultyTable, ItemKind, View};
use crate::error::{Error, Result};

/// Index reserved for padding in every vocabulary.
pub const PAD: usize = 0;
/// Difficulty-bin value stored at padded positions.
pub const PAD_BIN: u8 = u8::MAX;

/// One raw student response event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub student_id: String,
    pub question_id: String,
    pub concept_id: String,
    pub response: u8,
    pub timestamp: Option<i64>,
}

/// Bidirectional id <-> index map. Real ids start at index 1; index
/// `len() + 1` is shared by unknown ids and the augmentation mask.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(ids: Vec<String>) -> Self {
        Self::from_ids(ids)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.ids
    }
}

impl Vocab {
    pub fn from_ids(ids: Vec<String>) -> Self {
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i + 1)).collect();
        Self { ids, index }
    }

    fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        self.ids.push(id.to_string());
        let i = self.ids.len();
        self.index.insert(id.to_string(), i);
        i
    }

    /// Number of real ids.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index used for masked or unknown items.
    pub fn mask_index(&self) -> usize {
        self.ids.len() + 1
    }

    /// Rows an embedding table over this vocabulary needs.
    pub fn table_rows(&self) -> usize {
        self.ids.len() + 2
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Index of `id`, or the unknown/mask slot.
    pub fn index_or_unk(&self, id: &str) -> usize {
        self.index_of(id).unwrap_or(self.mask_index())
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.ids.get(i)).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// An encoded interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub question: usize,
    pub concept: usize,
    pub response: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StudentSequence {
    pub student_id: String,
    pub steps: Vec<Step>,
    pub timestamps: Vec<Option<i64>>,
}

pub type TextMap = BTreeMap<String, String>;

/// Interactions grouped by student, with shared vocabularies.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub students: Vec<StudentSequence>,
    pub question_vocab: Arc<Vocab>,
    pub concept_vocab: Arc<Vocab>,
    pub question_texts: Option<Arc<TextMap>>,
    pub concept_texts: Option<Arc<TextMap>>,
}

impl Dataset {
    /// Build vocabularies (in order of first appearance) and group rows by
    /// student, each student's rows stably sorted by timestamp.
    pub fn from_interactions(rows: &[Interaction]) -> Result<Self> {
        let mut qv = Vocab::default();
        let mut cv = Vocab::default();
        for r in rows {
            qv.intern(&r.question_id);
            cv.intern(&r.concept_id);
        }
        Self::with_vocabs(rows, Arc::new(qv), Arc::new(cv))
    }

    /// Group rows against existing vocabularies; unknown ids map to the
    /// unknown slot.
    pub fn with_vocabs(rows: &[Interaction], question_vocab: Arc<Vocab>, concept_vocab: Arc<Vocab>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<(Option<i64>, Step)>> = HashMap::new();
        for r in rows {
            let step = Step {
                question: question_vocab.index_or_unk(&r.question_id),
                concept: concept_vocab.index_or_unk(&r.concept_id),
                response: r.response,
            };
            groups
                .entry(r.student_id.clone())
                .or_insert_with(|| {
                    order.push(r.student_id.clone());
                    Vec::new()
                })
                .push((r.timestamp, step));
        }
        let students = order
            .into_iter()
            .map(|sid| {
                let mut g = groups.remove(&sid).unwrap_or_default();
                g.sort_by_key(|(ts, _)| *ts);
                StudentSequence {
                    student_id: sid,
                    timestamps: g.iter().map(|(t, _)| *t).collect(),
                    steps: g.into_iter().map(|(_, s)| s).collect(),
                }
            })
            .collect();
        Ok(Self {
            students,
            question_vocab,
            concept_vocab,
            question_texts: None,
            concept_texts: None,
        })
    }

    pub fn num_interactions(&self) -> usize {
        self.students.iter().map(|s| s.steps.len()).sum()
    }

    pub fn num_students(&self) -> usize {
        self.students.len()
    }

    /// Same vocabularies and texts, different students.
    pub fn subset(&self, students: Vec<StudentSequence>) -> Self {
        Self {
            students,
            question_vocab: Arc::clone(&self.question_vocab),
            concept_vocab: Arc::clone(&self.concept_vocab),
            question_texts: self.question_texts.clone(),
            concept_texts: self.concept_texts.clone(),
        }
    }

    /// Back to raw rows, in student then time order.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.num_interactions());
        for s in &self.students {
            for (step, ts) in s.steps.iter().zip(&s.timestamps) {
                out.push(Interaction {
                    student_id: s.student_id.clone(),
                    question_id: self.question_vocab.id_of(step.question).unwrap_or("<unk>").to_string(),
                    concept_id: self.concept_vocab.id_of(step.concept).unwrap_or("<unk>").to_string(),
                    response: step.response,
                    timestamp: *ts,
                });
            }
        }
        out
    }

    /// Concept of each question index (first one observed); `PAD` if never seen.
    pub fn question_concepts(&self) -> Vec<usize> {
        let mut map = vec![PAD; self.question_vocab.table_rows()];
        for s in &self.students {
            for st in &s.steps {
                if st.question < map.len() && map[st.question] == PAD {
                    map[st.question] = st.concept;
                }
            }
        }
        map
    }
}

/// Column names for [`load_interactions`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub student: String,
    pub question: String,
    pub concept: String,
    pub response: String,
    /// Optional; when absent, rows keep file order.
    pub timestamp: Option<String>,
    pub delimiter: u8,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            student: "user_id".into(),
            question: "question_id".into(),
            concept: "concept_id".into(),
            response: "response".into(),
            timestamp: Some("timestamp".into()),
            delimiter: b',',
        }
    }
}

impl ColumnMapping {
    /// Tab-separated when the extension is `.tsv`, comma otherwise.
    pub fn for_path(path: &Path) -> Self {
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") => b'\t',
            _ => b',',
        };
        Self {
            delimiter,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

fn parse_response(s: &str) -> Option<u8> {
    match s.trim() {
        "1" | "1.0" | "true" | "True" | "TRUE" => Some(1),
        "0" | "0.0" | "false" | "False" | "FALSE" => Some(0),
        _ => None,
    }
}

/// Read raw interaction rows from a delimited file. Rows with a missing or
/// malformed required field are dropped and counted. A concept cell listing
/// several concepts (`a;b`) keeps the first.
pub fn read_interactions(path: &Path, mapping: &ColumnMapping) -> Result<(Vec<Interaction>, LoadStats)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(mapping.delimiter)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::csv(path, e),
        })?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = [&mapping.student, &mapping.question, &mapping.concept, &mapping.response];
    let missing: Vec<String> = required.iter().filter(|n| col(n).is_none()).map(|n| n.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns {
            path: path.to_path_buf(),
            missing,
            found: headers,
        });
    }
    let (ci_s, ci_q, ci_c, ci_r) = (
        col(&mapping.student).unwrap(),
        col(&mapping.question).unwrap(),
        col(&mapping.concept).unwrap(),
        col(&mapping.response).unwrap(),
    );
    let ci_t = mapping.timestamp.as_deref().and_then(col);

    let mut stats = LoadStats::default();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        stats.rows_read += 1;
        let field = |i: usize| rec.get(i).map(str::trim).filter(|s| !s.is_empty());
        let parsed = (|| {
            let student_id = field(ci_s)?.to_string();
            let question_id = field(ci_q)?.to_string();
            let concept_id = field(ci_c)?.split(';').next()?.trim().to_string();
            if concept_id.is_empty() {
                return None;
            }
            let response = parse_response(field(ci_r)?)?;
            let timestamp = match ci_t {
                Some(i) => match field(i) {
                    Some(t) => Some(t.parse::<f64>().ok()? as i64),
                    None => None,
                },
                None => None,
            };
            Some(Interaction {
                student_id,
                question_id,
                concept_id,
                response,
                timestamp,
            })
        })();
        match parsed {
            Some(r) => rows.push(r),
            None => stats.rows_dropped += 1,
        }
    }
    Ok((rows, stats))
}

/// Load a log file into a [`Dataset`] with fresh vocabularies.
pub fn load_interactions(path: &Path, mapping: &ColumnMapping) -> Result<(Dataset, LoadStats)> {
    let (rows, stats) = read_interactions(path, mapping)?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no valid rows ({} dropped)",
            path.display(),
            stats.rows_dropped
        )));
    }
    Ok((Dataset::from_interactions(&rows)?, stats))
}

/// Write rows with the default column names.
pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["user_id", "question_id", "concept_id", "response", "timestamp"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        let ts = r.timestamp.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([
            r.student_id.as_str(),
            &r.question_id,
            &r.concept_id,
            &r.response.to_string(),
            &ts,
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an `(id, text)` side file.
pub fn load_texts(path: &Path) -> Result<TextMap> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers: Vec<String> = rdr.headers().map_err(|e| Error::csv(path, e))?.iter().map(str::to_string).collect();
    let (Some(ci), Some(ct)) = (
        headers.iter().position(|h| h == "id"),
        headers.iter().position(|h| h == "text"),
    ) else {
        return Err(Error::MissingColumns {
            path: path.to_path_buf(),
            missing: vec!["id".into(), "text".into()],
            found: headers,
        });
    };
    let mut out = TextMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if let (Some(id), Some(t)) = (rec.get(ci), rec.get(ct)) {
            out.insert(id.to_string(), t.to_string());
        }
    }
    Ok(out)
}

pub fn write_texts(path: &Path, texts: &TextMap) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "text"]).map_err(|e| Error::csv(path, e))?;
    for (id, t) in texts {
        w.write_record([id, t]).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ----- splitting -----

/// `(train_frac, valid_frac_of_train, test_frac)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: f64,
    pub valid_of_train: f64,
    pub test: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid_of_train: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatio {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.train) || !in_unit(self.valid_of_train) || !in_unit(self.test) {
            return Err(Error::InvalidSplit(format!("fractions must lie in [0, 1]: {self:?}")));
        }
        if (self.train + self.test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!(
                "train + test must equal 1, got {}",
                self.train + self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DataSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub ratio: SplitRatio,
}

/// Student-level split: shuffle students with `seed`, take `round(n * test)`
/// for test, then `round(pool * valid_of_train)` of the remainder for
/// validation.
pub fn split_dataset(d: &Dataset, ratio: SplitRatio, seed: u64) -> Result<DataSplit> {
    ratio.validate()?;
    let n = d.num_students();
    // A split with a positive fraction gets at least one student.
    let at_least_one = |count: f64, frac: f64| {
        let c = count.round() as usize;
        if frac > 0.0 { c.max(1) } else { c }
    };
    let n_test = at_least_one(n as f64 * ratio.test, ratio.test);
    let pool = n.saturating_sub(n_test);
    let n_valid = at_least_one(pool as f64 * ratio.valid_of_train, ratio.valid_of_train * ratio.train);
    if n_test + n_valid >= n {
        return Err(Error::InvalidSplit(format!(
            "{n} students cannot fill train/valid/test with ratio {ratio:?}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| d.subset(idx.iter().map(|&i| d.students[i].clone()).collect());
    let test = take(&order[..n_test]);
    let valid = take(&order[n_test..n_test + n_valid]);
    let train = take(&order[n_test + n_valid..]);
    Ok(DataSplit {
        train,
        valid,
        test,
        ratio,
    })
}

/// Student-level k-fold partition: fold `i` is the test set of split `i`;
/// the remaining students form the training pool, of which
/// `valid_of_train` goes to validation.
pub fn kfold_splits(d: &Dataset, k: usize, valid_of_train: f64, seed: u64) -> Result<Vec<DataSplit>> {
    let n = d.num_students();
    if k < 2 || n < k {
        return Err(Error::InvalidSplit(format!("cannot make {k} folds from {n} students")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = fold_bounds(n, k);
    folds
        .iter()
        .map(|&(lo, hi)| {
            let test_idx = &order[lo..hi];
            let pool: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
            let n_valid = (pool.len() as f64 * valid_of_train).round() as usize;
            let take = |idx: &[usize]| d.subset(idx.iter().map(|&i| d.students[i].clone()).collect());
            Ok(DataSplit {
                test: take(test_idx),
                valid: take(&pool[..n_valid]),
                train: take(&pool[n_valid..]),
                ratio: SplitRatio {
                    train: 1.0 - 1.0 / k as f64,
                    valid_of_train,
                    test: 1.0 / k as f64,
                },
            })
        })
        .collect()
}

/// Contiguous `[lo, hi)` ranges of sizes differing by at most one.
pub fn fold_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    let base = n / k;
    let extra = n % k;
    let mut lo = 0;
    (0..k)
        .map(|i| {
            let hi = lo + base + usize::from(i < extra);
            let r = (lo, hi);
            lo = hi;
            r
        })
        .collect()
}

// ----- windowing and batching -----

/// Non-overlapping consecutive chunks of at most `max_len` steps per
/// student, in student order.
pub fn windows(d: &Dataset, max_len: usize) -> Vec<Vec<Step>> {
    assert!(max_len > 0);
    d.students
        .iter()
        .flat_map(|s| s.steps.chunks(max_len).map(<[Step]>::to_vec))
        .collect()
}

/// Fixed-shape model input for a group of sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub max_len: usize,
    pub questions: Vec<usize>,
    pub concepts: Vec<usize>,
    pub responses: Vec<u8>,
    /// Positive-view difficulty bins in `0..=100`, [`PAD_BIN`] at padding.
    pub q_difficulty_bins: Vec<u8>,
    pub c_difficulty_bins: Vec<u8>,
    /// Hard-negative-view bins, resolved through the table's negative lookup.
    pub q_negative_bins: Vec<u8>,
    pub c_negative_bins: Vec<u8>,
    pub valid_mask: Vec<bool>,
}

impl SequenceBatch {
    /// Right-pad `seqs` to `max_len` and resolve difficulty bins. Sequences
    /// longer than `max_len` keep their most recent `max_len` steps.
    pub fn from_sequences<S: AsRef<[Step]>>(seqs: &[S], table: &DifficultyTable, max_len: usize) -> Self {
        let b = seqs.len();
        let n = b * max_len;
        let mut out = Self {
            batch: b,
            max_len,
            questions: vec![PAD; n],
            concepts: vec![PAD; n],
            responses: vec![0; n],
            q_difficulty_bins: vec![PAD_BIN; n],
            c_difficulty_bins: vec![PAD_BIN; n],
            q_negative_bins: vec![PAD_BIN; n],
            c_negative_bins: vec![PAD_BIN; n],
            valid_mask: vec![false; n],
        };
        for (i, seq) in seqs.iter().enumerate() {
            let seq = seq.as_ref();
            let seq = &seq[seq.len().saturating_sub(max_len)..];
            for (t, st) in seq.iter().enumerate() {
                let p = i * max_len + t;
                out.questions[p] = st.question;
                out.concepts[p] = st.concept;
                out.responses[p] = st.response;
                out.q_difficulty_bins[p] = table.bin(st.question, ItemKind::Question, View::Positive);
                out.c_difficulty_bins[p] = table.bin(st.concept, ItemKind::Concept, View::Positive);
                out.q_negative_bins[p] = table.bin(st.question, ItemKind::Question, View::Negative);
                out.c_negative_bins[p] = table.bin(st.concept, ItemKind::Concept, View::Negative);
                out.valid_mask[p] = true;
            }
        }
        out
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    /// Mask-filtered steps of row `i`.
    pub fn row_steps(&self, i: usize) -> Vec<Step> {
        (0..self.max_len)
            .map(|t| i * self.max_len + t)
            .filter(|&p| self.valid_mask[p])
            .map(|p| Step {
                question: self.questions[p],
                concept: self.concepts[p],
                response: self.responses[p],
            })
            .collect()
    }
}

/// Window every student, then group windows into batches of `batch_size`
/// (the last batch may be smaller).
pub fn make_batches<'a>(
    d: &Dataset,
    table: &'a DifficultyTable,
    max_len: usize,
    batch_size: usize,
) -> impl Iterator<Item = SequenceBatch> + 'a {
    assert!(batch_size > 0);
    let wins = windows(d, max_len);
    let n = wins.len();
    (0..n.div_ceil(batch_size)).map(move |bi| {
        let lo = bi * batch_size;
        let hi = (lo + batch_size).min(n);
        SequenceBatch::from_sequences(&wins[lo..hi], table, max_len)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn rows(n_students: usize, per: usize) -> Vec<Interaction> {
        (0..n_students)
            .flat_map(|s| {
                (0..per).map(move |t| Interaction {
                    student_id: format!("s{s}"),
                    question_id: format!("q{}", t % 7),
                    concept_id: format!("c{}", t % 3),
                    response: ((s + t) % 2) as u8,
                    timestamp: Some(t as i64),
                })
            })
            .collect()
    }

    #[test]
    fn loads_three_rows_two_students() {
        let f = write_csv(
            "user_id,question_id,concept_id,response,timestamp\n\
             a,q1,c1,1,10\nb,q2,c1,0,11\na,q2,c1,0,12\n",
        );
        let (d, stats) = load_interactions(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(d.num_students(), 2);
        assert_eq!(d.num_interactions(), 3);
        assert_eq!(stats.rows_dropped, 0);
        assert_eq!(d.question_vocab.len(), 2);
        assert_eq!(d.question_vocab.index_of("q1"), Some(1));
    }

    #[test]
    fn drops_row_missing_response() {
        let f = write_csv(
            "user_id,question_id,concept_id,response,timestamp\n\
             a,q1,c1,1,10\nb,q2,c1,,11\na,q2,c1,0,12\n",
        );
        let (d, stats) = load_interactions(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(stats.rows_dropped, 1);
        assert_eq!(d.num_interactions(), 2);
    }

    #[test]
    fn sorts_each_student_by_timestamp() {
        let f = write_csv(
            "user_id,question_id,concept_id,response,timestamp\n\
             a,q3,c1,1,30\na,q1,c1,0,10\nb,q9,c2,1,5\na,q2,c1,1,20\na,q4,c1,1,20\n",
        );
        let (rows, _) = read_interactions(f.path(), &ColumnMapping::default()).unwrap();
        let d = Dataset::from_interactions(&rows).unwrap();
        // sort oracle: stable sort of the same rows by timestamp
        let mut expect: Vec<&Interaction> = rows.iter().filter(|r| r.student_id == "a").collect();
        expect.sort_by_key(|r| r.timestamp);
        let got: Vec<&str> = d.students[0]
            .steps
            .iter()
            .map(|s| d.question_vocab.id_of(s.question).unwrap())
            .collect();
        let want: Vec<&str> = expect.iter().map(|r| r.question_id.as_str()).collect();
        assert_eq!(got, want);
        assert_eq!(got, ["q1", "q2", "q4", "q3"]);
    }

    #[test]
    fn missing_column_is_reported() {
        let f = write_csv("user_id,item,concept_id,response\na,q1,c1,1\n");
        let err = load_interactions(f.path(), &ColumnMapping::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumns { ref missing, .. } if missing == &["question_id"]));
    }

    #[test]
    fn empty_and_unreadable_files_error() {
        let f = write_csv("user_id,question_id,concept_id,response\na,q1,c1,x\n");
        assert!(matches!(
            load_interactions(f.path(), &ColumnMapping::default()),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            load_interactions(Path::new("/definitely/not/here.csv"), &ColumnMapping::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn first_listed_concept_is_kept() {
        let f = write_csv("user_id,question_id,concept_id,response\na,q1,c7;c8,1\n");
        let (d, _) = load_interactions(f.path(), &ColumnMapping::default()).unwrap();
        assert_eq!(d.concept_vocab.ids(), ["c7"]);
    }

    #[test]
    fn split_ten_students_default_ratio() {
        let d = Dataset::from_interactions(&rows(10, 4)).unwrap();
        let s = split_dataset(&d, SplitRatio::default(), 7).unwrap();
        assert_eq!(s.test.num_students(), 2);
        assert_eq!(s.valid.num_students(), 1);
        assert_eq!(s.train.num_students(), 7);
    }

    #[test]
    fn degenerate_ratio_puts_everyone_in_train() {
        let d = Dataset::from_interactions(&rows(5, 2)).unwrap();
        let r = SplitRatio {
            train: 1.0,
            valid_of_train: 0.0,
            test: 0.0,
        };
        let s = split_dataset(&d, r, 1).unwrap();
        assert_eq!(s.train.num_students(), 5);
        assert_eq!(s.valid.num_students() + s.test.num_students(), 0);
    }

    #[test]
    fn split_is_deterministic_and_needs_students() {
        let d = Dataset::from_interactions(&rows(20, 2)).unwrap();
        let ids = |s: &DataSplit| {
            [&s.train, &s.valid, &s.test].map(|x| x.students.iter().map(|s| s.student_id.clone()).collect::<Vec<_>>())
        };
        let a = split_dataset(&d, SplitRatio::default(), 3).unwrap();
        let b = split_dataset(&d, SplitRatio::default(), 3).unwrap();
        assert_eq!(ids(&a), ids(&b));
        let tiny = Dataset::from_interactions(&rows(2, 2)).unwrap();
        assert!(split_dataset(&tiny, SplitRatio::default(), 0).is_err());
        let bad = SplitRatio {
            train: 0.5,
            valid_of_train: 0.1,
            test: 0.2,
        };
        assert!(split_dataset(&d, bad, 0).is_err());
    }

    #[test]
    fn windows_chunk_long_sequences() {
        let d = Dataset::from_interactions(&rows(1, 250)).unwrap();
        let w = windows(&d, 100);
        assert_eq!(w.iter().map(Vec::len).collect::<Vec<_>>(), [100, 100, 50]);
        let table = DifficultyTable::default();
        let b: Vec<SequenceBatch> = make_batches(&d, &table, 100, 512).collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].num_valid(), 250);
        assert_eq!(b[0].questions[2 * 100 + 50], PAD);
        assert_eq!(b[0].q_difficulty_bins[2 * 100 + 50], PAD_BIN);
    }

    #[test]
    fn short_sequence_gives_one_padded_window() {
        let d = Dataset::from_interactions(&rows(1, 5)).unwrap();
        let table = DifficultyTable::default();
        let b: Vec<SequenceBatch> = make_batches(&d, &table, 100, 8).collect();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].batch, 1);
        assert_eq!(b[0].num_valid(), 5);
        assert_eq!(b[0].questions.len(), 100);
    }

    #[test]
    fn batch_sizes_follow_window_count() {
        // 600 windows of length 1
        let d = Dataset::from_interactions(&rows(600, 1)).unwrap();
        let table = DifficultyTable::default();
        let sizes: Vec<usize> = make_batches(&d, &table, 100, 512).map(|b| b.batch).collect();
        assert_eq!(sizes, [512, 88]);
    }

    #[test]
    fn empty_dataset_yields_no_batches() {
        let d = Dataset::from_interactions(&[]).unwrap();
        let table = DifficultyTable::default();
        assert_eq!(make_batches(&d, &table, 100, 4).count(), 0);
    }

    #[test]
    fn kfold_partitions_students() {
        let d = Dataset::from_interactions(&rows(50, 2)).unwrap();
        let folds = kfold_splits(&d, 5, 0.1, 9).unwrap();
        let mut seen = std::collections::HashSet::new();
        for f in &folds {
            assert_eq!(f.test.num_students(), 10);
            for s in &f.test.students {
                assert!(seen.insert(s.student_id.clone()));
            }
        }
        assert_eq!(seen.len(), 50);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_rows() -> impl Strategy<Value = Vec<Interaction>> {
            prop::collection::vec((0u8..12, 0u8..9, 0u8..4, 0u8..2, 0i64..50), 1..300).prop_map(|v| {
                v.into_iter()
                    .map(|(s, q, c, r, t)| Interaction {
                        student_id: format!("s{s}"),
                        question_id: format!("q{q}"),
                        concept_id: format!("c{c}"),
                        response: r,
                        timestamp: Some(t),
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn windows_round_trip(rows in arb_rows(), max_len in 1usize..40) {
                let d = Dataset::from_interactions(&rows).unwrap();
                let table = DifficultyTable::default();
                let mut rebuilt: Vec<Step> = Vec::new();
                for b in make_batches(&d, &table, max_len, 3) {
                    for i in 0..b.batch {
                        rebuilt.extend(b.row_steps(i));
                    }
                }
                let original: Vec<Step> = d.students.iter().flat_map(|s| s.steps.clone()).collect();
                prop_assert_eq!(rebuilt, original);
            }

            #[test]
            fn splits_are_disjoint(rows in arb_rows(), seed in any::<u64>()) {
                let d = Dataset::from_interactions(&rows).unwrap();
                prop_assume!(d.num_students() >= 5);
                let s = split_dataset(&d, SplitRatio::default(), seed).unwrap();
                let ids = |x: &Dataset| x.students.iter().map(|s| s.student_id.clone()).collect::<std::collections::HashSet<_>>();
                let (a, b, c) = (ids(&s.train), ids(&s.valid), ids(&s.test));
                prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
                prop_assert_eq!(a.len() + b.len() + c.len(), d.num_students());
            }
        }
    }
}
