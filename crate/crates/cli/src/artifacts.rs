//! On-disk layout of everything the harness reads and writes.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffcl_core::dataset::{read_interactions, write_interactions, write_texts, ColumnMapping};
use diffcl_core::{DataSplit, Dataset, DifficultySource, DifficultyTable, ExperimentConfig, SplitRatio, TextMap, Vocab};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const SPLIT_FILES: [&str; 3] = ["train.csv", "valid.csv", "test.csv"];
pub const DIFFICULTY: &str = "difficulty.csv";
pub const VOCAB: &str = "vocab.json";
pub const QUESTION_TEXTS: &str = "question_texts.csv";
pub const CONCEPT_TEXTS: &str = "concept_texts.csv";
pub const TEXT_DIFFICULTY: &str = "difficulty_text.csv";

/// Subdirectories of the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }

    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn ablations(&self) -> PathBuf {
        self.root.join("ablations")
    }

    pub fn difficulty(&self) -> PathBuf {
        self.root.join("difficulty")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub fn ensure_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

pub fn write_string(path: &Path, s: &str) -> Result<(), CliError> {
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

/// Fail with a missing-artifact error unless every path exists.
pub fn require(paths: &[PathBuf]) -> Result<(), CliError> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.exists()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(missing))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareStats {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub students: usize,
    pub interactions: usize,
    pub questions: usize,
    pub concepts: usize,
    pub train_students: usize,
    pub valid_students: usize,
    pub test_students: usize,
    /// Distinct test questions never answered in training.
    pub unseen_test_questions: usize,
    pub test_questions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub ratio: SplitRatio,
    pub splits: Vec<String>,
    pub difficulty: String,
    pub vocab: String,
    pub question_texts: Option<String>,
    pub concept_texts: Option<String>,
    pub text_features_available: bool,
    pub stats: PrepareStats,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    questions: Vocab,
    concepts: Vocab,
}

pub struct PrepareInputs<'a> {
    pub interactions: &'a Path,
    pub question_texts: Option<&'a Path>,
    pub concept_texts: Option<&'a Path>,
    pub mapping: ColumnMapping,
    pub seed: u64,
}

fn question_set(d: &Dataset) -> BTreeSet<usize> {
    d.students.iter().flat_map(|s| s.steps.iter().map(|st| st.question)).collect()
}

/// Split, compute training-split difficulties and write everything under
/// `dir`. Reruns with the same inputs produce identical files.
pub fn prepare(inputs: &PrepareInputs<'_>, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest, CliError> {
    let (rows, load) = read_interactions(inputs.interactions, &inputs.mapping)?;
    if rows.is_empty() {
        return Err(diffcl_core::Error::EmptyDataset(format!(
            "{} has no valid rows ({} dropped)",
            inputs.interactions.display(),
            load.rows_dropped
        ))
        .into());
    }
    let data = Dataset::from_interactions(&rows)?;
    let ratio = cfg.split.ratio();
    let split = diffcl_core::split_dataset(&data, ratio, inputs.seed)?;
    let table = diffcl_core::compute_ctt(&split.train);

    ensure_dir(dir)?;
    for (name, part) in SPLIT_FILES.iter().zip([&split.train, &split.valid, &split.test]) {
        write_interactions(&dir.join(name), &part.to_interactions())?;
    }
    let (qv, cv) = (&*data.question_vocab, &*data.concept_vocab);
    table.write_csv(&dir.join(DIFFICULTY), qv, cv)?;
    let vocab = VocabFile {
        questions: qv.clone(),
        concepts: cv.clone(),
    };
    let json = serde_json::to_string_pretty(&vocab).map_err(|e| diffcl_core::Error::Serde(e.to_string()))?;
    write_string(&dir.join(VOCAB), &json)?;

    let copy_texts = |src: Option<&Path>, name: &str| -> Result<Option<String>, CliError> {
        match src {
            Some(p) if p.exists() => {
                let texts = diffcl_core::dataset::load_texts(p)?;
                write_texts(&dir.join(name), &texts)?;
                Ok(Some(name.to_string()))
            }
            _ => {
                // Stale copies from an earlier run would otherwise be picked up.
                let _ = fs::remove_file(dir.join(name));
                Ok(None)
            }
        }
    };
    let question_texts = copy_texts(inputs.question_texts, QUESTION_TEXTS)?;
    let concept_texts = copy_texts(inputs.concept_texts, CONCEPT_TEXTS)?;

    let train_q = question_set(&split.train);
    let test_q = question_set(&split.test);
    let manifest = Manifest {
        seed: inputs.seed,
        ratio,
        splits: SPLIT_FILES.iter().map(|s| s.to_string()).collect(),
        difficulty: DIFFICULTY.into(),
        vocab: VOCAB.into(),
        text_features_available: question_texts.is_some() || concept_texts.is_some(),
        question_texts,
        concept_texts,
        stats: PrepareStats {
            rows_read: load.rows_read,
            rows_dropped: load.rows_dropped,
            students: data.num_students(),
            interactions: data.num_interactions(),
            questions: qv.len(),
            concepts: cv.len(),
            train_students: split.train.num_students(),
            valid_students: split.valid.num_students(),
            test_students: split.test.num_students(),
            unseen_test_questions: test_q.difference(&train_q).count(),
            test_questions: test_q.len(),
        },
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| diffcl_core::Error::Serde(e.to_string()))?;
    write_string(&dir.join(MANIFEST), &json)?;
    Ok(manifest)
}

/// Everything `prepare` wrote, loaded back.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub split: DataSplit,
    /// Training-split difficulties with the configured fallbacks.
    pub table: DifficultyTable,
    pub question_texts: Option<TextMap>,
    pub concept_texts: Option<TextMap>,
}

impl Prepared {
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let mf = dir.join(MANIFEST);
        require(std::slice::from_ref(&mf))?;
        let text = fs::read_to_string(&mf).map_err(|e| CliError::io(&mf, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| diffcl_core::Error::Serde(e.to_string()))?;
        let mut needed: Vec<PathBuf> = manifest.splits.iter().map(|s| dir.join(s)).collect();
        needed.push(dir.join(&manifest.difficulty));
        needed.push(dir.join(&manifest.vocab));
        require(&needed)?;

        let vpath = dir.join(&manifest.vocab);
        let vtext = fs::read_to_string(&vpath).map_err(|e| CliError::io(&vpath, e))?;
        let vocab: VocabFile = serde_json::from_str(&vtext).map_err(|e| diffcl_core::Error::Serde(e.to_string()))?;
        let qv = Arc::new(vocab.questions);
        let cv = Arc::new(vocab.concepts);
        let load_texts = |name: &Option<String>| -> Result<Option<TextMap>, CliError> {
            match name {
                Some(n) => {
                    let p = dir.join(n);
                    require(std::slice::from_ref(&p))?;
                    Ok(Some(diffcl_core::dataset::load_texts(&p)?))
                }
                None => Ok(None),
            }
        };
        let question_texts = load_texts(&manifest.question_texts)?;
        let concept_texts = load_texts(&manifest.concept_texts)?;

        let mapping = ColumnMapping::default();
        let mut parts = Vec::with_capacity(3);
        for s in &manifest.splits {
            let (rows, _) = read_interactions(&dir.join(s), &mapping)?;
            let mut d = Dataset::with_vocabs(&rows, Arc::clone(&qv), Arc::clone(&cv))?;
            d.question_texts = question_texts.clone().map(Arc::new);
            d.concept_texts = concept_texts.clone().map(Arc::new);
            parts.push(d);
        }
        let test = parts.pop().expect("three splits");
        let valid = parts.pop().expect("three splits");
        let train = parts.pop().expect("three splits");
        let table = DifficultyTable::read_csv(&dir.join(&manifest.difficulty), &qv, &cv, DifficultySource::Ctt)?
            .with_fallbacks(cfg.difficulty.fallback_positive, cfg.difficulty.fallback_negative)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            split: DataSplit {
                train,
                valid,
                test,
                ratio: manifest.ratio,
            },
            manifest,
            table,
            question_texts,
            concept_texts,
        })
    }

    /// All students of the three splits, for cross-validation.
    pub fn full(&self) -> Dataset {
        let s = &self.split;
        let students = s
            .train
            .students
            .iter()
            .chain(&s.valid.students)
            .chain(&s.test.students)
            .cloned()
            .collect();
        s.train.subset(students)
    }
}

/// Write rows with `serde` field names as the header.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| diffcl_core::Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| diffcl_core::Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Read rows written by [`write_csv_rows`].
pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| diffcl_core::Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| {
            diffcl_core::Error::Csv {
                path: path.to_path_buf(),
                source: e,
            }
            .into()
        })
}
