//! Training runs and ablation grids.

use std::path::Path;

use diffcl_core::augment::{AugmentationConfig, Strategy};
use diffcl_core::text::{
    char_length_analysis, evaluate_difficulty_prediction, fit_text_model, holdout_split, training_pairs, ItemTexts,
    LengthAnalysisConfig, LengthReport, RmseRow,
};
use diffcl_core::training::{evaluate, mean_std, EvalReport};
use diffcl_core::{
    compute_ctt, kfold_splits, train, DataSplit, DifficultyTable, ExperimentConfig, ItemKind, Model, TrainOutcome,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::Prepared;
use crate::CliError;

pub struct RunResult {
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

/// Train on `split` with `seed` driving initialisation, augmentation,
/// dropout and batch order, then score the best model on the test split.
pub fn train_and_test(cfg: &ExperimentConfig, split: &DataSplit, table: &DifficultyTable, seed: u64) -> Result<RunResult, CliError> {
    let mut tcfg = cfg.training.clone();
    tcfg.seed = seed;
    let model = Model::new(
        cfg.model.clone(),
        split.train.question_vocab.table_rows(),
        split.train.concept_vocab.table_rows(),
        seed,
    )?;
    let outcome = train(model, split, table.clone(), tcfg.clone(), cfg.augmentation.clone())?;
    let test = evaluate(&outcome.model, &split.test, table, tcfg.batch_size)?;
    Ok(RunResult { outcome, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub setting: String,
    pub seed: u64,
    /// Fold index, or `-1` for the prepared split.
    pub fold: i64,
    pub auc: f64,
    pub rmse: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub runs: usize,
}

pub fn summarize(setting: &str, rows: &[RunRow]) -> SettingSummary {
    let mine: Vec<&RunRow> = rows.iter().filter(|r| r.setting == setting).collect();
    let (mean_auc, std_auc) = mean_std(&mine.iter().map(|r| r.auc).collect::<Vec<_>>());
    let (mean_rmse, std_rmse) = mean_std(&mine.iter().map(|r| r.rmse).collect::<Vec<_>>());
    SettingSummary {
        setting: setting.to_string(),
        mean_auc,
        std_auc,
        mean_rmse,
        std_rmse,
        runs: mine.len(),
    }
}

/// Where each run's train/valid/test students come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// The split written by `prepare`.
    Prepared,
    /// Student-level k-fold cross-validation over all prepared students.
    KFold(usize),
}

/// Run one setting over every seed (and fold). Each fold's difficulties come
/// from its own training students.
pub fn run_setting(
    setting: &str,
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seeds: &[u64],
    protocol: Protocol,
    mut log: impl FnMut(&RunRow),
) -> Result<Vec<RunRow>, CliError> {
    let fallbacks = |t: DifficultyTable| t.with_fallbacks(cfg.difficulty.fallback_positive, cfg.difficulty.fallback_negative);
    let folds: Vec<(i64, DataSplit, DifficultyTable)> = match protocol {
        Protocol::Prepared => vec![(-1, prep.split.clone(), fallbacks(prep.table.clone())?)],
        Protocol::KFold(k) => kfold_splits(&prep.full(), k, cfg.split.valid_of_train, prep.manifest.seed)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let t = fallbacks(compute_ctt(&s.train))?;
                Ok((i as i64, s, t))
            })
            .collect::<Result<_, diffcl_core::Error>>()?,
    };
    let mut rows = Vec::new();
    for &seed in seeds {
        for (fold, split, table) in &folds {
            let r = train_and_test(cfg, split, table, seed)?;
            let row = RunRow {
                setting: setting.to_string(),
                seed,
                fold: *fold,
                auc: r.test.auc,
                rmse: r.test.rmse,
                epochs: r.outcome.history.len(),
            };
            log(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub const DIFF_CL: &str = "diff_cl";
pub const NON_DIFF_CL: &str = "non_diff_cl";

/// The two arms of the difficulty-aware negative ablation: unseen items get
/// `positive`/`1 - positive`, or `positive` in both views.
pub fn diff_cl_arms(cfg: &ExperimentConfig) -> [(&'static str, ExperimentConfig); 2] {
    let p = cfg.difficulty.fallback_positive;
    let mut with = cfg.clone();
    with.difficulty.fallback_negative = 1.0 - p;
    let mut without = cfg.clone();
    without.difficulty.fallback_negative = p;
    [(DIFF_CL, with), (NON_DIFF_CL, without)]
}

pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.0, 0.1, 0.5, 0.8, 1.0];

pub fn lambda_settings(cfg: &ExperimentConfig, grid: &[f64]) -> Vec<(String, ExperimentConfig)> {
    grid.iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.training.lambda_c = l;
            (format!("{l}"), c)
        })
        .collect()
}

/// Baseline without augmentation, each strategy alone, then the mixed
/// preset. A single strategy fires with its mixed-preset probability (span
/// cutoff borrows token cutoff's) unless `single_prob` is given.
pub fn augment_settings(cfg: &ExperimentConfig, single_prob: Option<f64>) -> Vec<(String, ExperimentConfig)> {
    let mixed = AugmentationConfig::mixed();
    let with = |a: AugmentationConfig| {
        let mut c = cfg.clone();
        c.augmentation = AugmentationConfig {
            rng_seed: cfg.augmentation.rng_seed,
            ..a
        };
        c
    };
    let mut out = vec![("baseline".to_string(), with(AugmentationConfig::none()))];
    for s in Strategy::ALL {
        let p = single_prob.unwrap_or(match s {
            Strategy::SpanCutoff => mixed.cutoff_prob,
            _ => mixed.prob(s),
        });
        out.push((s.name().to_string(), with(AugmentationConfig::single(s, p))));
    }
    out.push(("mixed".to_string(), with(mixed)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub kind: String,
    pub predictor: String,
    pub rmse: f64,
    pub pairs: usize,
}

pub const BASELINES: [f64; 2] = [0.75, 0.25];

/// Fit a text model on part of the training items of each kind and compare
/// it with the constant baselines on the held-out items.
pub fn difficulty_prediction(cfg: &ExperimentConfig, prep: &Prepared, holdout: f64) -> Result<Vec<DifficultyRow>, CliError> {
    let (Some(qt), Some(ct)) = (&prep.question_texts, &prep.concept_texts) else {
        return Err(CliError::MissingArtifact(vec![
            prep.dir.join(crate::artifacts::QUESTION_TEXTS),
            prep.dir.join(crate::artifacts::CONCEPT_TEXTS),
        ]));
    };
    let texts = ItemTexts {
        questions: qt,
        concepts: ct,
    };
    let mut rows = Vec::new();
    for kind in [ItemKind::Question, ItemKind::Concept] {
        let input = match kind {
            ItemKind::Question => cfg.text.input,
            ItemKind::Concept => diffcl_core::text::TextInput::Item,
        };
        let pairs = training_pairs(&prep.split.train, &prep.table, texts, kind, input);
        let (fit, held) = holdout_split(&pairs, holdout, cfg.text.seed);
        if fit.is_empty() || held.is_empty() {
            eprintln!("warning: too few {} items with text for a holdout comparison", kind.as_str());
            continue;
        }
        let mut tcfg = cfg.text.clone();
        tcfg.holdout_fraction = 0.0;
        let (model, _) = fit_text_model(&fit, &tcfg)?;
        for RmseRow { predictor, rmse } in evaluate_difficulty_prediction(&model, &held, &BASELINES)? {
            rows.push(DifficultyRow {
                kind: kind.as_str().into(),
                predictor,
                rmse,
                pairs: held.len(),
            });
        }
    }
    Ok(rows)
}

pub fn length_analysis(prep: &Prepared) -> Result<Option<LengthReport>, CliError> {
    let Some(qt) = &prep.question_texts else {
        return Ok(None);
    };
    let full = prep.full();
    let table = compute_ctt(&full);
    Ok(Some(char_length_analysis(&full, qt, &table, LengthAnalysisConfig::default())?))
}

/// Write `rows` and their per-setting summaries (in `order`).
pub fn write_grid(dir: &Path, stem: &str, order: &[String], rows: &[RunRow]) -> Result<Vec<SettingSummary>, CliError> {
    let summaries: Vec<SettingSummary> = order.iter().map(|s| summarize(s, rows)).collect();
    crate::artifacts::write_csv_rows(&dir.join(format!("{stem}_runs.csv")), rows)?;
    crate::artifacts::write_csv_rows(&dir.join(format!("{stem}.csv")), &summaries)?;
    Ok(summaries)
}
