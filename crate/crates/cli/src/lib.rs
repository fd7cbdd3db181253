//! The `diffcl` command-line harness.
//!
//! Exit codes: 0 success, 2 input error, 3 missing artifact, 4 training
//! divergence, 1 anything else.

pub mod artifacts;
pub mod experiments;
pub mod plots;
pub mod report;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffcl_core::dataset::{windows, write_interactions, write_texts, ColumnMapping};
use diffcl_core::synth::generate;
use diffcl_core::text::{
    fill_unseen, fit_text_model, holdout_split, training_pairs, write_length_csv, write_predictions_csv, FillModels,
    ItemTexts, TextInput, TextRegressor,
};
use diffcl_core::training::evaluate;
use diffcl_core::{DifficultySource, DifficultyTable, ExperimentConfig, ItemKind, Model, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::{ensure_dir, require, write_csv_rows, write_string, Layout, PrepareInputs, Prepared};
use crate::experiments::{Protocol, RunRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] diffcl_core::Error),
    #[error("missing artifact(s): {}; run the producing command first", list(.0))]
    MissingArtifact(Vec<PathBuf>),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("plotting failed: {0}")]
    Plot(String),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use diffcl_core::Error as E;
        match self {
            CliError::Core(E::Divergence { .. }) => 4,
            CliError::Core(
                E::Io { .. }
                | E::Csv { .. }
                | E::MissingColumns { .. }
                | E::EmptyDataset(_)
                | E::InvalidSplit(_)
                | E::OutOfRange { .. }
                | E::Config(_)
                | E::Serde(_),
            )
            | CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "diffcl", version, about = "Difficulty-aware contrastive knowledge tracing experiments")]
pub struct Cli {
    /// Root directory for every artifact.
    #[arg(long, global = true, env = "DIFFCL_OUT", default_value = "diffcl-out")]
    pub out: PathBuf,
    /// TOML config file with [model], [training], [augmentation], ... tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `--set training.lambda_c=0.5`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Split interactions and compute training-split difficulties.
    Prepare(PrepareArgs),
    /// Train a model on the prepared split.
    Train(TrainArgs),
    /// Score a trained run on the validation and test splits.
    Evaluate(EvaluateArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Fit text difficulty models and fill in unseen items.
    PredictDiff(PredictDiffArgs),
    /// Render a markdown report with figures from existing results.
    Report,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub students: Option<usize>,
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long)]
    pub concepts: Option<usize>,
    /// Questions answered by a single student each.
    #[arg(long)]
    pub rare_per_student: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Interaction log; defaults to the output of `synth`.
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub question_texts: Option<PathBuf>,
    #[arg(long)]
    pub concept_texts: Option<PathBuf>,
    /// Seed of the student-level split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "user_id")]
    pub student_col: String,
    #[arg(long, default_value = "question_id")]
    pub question_col: String,
    #[arg(long, default_value = "concept_id")]
    pub concept_col: String,
    #[arg(long, default_value = "response")]
    pub response_col: String,
    /// Empty string disables timestamp ordering.
    #[arg(long, default_value = "timestamp")]
    pub timestamp_col: String,
}

/// Flags mirroring the most used config keys; applied after `--set`.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub num_encoders: Option<usize>,
    #[arg(long)]
    pub layers_per_encoder: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Separate weights for each of the four encoder invocations.
    #[arg(long)]
    pub untied_encoders: bool,
    /// Learned negative-view tables instead of reflected lookups.
    #[arg(long)]
    pub separate_negative_tables: bool,
    /// Only the hard negative in the contrastive denominator.
    #[arg(long)]
    pub hard_negative_only: bool,
}

impl TrainFlags {
    pub fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("{k}={val}"));
            }
        };
        push("training.max_epochs", self.max_epochs.map(|x| x.to_string()));
        push("training.lambda_c", self.lambda_c.map(|x| format!("{x:?}")));
        push("training.batch_size", self.batch_size.map(|x| x.to_string()));
        push("training.learning_rate", self.learning_rate.map(|x| format!("{x:?}")));
        push("training.early_stop_patience", self.patience.map(|x| x.to_string()));
        push("training.temperature", self.temperature.map(|x| format!("{x:?}")));
        push("model.embed_dim", self.embed_dim.map(|x| x.to_string()));
        push("model.num_heads", self.num_heads.map(|x| x.to_string()));
        push("model.num_encoders", self.num_encoders.map(|x| x.to_string()));
        push("model.layers_per_encoder", self.layers_per_encoder.map(|x| x.to_string()));
        push("model.dropout", self.dropout.map(|x| format!("{x:?}")));
        push("model.max_len", self.max_len.map(|x| x.to_string()));
        push("model.untied_encoders", self.untied_encoders.then(|| "true".into()));
        push("model.separate_negative_tables", self.separate_negative_tables.then(|| "true".into()));
        push("training.hard_negative_only", self.hard_negative_only.then(|| "true".into()));
        v
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run name under `runs/`.
    #[arg(long, default_value = "default")]
    pub run: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use difficulties filled in by `predict-diff`.
    #[arg(long)]
    pub text_difficulty: bool,
    /// Write both augmented views of the first training batch to this CSV.
    #[arg(long)]
    pub dump_augmented: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value = "default")]
    pub run: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    DiffCl,
    LambdaSweep,
    AugmentSweep,
    DifficultyPrediction,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub which: Ablation,
    /// Seeds for model initialisation and training.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// lambda_c values for `lambda-sweep`.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Student-level k-fold cross-validation instead of the prepared split.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Firing probability for each strategy run alone in `augment-sweep`.
    #[arg(long)]
    pub single_prob: Option<f64>,
    /// Fraction of training items held out in `difficulty-prediction`.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictDiffArgs {
    /// Fraction of training items held out to report an RMSE.
    #[arg(long)]
    pub holdout: Option<f64>,
}

/// Load the config file (if any), then apply `--set` and command flags.
pub fn resolve_config(cli: &Cli, extra: &[String]) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(std::slice::from_ref(p))?;
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    cfg.apply_overrides(extra)?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let layout = Layout::new(&cli.out);
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, &layout, a),
        Command::Prepare(a) => cmd_prepare(cli, &layout, a),
        Command::Train(a) => cmd_train(cli, &layout, a),
        Command::Evaluate(a) => cmd_evaluate(cli, &layout, a),
        Command::Ablate(a) => cmd_ablate(cli, &layout, a),
        Command::PredictDiff(a) => cmd_predict_diff(cli, &layout, a),
        Command::Report => {
            let r = report::build_report(&layout)?;
            println!("report: {} ({} figures)", r.path.display(), r.figures.len());
            Ok(())
        }
    }
}

fn cmd_synth(cli: &Cli, layout: &Layout, a: &SynthArgs) -> Result<(), CliError> {
    let mut extra = Vec::new();
    let opts = [
        ("synth.students", a.students.map(|v| v as u64)),
        ("synth.questions", a.questions.map(|v| v as u64)),
        ("synth.concepts", a.concepts.map(|v| v as u64)),
        ("synth.rare_questions_per_student", a.rare_per_student.map(|v| v as u64)),
        ("synth.seed", a.seed),
    ];
    for (k, v) in opts {
        if let Some(v) = v {
            extra.push(format!("{k}={v}"));
        }
    }
    let cfg = resolve_config(cli, &extra)?;
    let data = generate(&cfg.synth)?;
    let dir = layout.data();
    ensure_dir(&dir)?;
    write_interactions(&dir.join("interactions.csv"), &data.interactions)?;
    write_texts(&dir.join("question_texts.csv"), &data.question_texts)?;
    write_texts(&dir.join("concept_texts.csv"), &data.concept_texts)?;
    write_csv_rows(&dir.join("questions_truth.csv"), &data.questions)?;
    #[derive(Serialize)]
    struct Ability<'a> {
        student_id: &'a str,
        ability: f64,
    }
    let abilities: Vec<Ability> = data
        .abilities
        .iter()
        .map(|(s, &ability)| Ability { student_id: s, ability })
        .collect();
    write_csv_rows(&dir.join("abilities.csv"), &abilities)?;
    println!(
        "synth: {} interactions, {} students, {} questions -> {}",
        data.interactions.len(),
        data.abilities.len(),
        data.questions.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_prepare(cli: &Cli, layout: &Layout, a: &PrepareArgs) -> Result<(), CliError> {
    let cfg = resolve_config(cli, &[])?;
    let data = layout.data();
    let interactions = a.interactions.clone().unwrap_or_else(|| data.join("interactions.csv"));
    let side = |given: &Option<PathBuf>, default: &str| -> Option<PathBuf> {
        match given {
            Some(p) if p.exists() => Some(p.clone()),
            Some(p) => {
                eprintln!("warning: text file {} not found; text features unavailable", p.display());
                None
            }
            None => Some(data.join(default)).filter(|p| p.exists()),
        }
    };
    let qt = side(&a.question_texts, "question_texts.csv");
    let ct = side(&a.concept_texts, "concept_texts.csv");
    let mapping = ColumnMapping {
        student: a.student_col.clone(),
        question: a.question_col.clone(),
        concept: a.concept_col.clone(),
        response: a.response_col.clone(),
        timestamp: Some(a.timestamp_col.clone()).filter(|s| !s.is_empty()),
        delimiter: ColumnMapping::for_path(&interactions).delimiter,
    };
    let inputs = PrepareInputs {
        interactions: &interactions,
        question_texts: qt.as_deref(),
        concept_texts: ct.as_deref(),
        mapping,
        seed: a.seed,
    };
    let m = artifacts::prepare(&inputs, &cfg, &layout.prepared())?;
    let s = &m.stats;
    println!(
        "prepare: {} students ({} train / {} valid / {} test), {} interactions ({} dropped), {} questions, {} concepts",
        s.students, s.train_students, s.valid_students, s.test_students, s.interactions, s.rows_dropped, s.questions, s.concepts
    );
    println!(
        "prepare: {} of {} test questions unseen in training; text features {}",
        s.unseen_test_questions,
        s.test_questions,
        if m.text_features_available { "available" } else { "unavailable" }
    );
    Ok(())
}

/// Difficulty table for training: CTT values, optionally with text-model
/// fills, and the configured fallbacks.
fn training_table(cfg: &ExperimentConfig, layout: &Layout, prep: &Prepared) -> Result<DifficultyTable, CliError> {
    if !cfg.difficulty.use_text_model {
        return Ok(prep.table.clone());
    }
    let p = layout.difficulty().join(artifacts::TEXT_DIFFICULTY);
    require(std::slice::from_ref(&p))?;
    let s = &prep.split.train;
    Ok(DifficultyTable::read_csv(&p, &s.question_vocab, &s.concept_vocab, DifficultySource::TextModel)?
        .with_fallbacks(cfg.difficulty.fallback_positive, cfg.difficulty.fallback_negative)?)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    split: &'a str,
    auc: f64,
    rmse: f64,
}

fn cmd_train(cli: &Cli, layout: &Layout, a: &TrainArgs) -> Result<(), CliError> {
    let mut extra = a.flags.overrides();
    if let Some(s) = a.seed {
        extra.push(format!("training.seed={s}"));
    }
    if a.text_difficulty {
        extra.push("difficulty.use_text_model=true".into());
    }
    let cfg = resolve_config(cli, &extra)?;
    let prep = Prepared::load(&layout.prepared(), &cfg)?;
    let table = training_table(&cfg, layout, &prep)?;
    let dir = layout.run(&a.run);
    ensure_dir(&dir)?;
    write_string(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    if let Some(path) = &a.dump_augmented {
        dump_augmented(&cfg, &prep, &table, path)?;
    }
    let seed = cfg.training.seed;
    match experiments::train_and_test(&cfg, &prep.split, &table, seed) {
        Ok(r) => {
            write_csv_rows(&dir.join("history.csv"), &r.outcome.history)?;
            r.outcome.model.save(&dir.join("model.json"))?;
            write_csv_rows(
                &dir.join("metrics.csv"),
                &[MetricRow {
                    split: "test",
                    auc: r.test.auc,
                    rmse: r.test.rmse,
                }],
            )?;
            println!(
                "train: {} epochs, best valid AUC {:.4} at epoch {}; test AUC {:.4} RMSE {:.4} -> {}",
                r.outcome.history.len(),
                r.outcome.best_valid_auc,
                r.outcome.best_epoch,
                r.test.auc,
                r.test.rmse,
                dir.display()
            );
            Ok(())
        }
        Err(CliError::Core(diffcl_core::Error::Divergence { epoch, history })) => {
            write_csv_rows(&dir.join("history.csv"), &history)?;
            Err(diffcl_core::Error::Divergence { epoch, history }.into())
        }
        Err(e) => Err(e),
    }
}

fn dump_augmented(cfg: &ExperimentConfig, prep: &Prepared, table: &DifficultyTable, path: &Path) -> Result<(), CliError> {
    let train = &prep.split.train;
    let model = Model::new(cfg.model.clone(), 2, 2, 0)?;
    let trainer = Trainer::new(model, table.clone(), cfg.augmentation.clone(), cfg.training.clone(), train)?;
    let batch: Vec<_> = windows(train, cfg.model.max_len).into_iter().take(cfg.training.batch_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    rng.set_stream(1);
    #[derive(Serialize)]
    struct Row<'a> {
        view: u8,
        row: usize,
        position: usize,
        question_id: &'a str,
        concept_id: &'a str,
        response: u8,
    }
    let (qv, cv) = (&train.question_vocab, &train.concept_vocab);
    let views = [
        trainer.pipeline().apply(&batch, &mut rng).sequences,
        trainer.pipeline().apply(&batch, &mut rng).sequences,
    ];
    let mut rows = Vec::new();
    for (v, seqs) in views.iter().enumerate() {
        for (i, s) in seqs.iter().enumerate() {
            for (t, st) in s.iter().enumerate() {
                rows.push(Row {
                    view: v as u8 + 1,
                    row: i,
                    position: t,
                    question_id: qv.id_of(st.question).unwrap_or("<mask>"),
                    concept_id: cv.id_of(st.concept).unwrap_or("<mask>"),
                    response: st.response,
                });
            }
        }
    }
    write_csv_rows(path, &rows)?;
    println!("train: wrote augmented views of {} sequences to {}", batch.len(), path.display());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, layout: &Layout, a: &EvaluateArgs) -> Result<(), CliError> {
    let dir = layout.run(&a.run);
    let model_path = dir.join("model.json");
    require(std::slice::from_ref(&model_path))?;
    // The run's own config decides the difficulty table it was trained with.
    let cfg = match dir.join("config.toml") {
        p if p.exists() => ExperimentConfig::load(&p)?,
        _ => resolve_config(cli, &[])?,
    };
    let prep = Prepared::load(&layout.prepared(), &cfg)?;
    let table = training_table(&cfg, layout, &prep)?;
    let model = Model::load(&model_path)?;
    let mut rows = Vec::new();
    for (name, d) in [("valid", &prep.split.valid), ("test", &prep.split.test)] {
        let r = evaluate(&model, d, &table, cfg.training.batch_size)?;
        println!("{name}: AUC {:.4} RMSE {:.4}", r.auc, r.rmse);
        rows.push(MetricRow {
            split: name,
            auc: r.auc,
            rmse: r.rmse,
        });
    }
    write_csv_rows(&dir.join("evaluation.csv"), &rows)?;
    Ok(())
}

fn cmd_ablate(cli: &Cli, layout: &Layout, a: &AblateArgs) -> Result<(), CliError> {
    if a.seeds.is_empty() {
        return Err(CliError::Usage("--seeds must list at least one seed".into()));
    }
    let cfg = resolve_config(cli, &a.flags.overrides())?;
    let prep = Prepared::load(&layout.prepared(), &cfg)?;
    let dir = layout.ablations();
    ensure_dir(&dir)?;
    let protocol = match a.folds {
        None | Some(0) => Protocol::Prepared,
        Some(1) => return Err(CliError::Usage("--folds needs at least 2 folds".into())),
        Some(k) => Protocol::KFold(k),
    };
    let log = |r: &RunRow| {
        let fold = if r.fold >= 0 { format!(" fold {}", r.fold) } else { String::new() };
        println!("  {} seed {}{fold}: AUC {:.4} RMSE {:.4} ({} epochs)", r.setting, r.seed, r.auc, r.rmse, r.epochs);
    };
    let grid = |stem: &str, settings: Vec<(String, ExperimentConfig)>| -> Result<(), CliError> {
        let mut rows = Vec::new();
        for (name, c) in &settings {
            rows.extend(experiments::run_setting(name, c, &prep, &a.seeds, protocol, log)?);
        }
        let order: Vec<String> = settings.into_iter().map(|s| s.0).collect();
        let summaries = experiments::write_grid(&dir, stem, &order, &rows)?;
        for s in &summaries {
            println!(
                "{stem}: {} AUC {:.4} ± {:.4} RMSE {:.4} ± {:.4} ({} runs)",
                s.setting, s.mean_auc, s.std_auc, s.mean_rmse, s.std_rmse, s.runs
            );
        }
        let fig = dir.join(format!("{stem}.svg"));
        if stem == "lambda_sweep" {
            let pts = summaries
                .iter()
                .filter_map(|s| Some((s.setting.parse::<f64>().ok()?, s.mean_auc)))
                .collect();
            plots::line_chart(&fig, "Contrastive loss weight", "lambda_c", "test AUC", &[plots::Series {
                name: "AUC".into(),
                points: pts,
            }])?;
        } else {
            let bars: Vec<plots::Bar> = summaries
                .iter()
                .map(|s| plots::Bar {
                    label: s.setting.clone(),
                    value: s.mean_auc,
                    err: s.std_auc,
                })
                .collect();
            plots::bar_chart(&fig, stem, "test AUC", &bars)?;
        }
        Ok(())
    };
    match a.which {
        Ablation::DiffCl => grid(
            "diff_cl",
            experiments::diff_cl_arms(&cfg).into_iter().map(|(n, c)| (n.to_string(), c)).collect(),
        ),
        Ablation::LambdaSweep => {
            let g = a.grid.clone().unwrap_or_else(|| experiments::DEFAULT_LAMBDA_GRID.to_vec());
            if let Some(bad) = g.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(CliError::Usage(format!("lambda {bad} outside [0, 1]")));
            }
            grid("lambda_sweep", experiments::lambda_settings(&cfg, &g))
        }
        Ablation::AugmentSweep => {
            if let Some(p) = a.single_prob.filter(|p| !(0.0..=1.0).contains(p)) {
                return Err(CliError::Usage(format!("--single-prob {p} outside [0, 1]")));
            }
            grid("augment_sweep", experiments::augment_settings(&cfg, a.single_prob))
        }
        Ablation::DifficultyPrediction => {
            if !(a.holdout > 0.0 && a.holdout < 1.0) {
                return Err(CliError::Usage(format!("--holdout {} must be in (0, 1)", a.holdout)));
            }
            let rows = experiments::difficulty_prediction(&cfg, &prep, a.holdout)?;
            write_csv_rows(&dir.join("difficulty_prediction.csv"), &rows)?;
            for r in &rows {
                println!("difficulty_prediction: {} {} RMSE {:.3} on {} items", r.kind, r.predictor, r.rmse, r.pairs);
            }
            let bars: Vec<plots::Bar> = rows
                .iter()
                .map(|r| plots::Bar {
                    label: format!("{}:{}", r.kind, r.predictor),
                    value: r.rmse,
                    err: 0.0,
                })
                .collect();
            plots::bar_chart(&dir.join("difficulty_prediction.svg"), "Difficulty prediction RMSE (0-100)", "RMSE", &bars)?;
            if let Some(rep) = experiments::length_analysis(&prep)? {
                write_length_csv(&dir.join("char_length.csv"), &rep)?;
                let mid = |b: &diffcl_core::text::LengthBucket| (b.lower + b.upper) as f64 / 2.0;
                plots::line_chart(
                    &dir.join("char_length.svg"),
                    "Correctness by question length",
                    "characters",
                    "correctness",
                    &[
                        plots::Series {
                            name: "mean".into(),
                            points: rep.buckets.iter().map(|b| (mid(b), b.mean_correctness)).collect(),
                        },
                        plots::Series {
                            name: "median".into(),
                            points: rep.buckets.iter().map(|b| (mid(b), b.median_correctness)).collect(),
                        },
                    ],
                )?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EvalRow<'a> {
    kind: &'a str,
    predictor: String,
    rmse: f64,
    set: &'a str,
}

fn cmd_predict_diff(cli: &Cli, layout: &Layout, a: &PredictDiffArgs) -> Result<(), CliError> {
    let mut extra = Vec::new();
    if let Some(h) = a.holdout {
        extra.push(format!("text.holdout_fraction={h:?}"));
    }
    let cfg = resolve_config(cli, &extra)?;
    let prep = Prepared::load(&layout.prepared(), &cfg)?;
    let (Some(qt), Some(ct)) = (&prep.question_texts, &prep.concept_texts) else {
        return Err(CliError::MissingArtifact(vec![
            prep.dir.join(artifacts::QUESTION_TEXTS),
            prep.dir.join(artifacts::CONCEPT_TEXTS),
        ]));
    };
    let texts = ItemTexts {
        questions: qt,
        concepts: ct,
    };
    let dir = layout.difficulty();
    ensure_dir(&dir)?;
    let mut fitted = Vec::new();
    let mut evals = Vec::new();
    for kind in [ItemKind::Question, ItemKind::Concept] {
        let input = if kind == ItemKind::Question { cfg.text.input } else { TextInput::Item };
        let pairs = training_pairs(&prep.split.train, &prep.table, texts, kind, input);
        if pairs.is_empty() {
            eprintln!("warning: no {} items with text in the training split", kind.as_str());
            fitted.push(None);
            continue;
        }
        let (model, rep) = fit_text_model(&pairs, &cfg.text)?;
        model.save(&dir.join(format!("{}_model.json", kind.as_str())))?;
        let (_, held) = holdout_split(&pairs, cfg.text.holdout_fraction, cfg.text.seed);
        let (set, scored): (&str, &[_]) = if held.is_empty() { ("train", &pairs) } else { ("holdout", &held) };
        for r in diffcl_core::text::evaluate_difficulty_prediction(&model, scored, &experiments::BASELINES)? {
            evals.push(EvalRow {
                kind: kind.as_str(),
                predictor: r.predictor,
                rmse: r.rmse,
                set,
            });
        }
        println!(
            "predict-diff: {} model on {} items, train RMSE {:.3}{}",
            kind.as_str(),
            rep.train_pairs,
            rep.train_rmse,
            rep.holdout_rmse.map(|h| format!(", holdout RMSE {h:.3}")).unwrap_or_default()
        );
        fitted.push(Some(model));
    }
    let models = FillModels {
        question: fitted[0].as_ref().map(|m| m as &dyn TextRegressor),
        concept: fitted[1].as_ref().map(|m| m as &dyn TextRegressor),
    };
    let filled = fill_unseen(&prep.table, models, texts, &prep.split, cfg.text.input);
    let (qv, cv) = (&prep.split.train.question_vocab, &prep.split.train.concept_vocab);
    filled.write_csv(&dir.join(artifacts::TEXT_DIFFICULTY), qv, cv)?;
    write_predictions_csv(&dir.join("predictions.csv"), &filled, qv, cv)?;
    write_csv_rows(&dir.join("evaluation.csv"), &evals)?;
    let n_pred = [ItemKind::Question, ItemKind::Concept]
        .iter()
        .map(|&k| filled.entries(k).filter(|(_, e)| e.source == DifficultySource::TextModel).count())
        .sum::<usize>();
    println!("predict-diff: filled {n_pred} unseen items -> {}", dir.display());
    Ok(())
}
