//! Combined BCE + contrastive objective, the training loop and k-fold CV.
//!
//! Each step runs the encoder four times: the unaugmented sequence for the
//! prediction loss, two augmented positive views, and the hard-negative
//! reading of the second view. Concept and question latents of the views
//! enter an InfoNCE loss whose negatives are the hard negative of the same
//! sequence plus the other in-batch second views.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationConfig, AugmentationPipeline, ReplacementIndex};
use crate::autograd::{Graph, Var};
use crate::dataset::{windows, DataSplit, Dataset, SequenceBatch, Step};
use crate::difficulty::{DifficultyTable, View};
use crate::encoder::{Latent, Model, Role};
use crate::error::{Error, Result};
use crate::metrics::{auc, rmse, PredictionRecord};
use crate::params::{Adam, AdamConfig, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda_c: f64,
    pub learning_rate: f64,
    /// Sequences per optimiser step.
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Each batch is processed as this many micro-batches whose gradients
    /// are averaged before one optimiser step.
    pub grad_accum_steps: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Use only the hard negative in the contrastive denominator.
    pub hard_negative_only: bool,
    /// Skip the contrastive branch entirely.
    pub bce_only: bool,
    pub bce_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.1,
            learning_rate: 1e-3,
            batch_size: 512,
            early_stop_patience: 10,
            max_epochs: 100,
            grad_accum_steps: 1,
            temperature: 0.1,
            seed: 0,
            hard_negative_only: false,
            bce_only: false,
            bce_eps: 1e-7,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return fail(format!("lambda_c = {} outside [0, 1]", self.lambda_c));
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 || self.max_epochs == 0 {
            return fail("batch_size, grad_accum_steps and max_epochs must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return fail(format!("temperature = {} must be positive", self.temperature));
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        Ok(())
    }
}

// ----- losses -----

/// Masked mean binary cross entropy with probabilities clamped by `eps`.
pub fn bce_loss(g: &mut Graph, probs: Var, responses: &[u8], mask: &[bool], eps: f64) -> Var {
    let shape = g.value(probs).shape().to_vec();
    let targets = Tensor::from_vec(&shape, responses.iter().map(|&r| f64::from(r)).collect());
    let m = Tensor::from_vec(&shape, mask.iter().map(|&v| f64::from(u8::from(v))).collect());
    g.bce(probs, &targets, &m, eps)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `-log(exp(s_p) / (exp(s_p) + sum exp(s_n)))` with `s = cos / temperature`.
pub fn info_nce_similarity(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    let sp = cosine(anchor, positive)? / temperature;
    let mut logits = vec![sp];
    for n in negatives {
        logits.push(cosine(anchor, n)? / temperature);
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - sp)
}

/// Per-sequence latents of one kind (`[B, D]` each).
#[derive(Clone, Copy, Debug)]
pub struct ViewLatents {
    pub view1: Var,
    pub view2: Var,
    pub negative: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveViews {
    pub concept: ViewLatents,
    pub question: ViewLatents,
}

/// Per-row InfoNCE losses `[B]`: row `i` contrasts `view1[i]` against
/// `view2[i]`, `negative[i]` and (unless `hard_only`) every `view2[j]`.
pub fn info_nce_rows(g: &mut Graph, v: &ViewLatents, temperature: f64, hard_only: bool) -> Var {
    let b = g.value(v.view1).rows();
    let a = g.l2_normalize_rows(v.view1);
    let p = g.l2_normalize_rows(v.view2);
    let n = g.l2_normalize_rows(v.negative);
    let inv_t = 1.0 / temperature;
    let an = g.rowwise_dot(a, n);
    let an = g.scale(an, inv_t);
    if hard_only {
        let ap = g.rowwise_dot(a, p);
        let ap = g.scale(ap, inv_t);
        let logits = g.concat_last(&[ap, an]);
        g.cross_entropy_rows(logits, &vec![0; b])
    } else {
        let ap = g.matmul_bt(a, p);
        let ap = g.scale(ap, inv_t);
        let logits = g.concat_last(&[ap, an]);
        let targets: Vec<usize> = (0..b).collect();
        g.cross_entropy_rows(logits, &targets)
    }
}

/// Mean over the concatenated concept and question per-row losses.
pub fn contrastive_loss(g: &mut Graph, views: &ContrastiveViews, temperature: f64, hard_only: bool) -> Var {
    let c = info_nce_rows(g, &views.concept, temperature, hard_only);
    let q = info_nce_rows(g, &views.question, temperature, hard_only);
    let c = g.mean_all(c);
    let q = g.mean_all(q);
    g.linear_combination(&[(c, 0.5), (q, 0.5)])
}

/// `(1 - lambda) * bce + lambda * cl`.
pub fn total_loss(g: &mut Graph, bce: Var, cl: Var, lambda_c: f64) -> Var {
    g.linear_combination(&[(bce, 1.0 - lambda_c), (cl, lambda_c)])
}

pub fn total_loss_value(bce: f64, cl: f64, lambda_c: f64) -> f64 {
    (1.0 - lambda_c) * bce + lambda_c * cl
}

// ----- evaluation -----

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub rmse: f64,
    pub records: Vec<PredictionRecord>,
}

/// Predictions at every valid position of `data`, windowed like training.
pub fn predict_records(model: &Model, data: &Dataset, table: &DifficultyTable, batch_size: usize) -> Result<Vec<PredictionRecord>> {
    let max_len = model.config().max_len;
    let wins = windows(data, max_len);
    let mut out = Vec::new();
    for chunk in wins.chunks(batch_size.max(1)) {
        let batch = batch_of(chunk, table, max_len);
        let probs = model.predict(&batch)?;
        for (p, (&m, &r)) in batch.valid_mask.iter().zip(&batch.responses).enumerate() {
            if m {
                out.push(PredictionRecord::new(probs.data()[p], r));
            }
        }
    }
    Ok(out)
}

/// AUC and RMSE pooled over all valid positions. Never augments.
pub fn evaluate(model: &Model, data: &Dataset, table: &DifficultyTable, batch_size: usize) -> Result<EvalReport> {
    let records = predict_records(model, data, table, batch_size)?;
    Ok(EvalReport {
        auc: auc(&records)?,
        rmse: rmse(&records)?,
        records,
    })
}

/// Pad to the longest sequence rather than `max_len`; causal layers make
/// the two equivalent at valid positions.
fn batch_of<S: AsRef<[Step]>>(seqs: &[S], table: &DifficultyTable, max_len: usize) -> SequenceBatch {
    let longest = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(1).clamp(1, max_len);
    SequenceBatch::from_sequences(seqs, table, longest)
}

// ----- training loop -----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub bce: f64,
    /// `NaN` when the contrastive branch is disabled.
    pub cl: f64,
    pub valid_auc: f64,
    pub valid_rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub bce: f64,
    pub cl: Option<f64>,
}

/// Patience counter on a metric that should increase.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    waited: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            waited: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.waited = 0;
            return StopDecision::Improved;
        }
        self.waited += 1;
        if self.waited >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
}

/// Optimiser, augmentation pipeline and RNG streams for one run.
pub struct Trainer {
    model: Model,
    table: DifficultyTable,
    pipeline: AugmentationPipeline,
    cfg: TrainingConfig,
    opt: Adam,
    frozen: Vec<(ParamId, usize)>,
    aug_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    view_dropout_rng: ChaCha8Rng,
    order_rng: ChaCha8Rng,
}

impl Trainer {
    /// `table` supplies difficulties for every lookup; `train` provides the
    /// vocabularies and the question-to-concept map for replacement.
    pub fn new(model: Model, table: DifficultyTable, acfg: AugmentationConfig, cfg: TrainingConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let replacement = ReplacementIndex::new(&table, train.question_concepts());
        let pipeline = AugmentationPipeline::new(
            AugmentationConfig {
                rng_seed: cfg.seed,
                ..acfg
            },
            replacement,
            train.question_vocab.mask_index(),
            train.concept_vocab.mask_index(),
            model.config().max_len,
        )?;
        let frozen = model.frozen_rows();
        let opt = Adam::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        });
        // Independent streams, so enabling one consumer never shifts another.
        let stream = |i: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(i);
            r
        };
        Ok(Self {
            model,
            table,
            pipeline,
            opt,
            frozen,
            aug_rng: stream(1),
            dropout_rng: stream(2),
            order_rng: stream(3),
            view_dropout_rng: stream(4),
            cfg,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn pipeline(&self) -> &AugmentationPipeline {
        &self.pipeline
    }

    pub fn table(&self) -> &DifficultyTable {
        &self.table
    }

    fn losses(&mut self, g: &mut Graph, seqs: &[Vec<Step>]) -> Result<(Var, Var, Option<Var>)> {
        let max_len = self.model.config().max_len;
        let base = batch_of(seqs, &self.table, max_len);
        let out = self.model.forward(
            g,
            &base,
            View::Positive,
            Role::Prediction,
            Some(&mut self.dropout_rng as &mut dyn RngCore),
        )?;
        let bce = bce_loss(g, out.probs, &base.responses, &base.valid_mask, self.cfg.bce_eps);
        if self.cfg.bce_only {
            return Ok((bce, bce, None));
        }
        let v1 = self.pipeline.apply(seqs, &mut self.aug_rng).sequences;
        let v2 = self.pipeline.apply(seqs, &mut self.aug_rng).sequences;
        let b1 = batch_of(&v1, &self.table, max_len);
        let b2 = batch_of(&v2, &self.table, max_len);
        let mut run = |g: &mut Graph, b: &SequenceBatch, view: View, role: Role| -> Result<Var> {
            let x = self.model.embed(g, b, view)?;
            self.model.encode(g, x, &b.valid_mask, role, Some(&mut self.view_dropout_rng as &mut dyn RngCore))
        };
        let h1 = run(g, &b1, View::Positive, Role::View1)?;
        let h2 = run(g, &b2, View::Positive, Role::View2)?;
        let hn = run(g, &b2, View::Negative, Role::Negative)?;
        let mut latents = |which| ViewLatents {
            view1: self.model.latent(g, h1, &b1.valid_mask, which),
            view2: self.model.latent(g, h2, &b2.valid_mask, which),
            negative: self.model.latent(g, hn, &b2.valid_mask, which),
        };
        let views = ContrastiveViews {
            concept: latents(Latent::Concept),
            question: latents(Latent::Question),
        };
        let cl = contrastive_loss(g, &views, self.cfg.temperature, self.cfg.hard_negative_only);
        let total = total_loss(g, bce, cl, self.cfg.lambda_c);
        Ok((total, bce, Some(cl)))
    }

    /// One optimiser step on `seqs`, split into `grad_accum_steps`
    /// micro-batches whose gradients are averaged.
    pub fn step(&mut self, seqs: &[Vec<Step>]) -> Result<StepLosses> {
        let parts = self.cfg.grad_accum_steps.min(seqs.len()).max(1);
        let chunk = seqs.len().div_ceil(parts);
        let mut acc: Vec<(ParamId, Tensor)> = Vec::new();
        let mut sums = (0.0, 0.0, 0.0);
        let mut n = 0usize;
        for micro in seqs.chunks(chunk) {
            let mut g = Graph::new();
            let (total, bce, cl) = self.losses(&mut g, micro)?;
            sums.0 += g.value(total).item();
            sums.1 += g.value(bce).item();
            sums.2 += cl.map_or(0.0, |c| g.value(c).item());
            let grads = g.param_grads(&g.backward(total));
            if acc.is_empty() {
                acc = grads;
            } else {
                merge_grads(&mut acc, grads);
            }
            n += 1;
        }
        if n > 1 {
            let s = 1.0 / n as f64;
            for (_, t) in &mut acc {
                t.scale_in_place(s);
            }
        }
        let k = n as f64;
        let losses = StepLosses {
            total: sums.0 / k,
            bce: sums.1 / k,
            cl: (!self.cfg.bce_only).then_some(sums.2 / k),
        };
        if losses.total.is_finite() && acc.iter().all(|(_, t)| t.all_finite()) {
            self.opt.step(&mut self.model.params, &acc, &self.frozen);
        }
        Ok(losses)
    }

    /// One pass over shuffled training windows. Returns sequence-weighted
    /// mean losses.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<StepLosses> {
        let mut wins = windows(train, self.model.config().max_len);
        wins.shuffle(&mut self.order_rng);
        let mut tot = (0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for batch in wins.chunks(self.cfg.batch_size) {
            let l = self.step(batch)?;
            let w = batch.len() as f64;
            tot.0 += l.total * w;
            tot.1 += l.bce * w;
            tot.2 += l.cl.unwrap_or(f64::NAN) * w;
            seen += batch.len();
        }
        let s = seen.max(1) as f64;
        Ok(StepLosses {
            total: tot.0 / s,
            bce: tot.1 / s,
            cl: (!self.cfg.bce_only).then_some(tot.2 / s),
        })
    }

    /// Train until `max_epochs` or until validation AUC fails to improve for
    /// `early_stop_patience` consecutive epochs.
    pub fn fit(mut self, split: &DataSplit) -> Result<TrainOutcome> {
        let mut history = Vec::new();
        let mut stopper = EarlyStopping::new(self.cfg.early_stop_patience);
        let mut best = self.model.clone();
        for epoch in 1..=self.cfg.max_epochs {
            let losses = match self.train_epoch(&split.train) {
                Ok(l) if l.total.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::Divergence { epoch, history }),
                Err(e) => return Err(e),
            };
            let report = evaluate(&self.model, &split.valid, &self.table, self.cfg.batch_size)?;
            history.push(EpochRecord {
                epoch,
                train_loss: losses.total,
                bce: losses.bce,
                cl: losses.cl.unwrap_or(f64::NAN),
                valid_auc: report.auc,
                valid_rmse: report.rmse,
            });
            match stopper.update(epoch, report.auc) {
                StopDecision::Improved => best = self.model.clone(),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        Ok(TrainOutcome {
            model: best,
            history,
            best_epoch: stopper.best_epoch(),
            best_valid_auc: stopper.best(),
        })
    }
}

fn merge_grads(acc: &mut [(ParamId, Tensor)], more: Vec<(ParamId, Tensor)>) {
    for (id, t) in more {
        match acc.iter_mut().find(|(i, _)| *i == id) {
            Some((_, a)) => a.add_assign(&t),
            None => unreachable!("every micro-batch touches the same parameters"),
        }
    }
}

/// Build a trainer and fit it on `split`.
pub fn train(model: Model, split: &DataSplit, table: DifficultyTable, cfg: TrainingConfig, acfg: AugmentationConfig) -> Result<TrainOutcome> {
    Trainer::new(model, table, acfg, cfg, &split.train)?.fit(split)
}

// ----- cross-validation -----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldMetrics>,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_rmse: f64,
    pub std_rmse: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Run `runner` on each student-level fold and summarise.
pub fn k_fold_cv<F>(data: &Dataset, k: usize, valid_of_train: f64, seed: u64, mut runner: F) -> Result<CvSummary>
where
    F: FnMut(usize, &DataSplit) -> Result<(f64, f64)>,
{
    let splits = crate::dataset::kfold_splits(data, k, valid_of_train, seed)?;
    let mut folds = Vec::with_capacity(k);
    for (i, s) in splits.iter().enumerate() {
        let (auc, rmse) = runner(i, s)?;
        folds.push(FoldMetrics { fold: i, auc, rmse });
    }
    let (mean_auc, std_auc) = mean_std(&folds.iter().map(|f| f.auc).collect::<Vec<_>>());
    let (mean_rmse, std_rmse) = mean_std(&folds.iter().map(|f| f.rmse).collect::<Vec<_>>());
    Ok(CvSummary {
        folds,
        mean_auc,
        std_auc,
        mean_rmse,
        std_rmse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_dataset, Interaction, SplitRatio};
    use crate::difficulty::compute_ctt;
    use crate::encoder::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            num_heads: 2,
            layers_per_encoder: 1,
            num_encoders: 1,
            max_len: 20,
            conv_kernel_size: 3,
            ffn_multiplier: 2,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    /// Students with a latent ability answering questions of latent
    /// difficulty through a logistic link.
    fn toy_dataset(students: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qdiff: Vec<f64> = (0..12).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut rows = Vec::new();
        for s in 0..students {
            let ability: f64 = rng.random_range(-1.5..1.5);
            for t in 0..15 {
                let q = rng.random_range(0..12);
                let p = crate::autograd::sigmoid(2.0 * (ability - qdiff[q]));
                rows.push(Interaction {
                    student_id: format!("s{s}"),
                    question_id: format!("q{q}"),
                    concept_id: format!("c{}", q % 4),
                    response: u8::from(rng.random_bool(p)),
                    timestamp: Some(t),
                });
            }
        }
        Dataset::from_interactions(&rows).unwrap()
    }

    fn setup(cfg: TrainingConfig) -> (Trainer, DataSplit) {
        let d = toy_dataset(30, 1);
        let split = split_dataset(&d, SplitRatio::default(), 3).unwrap();
        let table = compute_ctt(&split.train);
        let model = Model::new(tiny_config(), d.question_vocab.table_rows(), d.concept_vocab.table_rows(), 5).unwrap();
        let t = Trainer::new(model, table, AugmentationConfig::default(), cfg, &split.train).unwrap();
        (t, split)
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(&[1, 4], vec![1.0, 0.0, 1.0, 0.0]));
        let l = bce_loss(&mut g, p, &[1, 0, 1, 0], &[true; 4], 1e-7);
        assert!(g.value(l).item() <= 1e-6);

        let p = g.leaf(Tensor::full(&[2, 3], 0.5));
        let l = bce_loss(&mut g, p, &[1, 0, 1, 1, 0, 0], &[true; 6], 1e-7);
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);

        let probs = [0.9, 0.3, 0.6, 0.2];
        let resp = [1u8, 0, 0, 1];
        let mask = [true, true, true, false];
        let p = g.leaf(Tensor::from_vec(&[1, 4], probs.to_vec()));
        let l = bce_loss(&mut g, p, &resp, &mask, 1e-7);
        let hand = -(0.9f64.ln() + 0.7f64.ln() + 0.4f64.ln()) / 3.0;
        assert!((g.value(l).item() - hand).abs() < 1e-12);
    }

    #[test]
    fn info_nce_examples() {
        let a = [1.0, 0.0, 0.0];
        let negs: [&[f64]; 2] = [&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]];
        let l = info_nce_similarity(&a, &a, &negs, 0.1).unwrap();
        assert!(l < 1e-3);
        assert!((l - (1.0 + 2.0 * (-10.0f64).exp()).ln()).abs() < 1e-12);

        let same: [&[f64]; 3] = [&a, &a, &a];
        let l = info_nce_similarity(&a, &a, &same, 0.1).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);

        let b = [0.3, -0.2, 0.9];
        let c = [0.5, 0.1, -0.4];
        let d = [-0.7, 0.2, 0.1];
        let x5 = |v: &[f64; 3]| v.map(|x| 5.0 * x);
        let l1 = info_nce_similarity(&b, &c, &[&d], 0.1).unwrap();
        let l2 = info_nce_similarity(&x5(&b), &x5(&c), &[&x5(&d)], 0.1).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        assert!(matches!(info_nce_similarity(&[0.0; 3], &c, &[], 0.1), Err(Error::ZeroNorm)));
    }

    fn rows(g: &Graph, v: Var) -> Vec<Vec<f64>> {
        let t = g.value(v);
        t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
    }

    #[test]
    fn graph_info_nce_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let mut g = Graph::new();
        let v = ViewLatents {
            view1: g.leaf(rand(&[4, 5])),
            view2: g.leaf(rand(&[4, 5])),
            negative: g.leaf(rand(&[4, 5])),
        };
        let (a, p, n) = (rows(&g, v.view1), rows(&g, v.view2), rows(&g, v.negative));
        let full = info_nce_rows(&mut g, &v, 0.1, false);
        let hard = info_nce_rows(&mut g, &v, 0.1, true);
        for i in 0..4 {
            let mut negs: Vec<&[f64]> = (0..4).filter(|&j| j != i).map(|j| p[j].as_slice()).collect();
            negs.push(&n[i]);
            let want = info_nce_similarity(&a[i], &p[i], &negs, 0.1).unwrap();
            assert!((g.value(full).data()[i] - want).abs() < 1e-10);
            let want = info_nce_similarity(&a[i], &p[i], &[&n[i]], 0.1).unwrap();
            assert!((g.value(hard).data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn contrastive_loss_averages_parts() {
        let mut g = Graph::new();
        let t = |g: &mut Graph, s: f64| g.leaf(Tensor::from_vec(&[1, 3], vec![s, 1.0 - s, 0.5]));
        let lat = ViewLatents {
            view1: t(&mut g, 0.2),
            view2: t(&mut g, 0.4),
            negative: t(&mut g, 0.9),
        };
        let views = ContrastiveViews {
            concept: lat,
            question: lat,
        };
        let l = contrastive_loss(&mut g, &views, 0.1, false);
        let part = info_nce_rows(&mut g, &lat, 0.1, false);
        assert!((g.value(l).item() - g.value(part).item()).abs() < 1e-15);
        assert!(g.value(l).item() >= 0.0);

        // Batch of one: the only negative is the hard one.
        let r = |v: Var| g.value(v).data().to_vec();
        let want = info_nce_similarity(&r(lat.view1), &r(lat.view2), &[&r(lat.negative)], 0.1).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let mut g = Graph::new();
        let b = g.leaf(Tensor::scalar(0.5));
        let c = g.leaf(Tensor::scalar(2.0));
        let t = total_loss(&mut g, b, c, 0.1);
        assert!((g.value(t).item() - 0.65).abs() < 1e-12);
        let t0 = total_loss(&mut g, b, c, 0.0);
        assert_eq!(g.value(t0).item(), 0.5);
        let t1 = total_loss(&mut g, b, c, 1.0);
        assert_eq!(g.value(t1).item(), 2.0);
    }

    proptest! {
        #[test]
        fn total_loss_is_affine_in_lambda(b in 0.0f64..5.0, c in 0.0f64..5.0, l1 in 0.0f64..1.0, l2 in 0.0f64..1.0) {
            let f = |l| total_loss_value(b, c, l);
            let mid = f((l1 + l2) / 2.0);
            prop_assert!((mid - (f(l1) + f(l2)) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_counter() {
        let mut s = EarlyStopping::new(10);
        let mut stopped_at = None;
        for epoch in 1..=30 {
            let auc = 0.9 - 0.01 * epoch as f64;
            if s.update(epoch, auc) == StopDecision::Stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(s.best_epoch(), 1);
    }

    #[test]
    fn one_epoch_history() {
        let (t, split) = setup(TrainingConfig {
            max_epochs: 1,
            batch_size: 8,
            ..Default::default()
        });
        let out = t.fit(&split).unwrap();
        assert_eq!(out.history.len(), 1);
        let h = &out.history[0];
        assert!(h.train_loss.is_finite() && h.cl.is_finite());
        assert!((0.0..=1.0).contains(&h.valid_auc));
    }

    #[test]
    fn lambda_zero_step_equals_bce_step() {
        let base = TrainingConfig {
            lambda_c: 0.0,
            batch_size: 8,
            ..Default::default()
        };
        let (mut a, split) = setup(base.clone());
        let (mut b, _) = setup(TrainingConfig {
            bce_only: true,
            ..base
        });
        let seqs = windows(&split.train, 20);
        for chunk in seqs.chunks(8).take(2) {
            let la = a.step(chunk).unwrap();
            let lb = b.step(chunk).unwrap();
            assert_eq!(la.total.to_bits(), lb.total.to_bits());
        }
        for ((_, n, x), (_, _, y)) in a.model.params.iter().zip(b.model.params.iter()) {
            let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
            assert!(same, "parameter {n} differs");
        }
    }

    #[test]
    fn contrastive_path_reaches_projection_heads() {
        let (mut t, split) = setup(TrainingConfig {
            lambda_c: 0.5,
            batch_size: 8,
            ..Default::default()
        });
        let seqs = windows(&split.train, 20);
        let mut g = Graph::new();
        let (total, _, _) = t.losses(&mut g, &seqs[..8]).unwrap();
        let grads = g.param_grads(&g.backward(total));
        for name in ["proj.concept.w", "proj.question.w"] {
            let id = t.model.params.find(name).unwrap();
            let gsum: f64 = grads.iter().find(|(i, _)| *i == id).unwrap().1.data().iter().map(|v| v.abs()).sum();
            assert!(gsum > 0.0, "{name} got no gradient");
        }
    }

    #[test]
    fn evaluation_never_augments() {
        let (t, split) = setup(TrainingConfig {
            max_epochs: 1,
            batch_size: 8,
            ..Default::default()
        });
        let before = t.pipeline().calls();
        evaluate(t.model(), &split.valid, t.table(), 8).unwrap();
        evaluate(t.model(), &split.test, t.table(), 8).unwrap();
        assert_eq!(t.pipeline().calls(), before);

        let (mut t, split) = setup(TrainingConfig {
            batch_size: 8,
            ..Default::default()
        });
        let steps = windows(&split.train, 20).len().div_ceil(8);
        t.train_epoch(&split.train).unwrap();
        assert_eq!(t.pipeline().calls(), 2 * steps);
    }

    #[test]
    fn grad_accumulation_averages_micro_batches() {
        let cfg = TrainingConfig {
            batch_size: 8,
            bce_only: true,
            ..Default::default()
        };
        let mut model = ModelConfig { dropout: 0.0, ..tiny_config() };
        model.max_len = 20;
        let d = toy_dataset(30, 1);
        let split = split_dataset(&d, SplitRatio::default(), 3).unwrap();
        let table = compute_ctt(&split.train);
        let mk = |accum| {
            let m = Model::new(model.clone(), d.question_vocab.table_rows(), d.concept_vocab.table_rows(), 5).unwrap();
            Trainer::new(m, table.clone(), AugmentationConfig::none(), TrainingConfig { grad_accum_steps: accum, ..cfg.clone() }, &split.train).unwrap()
        };
        let seqs: Vec<Vec<Step>> = windows(&split.train, 20).into_iter().take(8).collect();
        // Equal-length halves make the mean of micro-batch means the batch mean.
        let seqs: Vec<Vec<Step>> = seqs.into_iter().map(|s| s[..10].to_vec()).collect();
        let mut one = mk(1);
        let mut two = mk(2);
        let a = one.step(&seqs).unwrap();
        let b = two.step(&seqs).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        for ((_, n, x), (_, _, y)) in one.model.params.iter().zip(two.model.params.iter()) {
            assert!(x.max_abs_diff(y) < 1e-9, "{n}");
        }
    }

    #[test]
    fn divergence_carries_history() {
        let (mut t, split) = setup(TrainingConfig {
            max_epochs: 3,
            batch_size: 8,
            ..Default::default()
        });
        let id = t.model.params.find("head.b").unwrap();
        t.model.params.get_mut(id).data_mut()[0] = f64::NAN;
        match t.fit(&split) {
            Err(Error::Divergence { epoch, history }) => {
                assert_eq!(epoch, 1);
                assert!(history.is_empty());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn kfold_cv_summary() {
        let d = toy_dataset(50, 2);
        let mut seen = Vec::new();
        let s = k_fold_cv(&d, 5, 0.1, 7, |i, split| {
            assert_eq!(split.test.num_students(), 10);
            seen.extend(split.test.students.iter().map(|s| s.student_id.clone()));
            Ok((0.7, 0.4 + 0.0 * i as f64))
        })
        .unwrap();
        assert_eq!(s.folds.len(), 5);
        assert!((s.mean_auc - 0.7).abs() < 1e-15 && s.std_auc.abs() < 1e-15);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 50);
    }
}
