//! Difficulty prediction from item wording.
//!
//! A small character-level encoder (embeddings, a few non-causal attention
//! layers, mean pooling and a sigmoid regression head) is fitted to CTT
//! difficulties of training items and then used to fill in difficulties of
//! items that only appear in validation or test data. Any other regressor can
//! be plugged in through [`TextRegressor`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inverse, Graph, Var};
use crate::dataset::{DataSplit, Dataset, TextMap, Vocab, PAD};
use crate::difficulty::{DifficultySource, DifficultyTable, Entry, ItemKind, ItemPredictor};
use crate::error::{Error, Result};
use crate::params::{truncated_normal, Adam, AdamConfig, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const TEXT_MODEL_FORMAT: &str = "diffcl-text-model/1";
/// Placed between question and concept text when both are used.
pub const SEPARATOR: &str = " | ";

const PAD_TOKEN: usize = 0;
const UNK_TOKEN: usize = 1;

/// Character vocabulary. Index 0 is padding, 1 is unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharTokenizer {
    chars: Vec<char>,
}

impl CharTokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    /// Embedding-table height.
    pub fn rows(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn token(&self, c: char) -> usize {
        self.chars.binary_search(&c).map_or(UNK_TOKEN, |i| i + 2)
    }

    /// Token ids of the first `max_len` characters; an empty text becomes a
    /// single unknown token.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let ids: Vec<usize> = text.chars().take(max_len).map(|c| self.token(c)).collect();
        if ids.is_empty() {
            vec![UNK_TOKEN]
        } else {
            ids
        }
    }
}

/// What the question model reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextInput {
    /// The item's own text.
    Item,
    /// Question text, separator, concept text.
    #[default]
    ItemWithConcept,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_multiplier: usize,
    /// Characters beyond this are dropped (the length feature still sees them).
    pub max_chars: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    /// Fraction of pairs held out (by item) to report a holdout RMSE.
    pub holdout_fraction: f64,
    pub input: TextInput,
    pub seed: u64,
}

impl Default for TextModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_heads: 2,
            num_layers: 1,
            ffn_multiplier: 2,
            max_chars: 192,
            epochs: 40,
            batch_size: 16,
            learning_rate: 3e-3,
            init_std: 0.05,
            holdout_fraction: 0.0,
            input: TextInput::ItemWithConcept,
            seed: 0,
        }
    }
}

impl TextModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "text embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_chars == 0 || self.batch_size == 0 || self.ffn_multiplier == 0 {
            return bad("text max_chars, batch_size and ffn_multiplier must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("text learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        Ok(())
    }
}

/// Which split a training pair was derived from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextPair {
    pub item_id: String,
    pub text: String,
    pub difficulty: f64,
    pub provenance: Provenance,
}

/// Anything that maps text to a difficulty in `[0, 1]`.
pub trait TextRegressor: Send + Sync {
    fn predict_text(&self, text: &str) -> f64;

    fn predict_many(&self, texts: &[&str]) -> Vec<f64> {
        texts.iter().map(|t| self.predict_text(t)).collect()
    }
}

/// Predicts the same value for every text.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRegressor(pub f64);

impl TextRegressor for ConstantRegressor {
    fn predict_text(&self, _text: &str) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug)]
struct TextLayer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    decay: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w_1: ParamId,
    b_1: ParamId,
    w_2: ParamId,
    b_2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextDiffModel {
    cfg: TextModelConfig,
    tokenizer: CharTokenizer,
    params: ParamStore,
    emb: ParamId,
    pos: ParamId,
    layers: Vec<TextLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// RMSE on the fitted pairs, 0-100 scale.
    pub train_rmse: f64,
    /// RMSE on the held-out pairs, 0-100 scale.
    pub holdout_rmse: Option<f64>,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct TextCheckpoint {
    format: String,
    config: TextModelConfig,
    tokenizer: CharTokenizer,
    params: ParamStore,
}

/// `ln(1 + n) / ln(1 + cap)` for a text of `n` characters.
fn length_feature(text: &str, cap: usize) -> f64 {
    (1.0 + text.chars().count() as f64).ln() / (1.0 + cap as f64).ln()
}

impl TextDiffModel {
    fn new(cfg: TextModelConfig, tokenizer: CharTokenizer) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::default();
        let d = cfg.embed_dim;
        let f = cfg.ffn_multiplier * d;
        let std = cfg.init_std;
        let mut emb_t = truncated_normal(&[tokenizer.rows(), d], std, &mut rng);
        emb_t.data_mut()[..d].fill(0.0);
        let emb = p.insert("text.emb", emb_t);
        let pos = p.insert("text.pos", truncated_normal(&[cfg.max_chars, d], std, &mut rng));
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let pre = format!("text.layer{l}");
            let mut w = |p: &mut ParamStore, n: &str, shape: &[usize]| {
                p.insert(format!("{pre}.{n}"), truncated_normal(shape, std, &mut rng))
            };
            let (w_q, w_k, w_v, w_o) = (
                w(&mut p, "w_q", &[d, d]),
                w(&mut p, "w_k", &[d, d]),
                w(&mut p, "w_v", &[d, d]),
                w(&mut p, "w_o", &[d, d]),
            );
            let w_1 = w(&mut p, "w_1", &[d, f]);
            let w_2 = w(&mut p, "w_2", &[f, d]);
            let mut c = |n: &str, shape: &[usize], v: f64| p.insert(format!("{pre}.{n}"), Tensor::full(shape, v));
            layers.push(TextLayer {
                w_q,
                w_k,
                w_v,
                decay: c("decay", &[cfg.num_heads], softplus_inverse(0.01)),
                w_o,
                b_o: c("b_o", &[d], 0.0),
                ln1_g: c("ln1_g", &[d], 1.0),
                ln1_b: c("ln1_b", &[d], 0.0),
                w_1,
                b_1: c("b_1", &[f], 0.0),
                w_2,
                b_2: c("b_2", &[d], 0.0),
                ln2_g: c("ln2_g", &[d], 1.0),
                ln2_b: c("ln2_b", &[d], 0.0),
            });
        }
        // The head also sees a length feature.
        let head_w = p.insert("text.head.w", truncated_normal(&[d + 1, 1], std, &mut rng));
        let head_b = p.insert("text.head.b", Tensor::zeros(&[1]));
        Ok(Self {
            cfg,
            tokenizer,
            params: p,
            emb,
            pos,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &TextModelConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &CharTokenizer {
        &self.tokenizer
    }

    /// Predictions `[B]` for a batch of texts.
    fn forward(&self, g: &mut Graph, texts: &[&str]) -> Var {
        let cap = self.cfg.max_chars;
        let encoded: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenizer.encode(t, cap)).collect();
        let b = texts.len();
        let l = encoded.iter().map(Vec::len).max().unwrap_or(1);
        let mut tokens = vec![PAD_TOKEN; b * l];
        let mut valid = vec![false; b * l];
        for (i, e) in encoded.iter().enumerate() {
            tokens[i * l..i * l + e.len()].copy_from_slice(e);
            valid[i * l..i * l + e.len()].fill(true);
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();

        let p = |g: &mut Graph, id| g.param(&self.params, id);
        let emb = p(g, self.emb);
        let pos = p(g, self.pos);
        let xe = g.embedding(emb, &tokens, &[b, l], Some(PAD_TOKEN));
        let xp = g.embedding(pos, &positions, &[b, l], None);
        let mut x = g.add(xe, xp);
        for layer in &self.layers {
            let (wq, wk, wv) = (p(g, layer.w_q), p(g, layer.w_k), p(g, layer.w_v));
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let raw = p(g, layer.decay);
            let decay = g.softplus(raw);
            let a = g.attention(q, k, v, decay, &valid, self.cfg.num_heads, false);
            let wo = p(g, layer.w_o);
            let o = g.matmul(a, wo);
            let bo = p(g, layer.b_o);
            let o = g.add_bias(o, bo);
            let h = g.add(x, o);
            let (g1, b1) = (p(g, layer.ln1_g), p(g, layer.ln1_b));
            let h = g.layer_norm(h, g1, b1, 1e-5);
            let w1 = p(g, layer.w_1);
            let f = g.matmul(h, w1);
            let bb1 = p(g, layer.b_1);
            let f = g.add_bias(f, bb1);
            let f = g.gelu(f);
            let w2 = p(g, layer.w_2);
            let f = g.matmul(f, w2);
            let bb2 = p(g, layer.b_2);
            let f = g.add_bias(f, bb2);
            let y = g.add(h, f);
            let (g2, b2) = (p(g, layer.ln2_g), p(g, layer.ln2_b));
            x = g.layer_norm(y, g2, b2, 1e-5);
        }
        let pooled = g.masked_mean_pool(x, &valid);
        let lens = Tensor::from_vec(&[b, 1], texts.iter().map(|t| length_feature(t, cap)).collect());
        let lens = g.constant(lens);
        let feat = g.concat_last(&[pooled, lens]);
        let hw = p(g, self.head_w);
        let hb = p(g, self.head_b);
        let z = g.matmul(feat, hw);
        let z = g.add_bias(z, hb);
        let out = g.sigmoid(z);
        g.reshape(out, &[b])
    }

    pub fn predict(&self, text: &str) -> f64 {
        self.predict_batch(&[text])[0]
    }

    /// Arbitrary bytes are decoded lossily; invalid sequences become U+FFFD.
    pub fn predict_bytes(&self, bytes: &[u8]) -> f64 {
        self.predict(&String::from_utf8_lossy(bytes))
    }

    pub fn predict_batch(&self, texts: &[&str]) -> Vec<f64> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let mut g = Graph::new();
            let y = self.forward(&mut g, chunk);
            out.extend(g.value(y).data().iter().map(|v| v.clamp(0.0, 1.0)));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = TextCheckpoint {
            format: TEXT_MODEL_FORMAT.to_string(),
            config: self.cfg.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self.params.clone(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: TextCheckpoint = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.format != TEXT_MODEL_FORMAT {
            return Err(Error::Serde(format!(
                "unsupported text model format {:?}, expected {TEXT_MODEL_FORMAT:?}",
                ck.format
            )));
        }
        let mut m = Self::new(ck.config, ck.tokenizer)?;
        let matches = m.params.len() == ck.params.len()
            && m.params.iter().zip(ck.params.iter()).all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
        if !matches {
            return Err(Error::Serde("text model parameters do not match its config".into()));
        }
        m.params = ck.params;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl TextRegressor for TextDiffModel {
    fn predict_text(&self, text: &str) -> f64 {
        self.predict(text)
    }

    fn predict_many(&self, texts: &[&str]) -> Vec<f64> {
        self.predict_batch(texts)
    }
}

/// Deterministic item-level split of `pairs` into `(fit, holdout)`.
pub fn holdout_split(pairs: &[TextPair], fraction: f64, seed: u64) -> (Vec<TextPair>, Vec<TextPair>) {
    let items: BTreeSet<&str> = pairs.iter().map(|p| p.item_id.as_str()).collect();
    let mut items: Vec<&str> = items.into_iter().collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((items.len() as f64) * fraction).round() as usize;
    let held: BTreeSet<&str> = items[..n_hold.min(items.len())].iter().copied().collect();
    pairs.iter().cloned().partition(|p| !held.contains(p.item_id.as_str()))
}

fn rmse100(pred: &[f64], target: &[f64]) -> f64 {
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    100.0 * (sse / pred.len() as f64).sqrt()
}

/// Fit a model on training-split pairs with mean squared error.
pub fn fit_text_model(pairs: &[TextPair], cfg: &TextModelConfig) -> Result<(TextDiffModel, FitReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no text/difficulty pairs to fit".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.provenance != Provenance::Train) {
        return Err(Error::InvalidSplit(format!(
            "text pair for {} comes from the {:?} split; only training pairs may be fitted",
            p.item_id, p.provenance
        )));
    }
    if let Some(p) = pairs.iter().find(|p| !(0.0..=1.0).contains(&p.difficulty)) {
        return Err(Error::OutOfRange { value: p.difficulty });
    }
    let (fit, holdout) = if cfg.holdout_fraction > 0.0 {
        holdout_split(pairs, cfg.holdout_fraction, cfg.seed)
    } else {
        (pairs.to_vec(), Vec::new())
    };
    if fit.is_empty() {
        return Err(Error::EmptyDataset("holdout left no pairs to fit".into()));
    }
    let tokenizer = CharTokenizer::fit(fit.iter().map(|p| p.text.as_str()));
    let mut model = TextDiffModel::new(cfg.clone(), tokenizer)?;

    // Start the head at the mean label so early epochs refine rather than shift.
    let mean = fit.iter().map(|p| p.difficulty).sum::<f64>() / fit.len() as f64;
    let m = mean.clamp(1e-3, 1.0 - 1e-3);
    model.params.get_mut(model.head_b).data_mut()[0] = (m / (1.0 - m)).ln();

    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let frozen = [(model.emb, PAD_TOKEN)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let texts: Vec<&str> = chunk.iter().map(|&i| fit[i].text.as_str()).collect();
            let target = Tensor::from_vec(&[chunk.len()], chunk.iter().map(|&i| fit[i].difficulty).collect());
            let mut g = Graph::new();
            let pred = model.forward(&mut g, &texts);
            let loss = g.mse(pred, &target);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite { layer: 0 });
            }
            total += lv * chunk.len() as f64;
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads);
            adam.step(&mut model.params, &pg, &frozen);
        }
        final_loss = total / fit.len() as f64;
    }

    let score = |set: &[TextPair]| {
        let texts: Vec<&str> = set.iter().map(|p| p.text.as_str()).collect();
        let target: Vec<f64> = set.iter().map(|p| p.difficulty).collect();
        rmse100(&model.predict_batch(&texts), &target)
    };
    let report = FitReport {
        train_rmse: score(&fit),
        holdout_rmse: (!holdout.is_empty()).then(|| score(&holdout)),
        train_pairs: fit.len(),
        holdout_pairs: holdout.len(),
        final_loss,
    };
    Ok((model, report))
}

/// Question and concept texts keyed by item id.
#[derive(Clone, Copy, Debug)]
pub struct ItemTexts<'a> {
    pub questions: &'a TextMap,
    pub concepts: &'a TextMap,
}

/// First concept each question is paired with.
fn question_concepts(datasets: &[&Dataset]) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for d in datasets {
        for s in &d.students {
            for st in &s.steps {
                out.entry(st.question).or_insert(st.concept);
            }
        }
    }
    out
}

/// Model input text for an item, or `None` when its text is missing.
fn input_text(
    kind: ItemKind,
    item: usize,
    texts: ItemTexts<'_>,
    questions: &Vocab,
    concepts: &Vocab,
    q_concepts: &BTreeMap<usize, usize>,
    input: TextInput,
) -> Option<String> {
    match kind {
        ItemKind::Concept => texts.concepts.get(concepts.id_of(item)?).cloned(),
        ItemKind::Question => {
            let q = texts.questions.get(questions.id_of(item)?)?;
            match input {
                TextInput::Item => Some(q.clone()),
                TextInput::ItemWithConcept => {
                    let c = q_concepts
                        .get(&item)
                        .and_then(|&c| concepts.id_of(c))
                        .and_then(|id| texts.concepts.get(id))
                        .map_or("", String::as_str);
                    Some(format!("{q}{SEPARATOR}{c}"))
                }
            }
        }
    }
}

fn items_in(d: &Dataset, kind: ItemKind) -> BTreeSet<usize> {
    d.students
        .iter()
        .flat_map(|s| s.steps.iter())
        .map(|st| match kind {
            ItemKind::Question => st.question,
            ItemKind::Concept => st.concept,
        })
        .filter(|&i| i != PAD)
        .collect()
}

/// Training pairs for `kind`: every item seen in `train` that has a CTT
/// value in `table` and a text.
pub fn training_pairs(
    train: &Dataset,
    table: &DifficultyTable,
    texts: ItemTexts<'_>,
    kind: ItemKind,
    input: TextInput,
) -> Vec<TextPair> {
    let qc = question_concepts(&[train]);
    let (qv, cv) = (&*train.question_vocab, &*train.concept_vocab);
    let vocab = match kind {
        ItemKind::Question => qv,
        ItemKind::Concept => cv,
    };
    items_in(train, kind)
        .into_iter()
        .filter_map(|i| {
            let e = table.get(kind, i).filter(|e| e.source == DifficultySource::Ctt)?;
            let text = input_text(kind, i, texts, qv, cv, &qc, input)?;
            Some(TextPair {
                item_id: vocab.id_of(i)?.to_string(),
                text,
                difficulty: e.value,
                provenance: Provenance::Train,
            })
        })
        .collect()
}

/// Regressors used by [`fill_unseen`]; a missing one leaves that kind alone.
#[derive(Clone, Copy, Default)]
pub struct FillModels<'a> {
    pub question: Option<&'a dyn TextRegressor>,
    pub concept: Option<&'a dyn TextRegressor>,
}

/// Predict difficulties for items that occur in validation or test data but
/// never in training. Training items keep their CTT values and items without
/// text keep the constant fallback.
pub fn fill_unseen(
    table: &DifficultyTable,
    models: FillModels<'_>,
    texts: ItemTexts<'_>,
    split: &DataSplit,
    input: TextInput,
) -> DifficultyTable {
    let mut out = table.clone();
    let qc = question_concepts(&[&split.train, &split.valid, &split.test]);
    let (qv, cv) = (&*split.train.question_vocab, &*split.train.concept_vocab);
    for (kind, model) in [(ItemKind::Question, models.question), (ItemKind::Concept, models.concept)] {
        let Some(model) = model else { continue };
        let seen = items_in(&split.train, kind);
        let mut unseen = items_in(&split.valid, kind);
        unseen.extend(items_in(&split.test, kind));
        let mut items = Vec::new();
        let mut inputs = Vec::new();
        for i in unseen.difference(&seen) {
            if table.get(kind, *i).is_some_and(|e| e.source == DifficultySource::Ctt) {
                continue;
            }
            if let Some(t) = input_text(kind, *i, texts, qv, cv, &qc, input) {
                items.push(*i);
                inputs.push(t);
            }
        }
        let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        for (i, v) in items.into_iter().zip(model.predict_many(&refs)) {
            out.insert(
                kind,
                i,
                Entry {
                    value: v.clamp(0.0, 1.0),
                    source: DifficultySource::TextModel,
                },
            )
            .expect("clamped value");
        }
    }
    out.set_source(DifficultySource::TextModel);
    out
}

/// Adapter that lets a table query a text regressor lazily for any item
/// without a stored value.
pub struct TextItemPredictor {
    model: Arc<dyn TextRegressor>,
    kind: ItemKind,
    texts: Vec<Option<String>>,
}

impl TextItemPredictor {
    /// `texts` maps vocabulary ids to texts for `kind`.
    pub fn new(model: Arc<dyn TextRegressor>, kind: ItemKind, vocab: &Vocab, texts: &TextMap) -> Self {
        let texts = (0..vocab.table_rows())
            .map(|i| vocab.id_of(i).and_then(|id| texts.get(id)).cloned())
            .collect();
        Self { model, kind, texts }
    }
}

impl ItemPredictor for TextItemPredictor {
    fn predict(&self, kind: ItemKind, item: usize) -> Option<f64> {
        if kind != self.kind {
            return None;
        }
        let t = self.texts.get(item)?.as_deref()?;
        Some(self.model.predict_text(t).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub predictor: String,
    /// 0-100 scale.
    pub rmse: f64,
}

pub fn constant_name(c: f64) -> String {
    format!("constant_{c}")
}

/// RMSE (0-100 scale) of `model` and of each constant baseline on `heldout`.
pub fn evaluate_difficulty_prediction(
    model: &dyn TextRegressor,
    heldout: &[TextPair],
    baselines: &[f64],
) -> Result<Vec<RmseRow>> {
    if heldout.is_empty() {
        return Err(Error::UndefinedMetric("no held-out pairs".into()));
    }
    let texts: Vec<&str> = heldout.iter().map(|p| p.text.as_str()).collect();
    let target: Vec<f64> = heldout.iter().map(|p| p.difficulty).collect();
    let mut rows = vec![RmseRow {
        predictor: "model".into(),
        rmse: rmse100(&model.predict_many(&texts), &target),
    }];
    for &c in baselines {
        rows.push(RmseRow {
            predictor: constant_name(c),
            rmse: rmse100(&vec![c; target.len()], &target),
        });
    }
    Ok(rows)
}

pub fn write_rmse_csv(path: &Path, rows: &[RmseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["predictor", "rmse"]).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([r.predictor.as_str(), &format!("{}", r.rmse)])
            .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every stored difficulty as `(id, kind, predicted_difficulty, source)`.
pub fn write_predictions_csv(path: &Path, table: &DifficultyTable, questions: &Vocab, concepts: &Vocab) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["id", "kind", "predicted_difficulty", "source"])
        .map_err(|e| Error::csv(path, e))?;
    for (kind, vocab) in [(ItemKind::Question, questions), (ItemKind::Concept, concepts)] {
        for (i, e) in table.entries(kind) {
            let id = vocab.id_of(i).unwrap_or("<unk>");
            w.write_record([id, kind.as_str(), &format!("{}", e.value), e.source.as_str()])
                .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LengthAnalysisConfig {
    pub bucket_width: usize,
    /// Texts with this many characters or more are left out of the buckets.
    pub cap: usize,
}

impl Default for LengthAnalysisConfig {
    fn default() -> Self {
        Self {
            bucket_width: 10,
            cap: 120,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lower: usize,
    pub upper: usize,
    pub count: usize,
    pub mean_correctness: f64,
    pub median_correctness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthReport {
    /// Non-empty buckets below the cap, in length order.
    pub buckets: Vec<LengthBucket>,
    /// `(bucket lower bound, count)` over all lengths, ignoring the cap.
    pub histogram: Vec<(usize, usize)>,
    pub excluded: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Question correctness (the table's stored value) grouped by the
/// character length of the question text.
pub fn char_length_analysis(
    d: &Dataset,
    texts: &TextMap,
    table: &DifficultyTable,
    cfg: LengthAnalysisConfig,
) -> Result<LengthReport> {
    if cfg.bucket_width == 0 {
        return Err(Error::Config("bucket_width must be positive".into()));
    }
    let mut by_bucket: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut excluded = 0;
    for q in items_in(d, ItemKind::Question) {
        let (Some(e), Some(text)) = (
            table.get(ItemKind::Question, q),
            d.question_vocab.id_of(q).and_then(|id| texts.get(id)),
        ) else {
            continue;
        };
        let n = text.chars().count();
        let b = n / cfg.bucket_width;
        *histogram.entry(b * cfg.bucket_width).or_default() += 1;
        if n >= cfg.cap {
            excluded += 1;
            continue;
        }
        by_bucket.entry(b).or_default().push(e.value);
    }
    let buckets = by_bucket
        .into_iter()
        .map(|(b, mut v)| {
            v.sort_by(f64::total_cmp);
            LengthBucket {
                lower: b * cfg.bucket_width,
                upper: (b + 1) * cfg.bucket_width,
                count: v.len(),
                mean_correctness: v.iter().sum::<f64>() / v.len() as f64,
                median_correctness: median(&v),
            }
        })
        .collect();
    Ok(LengthReport {
        buckets,
        histogram: histogram.into_iter().collect(),
        excluded,
    })
}

pub fn write_length_csv(path: &Path, report: &LengthReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["lower", "upper", "count", "mean_correctness", "median_correctness"])
        .map_err(|e| Error::csv(path, e))?;
    for b in &report.buckets {
        w.write_record([
            b.lower.to_string(),
            b.upper.to_string(),
            b.count.to_string(),
            format!("{}", b.mean_correctness),
            format!("{}", b.median_correctness),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
