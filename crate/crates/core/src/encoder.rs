//! Interaction embeddings and the transformer stack.
//!
//! Each layer splits its heads evenly between monotonic attention (scaled
//! dot-product attention with a learnable per-head linear distance penalty)
//! and span-based dynamic convolution (per-position kernels generated from a
//! causal depthwise convolution of the input). Everything is causal.
//!
//! Label alignment: the response channel at position `t` carries `r_{t-1}`
//! (row 0 at `t = 0`), so the prediction at `t` never sees `r_t`.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus_inverse, Graph, Var};
use crate::dataset::{SequenceBatch, PAD_BIN};
use crate::difficulty::View;
use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "diffcl-checkpoint/1";

/// Rows in a difficulty table: padding plus bins `0..=100`.
pub const DIFFICULTY_ROWS: usize = 102;
/// Rows in the response table: start/padding, `r = 0`, `r = 1`.
pub const RESPONSE_ROWS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub layers_per_encoder: usize,
    pub num_encoders: usize,
    pub max_len: usize,
    pub conv_kernel_size: usize,
    /// Feed-forward width as a multiple of `embed_dim`.
    pub ffn_multiplier: usize,
    pub dropout: f64,
    /// Initial per-head distance penalty.
    pub monotonic_decay: f64,
    pub init_std: f64,
    /// Give each encoder invocation its own weights instead of sharing one stack.
    pub untied_encoders: bool,
    /// Learn separate tables for the negative view's difficulty and response
    /// embeddings instead of reusing the positive ones at reflected indices.
    pub separate_negative_tables: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            num_heads: 8,
            layers_per_encoder: 4,
            num_encoders: 4,
            max_len: 100,
            conv_kernel_size: 9,
            ffn_multiplier: 4,
            dropout: 0.1,
            monotonic_decay: 0.1,
            init_std: 0.02,
            untied_encoders: false,
            separate_negative_tables: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_heads < 2 || !self.num_heads.is_multiple_of(2) {
            return fail(format!(
                "num_heads = {} must be even (half attention, half convolution)",
                self.num_heads
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim = {} not divisible by num_heads = {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if self.conv_kernel_size == 0 || self.conv_kernel_size.is_multiple_of(2) {
            return fail(format!("conv_kernel_size = {} must be odd", self.conv_kernel_size));
        }
        if self.layers_per_encoder == 0 || self.num_encoders == 0 || self.ffn_multiplier == 0 {
            return fail("layer, encoder and feed-forward counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if self.monotonic_decay <= 0.0 || !self.monotonic_decay.is_finite() {
            return fail(format!("monotonic_decay = {} must be positive", self.monotonic_decay));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    fn attention_heads(&self) -> usize {
        self.num_heads / 2
    }

    fn conv_heads(&self) -> usize {
        self.num_heads - self.attention_heads()
    }
}

/// Which of the four encoder invocations a forward pass belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Prediction,
    View1,
    View2,
    Negative,
}

impl Role {
    fn index(self) -> usize {
        match self {
            Role::Prediction => 0,
            Role::View1 => 1,
            Role::View2 => 2,
            Role::Negative => 3,
        }
    }
}

#[derive(Clone, Debug)]
struct Tables {
    question: ParamId,
    concept: ParamId,
    question_difficulty: ParamId,
    concept_difficulty: ParamId,
    response: ParamId,
    position: ParamId,
    negative: Option<[ParamId; 3]>,
}

#[derive(Clone, Debug)]
struct Layer {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    decay: ParamId,
    w_u: ParamId,
    w_span: ParamId,
    w_gen: ParamId,
    b_gen: ParamId,
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

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

/// Symbolic encoder output inside a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, L, D]`
    pub hidden: Var,
    /// `[B, L]`
    pub probs: Var,
}

/// Which per-sequence latent a projection produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Latent {
    Concept,
    Question,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    question_rows: usize,
    concept_rows: usize,
    pub params: ParamStore,
    tables: Tables,
    stacks: Vec<Vec<Layer>>,
    head: Linear,
    concept_proj: Linear,
    question_proj: Linear,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config: ModelConfig,
    question_rows: usize,
    concept_rows: usize,
    params: ParamStore,
}

impl Model {
    /// `question_rows` / `concept_rows` are embedding-table heights, i.e.
    /// `Vocab::table_rows()`.
    pub fn new(cfg: ModelConfig, question_rows: usize, concept_rows: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = cfg.embed_dim;
        let std = cfg.init_std;

        let table = |p: &mut ParamStore, name: &str, rows: usize, pad: bool, rng: &mut ChaCha8Rng| {
            let mut t = truncated_normal(&[rows, d], std, rng);
            if pad {
                t.data_mut()[..d].fill(0.0);
            }
            p.insert(name, t)
        };
        let tables = Tables {
            question: table(&mut p, "emb.question", question_rows, true, &mut rng),
            concept: table(&mut p, "emb.concept", concept_rows, true, &mut rng),
            question_difficulty: table(&mut p, "emb.question_difficulty", DIFFICULTY_ROWS, true, &mut rng),
            concept_difficulty: table(&mut p, "emb.concept_difficulty", DIFFICULTY_ROWS, true, &mut rng),
            response: table(&mut p, "emb.response", RESPONSE_ROWS, true, &mut rng),
            position: table(&mut p, "emb.position", cfg.max_len, false, &mut rng),
            negative: cfg.separate_negative_tables.then(|| {
                [
                    table(&mut p, "emb.neg_question_difficulty", DIFFICULTY_ROWS, true, &mut rng),
                    table(&mut p, "emb.neg_concept_difficulty", DIFFICULTY_ROWS, true, &mut rng),
                    table(&mut p, "emb.neg_response", RESPONSE_ROWS, true, &mut rng),
                ]
            }),
        };

        let dh = cfg.head_dim();
        let da = cfg.attention_heads() * dh;
        let hc = cfg.conv_heads();
        let dc = hc * dh;
        let k = cfg.conv_kernel_size;
        let f = cfg.ffn_multiplier * d;
        let decay_raw = softplus_inverse(cfg.monotonic_decay);
        let n_stacks = if cfg.untied_encoders { cfg.num_encoders } else { 1 };
        let mut stacks = Vec::with_capacity(n_stacks);
        for s in 0..n_stacks {
            let mut layers = Vec::with_capacity(cfg.layers_per_encoder);
            for l in 0..cfg.layers_per_encoder {
                let pre = format!("enc{s}.layer{l}");
                let mut w = |p: &mut ParamStore, n: &str, shape: &[usize]| {
                    p.insert(format!("{pre}.{n}"), truncated_normal(shape, std, &mut rng))
                };
                let w_q = w(&mut p, "w_q", &[d, da]);
                let w_k = w(&mut p, "w_k", &[d, da]);
                let w_v = w(&mut p, "w_v", &[d, da]);
                let w_u = w(&mut p, "w_u", &[d, dc]);
                let w_span = w(&mut p, "w_span", &[k, dc]);
                let w_gen = w(&mut p, "w_gen", &[dc, hc * k]);
                let w_o = w(&mut p, "w_o", &[d, d]);
                let w_1 = w(&mut p, "w_1", &[d, f]);
                let w_2 = w(&mut p, "w_2", &[f, d]);
                let mut c = |n: &str, shape: &[usize], v: f64| p.insert(format!("{pre}.{n}"), Tensor::full(shape, v));
                layers.push(Layer {
                    w_q,
                    w_k,
                    w_v,
                    decay: c("decay", &[cfg.attention_heads()], decay_raw),
                    w_u,
                    w_span,
                    w_gen,
                    b_gen: c("b_gen", &[hc * k], 0.0),
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
            stacks.push(layers);
        }
        let mut linear = |p: &mut ParamStore, name: &str, out: usize| Linear {
            w: p.insert(format!("{name}.w"), truncated_normal(&[d, out], std, &mut rng)),
            b: p.insert(format!("{name}.b"), Tensor::zeros(&[out])),
        };
        let head = linear(&mut p, "head", 1);
        let concept_proj = linear(&mut p, "proj.concept", d);
        let question_proj = linear(&mut p, "proj.question", d);
        Ok(Self {
            cfg,
            question_rows,
            concept_rows,
            params: p,
            tables,
            stacks,
            head,
            concept_proj,
            question_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn question_rows(&self) -> usize {
        self.question_rows
    }

    pub fn concept_rows(&self) -> usize {
        self.concept_rows
    }

    /// Padding rows that the optimiser must keep at zero.
    pub fn frozen_rows(&self) -> Vec<(ParamId, usize)> {
        let t = &self.tables;
        let mut v = vec![
            (t.question, 0),
            (t.concept, 0),
            (t.question_difficulty, 0),
            (t.concept_difficulty, 0),
            (t.response, 0),
        ];
        if let Some(neg) = t.negative {
            v.extend(neg.iter().map(|&id| (id, 0)));
        }
        v
    }

    /// Parameters of the embedding tables, in a fixed order.
    pub fn table_params(&self) -> Vec<ParamId> {
        let t = &self.tables;
        let mut v = vec![
            t.question,
            t.concept,
            t.question_difficulty,
            t.concept_difficulty,
            t.response,
            t.position,
        ];
        if let Some(neg) = t.negative {
            v.extend(neg);
        }
        v
    }

    /// Sum of the six element-wise lookups for every position. The
    /// negative view reads reflected difficulty bins and flipped responses.
    pub fn embed(&self, g: &mut Graph, batch: &SequenceBatch, view: View) -> Result<Var> {
        let (b, l) = (batch.batch, batch.max_len);
        if l > self.cfg.max_len {
            return Err(Error::IndexOutOfRange {
                table: "position",
                index: l - 1,
                rows: self.cfg.max_len,
            });
        }
        let n = b * l;
        check_rows("question", &batch.questions, self.question_rows)?;
        check_rows("concept", &batch.concepts, self.concept_rows)?;
        let (qbins, cbins) = match view {
            View::Positive => (&batch.q_difficulty_bins, &batch.c_difficulty_bins),
            View::Negative => (&batch.q_negative_bins, &batch.c_negative_bins),
        };
        let qd = bin_rows("question_difficulty", qbins)?;
        let cd = bin_rows("concept_difficulty", cbins)?;
        let mut resp = vec![0usize; n];
        for i in 0..b {
            for t in 1..l {
                let prev = i * l + t - 1;
                if !batch.valid_mask[i * l + t] || !batch.valid_mask[prev] {
                    continue;
                }
                let r = batch.responses[prev];
                if r > 1 {
                    return Err(Error::IndexOutOfRange {
                        table: "response",
                        index: usize::from(r) + 1,
                        rows: RESPONSE_ROWS,
                    });
                }
                let r = if view == View::Negative { 1 - r } else { r };
                resp[i * l + t] = 1 + usize::from(r);
            }
        }
        let pos: Vec<usize> = (0..n).map(|p| p % l).collect();

        let t = &self.tables;
        let (qd_t, cd_t, r_t) = match (view, t.negative) {
            (View::Negative, Some([a, c, r])) => (a, c, r),
            _ => (t.question_difficulty, t.concept_difficulty, t.response),
        };
        let lead = [b, l];
        let mut parts = Vec::with_capacity(6);
        for (id, idx, pad) in [
            (t.question, &batch.questions, Some(0)),
            (t.concept, &batch.concepts, Some(0)),
            (qd_t, &qd, Some(0)),
            (cd_t, &cd, Some(0)),
            (r_t, &resp, Some(0)),
            (t.position, &pos, None),
        ] {
            let tv = g.param(&self.params, id);
            parts.push(g.embedding(tv, idx, &lead, pad));
        }
        Ok(g.add_many(&parts))
    }

    fn stack(&self, role: Role) -> &[Layer] {
        let i = role.index().min(self.stacks.len() - 1);
        &self.stacks[i]
    }

    /// Run the encoder layers for `role` on embedded input `[B, L, D]`.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        x: Var,
        valid: &[bool],
        role: Role,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let ha = cfg.attention_heads();
        let hc = cfg.conv_heads();
        let k = cfg.conv_kernel_size;
        let mut x = x;
        for (li, layer) in self.stack(role).iter().enumerate() {
            let p = |g: &mut Graph, id| g.param(&self.params, id);

            let (wq, wk, wv) = (p(g, layer.w_q), p(g, layer.w_k), p(g, layer.w_v));
            let q = g.matmul(x, wq);
            let kk = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let raw = p(g, layer.decay);
            let decay = g.softplus(raw);
            let attn = g.attention(q, kk, v, decay, valid, ha, true);

            let wu = p(g, layer.w_u);
            let u = g.matmul(x, wu);
            let ws = p(g, layer.w_span);
            let span = g.causal_depthwise_conv(u, ws);
            let wg = p(g, layer.w_gen);
            let logits = g.matmul(span, wg);
            let bg = p(g, layer.b_gen);
            let logits = g.add_bias(logits, bg);
            let kernel = g.softmax_groups(logits, k);
            let conv = g.dynamic_causal_conv(u, kernel, hc, k);

            let mixed = g.concat_last(&[attn, conv]);
            let wo = p(g, layer.w_o);
            let o = g.matmul(mixed, wo);
            let bo = p(g, layer.b_o);
            let o = g.add_bias(o, bo);
            let o = dropout(g, o, cfg.dropout, dropout_rng.as_deref_mut());
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
            let f = dropout(g, f, cfg.dropout, dropout_rng.as_deref_mut());
            let y = g.add(h, f);
            let (g2, b2) = (p(g, layer.ln2_g), p(g, layer.ln2_b));
            x = g.layer_norm(y, g2, b2, 1e-5);

            if !g.value(x).all_finite() {
                return Err(Error::NonFinite { layer: li });
            }
        }
        Ok(x)
    }

    /// Linear + sigmoid prediction head: `[B, L, D] -> [B, L]`.
    pub fn predict_head(&self, g: &mut Graph, hidden: Var) -> Var {
        let s = g.value(hidden).shape().to_vec();
        let w = g.param(&self.params, self.head.w);
        let b = g.param(&self.params, self.head.b);
        let z = g.matmul(hidden, w);
        let z = g.add_bias(z, b);
        let p = g.sigmoid(z);
        g.reshape(p, &s[..2])
    }

    /// Masked mean over positions followed by the concept or question
    /// projection: `[B, L, D] -> [B, D]`.
    pub fn latent(&self, g: &mut Graph, hidden: Var, valid: &[bool], which: Latent) -> Var {
        let pooled = g.masked_mean_pool(hidden, valid);
        let lin = match which {
            Latent::Concept => self.concept_proj,
            Latent::Question => self.question_proj,
        };
        let w = g.param(&self.params, lin.w);
        let b = g.param(&self.params, lin.b);
        let z = g.matmul(pooled, w);
        g.add_bias(z, b)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &SequenceBatch,
        view: View,
        role: Role,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutput> {
        let x = self.embed(g, batch, view)?;
        let hidden = self.encode(g, x, &batch.valid_mask, role, dropout_rng)?;
        let probs = self.predict_head(g, hidden);
        Ok(EncoderOutput { hidden, probs })
    }

    /// Inference-mode probabilities `[B, L]`.
    pub fn predict(&self, batch: &SequenceBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, View::Positive, Role::Prediction, None)?;
        Ok(g.value(out.probs).clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.cfg.clone(),
            question_rows: self.question_rows,
            concept_rows: self.concept_rows,
            params: self.params.clone(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Serde(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                ck.format
            )));
        }
        let mut m = Self::new(ck.config, ck.question_rows, ck.concept_rows, 0)?;
        if m.params.len() != ck.params.len() {
            return Err(Error::Serde(format!(
                "checkpoint has {} parameters, model expects {}",
                ck.params.len(),
                m.params.len()
            )));
        }
        for ((_, a, ta), (_, b, tb)) in m.params.iter().zip(ck.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(Error::Serde(format!(
                    "checkpoint parameter {b} {:?} does not match {a} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
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

fn check_rows(table: &'static str, idx: &[usize], rows: usize) -> Result<()> {
    match idx.iter().find(|&&i| i >= rows) {
        Some(&index) => Err(Error::IndexOutOfRange { table, index, rows }),
        None => Ok(()),
    }
}

/// Difficulty bin to table row: padding is row 0, bin `b` is row `b + 1`.
fn bin_rows(table: &'static str, bins: &[u8]) -> Result<Vec<usize>> {
    bins.iter()
        .map(|&b| match b {
            PAD_BIN => Ok(0),
            0..=100 => Ok(usize::from(b) + 1),
            _ => Err(Error::IndexOutOfRange {
                table,
                index: usize::from(b) + 1,
                rows: DIFFICULTY_ROWS,
            }),
        })
        .collect()
}

/// Inverted dropout through a fixed mask; identity without an rng.
fn dropout<'a>(g: &mut Graph, x: Var, p: f64, rng: Option<&mut (dyn RngCore + 'a)>) -> Var {
    let Some(rng) = rng else { return x };
    if p == 0.0 {
        return x;
    }
    let shape = g.value(x).shape().to_vec();
    let n = g.value(x).numel();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
        .collect();
    g.mul_const(x, Tensor::from_vec(&shape, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{max_rel_error, probe};
    use crate::dataset::Step;
    use crate::difficulty::{DifficultySource, DifficultyTable, Entry, ItemKind};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            num_heads: 4,
            layers_per_encoder: 2,
            num_encoders: 4,
            max_len: 12,
            conv_kernel_size: 3,
            ffn_multiplier: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn ctt(value: f64) -> Entry {
        Entry {
            value,
            source: DifficultySource::Ctt,
        }
    }

    fn table() -> DifficultyTable {
        let mut t = DifficultyTable::default();
        for q in 1..=5 {
            t.insert(ItemKind::Question, q, ctt(0.15 * q as f64)).unwrap();
        }
        for c in 1..=3 {
            t.insert(ItemKind::Concept, c, ctt(0.2 * c as f64)).unwrap();
        }
        t
    }

    fn seqs() -> Vec<Vec<Step>> {
        let mk = |v: &[(usize, usize, u8)]| {
            v.iter()
                .map(|&(q, c, r)| Step {
                    question: q,
                    concept: c,
                    response: r,
                })
                .collect::<Vec<_>>()
        };
        vec![
            mk(&[(1, 1, 1), (2, 1, 0), (3, 2, 1), (4, 3, 1), (5, 3, 0), (1, 1, 1), (2, 1, 1)]),
            mk(&[(5, 3, 0), (4, 2, 1), (1, 1, 0)]),
        ]
    }

    fn model(cfg: ModelConfig) -> Model {
        Model::new(cfg, 7, 5, 42).unwrap()
    }

    fn row(m: &Model, id: ParamId, r: usize) -> Vec<f64> {
        let d = m.cfg.embed_dim;
        m.params.get(id).data()[r * d..(r + 1) * d].to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            embed_dim: 30,
            ..small_config()
        };
        assert!(bad.validate().is_err());
        let even_kernel = ModelConfig {
            conv_kernel_size: 4,
            ..small_config()
        };
        assert!(even_kernel.validate().is_err());
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let mut m = model(small_config());
        for id in m.table_params() {
            m.params.get_mut(id).data_mut().fill(0.0);
        }
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let mut g = Graph::new();
        let x = m.embed(&mut g, &batch, View::Positive).unwrap();
        assert!(g.value(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_sum_of_rows() {
        let m = model(small_config());
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let mut g = Graph::new();
        let x = m.embed(&mut g, &batch, View::Positive).unwrap();
        let d = m.cfg.embed_dim;
        // Row 0, position 2: question 3, concept 2, previous response 0.
        let p = 2;
        let t = &m.tables;
        let qb = usize::from(batch.q_difficulty_bins[p]) + 1;
        let cb = usize::from(batch.c_difficulty_bins[p]) + 1;
        let parts = [
            row(&m, t.question, 3),
            row(&m, t.concept, 2),
            row(&m, t.question_difficulty, qb),
            row(&m, t.concept_difficulty, cb),
            row(&m, t.response, 1),
            row(&m, t.position, 2),
        ];
        for j in 0..d {
            let want: f64 = parts.iter().map(|r| r[j]).sum();
            assert!((g.value(x).data()[p * d + j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_view_reads_reflected_rows() {
        let m = model(small_config());
        let mut t = DifficultyTable::default();
        t.insert(ItemKind::Question, 1, ctt(0.75)).unwrap();
        t.insert(ItemKind::Question, 2, ctt(0.75)).unwrap();
        t.insert(ItemKind::Concept, 1, ctt(0.5)).unwrap();
        let s = vec![vec![
            Step {
                question: 1,
                concept: 1,
                response: 1,
            },
            Step {
                question: 2,
                concept: 1,
                response: 0,
            },
        ]];
        let batch = SequenceBatch::from_sequences(&s, &t, 2);
        let mut g = Graph::new();
        let neg = m.embed(&mut g, &batch, View::Negative).unwrap();
        let d = m.cfg.embed_dim;
        let tb = &m.tables;
        // Position 1: bin 75 -> 25, concept bin 50 stays, previous r = 1 -> 0.
        let parts = [
            row(&m, tb.question, 2),
            row(&m, tb.concept, 1),
            row(&m, tb.question_difficulty, 25 + 1),
            row(&m, tb.concept_difficulty, 50 + 1),
            row(&m, tb.response, 1),
            row(&m, tb.position, 1),
        ];
        for j in 0..d {
            let want: f64 = parts.iter().map(|r| r[j]).sum();
            assert!((g.value(neg).data()[d + j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn padding_positions_hold_only_position_rows() {
        let m = model(small_config());
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let mut g = Graph::new();
        let x = m.embed(&mut g, &batch, View::Positive).unwrap();
        let d = m.cfg.embed_dim;
        let p = 8 + 5; // row 1, position 5 is padding
        assert_eq!(&g.value(x).data()[p * d..(p + 1) * d], &row(&m, m.tables.position, 5)[..]);
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let m = model(small_config());
        let mut batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        batch.questions[0] = 99;
        let mut g = Graph::new();
        assert!(matches!(
            m.embed(&mut g, &batch, View::Positive),
            Err(Error::IndexOutOfRange { table: "question", index: 99, .. })
        ));
        let long = SequenceBatch::from_sequences(&seqs(), &table(), 20);
        assert!(m.embed(&mut g, &long, View::Positive).is_err());
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Plain causal softmax attention, one head.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor, l: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; l * w];
        for t in 0..l {
            let scores: Vec<f64> = (0..=t)
                .map(|s| (0..w).map(|j| q.data()[t * w + j] * k.data()[s * w + j]).sum::<f64>() / (w as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for (s, sc) in scores.iter().enumerate() {
                for j in 0..w {
                    out[t * w + j] += (sc - mx).exp() / z * v.data()[s * w + j];
                }
            }
        }
        out
    }

    #[test]
    fn zero_decay_is_plain_causal_attention() {
        let (l, w) = (7, 5);
        let q = rand_tensor(&[1, l, w], 1);
        let k = rand_tensor(&[1, l, w], 2);
        let v = rand_tensor(&[1, l, w], 3);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let dv = g.constant(Tensor::zeros(&[1]));
        let o = g.attention(qv, kv, vv, dv, &[true; 7], 1, true);
        let want = reference_attention(&q, &k, &v, l, w);
        for (a, b) in g.value(o).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn large_decay_attends_to_current_position() {
        let l = 6;
        let q = rand_tensor(&[1, l, l], 4);
        let k = rand_tensor(&[1, l, l], 5);
        let mut eye = Tensor::zeros(&[1, l, l]);
        for i in 0..l {
            eye.data_mut()[i * l + i] = 1.0;
        }
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(eye));
        let dv = g.constant(Tensor::full(&[1], 50.0));
        let o = g.attention(qv, kv, vv, dv, &[true; 6], 1, true);
        // With identity values the output rows are the attention weights.
        let probs = g.value(o).data();
        for t in 0..l {
            assert!((probs[t * l + t] - 1.0).abs() < 1e-3);
            let row_sum: f64 = probs[t * l..(t + 1) * l].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_kernel_dynamic_conv_is_identity() {
        let x = rand_tensor(&[2, 5, 4], 6);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let logits = g.constant(rand_tensor(&[2, 5, 2], 7));
        let kern = g.softmax_groups(logits, 1);
        let y = g.dynamic_causal_conv(xv, kern, 2, 1);
        assert!(g.value(y).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn conv_branch_shape_contract() {
        let cfg = ModelConfig::default();
        let m = Model::new(
            ModelConfig {
                layers_per_encoder: 1,
                ..cfg
            },
            4,
            4,
            0,
        )
        .unwrap();
        let layer = &m.stacks[0][0];
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&[2, 100, 512], 8));
        let wu = g.param(&m.params, layer.w_u);
        let u = g.matmul(x, wu);
        let ws = g.param(&m.params, layer.w_span);
        let span = g.causal_depthwise_conv(u, ws);
        let wg = g.param(&m.params, layer.w_gen);
        let lg = g.matmul(span, wg);
        let kern = g.softmax_groups(lg, 9);
        let y = g.dynamic_causal_conv(u, kern, 4, 9);
        let wo = g.constant(Tensor::zeros(&[256, 512]));
        let out = g.matmul(y, wo);
        assert_eq!(g.value(out).shape(), &[2, 100, 512]);
    }

    #[test]
    fn attention_gradcheck() {
        for seed in 0..3 {
            let inputs = vec![
                rand_tensor(&[3, 8, 16], seed * 10 + 1),
                rand_tensor(&[3, 8, 16], seed * 10 + 2),
                rand_tensor(&[3, 8, 16], seed * 10 + 3),
                Tensor::from_vec(&[2], vec![0.3, 0.05]),
            ];
            let mut valid = vec![true; 24];
            valid[7] = false;
            valid[16] = false;
            let err = max_rel_error(&inputs, |g, v| {
                let o = g.attention(v[0], v[1], v[2], v[3], &valid, 2, true);
                probe(g, o)
            });
            assert!(err < 1e-4, "attention rel err {err}");
        }
    }

    #[test]
    fn span_conv_gradcheck() {
        for seed in 0..3 {
            let inputs = vec![
                rand_tensor(&[3, 8, 16], seed * 10 + 4),
                rand_tensor(&[3, 16], seed * 10 + 5),
                rand_tensor(&[16, 2 * 3], seed * 10 + 6),
            ];
            let err = max_rel_error(&inputs, |g, v| {
                let span = g.causal_depthwise_conv(v[0], v[1]);
                let lg = g.matmul(span, v[2]);
                let kern = g.softmax_groups(lg, 3);
                let y = g.dynamic_causal_conv(v[0], kern, 2, 3);
                probe(g, y)
            });
            assert!(err < 1e-4, "span conv rel err {err}");
        }
    }

    #[test]
    fn untrained_outputs_in_range() {
        let m = model(small_config());
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let mut g = Graph::new();
        let out = m.forward(&mut g, &batch, View::Positive, Role::Prediction, None).unwrap();
        assert!(g.value(out.hidden).all_finite());
        assert_eq!(g.value(out.probs).shape(), &[2, 8]);
        assert!(g.value(out.probs).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn duplicated_rows_give_duplicated_outputs() {
        let m = model(small_config());
        let s = seqs();
        let one = SequenceBatch::from_sequences(&s[..1], &table(), 8);
        let two = SequenceBatch::from_sequences(&[s[0].clone(), s[0].clone()], &table(), 8);
        let a = m.predict(&one).unwrap();
        let b = m.predict(&two).unwrap();
        assert_eq!(&b.data()[..8], a.data());
        assert_eq!(&b.data()[8..], a.data());
    }

    #[test]
    fn full_stack_is_causal() {
        let m = model(small_config());
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let d = m.cfg.embed_dim;
        let run = |perturb: Option<usize>| {
            let mut g = Graph::new();
            let x = m.embed(&mut g, &batch, View::Positive).unwrap();
            let mut xv = g.value(x).clone();
            if let Some(t) = perturb {
                for p in t..8 {
                    for j in 0..d {
                        xv.data_mut()[p * d + j] += ((p * d + j) as f64).sin();
                    }
                }
            }
            let x = g.constant(xv);
            let h = m.encode(&mut g, x, &batch.valid_mask, Role::Prediction, None).unwrap();
            let p = m.predict_head(&mut g, h);
            (g.value(h).clone(), g.value(p).clone())
        };
        let (h0, p0) = run(None);
        for t in 1..7 {
            let (h1, p1) = run(Some(t));
            for s in 0..t {
                for j in 0..d {
                    assert!((h0.data()[s * d + j] - h1.data()[s * d + j]).abs() <= 1e-12);
                }
                assert_eq!(p0.data()[s], p1.data()[s]);
            }
            assert!((p0.data()[t] - p1.data()[t]).abs() > 0.0);
        }
    }

    #[test]
    fn response_at_t_does_not_reach_prediction_at_t() {
        let m = model(small_config());
        let s = seqs();
        let mut flipped = s.clone();
        flipped[0][3].response ^= 1;
        let a = m.predict(&SequenceBatch::from_sequences(&s, &table(), 8)).unwrap();
        let b = m.predict(&SequenceBatch::from_sequences(&flipped, &table(), 8)).unwrap();
        assert_eq!(&a.data()[..4], &b.data()[..4]);
        assert_ne!(a.data()[4], b.data()[4]);
    }

    #[test]
    fn untied_encoders_own_their_weights() {
        let tied = model(small_config());
        let untied = model(ModelConfig {
            untied_encoders: true,
            ..small_config()
        });
        assert_eq!(tied.stacks.len(), 1);
        assert_eq!(untied.stacks.len(), 4);
        assert!(untied.params.num_scalars() > tied.params.num_scalars());
        let two = model(ModelConfig {
            untied_encoders: true,
            num_encoders: 2,
            ..small_config()
        });
        assert_eq!(two.stack(Role::Negative).as_ptr(), two.stacks[1].as_ptr());
        assert_eq!(two.stack(Role::Prediction).as_ptr(), two.stacks[0].as_ptr());
    }

    #[test]
    fn separate_negative_tables_are_used() {
        let m = model(ModelConfig {
            separate_negative_tables: true,
            ..small_config()
        });
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let mut g = Graph::new();
        let x = m.embed(&mut g, &batch, View::Negative).unwrap();
        let loss = g.mean_all(x);
        let grads = g.backward(loss);
        let pg = g.param_grads(&grads);
        let neg = m.tables.negative.unwrap();
        for id in neg {
            let gsum: f64 = pg.iter().find(|(i, _)| *i == id).unwrap().1.data().iter().map(|v| v.abs()).sum();
            assert!(gsum > 0.0);
        }
        assert!(pg.iter().all(|(i, _)| *i != m.tables.question_difficulty));
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let mut m = model(small_config());
        let id = m.params.find("enc0.layer1.w_1").unwrap();
        m.params.get_mut(id).data_mut()[0] = f64::NAN;
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        assert!(matches!(m.predict(&batch), Err(Error::NonFinite { layer: 1 })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(small_config());
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        assert_eq!(back.predict(&batch).unwrap(), m.predict(&batch).unwrap());
        let bad = m.to_json().unwrap().replace(CHECKPOINT_FORMAT, "other/9");
        assert!(Model::from_json(&bad).is_err());
    }

    #[test]
    fn dropout_only_with_rng() {
        let m = model(ModelConfig {
            dropout: 0.5,
            ..small_config()
        });
        let batch = SequenceBatch::from_sequences(&seqs(), &table(), 8);
        let a = m.predict(&batch).unwrap();
        let b = m.predict(&batch).unwrap();
        assert_eq!(a, b);
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = m
            .forward(&mut g, &batch, View::Positive, Role::Prediction, Some(&mut rng))
            .unwrap();
        assert_ne!(g.value(out.probs), &a);
    }
}
