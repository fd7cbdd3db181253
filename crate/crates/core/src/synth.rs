//! Synthetic interaction logs with known ground truth.
//!
//! Students have a latent ability and learn each concept a little with every
//! practice attempt; questions have a latent difficulty around their
//! concept's. A response is correct with probability
//! `sigmoid(discrimination * (ability + learning * practice - difficulty))`.
//! Question and concept texts are generated so that harder items get longer
//! wording built from rarer words.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::dataset::{Interaction, TextMap};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub students: usize,
    pub questions: usize,
    pub concepts: usize,
    pub min_seq_len: usize,
    pub max_seq_len: usize,
    /// Mean latent ability; positive values give the majority-correct
    /// logs typical of tutoring data.
    pub ability_mean: f64,
    pub ability_std: f64,
    pub difficulty_std: f64,
    pub discrimination: f64,
    /// Ability gained per earlier attempt on the same concept.
    pub learning_rate: f64,
    /// Extra questions, each answered by exactly one student, so that a
    /// student-level split leaves some test items unseen in training.
    pub rare_questions_per_student: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            students: 200,
            questions: 50,
            concepts: 10,
            min_seq_len: 30,
            max_seq_len: 80,
            ability_mean: 0.6,
            ability_std: 1.0,
            difficulty_std: 1.0,
            discrimination: 1.7,
            learning_rate: 0.05,
            rare_questions_per_student: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTruth {
    pub id: String,
    pub concept: String,
    pub difficulty: f64,
    pub rare: bool,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub question_texts: TextMap,
    pub concept_texts: TextMap,
    pub abilities: BTreeMap<String, f64>,
    pub questions: Vec<QuestionTruth>,
}

const WORDS: [&[&str]; 3] = [
    &["add", "sum", "one", "two", "cat", "dog", "red", "map", "pen", "box", "sun", "cup"],
    &["fraction", "decimal", "triangle", "percent", "average", "equation", "pattern", "measure"],
    &[
        "differentiate",
        "logarithmic",
        "eigenvector",
        "probabilistic",
        "hypotenuse",
        "trigonometric",
        "combinatorial",
        "asymptotically",
    ],
];

/// Text whose length and vocabulary grow with `hardness` in `[0, 1]`.
pub fn text_for_hardness<R: Rng + ?Sized>(hardness: f64, rng: &mut R) -> String {
    let h = hardness.clamp(0.0, 1.0);
    let noise = Normal::new(0.0, 6.0).expect("valid std");
    let target = (12.0 + 130.0 * h + noise.sample(rng)).clamp(6.0, 170.0) as usize;
    let tier = ((h * 3.0) as usize).min(2);
    let mut out = String::new();
    while out.len() < target {
        let t = if rng.random_bool(0.75) { tier } else { rng.random_range(0..3) };
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(WORDS[t].choose(rng).expect("non-empty word list"));
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.students == 0 || cfg.questions == 0 || cfg.concepts == 0 {
        return Err(Error::Config("synthetic students, questions and concepts must be positive".into()));
    }
    if cfg.min_seq_len == 0 || cfg.min_seq_len > cfg.max_seq_len {
        return Err(Error::Config(format!(
            "need 1 <= min_seq_len <= max_seq_len, got {} and {}",
            cfg.min_seq_len, cfg.max_seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ability = Normal::new(cfg.ability_mean, cfg.ability_std.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;
    let spread = Normal::new(0.0, cfg.difficulty_std.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, 0.5 * cfg.difficulty_std.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;

    let concept_difficulty: Vec<f64> = (0..cfg.concepts).map(|_| spread.sample(&mut rng)).collect();
    let mut questions: Vec<QuestionTruth> = (0..cfg.questions)
        .map(|q| {
            let c = q % cfg.concepts;
            QuestionTruth {
                id: format!("q{q}"),
                concept: format!("c{c}"),
                difficulty: concept_difficulty[c] + jitter.sample(&mut rng),
                rare: false,
            }
        })
        .collect();

    // Hardness on [0, 1] for text generation: the probability an average
    // student gets the item wrong.
    let hardness = |d: f64| 1.0 - sigmoid(-cfg.discrimination * d);
    let mut question_texts = TextMap::new();
    let mut concept_texts = TextMap::new();
    for (c, &d) in concept_difficulty.iter().enumerate() {
        concept_texts.insert(format!("c{c}"), text_for_hardness(hardness(d), &mut rng));
    }

    let mut interactions = Vec::new();
    let mut abilities = BTreeMap::new();
    for s in 0..cfg.students {
        let sid = format!("s{s}");
        let theta = ability.sample(&mut rng);
        abilities.insert(sid.clone(), theta);
        let len = rng.random_range(cfg.min_seq_len..=cfg.max_seq_len);
        let mut plan: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.questions)).collect();
        for _ in 0..cfg.rare_questions_per_student {
            let q = questions.len();
            let c = rng.random_range(0..cfg.concepts);
            questions.push(QuestionTruth {
                id: format!("r{q}"),
                concept: format!("c{c}"),
                difficulty: concept_difficulty[c] + jitter.sample(&mut rng),
                rare: true,
            });
            let at = rng.random_range(0..=plan.len());
            plan.insert(at, q);
        }
        let mut practice = vec![0usize; cfg.concepts];
        for (t, &q) in plan.iter().enumerate() {
            let qt = &questions[q];
            let c: usize = qt.concept[1..].parse().expect("generated concept id");
            let skill = theta + cfg.learning_rate * practice[c] as f64;
            let p = sigmoid(cfg.discrimination * (skill - qt.difficulty));
            practice[c] += 1;
            interactions.push(Interaction {
                student_id: sid.clone(),
                question_id: qt.id.clone(),
                concept_id: qt.concept.clone(),
                response: u8::from(rng.random_bool(p)),
                timestamp: Some(t as i64),
            });
        }
    }
    for q in &questions {
        question_texts.insert(q.id.clone(), text_for_hardness(hardness(q.difficulty), &mut rng));
    }
    Ok(SynthData {
        interactions,
        question_texts,
        concept_texts,
        abilities,
        questions,
    })
}
