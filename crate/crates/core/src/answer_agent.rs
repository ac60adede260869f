//! Recurrent classifier that answers questions with the signed remainder of
//! `AB - CD` modulo `E`. Its final hidden state doubles as a difficulty
//! feature vector for the baseline predictor.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{clip_grad_norm, cross_entropy, softmax_rows, Activation, Adam, Dense, Gru, GruCache, Params};
use crate::task::{encode_question, MathQuestion, ENCODED_LEN, NUM_CLASSES, VOCAB_SIZE};
use crate::{Error, Result};

pub const HIDDEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnswerAgentConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Training fails with a report when final train accuracy ends below this.
    pub accuracy_floor: Option<f64>,
}

impl Default for AnswerAgentConfig {
    fn default() -> Self {
        Self { hidden: HIDDEN, epochs: 60, lr: 1e-3, batch_size: 32, seed: 0, clip_norm: 5.0, accuracy_floor: None }
    }
}

/// Encoder plus 17-way head; the trainable part of [`AnswerAgentModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerNet {
    pub gru: Gru,
    pub head: Dense,
}

impl Params for AnswerNet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.gru.visit(&mut |n, s, v| f(&format!("gru.{n}"), s, v));
        self.head.visit(&mut |n, s, v| f(&format!("head.{n}"), s, v));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.gru.visit_mut(&mut |n, s, v| f(&format!("gru.{n}"), s, v));
        self.head.visit_mut(&mut |n, s, v| f(&format!("head.{n}"), s, v));
    }
}

impl AnswerNet {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gru = Gru::new(VOCAB_SIZE, hidden, &mut rng);
        let head = Dense::new(hidden, NUM_CLASSES, Activation::Identity, &mut rng);
        Self { gru, head }
    }

    fn zeros_like(&self) -> Self {
        Self { gru: self.gru.zeros_like(), head: self.head.zeros_like() }
    }

    fn loss_and_grad(&self, xs: &[Array2<f64>], labels: &[usize]) -> (f64, Self) {
        let (h, cache): (Array2<f64>, GruCache) = self.gru.forward_cached(xs);
        let logits = self.head.forward(&h);
        let (loss, dlogits) = cross_entropy(&logits, labels);
        let mut grad = self.zeros_like();
        let dh = self.head.backward(&h, &logits, &dlogits, &mut grad.head);
        self.gru.backward(&cache, &dh, &mut grad.gru);
        (loss, grad)
    }
}

/// One `batch × VOCAB_SIZE` token one-hot per sequence position.
pub fn token_inputs(questions: &[MathQuestion]) -> Vec<Array2<f64>> {
    let mut xs = vec![Array2::zeros((questions.len(), VOCAB_SIZE)); ENCODED_LEN];
    for (i, q) in questions.iter().enumerate() {
        for (p, &t) in encode_question(q).tokens.iter().enumerate() {
            xs[p][[i, t as usize]] = 1.0;
        }
    }
    xs
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerAgentModel {
    pub net: AnswerNet,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    /// Mean training cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_answer_agent(bank: &[MathQuestion], cfg: &AnswerAgentConfig) -> Result<AnswerAgentModel> {
    if bank.is_empty() {
        return Err(Error::InvalidInput("question bank is empty".into()));
    }
    let mut seen = [false; NUM_CLASSES];
    bank.iter().for_each(|q| seen[q.label()] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidInput(format!("bank has no question with label class {missing}")));
    }
    if cfg.hidden == 0 || cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::InvalidInput("hidden, batch size and lr must be positive".into()));
    }
    let mut net = AnswerNet::new(cfg.hidden, cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..bank.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let qs: Vec<MathQuestion> = chunk.iter().map(|&i| bank[i]).collect();
            let labels: Vec<usize> = qs.iter().map(|q| q.label()).collect();
            let (loss, mut grad) = net.loss_and_grad(&token_inputs(&qs), &labels);
            clip_grad_norm(&mut grad, cfg.clip_norm);
            opt.step(&mut net, &grad);
            total += loss * chunk.len() as f64;
        }
        let mean = total / bank.len() as f64;
        if !mean.is_finite() || !net.all_finite() {
            return Err(Error::TrainingFailed("answer agent loss diverged".into()));
        }
        epoch_losses.push(mean);
    }
    let mut model = AnswerAgentModel { net, seed: cfg.seed, epochs: cfg.epochs, train_accuracy: 0.0, epoch_losses };
    model.train_accuracy = model.accuracy(bank);
    if let Some(floor) = cfg.accuracy_floor {
        if model.train_accuracy < floor {
            return Err(Error::TrainingFailed(format!(
                "train accuracy {:.4} below floor {floor} after {} epochs",
                model.train_accuracy, cfg.epochs
            )));
        }
    }
    Ok(model)
}

impl AnswerAgentModel {
    pub fn hidden(&self) -> usize {
        self.net.gru.hidden()
    }

    /// Final hidden states, one row per question.
    pub fn features_batch(&self, questions: &[MathQuestion]) -> Array2<f64> {
        self.net.gru.forward(&token_inputs(questions))
    }

    pub fn extract_features(&self, q: &MathQuestion) -> Vec<f64> {
        self.features_batch(std::slice::from_ref(q)).into_raw_vec_and_offset().0
    }

    pub fn predict_proba_batch(&self, questions: &[MathQuestion]) -> Array2<f64> {
        softmax_rows(&self.net.head.forward(&self.features_batch(questions)))
    }

    pub fn predict_proba(&self, q: &MathQuestion) -> Vec<f64> {
        self.predict_proba_batch(std::slice::from_ref(q)).into_raw_vec_and_offset().0
    }

    /// Argmax classes, processed in chunks to bound memory.
    pub fn answer_batch(&self, questions: &[MathQuestion]) -> Vec<usize> {
        questions
            .chunks(512)
            .flat_map(|c| {
                let p = self.net.head.forward(&self.features_batch(c));
                p.axis_iter(Axis(0))
                    .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn answer(&self, q: &MathQuestion) -> usize {
        self.answer_batch(std::slice::from_ref(q))[0]
    }

    /// Fraction of questions whose argmax class equals the signed-remainder label.
    pub fn accuracy(&self, questions: &[MathQuestion]) -> f64 {
        if questions.is_empty() {
            return f64::NAN;
        }
        let hits = self.answer_batch(questions).iter().zip(questions).filter(|(a, q)| **a == q.label()).count();
        hits as f64 / questions.len() as f64
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "answer_agent")
            .set_meta("hidden", self.hidden())
            .set_meta("seed", self.seed)
            .set_meta("epochs", self.epochs)
            .set_meta("train_accuracy", self.train_accuracy);
        ck.add_params("net.", &self.net);
        ck.push("epoch_losses", &[self.epoch_losses.len()], &self.epoch_losses);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("answer_agent") {
            return Err(Error::Checkpoint("not an answer agent checkpoint".into()));
        }
        let mut net = AnswerNet::new(ck.meta_parse("hidden")?, 0);
        ck.load_params("net.", &mut net)?;
        Ok(Self {
            net,
            seed: ck.meta_parse("seed")?,
            epochs: ck.meta_parse("epochs")?,
            train_accuracy: ck.meta_parse("train_accuracy")?,
            epoch_losses: ck.tensor("epoch_losses").map(|t| t.data.clone()).unwrap_or_default(),
        })
    }
}
