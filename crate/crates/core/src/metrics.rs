//! Evaluation math: MAPE, control-vs-feedback session deltas, and the
//! five-block trend and feedback-percentage analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RT_VALID_MIN: f64 = 0.8;
pub const RT_VALID_MAX: f64 = 10.0;
pub const NUM_BLOCKS: usize = 5;

pub fn rt_is_valid(rt: f64) -> bool {
    (RT_VALID_MIN..=RT_VALID_MAX).contains(&rt)
}

/// Mean absolute percentage error, `(1/n) Σ |ŷ − y| / |y|`.
pub fn mape(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), got: predictions.len() });
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("mape needs at least one sample".into()));
    }
    let mut sum = 0.0;
    for (p, y) in predictions.iter().zip(labels) {
        if *y == 0.0 {
            return Err(Error::InvalidInput("mape label is zero".into()));
        }
        sum += ((p - y) / y).abs();
    }
    Ok(sum / labels.len() as f64)
}

/// One answered trial, as far as the metrics care.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub rt: f64,
    pub correct: bool,
    pub pressure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub accuracy: f64,
    pub rt: f64,
    pub attention: Option<f64>,
    pub anxiety: Option<f64>,
    pub valid_trials: usize,
    pub total_trials: usize,
}

/// Summarizes a test session; trials outside the valid RT window are dropped first.
pub fn summarize(trials: &[TrialOutcome], attention: Option<f64>, anxiety: Option<f64>) -> Result<SessionSummary> {
    let valid: Vec<&TrialOutcome> = trials.iter().filter(|t| rt_is_valid(t.rt)).collect();
    if valid.is_empty() {
        return Err(Error::InvalidInput("session has no valid trials".into()));
    }
    for s in [attention, anxiety].into_iter().flatten() {
        if !(1.0..=7.0).contains(&s) {
            return Err(Error::InvalidInput(format!("questionnaire score {s} outside 1..=7")));
        }
    }
    let n = valid.len() as f64;
    Ok(SessionSummary {
        accuracy: valid.iter().filter(|t| t.correct).count() as f64 / n,
        rt: valid.iter().map(|t| t.rt).sum::<f64>() / n,
        attention,
        anxiety,
        valid_trials: valid.len(),
        total_trials: trials.len(),
    })
}

/// Absolute and relative change of one measure from control to feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub absolute: Option<f64>,
    /// `None` when the control value is zero or the measure is absent.
    pub relative: Option<f64>,
}

impl Delta {
    fn between(control: Option<f64>, feedback: Option<f64>) -> Self {
        match (control, feedback) {
            (Some(c), Some(f)) => {
                let absolute = f - c;
                Self { absolute: Some(absolute), relative: (c != 0.0).then(|| absolute / c) }
            }
            _ => Self { absolute: None, relative: None },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionDelta {
    pub accuracy: Delta,
    pub response_time: Delta,
    pub attention: Delta,
    pub anxiety: Delta,
}

pub fn session_delta(control: &SessionSummary, feedback: &SessionSummary) -> SessionDelta {
    SessionDelta {
        accuracy: Delta::between(Some(control.accuracy), Some(feedback.accuracy)),
        response_time: Delta::between(Some(control.rt), Some(feedback.rt)),
        attention: Delta::between(control.attention, feedback.attention),
        anxiety: Delta::between(control.anxiety, feedback.anxiety),
    }
}

impl SessionDelta {
    pub fn rows(&self) -> [(&'static str, Delta); 4] {
        [
            ("accuracy", self.accuracy),
            ("response_time", self.response_time),
            ("attention", self.attention),
            ("anxiety", self.anxiety),
        ]
    }

    /// `type,metric,value` rows; undefined values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("type,metric,value\n");
        for (name, d) in self.rows() {
            out.push_str(&format!("absolute,{name},{}\n", fmt(d.absolute)));
        }
        for (name, d) in self.rows() {
            out.push_str(&format!("relative,{name},{}\n", fmt(d.relative)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub trials: usize,
    pub valid_trials: usize,
    pub mean_rt: f64,
    pub mean_accuracy: f64,
    /// Share of all trials in the block that were served with pressure.
    pub feedback_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub blocks: Vec<Block>,
    /// `(Block_i − Block_1) / Block_1` for blocks 2..=5.
    pub relative_rt: Vec<Option<f64>>,
    pub relative_accuracy: Vec<Option<f64>>,
}

/// Chronological five-way split; the last block absorbs any remainder.
pub fn block_bounds(n: usize) -> Vec<std::ops::Range<usize>> {
    let size = n / NUM_BLOCKS;
    (0..NUM_BLOCKS)
        .map(|i| {
            let end = if i + 1 == NUM_BLOCKS { n } else { (i + 1) * size };
            i * size..end
        })
        .collect()
}

pub fn block_stats(trials: &[TrialOutcome]) -> Result<BlockStats> {
    if trials.len() < NUM_BLOCKS {
        return Err(Error::InvalidInput(format!("need at least {NUM_BLOCKS} trials, got {}", trials.len())));
    }
    let blocks: Vec<Block> = block_bounds(trials.len())
        .into_iter()
        .map(|r| {
            let chunk = &trials[r];
            let valid: Vec<&TrialOutcome> = chunk.iter().filter(|t| rt_is_valid(t.rt)).collect();
            let nv = valid.len() as f64;
            Block {
                trials: chunk.len(),
                valid_trials: valid.len(),
                mean_rt: if valid.is_empty() { f64::NAN } else { valid.iter().map(|t| t.rt).sum::<f64>() / nv },
                mean_accuracy: if valid.is_empty() {
                    f64::NAN
                } else {
                    valid.iter().filter(|t| t.correct).count() as f64 / nv
                },
                feedback_pct: chunk.iter().filter(|t| t.pressure).count() as f64 / chunk.len() as f64,
            }
        })
        .collect();
    let rel = |get: fn(&Block) -> f64| -> Vec<Option<f64>> {
        let first = get(&blocks[0]);
        blocks[1..]
            .iter()
            .map(|b| (first != 0.0 && first.is_finite() && get(b).is_finite()).then(|| (get(b) - first) / first))
            .collect()
    };
    let relative_rt = rel(|b| b.mean_rt);
    let relative_accuracy = rel(|b| b.mean_accuracy);
    Ok(BlockStats { blocks, relative_rt, relative_accuracy })
}

impl BlockStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,trials,valid_trials,mean_rt,mean_accuracy,feedback_pct,relative_rt,relative_accuracy\n");
        for (i, b) in self.blocks.iter().enumerate() {
            let (rr, ra) = if i == 0 {
                ("0".to_string(), "0".to_string())
            } else {
                let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
                (f(self.relative_rt[i - 1]), f(self.relative_accuracy[i - 1]))
            };
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{rr},{ra}\n",
                i + 1,
                b.trials,
                b.valid_trials,
                b.mean_rt,
                b.mean_accuracy,
                b.feedback_pct
            ));
        }
        out
    }
}

/// Fraction of bootstrap resamples (of the mean) that come out strictly positive.
pub fn bootstrap_positive_fraction(samples: &[f64], resamples: usize, seed: u64) -> f64 {
    if samples.is_empty() || resamples == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();
    let positive = (0..resamples)
        .filter(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() > 0.0)
        .count();
    positive as f64 / resamples as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
