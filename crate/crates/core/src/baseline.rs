//! No-pressure baseline: choice, its confidence, and response time.
//!
//! A linear max-margin classifier (dual coordinate descent on the hinge
//! loss) predicts the choice, a Platt sigmoid on its margin gives the
//! probability of the predicted choice `R_p`, and ridge regression on the
//! same standardized inputs gives the response time `R_t`. The trial number
//! is appended as one extra standardized input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::linalg::cholesky_solve;
use crate::metrics::mape;
use crate::nn::sigmoid;
use crate::{Error, Result};

pub const RT_MIN: f64 = 0.2;
pub const RT_MAX: f64 = 10.0;
pub const MIN_ROWS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrediction {
    /// Predicted choice `R_c`.
    pub choice: bool,
    /// Probability of the predicted choice `R_p`, in `[0.5, 1]`.
    pub confidence: f64,
    /// Predicted no-pressure response time `R_t` in seconds.
    pub rt: f64,
    /// Whether `rt` hit the `[0.2, 10]` clamp.
    pub clamped: bool,
}

impl BaselinePrediction {
    pub fn new(choice: bool, confidence: f64, rt: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&confidence) {
            return Err(Error::InvalidInput(format!("confidence {confidence} outside [0.5, 1]")));
        }
        if !(rt > 0.0 && rt <= RT_MAX) {
            return Err(Error::InvalidInput(format!("rt {rt} outside (0, {RT_MAX}]")));
        }
        Ok(Self { choice, confidence, rt, clamped: false })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub features: Vec<f64>,
    pub trial: usize,
    pub choice: bool,
    pub rt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub seed: u64,
    /// Hinge-loss box constraint.
    pub svm_c: f64,
    pub svm_passes: usize,
    pub ridge_lambda: f64,
    /// Fraction of rows held out for the fit report.
    pub holdout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { seed: 0, svm_c: 1.0, svm_passes: 200, ridge_lambda: 1.0, holdout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineModel {
    /// Per-input standardization, including the trial column last.
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub svm_w: Vec<f64>,
    pub svm_b: f64,
    pub platt_a: f64,
    pub platt_b: f64,
    pub ridge_w: Vec<f64>,
    pub ridge_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub holdout_choice_accuracy: f64,
    pub holdout_rt_mape: f64,
    pub holdout_clamped: usize,
}

fn validate(rows: &[BaselineRow]) -> Result<usize> {
    if rows.len() < MIN_ROWS {
        return Err(Error::InvalidInput(format!("need at least {MIN_ROWS} rows, got {}", rows.len())));
    }
    let dim = rows[0].features.len();
    let positives = rows.iter().filter(|r| r.choice).count();
    if positives == 0 || positives == rows.len() {
        return Err(Error::InvalidInput("both choice classes must be present".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.features.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.features.len() });
        }
        if r.features.iter().any(|x| !x.is_finite()) || !r.rt.is_finite() {
            return Err(Error::InvalidInput(format!("row {i} has non-finite values")));
        }
        if r.rt <= 0.0 {
            return Err(Error::InvalidInput(format!("row {i} has non-positive rt")));
        }
    }
    Ok(dim)
}

fn raw_inputs(r: &BaselineRow) -> Vec<f64> {
    let mut x = r.features.clone();
    x.push(r.trial as f64);
    x
}

/// Fits on a seeded split and reports metrics on the held-out part.
pub fn fit_baseline(rows: &[BaselineRow], cfg: &BaselineConfig) -> Result<(BaselineModel, BaselineReport)> {
    validate(rows)?;
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_hold = ((rows.len() as f64 * cfg.holdout.clamp(0.0, 0.5)).round() as usize).min(rows.len() - MIN_ROWS);
    let (hold, train) = idx.split_at(n_hold);
    let train_rows: Vec<BaselineRow> = train.iter().map(|&i| rows[i].clone()).collect();
    let model = fit_on(&train_rows, cfg)?;
    let mut report = BaselineReport {
        train_rows: train.len(),
        holdout_rows: hold.len(),
        holdout_choice_accuracy: f64::NAN,
        holdout_rt_mape: f64::NAN,
        holdout_clamped: 0,
    };
    if !hold.is_empty() {
        let preds: Vec<BaselinePrediction> =
            hold.iter().map(|&i| model.predict(&rows[i].features, rows[i].trial)).collect::<Result<_>>()?;
        report.holdout_choice_accuracy =
            preds.iter().zip(hold).filter(|(p, &i)| p.choice == rows[i].choice).count() as f64 / hold.len() as f64;
        let rts: Vec<f64> = preds.iter().map(|p| p.rt).collect();
        let labels: Vec<f64> = hold.iter().map(|&i| rows[i].rt).collect();
        report.holdout_rt_mape = mape(&rts, &labels)?;
        report.holdout_clamped = preds.iter().filter(|p| p.clamped).count();
    }
    Ok((model, report))
}

fn fit_on(rows: &[BaselineRow], cfg: &BaselineConfig) -> Result<BaselineModel> {
    let dim = validate(rows)? + 1;
    let n = rows.len() as f64;
    let raw: Vec<Vec<f64>> = rows.iter().map(raw_inputs).collect();
    let mut mean = vec![0.0; dim];
    for x in &raw {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for x in &raw {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let xs: Vec<Vec<f64>> = raw
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();

    let (svm_w, svm_b) = fit_svm(&xs, rows, cfg);
    let margins: Vec<f64> = xs.iter().map(|x| dot(&svm_w, x) + svm_b).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.choice).collect();
    let (platt_a, platt_b) = fit_platt(&margins, &labels);
    let (ridge_w, ridge_b) = fit_ridge(&xs, rows, cfg.ridge_lambda)?;
    Ok(BaselineModel { mean, scale, svm_w, svm_b, platt_a, platt_b, ridge_w, ridge_b })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L1-loss linear SVM by dual coordinate descent; the bias is an extra unit input.
fn fit_svm(xs: &[Vec<f64>], rows: &[BaselineRow], cfg: &BaselineConfig) -> (Vec<f64>, f64) {
    let dim = xs[0].len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut alpha = vec![0.0; xs.len()];
    let q: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for _ in 0..cfg.svm_passes {
        order.shuffle(&mut rng);
        let mut max_pg: f64 = 0.0;
        for &i in &order {
            let y = if rows[i].choice { 1.0 } else { -1.0 };
            let g = y * (dot(&w, &xs[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.svm_c {
                g.max(0.0)
            } else {
                g
            };
            max_pg = max_pg.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, cfg.svm_c);
                let d = (alpha[i] - old) * y;
                for (wj, xj) in w.iter_mut().zip(&xs[i]) {
                    *wj += d * xj;
                }
                b += d;
            }
        }
        if max_pg < 1e-3 {
            break;
        }
    }
    (w, b)
}

/// Platt scaling `P(true | f) = 1 / (1 + exp(A f + B))` fitted by Newton's method
/// with regularized targets.
fn fit_platt(margins: &[f64], labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let hi = (pos + 1.0) / (pos + 2.0);
    let lo = 1.0 / (neg + 2.0);
    let t: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        margins
            .iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = a * f + b;
                // -[t log p + (1-t) log(1-p)] with p = sigmoid(-z)
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((neg + 1.0) / (pos + 1.0)).ln());
    let mut fval = objective(a, b);
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
        for (&f, &ti) in margins.iter().zip(&t) {
            let p = sigmoid(-(a * f + b));
            let d2 = p * (1.0 - p);
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-7 && g2.abs() < 1e-7 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    (a, b)
}

fn fit_ridge(xs: &[Vec<f64>], rows: &[BaselineRow], lambda: f64) -> Result<(Vec<f64>, f64)> {
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let y_mean = rows.iter().map(|r| r.rt).sum::<f64>() / n;
    // inputs are standardized, so centering only the target leaves the intercept at y_mean
    let mut a = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for (x, r) in xs.iter().zip(rows) {
        let y = r.rt - y_mean;
        for i in 0..dim {
            rhs[i] += x[i] * y;
            let xi = x[i];
            let row = &mut a[i * dim..(i + 1) * dim];
            for (aij, xj) in row.iter_mut().zip(x) {
                *aij += xi * xj;
            }
        }
    }
    for i in 0..dim {
        a[i * dim + i] += lambda;
    }
    let w = cholesky_solve(&a, &rhs, dim)?;
    let mean_x: Vec<f64> = (0..dim).map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    Ok((w.clone(), y_mean - dot(&w, &mean_x)))
}

impl BaselineModel {
    pub fn feature_dim(&self) -> usize {
        self.mean.len() - 1
    }

    fn standardize(&self, features: &[f64], trial: usize) -> Result<Vec<f64>> {
        if features.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch { expected: self.feature_dim(), got: features.len() });
        }
        Ok(features
            .iter()
            .chain(std::iter::once(&(trial as f64)))
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    /// Linear predicted RT before clamping.
    pub fn raw_rt(&self, features: &[f64], trial: usize) -> Result<f64> {
        let x = self.standardize(features, trial)?;
        Ok(dot(&self.ridge_w, &x) + self.ridge_b)
    }

    pub fn predict(&self, features: &[f64], trial: usize) -> Result<BaselinePrediction> {
        let x = self.standardize(features, trial)?;
        let margin = dot(&self.svm_w, &x) + self.svm_b;
        let p_true = sigmoid(-(self.platt_a * margin + self.platt_b));
        let choice = p_true >= 0.5;
        let confidence = if choice { p_true } else { 1.0 - p_true };
        let raw = dot(&self.ridge_w, &x) + self.ridge_b;
        let rt = raw.clamp(RT_MIN, RT_MAX);
        Ok(BaselinePrediction { choice, confidence, rt, clamped: rt != raw })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "baseline");
        let d = self.mean.len();
        ck.push("scale.mean", &[d], &self.mean);
        ck.push("scale.std", &[d], &self.scale);
        ck.push("svm.w", &[d], &self.svm_w);
        ck.push("svm.b", &[1], &[self.svm_b]);
        ck.push("platt", &[2], &[self.platt_a, self.platt_b]);
        ck.push("ridge.w", &[d], &self.ridge_w);
        ck.push("ridge.b", &[1], &[self.ridge_b]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("baseline") {
            return Err(Error::Checkpoint("not a baseline checkpoint".into()));
        }
        let get = |n: &str| ck.tensor(n).map(|t| t.data.clone()).ok_or_else(|| Error::Checkpoint(format!("missing {n}")));
        let platt = get("platt")?;
        Ok(Self {
            mean: get("scale.mean")?,
            scale: get("scale.std")?,
            svm_w: get("svm.w")?,
            svm_b: get("svm.b")?[0],
            platt_a: platt[0],
            platt_b: platt[1],
            ridge_w: get("ridge.w")?,
            ridge_b: get("ridge.b")?[0],
        })
    }
}

/// Reliability buckets by `R_p` decile: `(mean confidence, empirical hit rate, count)`.
pub fn calibration_table(preds: &[BaselinePrediction], observed: &[bool]) -> Vec<(f64, f64, usize)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].confidence.total_cmp(&preds[b].confidence));
    let n = order.len();
    (0..10)
        .filter_map(|d| {
            let chunk = &order[d * n / 10..(d + 1) * n / 10];
            if chunk.is_empty() {
                return None;
            }
            let k = chunk.len() as f64;
            let conf = chunk.iter().map(|&i| preds[i].confidence).sum::<f64>() / k;
            let hits = chunk.iter().filter(|&&i| preds[i].choice == observed[i]).count() as f64 / k;
            Some((conf, hits, chunk.len()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two noisy clusters whose labels are right 90% of the time; RT linear in one feature.
    fn synthetic(n: usize, seed: u64) -> Vec<BaselineRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let truth = rng.random_bool(0.5);
                let c = if truth { 1.0 } else { -1.0 };
                let features: Vec<f64> = (0..4).map(|j| if j == 0 { c + rng.random_range(-0.5..0.5) } else { rng.random_range(-1.0..1.0) }).collect();
                let choice = if rng.random_bool(0.9) { truth } else { !truth };
                let trial = i % 100;
                let rt = 3.0 + 0.5 * features[1] + 0.002 * trial as f64 + rng.random_range(-0.1..0.1);
                BaselineRow { features, trial, choice, rt }
            })
            .collect()
    }

    #[test]
    fn fits_and_calibrates() {
        let rows = synthetic(3000, 1);
        let (model, report) = fit_baseline(&rows, &BaselineConfig::default()).unwrap();
        assert!(report.holdout_choice_accuracy > 0.85, "{report:?}");
        assert!(report.holdout_rt_mape < 0.05, "{report:?}");
        let test = synthetic(2000, 2);
        let preds: Vec<_> = test.iter().map(|r| model.predict(&r.features, r.trial).unwrap()).collect();
        assert!(preds.iter().all(|p| p.confidence >= 0.5 && p.rt > 0.0));
        let observed: Vec<bool> = test.iter().map(|r| r.choice).collect();
        for (conf, hit, _) in calibration_table(&preds, &observed) {
            assert!((conf - hit).abs() <= 0.15, "bucket conf {conf} hit {hit}");
        }
    }

    #[test]
    fn deterministic_refit() {
        let rows = synthetic(500, 3);
        let a = fit_baseline(&rows, &BaselineConfig::default()).unwrap().0;
        let b = fit_baseline(&rows, &BaselineConfig::default()).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rows = synthetic(100, 4);
        assert!(fit_baseline(&rows[..10], &BaselineConfig::default()).is_err());
        for r in &mut rows {
            r.choice = true;
        }
        assert!(fit_baseline(&rows, &BaselineConfig::default()).is_err());
        let mut rows = synthetic(100, 4);
        rows[3].features[0] = f64::NAN;
        assert!(fit_baseline(&rows, &BaselineConfig::default()).is_err());
        let (model, _) = fit_baseline(&synthetic(100, 5), &BaselineConfig::default()).unwrap();
        assert!(matches!(model.predict(&[0.0; 3], 0), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rt_is_clamped_and_flagged() {
        let (mut model, _) = fit_baseline(&synthetic(200, 6), &BaselineConfig::default()).unwrap();
        model.ridge_b = -50.0;
        let p = model.predict(&[0.0; 4], 0).unwrap();
        assert_eq!(p.rt, RT_MIN);
        assert!(p.clamped);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, _) = fit_baseline(&synthetic(200, 7), &BaselineConfig::default()).unwrap();
        let ck = Checkpoint::from_text(&model.to_checkpoint().to_text()).unwrap();
        assert_eq!(BaselineModel::from_checkpoint(&ck).unwrap(), model);
    }
}
