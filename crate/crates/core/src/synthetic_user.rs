//! Parametric stand-in for a human participant.
//!
//! Response time follows
//! `rt = clamp(μ0 + fatigue·i − g_a·[pressure] + g_x·x + noise, 0.8, 10)`
//! where `x` is an anxiety level that grows by one per pressured trial and
//! decays by `ρ` per unpressured one. Pressure buys a short-term speed-up
//! (arousal) but sustained pressure accumulates anxiety, so neither
//! "always on" nor "always off" is the best schedule.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::{RT_VALID_MAX, RT_VALID_MIN};
use crate::task::{MathQuestion, QuestionGenerator};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticUserConfig {
    pub base_rt: f64,
    pub noise_sd: f64,
    pub p_acc: f64,
    pub arousal_gain: f64,
    pub anxiety_gain: f64,
    pub recovery: f64,
    pub fatigue: f64,
}

impl Default for SyntheticUserConfig {
    fn default() -> Self {
        Self {
            base_rt: 3.0,
            noise_sd: 0.3,
            p_acc: 0.95,
            arousal_gain: 0.4,
            anxiety_gain: 0.15,
            recovery: 1.0,
            fatigue: 0.002,
        }
    }
}

impl SyntheticUserConfig {
    /// Same dynamics with the noise switched off.
    pub fn deterministic(self) -> Self {
        Self { noise_sd: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1.0..=6.0).contains(&self.base_rt) {
            return Err(Error::InvalidInput(format!("base_rt {} outside [1, 6]", self.base_rt)));
        }
        if !(self.p_acc > 0.5 && self.p_acc <= 1.0) {
            return Err(Error::InvalidInput(format!("p_acc {} outside (0.5, 1]", self.p_acc)));
        }
        let gains = [self.arousal_gain, self.anxiety_gain, self.recovery, self.noise_sd];
        if gains.iter().any(|g| *g < 0.0 || !g.is_finite()) {
            return Err(Error::InvalidInput("gains, recovery and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-user parameter distribution: `base_rt ~ U[lo, hi]`, everything else fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Population {
    pub base_rt_lo: f64,
    pub base_rt_hi: f64,
    pub template: SyntheticUserConfig,
}

impl Default for Population {
    fn default() -> Self {
        Self { base_rt_lo: 2.0, base_rt_hi: 4.0, template: SyntheticUserConfig::default() }
    }
}

impl Population {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticUserConfig {
        let base_rt = if self.base_rt_hi > self.base_rt_lo {
            rng.random_range(self.base_rt_lo..self.base_rt_hi)
        } else {
            self.base_rt_lo
        };
        SyntheticUserConfig { base_rt, ..self.template }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserResponse {
    pub choice: bool,
    pub correct: bool,
    pub rt: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticUser {
    cfg: SyntheticUserConfig,
    anxiety: f64,
    trial: usize,
    rng: ChaCha8Rng,
}

impl SyntheticUser {
    pub fn new(cfg: SyntheticUserConfig, seed: u64) -> Self {
        Self { cfg, anxiety: 0.0, trial: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn config(&self) -> &SyntheticUserConfig {
        &self.cfg
    }

    pub fn anxiety(&self) -> f64 {
        self.anxiety
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn respond(&mut self, q: &MathQuestion, pressure_on: bool) -> UserResponse {
        // draw both variates every trial so schedules share one noise stream
        let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut self.rng);
        let u: f64 = self.rng.random();
        let c = &self.cfg;
        let raw = c.base_rt + c.fatigue * self.trial as f64 - if pressure_on { c.arousal_gain } else { 0.0 }
            + c.anxiety_gain * self.anxiety
            + c.noise_sd * z;
        let rt = raw.clamp(RT_VALID_MIN, RT_VALID_MAX);
        self.anxiety = if pressure_on { self.anxiety + 1.0 } else { (self.anxiety - c.recovery).max(0.0) };
        self.trial += 1;
        let correct = u < c.p_acc;
        let choice = if correct { q.truth() } else { !q.truth() };
        UserResponse { choice, correct, rt }
    }
}

/// Mean RT of a fresh noise-free user under a fixed schedule.
pub fn schedule_mean_rt(cfg: &SyntheticUserConfig, schedule: &[bool]) -> f64 {
    let mut user = SyntheticUser::new(cfg.deterministic(), 0);
    let q = MathQuestion { ab: 50, cd: 50, e: 2 };
    schedule.iter().map(|&p| user.respond(&q, p).rt).sum::<f64>() / schedule.len() as f64
}

pub const MAX_SEARCH_HORIZON: usize = 20;

/// Exhaustive search over all `2^H` pressure schedules for the lowest mean RT.
///
/// Ties resolve to the lexicographically smallest schedule (off < on).
pub fn optimal_short_horizon_policy(cfg: &SyntheticUserConfig, horizon: usize) -> Result<(Vec<bool>, f64)> {
    if cfg.noise_sd != 0.0 {
        return Err(Error::InvalidInput("exhaustive search requires a noise-free user".into()));
    }
    if horizon == 0 || horizon > MAX_SEARCH_HORIZON {
        return Err(Error::InvalidInput(format!("horizon must be in 1..={MAX_SEARCH_HORIZON}")));
    }
    let decode = |mask: u32| (0..horizon).map(|i| mask >> (horizon - 1 - i) & 1 == 1).collect::<Vec<_>>();
    let mut best = (0u32, f64::INFINITY);
    for mask in 0..(1u32 << horizon) {
        let m = schedule_mean_rt(cfg, &decode(mask));
        if m < best.1 {
            best = (mask, m);
        }
    }
    Ok((decode(best.0), best.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub user_id: usize,
    pub trial: usize,
    pub question: MathQuestion,
    pub pressure: bool,
    pub choice: bool,
    pub rt: f64,
}

impl DatasetRow {
    pub fn correct(&self) -> bool {
        self.choice == self.question.truth()
    }
}

/// Simulated prior-study data: each trial is pressured with probability 0.5.
pub fn generate_dataset(n_users: usize, trials_per_user: usize, population: &Population, seed: u64) -> Result<Vec<DatasetRow>> {
    if n_users == 0 {
        return Err(Error::InvalidInput("need at least one user".into()));
    }
    population.template.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_users * trials_per_user);
    for user_id in 0..n_users {
        let cfg = population.sample(&mut rng);
        let mut user = SyntheticUser::new(cfg, rng.random());
        let mut questions = QuestionGenerator::new(rng.random());
        for trial in 0..trials_per_user {
            let q = questions.generate();
            let pressure = rng.random_bool(0.5);
            let r = user.respond(&q, pressure);
            rows.push(DatasetRow { user_id, trial, question: q, pressure, choice: r.choice, rt: r.rt });
        }
    }
    Ok(rows)
}

pub const DATASET_HEADER: &str = "user_id,trial,ab,cd,e,pressure,choice,rt";

/// Writes the dataset CSV. `provenance` lines are emitted first as `#` comments.
pub fn write_dataset<W: Write>(mut w: W, rows: &[DatasetRow], provenance: &[String]) -> Result<()> {
    for p in provenance {
        writeln!(w, "# {p}")?;
    }
    writeln!(w, "{DATASET_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.user_id,
            r.trial,
            r.question.ab,
            r.question.cd,
            r.question.e,
            u8::from(r.pressure),
            u8::from(r.choice),
            r.rt
        )?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<DatasetRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() || line.starts_with("user_id") {
            continue;
        }
        let bad = |what: &str| Error::InvalidInput(format!("dataset line {}: bad {what}", i + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 8 {
            return Err(bad("field count"));
        }
        let flag = |s: &str, what: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        rows.push(DatasetRow {
            user_id: f[0].parse().map_err(|_| bad("user_id"))?,
            trial: f[1].parse().map_err(|_| bad("trial"))?,
            question: MathQuestion::new(
                f[2].parse().map_err(|_| bad("ab"))?,
                f[3].parse().map_err(|_| bad("cd"))?,
                f[4].parse().map_err(|_| bad("e"))?,
            )?,
            pressure: flag(f[5], "pressure")?,
            choice: flag(f[6], "choice")?,
            rt: f[7].parse().map_err(|_| bad("rt"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: MathQuestion = MathQuestion { ab: 83, cd: 27, e: 7 };

    fn still(base: f64, g_a: f64, g_x: f64) -> SyntheticUserConfig {
        SyntheticUserConfig { base_rt: base, noise_sd: 0.0, arousal_gain: g_a, anxiety_gain: g_x, fatigue: 0.0, ..Default::default() }
    }

    #[test]
    fn disabled_dynamics_return_base() {
        let mut u = SyntheticUser::new(still(3.0, 0.0, 0.0), 1);
        for i in 0..50 {
            assert_eq!(u.respond(&Q, i % 3 == 0).rt, 3.0);
        }
    }

    #[test]
    fn pressured_trial_closed_forms() {
        let cfg = still(3.0, 0.4, 0.15);
        let mut u = SyntheticUser::new(cfg, 1);
        assert!((u.respond(&Q, true).rt - 2.6).abs() < 1e-12);
        let mut u = SyntheticUser::new(cfg, 1);
        for k in 1..=12 {
            let rt = u.respond(&Q, true).rt;
            assert!((rt - (3.0 - 0.4 + 0.15 * (k as f64 - 1.0))).abs() < 1e-12, "k={k}");
        }
        assert_eq!(u.anxiety(), 12.0);
        // recovery
        u.respond(&Q, false);
        assert_eq!(u.anxiety(), 11.0);
    }

    #[test]
    fn rt_is_clamped() {
        let cfg = SyntheticUserConfig { base_rt: 1.0, arousal_gain: 5.0, noise_sd: 0.0, ..Default::default() };
        assert_eq!(SyntheticUser::new(cfg, 0).respond(&Q, true).rt, 0.8);
        let cfg = SyntheticUserConfig { base_rt: 6.0, anxiety_gain: 2.0, noise_sd: 0.0, ..Default::default() };
        let mut u = SyntheticUser::new(cfg, 0);
        let last = (0..10).map(|_| u.respond(&Q, true).rt).last().unwrap();
        assert_eq!(last, 10.0);
    }

    #[test]
    fn accuracy_independent_of_pressure() {
        let mut u = SyntheticUser::new(SyntheticUserConfig::default(), 9);
        let mut hits = [0usize; 2];
        for i in 0..20_000 {
            let p = i % 2 == 0;
            if u.respond(&Q, p).correct {
                hits[usize::from(p)] += 1;
            }
        }
        for h in hits {
            let acc = h as f64 / 10_000.0;
            assert!((acc - 0.95).abs() < 0.01, "{acc}");
        }
    }

    #[test]
    fn search_constant_cases() {
        let (s, _) = optimal_short_horizon_policy(&still(3.0, 0.4, 0.0), 8).unwrap();
        assert!(s.iter().all(|&p| p));
        let (s, _) = optimal_short_horizon_policy(&still(3.0, 0.0, 0.15), 8).unwrap();
        assert!(s.iter().all(|&p| !p));
    }

    #[test]
    fn search_default_prefers_alternation() {
        let cfg = SyntheticUserConfig::default().deterministic();
        let (s, best) = optimal_short_horizon_policy(&cfg, 10).unwrap();
        let on = schedule_mean_rt(&cfg, &[true; 10]);
        let off = schedule_mean_rt(&cfg, &[false; 10]);
        assert!(best < on && best < off);
        // pressure never repeats before the final trial
        assert!(s[..9].windows(2).all(|w| w[0] != w[1]), "{s:?}");
    }

    #[test]
    fn search_bounds() {
        assert!(optimal_short_horizon_policy(&SyntheticUserConfig::default(), 5).is_err());
        assert!(optimal_short_horizon_policy(&SyntheticUserConfig::default().deterministic(), 21).is_err());
    }

    #[test]
    fn dataset_shape_and_balance() {
        let rows = generate_dataset(50, 500, &Population::default(), 3).unwrap();
        assert_eq!(rows.len(), 25_000);
        let frac = rows.iter().filter(|r| r.pressure).count() as f64 / rows.len() as f64;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
        assert!(rows.iter().all(|r| (0.8..=10.0).contains(&r.rt)));
        assert_eq!(rows, generate_dataset(50, 500, &Population::default(), 3).unwrap());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let rows = generate_dataset(2, 20, &Population::default(), 4).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &rows, &["command=test".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1), Some(DATASET_HEADER));
        assert_eq!(read_dataset(&buf[..]).unwrap(), rows);
    }
}
