//! The time-pressure progress bar, sampled as small grayscale frames.
//!
//! The bar gains one unit per second and resets every `period_s` seconds.
//! A trial is sampled at `frame_rate_hz`, so step `k` corresponds to
//! `k / frame_rate_hz` seconds and shows `floor(k / f) mod period_s` lit units.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StimulusConfig {
    pub frame_rate_hz: u32,
    pub period_s: u32,
    pub units: u32,
    pub image_w: usize,
    pub image_h: usize,
}

impl Default for StimulusConfig {
    fn default() -> Self {
        Self { frame_rate_hz: 5, period_s: 5, units: 5, image_w: 64, image_h: 8 }
    }
}

impl StimulusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_rate_hz == 0 || self.period_s == 0 {
            return Err(Error::InvalidInput("frame rate and period must be at least 1".into()));
        }
        if self.units != self.period_s {
            return Err(Error::InvalidInput(format!(
                "bar units ({}) must equal the reset period ({})",
                self.units, self.period_s
            )));
        }
        if self.image_w < self.units as usize + 2 || self.image_h < 3 {
            return Err(Error::InvalidInput("image too small to draw the bar".into()));
        }
        Ok(())
    }

    /// Steps after which the lit pattern repeats.
    pub fn cycle_steps(&self) -> usize {
        (self.frame_rate_hz * self.period_s) as usize
    }

    pub fn pixels(&self) -> usize {
        self.image_w * self.image_h
    }
}

/// Lit units at a given simulation step.
pub fn fill_units(step_index: usize, cfg: &StimulusConfig) -> u32 {
    ((step_index / cfg.frame_rate_hz as usize) % cfg.period_s as usize) as u32
}

/// Lit units after `elapsed_ms` milliseconds of wall-clock display time.
///
/// This is the contract a browser rendering of the bar must reproduce.
pub fn fill_units_at_ms(elapsed_ms: u64, cfg: &StimulusConfig) -> u32 {
    ((elapsed_ms / 1000) % u64::from(cfg.period_s)) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusFrame {
    pub step_index: usize,
    pub fill_units: u32,
    pub pressure_on: bool,
    /// Row-major, `image_h` rows of `image_w` values in `[0, 1]`.
    pub image: Vec<f64>,
}

const OUTLINE: f64 = 0.5;
const LIT: f64 = 1.0;

pub fn render_frame(step_index: usize, pressure_on: bool, cfg: &StimulusConfig) -> StimulusFrame {
    let (w, h) = (cfg.image_w, cfg.image_h);
    let mut image = vec![0.0; w * h];
    if !pressure_on {
        return StimulusFrame { step_index, fill_units: 0, pressure_on, image };
    }
    let fill = fill_units(step_index, cfg);
    // outline, so an empty bar is still distinguishable from no bar
    for x in 0..w {
        image[x] = OUTLINE;
        image[(h - 1) * w + x] = OUTLINE;
    }
    for y in 0..h {
        image[y * w] = OUTLINE;
        image[y * w + w - 1] = OUTLINE;
    }
    let inner = w - 2;
    let lit_cols = inner * fill as usize / cfg.units as usize;
    for y in 1..h - 1 {
        for x in 0..lit_cols {
            image[y * w + 1 + x] = LIT;
        }
    }
    StimulusFrame { step_index, fill_units: fill, pressure_on, image }
}

pub fn frame_sequence(duration_steps: usize, pressure_on: bool, cfg: &StimulusConfig) -> Result<Vec<StimulusFrame>> {
    if duration_steps == 0 {
        return Err(Error::InvalidInput("duration must be at least one step".into()));
    }
    Ok((0..duration_steps).map(|k| render_frame(k, pressure_on, cfg)).collect())
}

impl StimulusFrame {
    pub fn lit_fraction(&self) -> f64 {
        self.image.iter().filter(|&&p| p >= LIT).count() as f64 / self.image.len() as f64
    }

    /// 8-bit grayscale PNG.
    pub fn write_png<W: Write>(&self, w: W, cfg: &StimulusConfig) -> Result<()> {
        let mut enc = png::Encoder::new(w, cfg.image_w as u32, cfg.image_h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.image.iter().map(|p| (p * 255.0).round() as u8).collect();
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer.write_image_data(&bytes).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        Ok(())
    }
}

/// `t_ms,fill_units` samples every `dt_ms` over `duration_ms`, for UI contract tests.
pub fn fill_fixture_csv(duration_ms: u64, dt_ms: u64, cfg: &StimulusConfig) -> String {
    let mut out = String::from("t_ms,fill_units\n");
    let mut t = 0;
    while t <= duration_ms {
        out.push_str(&format!("{t},{}\n", fill_units_at_ms(t, cfg)));
        t += dt_ms.max(1);
    }
    out
}
