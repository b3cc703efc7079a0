use std::fmt;
use std::path::Path;
use std::str::FromStr;

use super::config::Config;
use super::pipeline::evaluate;
use super::train::{TrainError, Trainer};
use crate::container::write_atomic;
use crate::scenegen::MultiViewClip;
use crate::temporal::Strategy;

/// Window lengths of the window sweep.
pub const WINDOWS: [usize; 4] = [1, 3, 4, 5];
pub const ABLATION_HEADER: &str = "axis,setting,window,strategy,train_loss,render_loss,rgb_term,depth_term,depth_mae,reconstruction_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Window,
    Strategy,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Window => "window",
            Axis::Strategy => "strategy",
        })
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "window" => Ok(Axis::Window),
            "strategy" => Ok(Axis::Strategy),
            _ => Err(format!("unknown ablation axis `{s}` (window | strategy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub setting: String,
    pub window: usize,
    pub strategy: Strategy,
    /// Mean training loss over the last tenth of the steps.
    pub train_loss: f64,
    /// Dropped-frame rendering loss at evaluation, averaged over clips.
    pub render_loss: f64,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub depth_mae: f64,
    pub reconstruction_error: f64,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.axis,
            self.setting,
            self.window,
            self.strategy,
            self.train_loss,
            self.render_loss,
            self.rgb_term,
            self.depth_term,
            self.depth_mae,
            self.reconstruction_error
        )
    }
}

/// Configs of every setting along `axis`. A window of one frame has nothing
/// to reconstruct from and runs with [`Strategy::None`].
pub fn settings(base: &Config, axis: Axis) -> Vec<(String, Config)> {
    match axis {
        Axis::Window => WINDOWS
            .iter()
            .map(|&w| {
                let mut c = base.clone();
                c.scene.window = w;
                if w == 1 {
                    c.temporal.strategy = Strategy::None;
                }
                (w.to_string(), c)
            })
            .collect(),
        Axis::Strategy => Strategy::ALL
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.temporal.strategy = s;
                (s.to_string(), c)
            })
            .collect(),
    }
}

/// Trains every setting from the same seed for `steps` steps and evaluates
/// the dropped-frame reconstruction on every clip with a shared seed.
pub fn ablate(base: &Config, clips: &[MultiViewClip], axis: Axis, steps: u64) -> Result<Vec<AblationRow>, TrainError> {
    let longest = clips.iter().map(MultiViewClip::window).min().unwrap_or(0);
    let mut rows = Vec::new();
    for (setting, cfg) in settings(base, axis) {
        cfg.validate().map_err(|e| TrainError::Invalid(format!("setting {setting}: {e}")))?;
        if cfg.scene.window > longest {
            return Err(TrainError::Invalid(format!("setting {setting} needs {} frames, clips have {longest}", cfg.scene.window)));
        }
        let mut trainer = Trainer::new(cfg.clone(), clips, base.scene.seed);
        let mut losses = Vec::new();
        for _ in 0..steps {
            losses.push(trainer.step()?.loss);
        }
        let tail = (steps as usize / 10).max(1).min(losses.len());
        let train_loss = if losses.is_empty() { f64::NAN } else { losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64 };
        let mut acc = [0.0; 5];
        for clip in clips {
            let e = evaluate(clip, &cfg, &trainer.params, base.scene.seed)?;
            let d = &e.diagnostics;
            for (a, x) in acc.iter_mut().zip([d.loss, d.rgb_term, d.depth_term, d.depth_mae, e.reconstruction_error]) {
                *a += x / clips.len() as f64;
            }
        }
        log::info!("{axis}={setting}: render loss {:.5}", acc[0]);
        rows.push(AblationRow {
            axis,
            setting,
            window: cfg.scene.window,
            strategy: cfg.temporal.strategy,
            train_loss,
            render_loss: acc[0],
            rgb_term: acc[1],
            depth_term: acc[2],
            depth_mae: acc[3],
            reconstruction_error: acc[4],
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), TrainError> {
    let mut text = format!("{ABLATION_HEADER}\n");
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    Ok(write_atomic(path, text.as_bytes())?)
}
