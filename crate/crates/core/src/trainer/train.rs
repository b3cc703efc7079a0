use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::Config;
use super::optim::AdamW;
use super::pipeline::{init_params, loss_and_gradients, Diagnostics, ForwardOptions, PipelineError};
use crate::container::{io_err, Blob, BlobError};
use crate::params::ParamSet;
use crate::rng;
use crate::scenegen::{default_cameras, linear_trajectory, random_scene, render_clip, ClipError, MultiViewClip};

const TRAIN_TAG: u64 = 0x7a41;
const SCENE_TAG: u64 = 0x5ce0;
pub const CHECKPOINT_VERSION: u64 = 1;
/// Column order of the metrics file.
pub const METRICS_HEADER: &str = "step,loss,rgb_term,depth_term,grad_norm,wall_time";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error("loss diverged at step {step}: {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("{0}")]
    Invalid(String),
}

/// Writes `scene.clips` clips of `scene.window` frames to `out/clip{i}`.
pub fn generate_dataset(cfg: &Config, out: &Path, dump_ppm: bool) -> Result<Vec<PathBuf>, TrainError> {
    let s = &cfg.scene;
    let cameras = default_cameras(s.views, s.width, s.height, s.focal, s.mount_height).map_err(ClipError::from)?;
    let trajectory = linear_trajectory(s.window, s.ego_speed, s.dt);
    let mut dirs = Vec::new();
    for i in 0..s.clips {
        let scene = random_scene(&cfg.scene_params(), &mut rng::stream(s.seed, &[SCENE_TAG, i as u64]));
        let settings = cfg.render_settings(rng::derive_seed(s.seed, &[SCENE_TAG, i as u64, 1]));
        let clip = render_clip(&scene, &cameras, &trajectory, &settings)?;
        let dir = out.join(format!("clip{i}"));
        clip.save(&dir, dump_ppm)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Loads `dir` as one clip if it holds a manifest, else every `clip*`
/// subdirectory in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<MultiViewClip>, TrainError> {
    if dir.join("manifest.txt").exists() {
        return Ok(vec![MultiViewClip::load(dir)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("clip")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(TrainError::Invalid(format!("no clips under {}", dir.display())));
    }
    dirs.iter().map(|d| Ok(MultiViewClip::load(d)?)).collect()
}

/// Parameters, optimizer moments and position in the step sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_text: String,
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub step: u64,
    /// Root of every per-step RNG stream.
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_blob(&self) -> Blob {
        let mut b = Blob::new();
        b.put_u64("checkpoint.version", &[1], vec![CHECKPOINT_VERSION]);
        b.put_u8("config.sha256", &[self.config_hash.len()], self.config_hash.as_bytes().to_vec());
        b.put_u8("config.text", &[self.config_text.len()], self.config_text.as_bytes().to_vec());
        b.put_u64("step", &[1], vec![self.step]);
        b.put_u64("seed", &[1], vec![self.seed]);
        self.params.store(&mut b, "param.");
        self.optimizer.store(&mut b);
        b
    }

    pub fn from_blob(b: &Blob, cfg: &Config) -> Result<Self, TrainError> {
        let version = b.u64s("checkpoint.version")?.1[0];
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Invalid(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let text = |name: &str| -> Result<String, TrainError> {
            String::from_utf8(b.u8s(name)?.1.to_vec()).map_err(|_| TrainError::Invalid(format!("{name} is not UTF-8")))
        };
        let o = &cfg.optimizer;
        let params = ParamSet::restore(b, "param.")?;
        let mut optimizer = AdamW::new(&params, o.lr, o.weight_decay, o.beta1, o.beta2, o.eps);
        optimizer.restore(b)?;
        Ok(Self {
            config_hash: text("config.sha256")?,
            config_text: text("config.text")?,
            params,
            optimizer,
            step: b.u64s("step")?.1[0],
            seed: b.u64s("seed")?.1[0],
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_blob().save(path)?)
    }

    /// Loads and checks the checkpoint belongs to `cfg`.
    pub fn load(path: &Path, cfg: &Config) -> Result<Self, TrainError> {
        let ck = Self::from_blob(&Blob::load(path)?, cfg)?;
        if ck.config_hash != cfg.hash() {
            return Err(TrainError::ConfigHash { expected: cfg.hash(), found: ck.config_hash });
        }
        Ok(ck)
    }

    /// Loads the parameters only, with the config the checkpoint was written
    /// under.
    pub fn load_for_inference(path: &Path) -> Result<(Config, ParamSet), TrainError> {
        let b = Blob::load(path)?;
        let text = String::from_utf8(b.u8s("config.text")?.1.to_vec()).map_err(|_| TrainError::Invalid("config.text is not UTF-8".into()))?;
        let cfg = Config::parse(&text).map_err(|e| TrainError::Invalid(e.to_string()))?;
        Ok((cfg, ParamSet::restore(&b, "param.")?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub rgb_term: f64,
    pub depth_term: f64,
    pub grad_norm: f64,
    pub depth_mae: f64,
    pub mean_weight_sum: f64,
    pub masked_fraction: f64,
}

impl StepMetrics {
    pub fn csv_row(&self, wall_time: f64) -> String {
        format!("{},{},{},{},{},{:.3}", self.step, self.loss, self.rgb_term, self.depth_term, self.grad_norm, wall_time)
    }
}

/// In-memory training state over a fixed clip list.
pub struct Trainer<'a> {
    pub cfg: Config,
    pub clips: &'a [MultiViewClip],
    pub params: ParamSet,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: Config, clips: &'a [MultiViewClip], seed: u64) -> Self {
        let params = init_params(&cfg, seed);
        let o = &cfg.optimizer;
        let optimizer = AdamW::new(&params, o.lr, o.weight_decay, o.beta1, o.beta2, o.eps);
        Self { cfg, clips, params, optimizer, step: 0, seed }
    }

    pub fn from_checkpoint(cfg: Config, clips: &'a [MultiViewClip], ck: Checkpoint) -> Self {
        Self { cfg, clips, params: ck.params, optimizer: ck.optimizer, step: ck.step, seed: ck.seed }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.hash(),
            config_text: self.cfg.serialize(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            seed: self.seed,
        }
    }

    /// One optimization step over `optimizer.batch` clips. Clips are visited
    /// round-robin; each batch slot draws from its own RNG stream keyed by
    /// (seed, step, slot). Gradients are summed in slot order.
    pub fn step(&mut self) -> Result<StepMetrics, TrainError> {
        let batch = self.cfg.optimizer.batch;
        let opts = ForwardOptions { jitter: self.cfg.renderer.jitter, normals: None };
        let step = self.step;
        let results: Vec<Result<(Diagnostics, ParamSet), PipelineError>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let clip = &self.clips[(step as usize * batch + b) % self.clips.len()];
                let mut rng = rng::stream(self.seed, &[TRAIN_TAG, step, b as u64]);
                loss_and_gradients(clip, &self.cfg, &self.params, &mut rng, &opts)
            })
            .collect();
        let mut total: Option<ParamSet> = None;
        let mut sums = [0.0; 6];
        for r in results {
            let (d, g) = r?;
            for (acc, x) in sums.iter_mut().zip([d.loss, d.rgb_term, d.depth_term, d.depth_mae, d.mean_weight_sum, d.masked_fraction]) {
                *acc += x;
            }
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => {
                    for (name, acc) in t.iter_mut() {
                        acc.add_assign(g.get(name).expect("same parameter names"));
                    }
                }
            }
        }
        let mut grads = total.expect("batch is non-empty");
        let inv = 1.0 / batch as f64;
        for (_, g) in grads.iter_mut() {
            *g = g.map(|x| x * inv);
        }
        let [loss, rgb_term, depth_term, depth_mae, mean_weight_sum, masked_fraction] = sums.map(|s| s * inv);
        if !loss.is_finite() || loss > 1e6 {
            return Err(TrainError::Diverged { step, loss });
        }
        let grad_norm = grads.iter().map(|(_, g)| g.squared_norm()).sum::<f64>().sqrt();
        self.optimizer.step(&mut self.params, &grads);
        self.step += 1;
        Ok(StepMetrics { step, loss, rgb_term, depth_term, grad_norm, depth_mae, mean_weight_sum, masked_fraction })
    }
}

pub struct RunOptions {
    pub out: PathBuf,
    /// Total steps; defaults to `optimizer.steps`.
    pub steps: Option<u64>,
    pub resume: Option<PathBuf>,
}

pub struct RunSummary {
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains to the step budget, appending to `out/metrics.csv` and writing
/// `out/checkpoint_{step}.mv4d` every `optimizer.checkpoint_every` steps and
/// `out/checkpoint.mv4d` at the end.
pub fn train(cfg: &Config, clips: &[MultiViewClip], run: &RunOptions) -> Result<RunSummary, TrainError> {
    fs::create_dir_all(&run.out).map_err(|e| io_err(&run.out, e))?;
    let mut trainer = match &run.resume {
        Some(path) => Trainer::from_checkpoint(cfg.clone(), clips, Checkpoint::load(path, cfg)?),
        None => Trainer::new(cfg.clone(), clips, cfg.scene.seed),
    };
    let total = run.steps.unwrap_or(cfg.optimizer.steps as u64);
    let metrics_path = run.out.join("metrics.csv");
    let fresh = run.resume.is_none() || !metrics_path.exists();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    if fresh {
        writeln!(file, "{METRICS_HEADER}").map_err(|e| io_err(&metrics_path, e))?;
    }
    let start = Instant::now();
    let mut metrics = Vec::new();
    while trainer.step < total {
        let m = trainer.step()?;
        writeln!(file, "{}", m.csv_row(start.elapsed().as_secs_f64())).map_err(|e| io_err(&metrics_path, e))?;
        log::info!("step {} loss {:.5} depth_mae {:.3}", m.step, m.loss, m.depth_mae);
        metrics.push(m);
        if trainer.step % cfg.optimizer.checkpoint_every as u64 == 0 && trainer.step < total {
            trainer.checkpoint().save(&run.out.join(format!("checkpoint_{}.mv4d", trainer.step)))?;
        }
    }
    file.flush().map_err(|e| io_err(&metrics_path, e))?;
    let checkpoint = run.out.join("checkpoint.mv4d");
    trainer.checkpoint().save(&checkpoint)?;
    Ok(RunSummary { metrics, checkpoint })
}

/// Reads the loss column of a metrics file.
pub fn read_losses(path: &Path) -> Result<Vec<f64>, TrainError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).and_then(|v| v.parse().ok()).ok_or_else(|| TrainError::Invalid(format!("bad metrics row `{l}`"))))
        .collect()
}
