//! Pipeline assembly, optimization, checkpoints, ablations and the gradient
//! suite behind the command line.

mod ablate;
mod config;
mod dense;
mod optim;
mod pipeline;
mod suite;
mod train;

pub use ablate::{ablate, settings, write_ablation_csv, AblationRow, Axis, ABLATION_HEADER, WINDOWS};
pub use config::{Config, ConfigError, EncoderSection, MaskingSection, OptimizerSection, RendererSection, SceneSection, TemporalSection};
pub use dense::{render_reconstruction, write_render, RenderedView};
pub use optim::AdamW;
pub use pipeline::{
    as_diff_error, evaluate, forward_pipeline, init_params, loss_and_gradients, Diagnostics, Evaluation, Forward, ForwardOptions, PipelineError,
};
pub use suite::{run_suite, toy_clip, toy_config, CheckKind, CheckRow, COMPOSITION_TOLERANCE, OP_TOLERANCE};
pub use train::{
    generate_dataset, load_dataset, read_losses, train, Checkpoint, RunOptions, RunSummary, StepMetrics, TrainError, Trainer,
    CHECKPOINT_VERSION, METRICS_HEADER,
};
