//! Configuration, the adversarial training loop, checkpoints and synthesis.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, load_networks_as, read_checkpoint, save_checkpoint};
pub use config::{Ablation, DiscriminatorSettings, FusionSettings, TrainConfig};
pub use pipeline::{forward, synthesize_clip, Networks, Pipeline, PipelineOutput};
pub use synth::{evaluate_split, load_input_clip, synthesize, SynthesisFiles};
pub use train::{train, Batch, TrainOutcome, TrainState};
