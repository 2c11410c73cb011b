//! Expression-conditioned radiance fields for head and torso, two-stage ray
//! sampling, volume rendering and the checkpoint container.

pub mod checkpoint;
pub mod encoding;
pub mod model;
pub mod pipeline;
pub mod sampling;
pub mod volume;

pub use checkpoint::{digest_hex, model_digest, Checkpoint, ModelDigest, TrainingState};
pub use encoding::{encoded_width, positional_encode};
pub use model::{field_eval, FieldParams, Model, ModelSpec, Part, Stage, CODE_WIDTH};
pub use pipeline::{
    backward_chunk, composite, forward_chunk, frame_weight_mass, render_frame, ChunkTape, DepthSource, RayDepths,
    RayOutput, RayQuery, RenderSettings,
};
pub use sampling::{sample_coarse, sample_fine, Ray};
pub use volume::{volume_backward, volume_render, RaySamples, VolumeGrad};
