//! Decoupled-diffusion traffic scene generation.
//!
//! The engine generates multi-agent driving scenarios from per-token
//! independent noise states. Every (agent, timestep) token carries its own
//! noise level in `[0, 1]`: level 0 marks a conditioned token (history,
//! goal, or an environment override), level 1 pure noise. Sampling is
//! organised by a schedule matrix that admits, denoises, and pops tokens,
//! which makes pipelined (pyramidal / trapezoidal) generation and mid-run
//! reactive overrides possible alongside classic full-sequence denoising.
//!
//! Crate layout mirrors the pipeline:
//!
//! - [`scene`] / [`record`]: tensor representation, channel normalization,
//!   and the on-disk scenario record format.
//! - [`diffusion`]: forward noising, the variance-preserving schedule, the
//!   per-token implicit reverse step, and masked losses.
//! - [`denoiser`]: the learned spatio-temporal attention model, an exact
//!   oracle for harness testing, training loop, and checkpoints.
//! - [`scheduler`]: schedule construction, the chunk lifecycle runner, and
//!   the streaming sampler used by the closed loop.
//! - [`guidance`]: behavior-constraint corrections (collision separation,
//!   comfort smoothing, on-road pull) and oriented-box geometry.
//! - [`metrics`]: displacement error, off-road / collision rates, kinematic
//!   instability.
//! - [`datagen`]: synthetic corpus generation, attack-scenario synthesis,
//!   validity checklist, behavior statistics.
//! - [`closed_loop`]: the world-generator harness driven by a naive planner.
//! - [`engine`], [`render`], [`cli`]: high-level sampling API, SVG rendering,
//!   and the command-line surface.

pub mod cli;
pub mod closed_loop;
pub mod datagen;
pub mod denoiser;
pub mod diffusion;
pub mod engine;
mod error;
pub mod guidance;
pub mod metrics;
pub mod record;
pub mod render;
pub mod scene;
pub mod scheduler;

pub use error::{Error, Result};
