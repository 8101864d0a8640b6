//! Differentiable triangle rasterization with analytic gradients.
//!
//! The pipeline is `project_vertices` → `rasterize` → `shade`, wrapped by
//! [`forward_render`] and reversed by [`backward_render`]. Losses, Adam and the
//! round-trip task runner sit on top.

pub mod camera;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod io;
pub mod loss;
pub mod objective;
pub mod optim;
pub mod raster;
pub mod render;
pub mod shading;
pub mod task;

pub use camera::{Camera, CameraError};
pub use geometry::{GeometryError, Mesh, Vec2, Vec3, VertexAttributes};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport};
pub use image::Image;
pub use io::config::{parse_scene, parse_scene_str, ConfigError, Precision, SceneConfig, TaskConfig, TaskKind};
pub use loss::{LossComponents, LossReport, LossWeights};
pub use objective::{evaluate, ViewTarget};
pub use optim::{adam_step, AdamConfig, AdamState, ParamSet};
pub use raster::{FrameBuffers, SoftConfig};
pub use render::{backward_render, forward_render, GradientSet, ParamGroup, RenderError, RenderOutput, Scene};
pub use shading::{LightingSpec, Texture};
pub use task::{run_task, OptimizationReport, TaskError};

/// Runs `f` on a dedicated pool of `workers` threads, or on the global pool
/// when `workers` is `None`. Results do not depend on the worker count.
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match workers {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
    }
}
