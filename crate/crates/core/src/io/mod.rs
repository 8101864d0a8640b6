//! File formats: OBJ meshes, PNG images and JSON configs.

pub mod config;
pub mod obj;
pub mod png;
