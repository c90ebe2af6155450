//! Procedural garment outlines, rendered samples, episodes, and benchmark
//! splits.

mod episode;
mod registry;
mod render;
mod sample;
mod split;

pub use episode::{sample_episode, Episode, DEFAULT_QUERY_SIZE};
pub use registry::{Category, Region, Registry, MAX_LANDMARKS};
pub use render::{apply_jitter, polygon_area, render_sample, Jitter, RenderConfig};
pub use sample::{coords_to_labelmap, Geometry, Labelmap, Sample};
pub use split::{build_benchmark, BenchmarkSplit};
