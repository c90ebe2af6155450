//! Comparison methods sharing the same encoder, data, and decoding as the
//! full system: support-set fine-tuning, max-way joint meta-learning,
//! pure weight generation, and nearest-prototype matching.

mod ft;
mod maml;
mod proto;
mod wg;

pub use ft::{ft_adapt, FtConfig};
pub use maml::{maml_adapt, maml_init, maml_task_gradient, maml_train, slot_detectors};
pub use proto::{proto_adapt, proto_predict, proto_scores};
pub use wg::wg_adapt;
