//! Config-driven training orchestration: task registry, project configs,
//! dataset processing, a reference training loop, run monitoring and a
//! model-hub client.

pub mod config;
pub mod dataset;
pub mod dispatch;
pub mod hub;
#[cfg(any(test, feature = "mock-hub"))]
pub mod mock_hub;
pub mod models;
pub mod monitoring;
pub mod pipeline;
pub mod registry;
pub mod rng;
pub mod trainer;
