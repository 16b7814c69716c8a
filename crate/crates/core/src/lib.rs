//! Scene-graph relation classification with scene-object interaction,
//! head-to-tail knowledge transfer and long-tail feature calibration.

pub mod cli;
pub mod data;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod relation_head;
pub mod scene_interaction;
pub mod training;
