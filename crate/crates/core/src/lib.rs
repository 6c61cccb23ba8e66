//! Builds a site-centered Sentinel-2 chip corpus and temporal VQA datasets
//! from construction-site annotations.

pub mod annotation;
pub mod chip;
pub mod config;
pub mod fixture;
pub mod geometry;
pub mod manifest;
pub mod pairs;
pub mod pipeline;
pub mod projection;
pub mod refs;
pub mod stac;
pub mod stats;
pub mod taxonomy;
pub mod vqa;
