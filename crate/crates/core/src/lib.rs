pub mod baseline;
pub mod behavior;
pub mod cache;
pub mod buckets;
pub mod cagam;
pub mod cmrlm;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod idecm;
pub mod igiem;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod tgetm;
pub mod trainer;

pub use error::{Error, Result};
