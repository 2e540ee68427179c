//! Log-scaled buckets for durations in seconds. Shared by behavior recency
//! features and the relative time bias between groups.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogBuckets {
    /// Bucket width in natural-log units.
    pub width: f64,
    pub count: usize,
}

impl LogBuckets {
    pub fn new(width: f64, count: usize) -> Self {
        assert!(width > 0.0 && count >= 1);
        Self { width, count }
    }

    /// `min(⌊ln(1 + seconds) / width⌋, count - 1)`; negative input clamps to 0.
    pub fn bucket(&self, seconds: f64) -> usize {
        let s = seconds.max(0.0);
        let b = ((s).ln_1p() / self.width).floor() as usize;
        b.min(self.count - 1)
    }
}

impl Default for LogBuckets {
    fn default() -> Self {
        Self::new(std::f64::consts::LN_10 / 4.0, 32)
    }
}
