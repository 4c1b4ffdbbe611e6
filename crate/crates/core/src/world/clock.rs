//! Per-node clock offset models.
//!
//! Each node gets one static offset per run, drawn uniformly within the
//! accuracy bound of its synchronisation method.

use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Ntp,
    Ptp,
    Gnss,
}

impl ClockMode {
    /// Accuracy bound in seconds.
    pub fn bound(self) -> f64 {
        match self {
            ClockMode::Ntp => 1e-2,
            ClockMode::Ptp => 5e-8,
            ClockMode::Gnss => 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub mode: ClockMode,
    pub offset_bound: f64,
    pub node_offset: f64,
}

impl ClockModel {
    pub fn new(mode: ClockMode) -> Self {
        Self {
            mode,
            offset_bound: mode.bound(),
            node_offset: 0.0,
        }
    }

    /// Local reading of the node clock at simulator time `t`.
    pub fn local_time(&self, t: f64) -> f64 {
        t + self.node_offset
    }
}

/// Draw a static offset in `[-bound, bound]` and store it on the model.
pub fn sample_clock_offset(model: &mut ClockModel, rng: &mut SimRng) -> f64 {
    let b = model.offset_bound;
    let off = if b > 0.0 { rng.range(-b, b) } else { 0.0 };
    model.node_offset = off;
    off
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_respect_bounds() {
        let mut rng = SimRng::new(7, 1);
        for mode in [ClockMode::Ntp, ClockMode::Ptp, ClockMode::Gnss] {
            let mut m = ClockModel::new(mode);
            for _ in 0..10_000 {
                let off = sample_clock_offset(&mut m, &mut rng);
                assert!(off.abs() <= mode.bound());
                assert_eq!(off, m.node_offset);
            }
        }
    }

    #[test]
    fn zero_bound_gives_zero_offset() {
        let mut rng = SimRng::new(7, 1);
        let mut m = ClockModel::new(ClockMode::Ntp);
        m.offset_bound = 0.0;
        assert_eq!(sample_clock_offset(&mut m, &mut rng), 0.0);
    }
}
