//! Most-recent-peak selection on a score timeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Detection, ScoreTimeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakConfig {
    /// Centered moving-average width (odd), in timeline entries.
    pub window: usize,
    /// τ: minimum smoothed score of a qualifying peak.
    pub threshold: f64,
    /// Detector stride in frames; `None` derives it from the clip rate.
    pub stride: Option<usize>,
    /// Detector rate used when `stride` is `None`.
    pub detector_fps: f64,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            window: 5,
            threshold: 0.6,
            stride: None,
            detector_fps: 5.0,
        }
    }
}

impl PeakConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config(format!("peak.window must be odd, got {}", self.window)));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("peak.threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.stride == Some(0) || !(self.detector_fps > 0.0) {
            return Err(Error::config("peak.stride and peak.detector_fps must be positive"));
        }
        Ok(())
    }

    /// Frames between detector evaluations for a clip at `fps`.
    pub fn stride_for(&self, fps: f64) -> usize {
        self.stride
            .unwrap_or_else(|| (fps / self.detector_fps).round().max(1.0) as usize)
    }
}

/// Centered moving average of width `window`, truncated at the edges.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Positions `i` with `s[i] >= s[i-1]` and `s[i] >= s[i+1]` (missing
/// neighbours at the ends are ignored).
pub fn local_maxima(s: &[f64]) -> Vec<usize> {
    (0..s.len())
        .filter(|&i| (i == 0 || s[i] >= s[i - 1]) && (i + 1 == s.len() || s[i] >= s[i + 1]))
        .collect()
}

/// The latest local maximum of the smoothed scores that reaches the
/// threshold, or the global maximum (earliest on ties) when none does.
/// Returns the frame index and the raw top detection there.
pub fn most_recent_peak(timeline: &ScoreTimeline, cfg: &PeakConfig) -> Result<(usize, Detection)> {
    cfg.validate()?;
    if timeline.is_empty() {
        return Err(Error::Empty("score timeline"));
    }
    let s = smooth(&timeline.scores(), cfg.window);
    let pos = local_maxima(&s)
        .into_iter()
        .filter(|&i| s[i] >= cfg.threshold)
        .last()
        .unwrap_or_else(|| {
            (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best })
        });
    let (frame, det) = timeline.entries()[pos];
    Ok((frame, det))
}
