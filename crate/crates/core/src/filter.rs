//! Sliding-window mode filter over per-frame predicted labels.
//!
//! Drivers switch activities far slower than the camera frame rate, so an
//! isolated disagreeing prediction inside a run is almost always noise. The
//! filter replaces each label with the most frequent label in a centered
//! window of `w` frames. Windows shrink at the sequence edges instead of
//! padding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::ClassId;

/// Window used for 30 Hz inference: roughly 4.7 s.
pub const DEFAULT_WINDOW: usize = 141;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiePolicy {
    /// Keep the center label when it is one of the tied modes, otherwise
    /// take the smallest tied label.
    #[default]
    KeepCenter,
    SmallestIndex,
}

impl FromStr for TiePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_center" => Ok(TiePolicy::KeepCenter),
            "smallest_index" => Ok(TiePolicy::SmallestIndex),
            _ => Err(Error::Config(format!("unknown tie policy {s:?}"))),
        }
    }
}

impl fmt::Display for TiePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiePolicy::KeepCenter => "keep_center",
            TiePolicy::SmallestIndex => "smallest_index",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub window: usize,
    pub tie_policy: TiePolicy,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            window: DEFAULT_WINDOW,
            tie_policy: TiePolicy::KeepCenter,
        }
    }
}

impl FilterConfig {
    pub fn new(window: usize, tie_policy: TiePolicy) -> Result<Self> {
        let cfg = FilterConfig { window, tie_policy };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "filter window must be a positive odd number, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Per-frame class ids with their sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub labels: Vec<ClassId>,
    pub sample_rate_hz: f64,
}

impl LabelSequence {
    pub fn new(labels: Vec<ClassId>, sample_rate_hz: f64) -> Self {
        LabelSequence { labels, sample_rate_hz }
    }
}

pub fn mode_filter(seq: &LabelSequence, cfg: &FilterConfig) -> Result<LabelSequence> {
    Ok(LabelSequence {
        labels: mode_filter_labels(&seq.labels, cfg)?,
        sample_rate_hz: seq.sample_rate_hz,
    })
}

/// Mode filter over a raw label slice.
///
/// Keeps a running histogram of the current window, so the cost is
/// `O(len * alphabet)` regardless of the window size.
pub fn mode_filter_labels(labels: &[ClassId], cfg: &FilterConfig) -> Result<Vec<ClassId>> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::Input("mode filter needs a non-empty sequence".into()));
    }
    let half = cfg.window / 2;
    let len = labels.len();
    let alphabet = *labels.iter().max().unwrap() as usize + 1;
    let mut counts = vec![0u32; alphabet];
    // Window for position 0 is [0, min(len, half + 1)).
    let mut hi = 0usize;
    let mut lo = 0usize;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let want_hi = (i + half + 1).min(len);
        while hi < want_hi {
            counts[labels[hi] as usize] += 1;
            hi += 1;
        }
        let want_lo = i.saturating_sub(half);
        while lo < want_lo {
            counts[labels[lo] as usize] -= 1;
            lo += 1;
        }
        let best = *counts.iter().max().unwrap();
        let center = labels[i];
        let pick = match cfg.tie_policy {
            TiePolicy::KeepCenter if counts[center as usize] == best => center,
            _ => counts.iter().position(|&c| c == best).unwrap() as ClassId,
        };
        out.push(pick);
    }
    Ok(out)
}

/// A maximal run of one label over frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub label: ClassId,
}

pub fn segmentize(labels: &[ClassId]) -> Result<Vec<Segment>> {
    if labels.is_empty() {
        return Err(Error::Input("cannot segmentize an empty sequence".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push(Segment {
                start,
                end: i,
                label: labels[start],
            });
            start = i;
        }
    }
    Ok(out)
}

pub fn expand(segments: &[Segment]) -> Vec<ClassId> {
    segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.label, s.end - s.start))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts every window directly.
    fn brute_force(labels: &[ClassId], w: usize, tie: TiePolicy) -> Vec<ClassId> {
        let half = w / 2;
        (0..labels.len())
            .map(|i| {
                let window = &labels[i.saturating_sub(half)..(i + half + 1).min(labels.len())];
                let count = |l: ClassId| window.iter().filter(|&&x| x == l).count();
                let best = window.iter().map(|&l| count(l)).max().unwrap();
                let mut tied: Vec<ClassId> = window.iter().copied().filter(|&l| count(l) == best).collect();
                tied.sort_unstable();
                match tie {
                    TiePolicy::KeepCenter if tied.contains(&labels[i]) => labels[i],
                    _ => tied[0],
                }
            })
            .collect()
    }

    fn filt(labels: &[ClassId], w: usize, tie: TiePolicy) -> Vec<ClassId> {
        mode_filter_labels(labels, &FilterConfig::new(w, tie).unwrap()).unwrap()
    }

    #[test]
    fn isolated_spike_removed() {
        let x = [0, 0, 1, 0, 0];
        assert_eq!(brute_force(&x, 5, TiePolicy::KeepCenter), vec![0; 5]);
        assert_eq!(filt(&x, 5, TiePolicy::KeepCenter), vec![0; 5]);
        assert_eq!(filt(&x, 5, TiePolicy::SmallestIndex), vec![0; 5]);
    }

    #[test]
    fn alternating_keeps_center_in_interior() {
        let x: Vec<ClassId> = (0..10).map(|i| (i % 2) as ClassId).collect();
        let oracle = brute_force(&x, 3, TiePolicy::KeepCenter);
        // Interior windows are x[i-1], x[i], x[i+1] = (a, b, a): the neighbours win.
        // Edge windows have two entries, a 1-1 tie, so the center stays.
        let expected: Vec<ClassId> = vec![0, 0, 1, 0, 1, 0, 1, 0, 1, 1];
        assert_eq!(oracle, expected);
        assert_eq!(filt(&x, 3, TiePolicy::KeepCenter), expected);
    }

    #[test]
    fn ties_follow_policy() {
        // Window of [1, 0] at position 0 with w = 3 is a 1-1 tie.
        assert_eq!(filt(&[1, 0], 3, TiePolicy::KeepCenter), vec![1, 0]);
        assert_eq!(filt(&[1, 0], 3, TiePolicy::SmallestIndex), vec![0, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            mode_filter_labels(&[], &FilterConfig::default()),
            Err(Error::Input(_))
        ));
        assert!(FilterConfig::new(4, TiePolicy::KeepCenter).is_err());
        assert!(FilterConfig::new(0, TiePolicy::KeepCenter).is_err());
    }

    #[test]
    fn segments() {
        assert_eq!(segmentize(&[2, 2, 2]).unwrap(), vec![Segment { start: 0, end: 3, label: 2 }]);
        assert_eq!(
            segmentize(&[0, 0, 1]).unwrap(),
            vec![Segment { start: 0, end: 2, label: 0 }, Segment { start: 2, end: 3, label: 1 }]
        );
        assert!(segmentize(&[]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            labels in prop::collection::vec(0u8..6, 1..80),
            half in 0usize..8,
            keep in any::<bool>(),
        ) {
            let tie = if keep { TiePolicy::KeepCenter } else { TiePolicy::SmallestIndex };
            let w = 2 * half + 1;
            prop_assert_eq!(filt(&labels, w, tie), brute_force(&labels, w, tie));
        }

        #[test]
        fn identity_and_constant(labels in prop::collection::vec(0u8..16, 1..60), c in 0u8..16, half in 0usize..10) {
            prop_assert_eq!(filt(&labels, 1, TiePolicy::KeepCenter), labels.clone());
            let constant = vec![c; labels.len()];
            prop_assert_eq!(filt(&constant, 2 * half + 1, TiePolicy::SmallestIndex), constant);
        }

        #[test]
        fn output_alphabet_is_subset(labels in prop::collection::vec(0u8..16, 1..60), half in 0usize..10) {
            let out = filt(&labels, 2 * half + 1, TiePolicy::KeepCenter);
            prop_assert_eq!(out.len(), labels.len());
            prop_assert!(out.iter().all(|l| labels.contains(l)));
        }

        #[test]
        fn segment_round_trip(labels in prop::collection::vec(0u8..4, 1..60)) {
            prop_assert_eq!(expand(&segmentize(&labels).unwrap()), labels);
        }
    }
}
