//! One-dimensional binary morphology with a flat structuring element.
//!
//! A width-`k` element covers offsets `-(k-1)/2 ..= k/2` around its anchor
//! (for even `k` the anchor is the left of the two middle cells). Erosion
//! uses the element, dilation its reflection, so `open = dilate ∘ erode`
//! keeps exactly the runs of ones that are at least `k` long. The signal is
//! treated as zero outside its range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{Channel, FrameSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterOrder {
    CloseThenOpen,
    OpenThenClose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphFilterSpec {
    pub open_width: usize,
    pub close_width: usize,
    pub order: FilterOrder,
}

impl Default for MorphFilterSpec {
    fn default() -> Self {
        Self {
            open_width: 3,
            close_width: 3,
            order: FilterOrder::CloseThenOpen,
        }
    }
}

impl MorphFilterSpec {
    pub fn validate(&self) -> Result<()> {
        check_width(self.open_width)?;
        check_width(self.close_width)
    }

    pub fn apply(&self, signal: &[bool]) -> Result<Vec<bool>> {
        match self.order {
            FilterOrder::CloseThenOpen => open(&close(signal, self.close_width)?, self.open_width),
            FilterOrder::OpenThenClose => close(&open(signal, self.open_width)?, self.close_width),
        }
    }
}

fn check_width(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("structuring element width must be at least 1".into()));
    }
    Ok(())
}

/// Number of ones in `signal[lo..=hi]`, with out-of-range positions as zero.
fn ones_in(prefix: &[usize], lo: isize, hi: isize) -> usize {
    let n = prefix.len() as isize - 1;
    let lo = lo.clamp(0, n);
    let hi = (hi + 1).clamp(0, n);
    if hi <= lo {
        0
    } else {
        prefix[hi as usize] - prefix[lo as usize]
    }
}

fn prefix_ones(signal: &[bool]) -> Vec<usize> {
    let mut prefix = Vec::with_capacity(signal.len() + 1);
    prefix.push(0);
    let mut acc = 0;
    for &b in signal {
        acc += b as usize;
        prefix.push(acc);
    }
    prefix
}

pub fn erode(signal: &[bool], k: usize) -> Result<Vec<bool>> {
    check_width(k)?;
    let (left, right) = (((k - 1) / 2) as isize, (k / 2) as isize);
    let prefix = prefix_ones(signal);
    Ok((0..signal.len() as isize)
        .map(|i| ones_in(&prefix, i - left, i + right) == k)
        .collect())
}

pub fn dilate(signal: &[bool], k: usize) -> Result<Vec<bool>> {
    check_width(k)?;
    let (left, right) = ((k / 2) as isize, ((k - 1) / 2) as isize);
    let prefix = prefix_ones(signal);
    Ok((0..signal.len() as isize)
        .map(|i| ones_in(&prefix, i - left, i + right) > 0)
        .collect())
}

/// Removes runs of ones shorter than `k`.
pub fn open(signal: &[bool], k: usize) -> Result<Vec<bool>> {
    dilate(&erode(signal, k)?, k)
}

/// Fills interior gaps of zeros shorter than `k`.
///
/// The dilation spills past both ends, so the composition runs on a
/// zero-padded copy before cropping back.
pub fn close(signal: &[bool], k: usize) -> Result<Vec<bool>> {
    check_width(k)?;
    let mut padded = vec![false; k];
    padded.extend_from_slice(signal);
    padded.extend(std::iter::repeat_n(false, k));
    let closed = erode(&dilate(&padded, k)?, k)?;
    Ok(closed[k..k + signal.len()].to_vec())
}

/// Replaces one channel of `series` with its filtered version.
pub fn apply_filter(series: &FrameSeries, channel: Channel, spec: &MorphFilterSpec) -> Result<FrameSeries> {
    spec.validate()?;
    let filtered = spec.apply(series.channel(channel)?)?;
    series.with_channel(channel, filtered)
}
