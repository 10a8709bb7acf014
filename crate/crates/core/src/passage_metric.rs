//! Pass Quality: passage-level scoring of a detector against reference labels.
//!
//! Reference and detected passages are grouped into connected components of
//! the overlap graph (two closed intervals are linked when they share at
//! least one frame). Each component with `L` reference and `K` detected
//! passages gets a kind and a cost:
//!
//! | L  | K  | kind     | cost      |
//! |----|----|----------|-----------|
//! | 1  | 1  | correct  | 0         |
//! | 1  | 0  | missed   | 1         |
//! | 0  | 1  | false    | 1         |
//! | ≥2 | 1  | merged   | L         |
//! | 1  | ≥2 | split    | K         |
//! | ≥2 | ≥2 | multiple | max(L, K) |
//!
//! and `PQ = R / (R + ΣErr)` where `R` counts correct components.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive frame range of one passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
}

impl Interval {
    pub fn new(start: u64, end: u64) -> Self {
        assert!(start <= end, "interval start {start} exceeds end {end}");
        Self { start, end }
    }

    pub fn frame_count(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Correct,
    Missed,
    False,
    Merged,
    Split,
    Multiple,
}

impl ErrorKind {
    /// Kind and cost of a component with `refs` reference and `dets`
    /// detected passages. `(0, 0)` is not a component.
    pub fn classify(refs: usize, dets: usize) -> (ErrorKind, u64) {
        match (refs, dets) {
            (1, 1) => (ErrorKind::Correct, 0),
            (1, 0) => (ErrorKind::Missed, 1),
            (0, 1) => (ErrorKind::False, 1),
            (l, 1) if l >= 2 => (ErrorKind::Merged, l as u64),
            (1, k) if k >= 2 => (ErrorKind::Split, k as u64),
            (l, k) if l >= 2 && k >= 2 => (ErrorKind::Multiple, l.max(k) as u64),
            (l, k) => panic!("no component has {l} reference and {k} detected passages"),
        }
    }
}

/// One connected component of the overlap graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchComponent {
    pub refs: Vec<Interval>,
    pub dets: Vec<Interval>,
    pub kind: ErrorKind,
    pub cost: u64,
}

impl MatchComponent {
    pub fn ref_count(&self) -> usize {
        self.refs.len()
    }

    pub fn det_count(&self) -> usize {
        self.dets.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCounts {
    pub correct: u64,
    pub missed: u64,
    #[serde(rename = "false")]
    pub false_: u64,
    pub merged: u64,
    pub split: u64,
    pub multiple: u64,
}

impl KindCounts {
    pub fn add(&mut self, kind: ErrorKind) {
        *self.get_mut(kind) += 1;
    }

    pub fn get(&self, kind: ErrorKind) -> u64 {
        match kind {
            ErrorKind::Correct => self.correct,
            ErrorKind::Missed => self.missed,
            ErrorKind::False => self.false_,
            ErrorKind::Merged => self.merged,
            ErrorKind::Split => self.split,
            ErrorKind::Multiple => self.multiple,
        }
    }

    fn get_mut(&mut self, kind: ErrorKind) -> &mut u64 {
        match kind {
            ErrorKind::Correct => &mut self.correct,
            ErrorKind::Missed => &mut self.missed,
            ErrorKind::False => &mut self.false_,
            ErrorKind::Merged => &mut self.merged,
            ErrorKind::Split => &mut self.split,
            ErrorKind::Multiple => &mut self.multiple,
        }
    }

    fn merge(&mut self, other: &KindCounts) {
        self.correct += other.correct;
        self.missed += other.missed;
        self.false_ += other.false_;
        self.merged += other.merged;
        self.split += other.split;
        self.multiple += other.multiple;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub r: u64,
    pub sum_err: u64,
    pub pq: f64,
    pub counts: KindCounts,
    pub accuracy: f64,
}

impl PqReport {
    pub fn pqe(&self) -> f64 {
        1.0 - self.pq
    }
}

/// `R / (R + ΣErr)`, defined as 1 when both are zero.
pub fn pq_from_totals(r: f64, sum_err: f64) -> f64 {
    let denom = r + sum_err;
    if denom == 0.0 {
        1.0
    } else {
        r / denom
    }
}

/// Maximal runs of `true` as inclusive intervals, with index 0 mapped to
/// `first_frame`.
pub fn extract_intervals(signal: &[bool], first_frame: u64) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &bit) in signal.iter().enumerate() {
        match (bit, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push(Interval::new(first_frame + s as u64, first_frame + t as u64 - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Interval::new(
            first_frame + s as u64,
            first_frame + signal.len() as u64 - 1,
        ));
    }
    out
}

fn check_sorted(list: &[Interval], which: &'static str) -> Result<()> {
    if list.iter().any(|i| i.start > i.end) || list.windows(2).any(|w| w[1].start <= w[0].end) {
        return Err(Error::UnsortedIntervals(which));
    }
    Ok(())
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups reference and detected passages into overlap components.
///
/// Both lists must be sorted and pairwise disjoint. Components are returned
/// ordered by their earliest frame.
pub fn match_passages(reference: &[Interval], detected: &[Interval]) -> Result<Vec<MatchComponent>> {
    check_sorted(reference, "reference")?;
    check_sorted(detected, "detected")?;

    let n_ref = reference.len();
    let mut sets = DisjointSet::new(n_ref + detected.len());
    let mut lo = 0;
    for (i, r) in reference.iter().enumerate() {
        while lo < detected.len() && detected[lo].end < r.start {
            lo += 1;
        }
        let mut j = lo;
        while j < detected.len() && detected[j].start <= r.end {
            sets.union(i, n_ref + j);
            j += 1;
        }
    }

    let mut by_root: std::collections::BTreeMap<usize, (Vec<Interval>, Vec<Interval>)> = Default::default();
    for i in 0..n_ref {
        by_root.entry(sets.find(i)).or_default().0.push(reference[i]);
    }
    for (j, d) in detected.iter().enumerate() {
        by_root.entry(sets.find(n_ref + j)).or_default().1.push(*d);
    }

    let mut components: Vec<MatchComponent> = by_root
        .into_values()
        .map(|(refs, dets)| {
            let (kind, cost) = ErrorKind::classify(refs.len(), dets.len());
            MatchComponent { refs, dets, kind, cost }
        })
        .collect();
    components.sort_by_key(|c| {
        let first_ref = c.refs.first().map_or(u64::MAX, |i| i.start);
        let first_det = c.dets.first().map_or(u64::MAX, |i| i.start);
        first_ref.min(first_det)
    });
    Ok(components)
}

/// Corpus-level accumulator: sums components and frame agreement over files,
/// then yields one report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PqTally {
    pub counts: KindCounts,
    pub sum_err: u64,
    pub frames: u64,
    pub agreeing_frames: u64,
}

impl PqTally {
    pub fn add_components(&mut self, components: &[MatchComponent]) {
        for c in components {
            self.counts.add(c.kind);
            self.sum_err += c.cost;
        }
    }

    /// Scores one file given dense reference and predicted signals.
    pub fn add_signals(&mut self, reference: &[bool], predicted: &[bool], first_frame: u64) -> Result<()> {
        if reference.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                expected: reference.len(),
                actual: predicted.len(),
            });
        }
        let components = match_passages(
            &extract_intervals(reference, first_frame),
            &extract_intervals(predicted, first_frame),
        )?;
        self.add_components(&components);
        self.frames += reference.len() as u64;
        self.agreeing_frames += reference.iter().zip(predicted).filter(|(a, b)| a == b).count() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &PqTally) {
        self.counts.merge(&other.counts);
        self.sum_err += other.sum_err;
        self.frames += other.frames;
        self.agreeing_frames += other.agreeing_frames;
    }

    pub fn report(&self) -> PqReport {
        let r = self.counts.correct;
        PqReport {
            r,
            sum_err: self.sum_err,
            pq: pq_from_totals(r as f64, self.sum_err as f64),
            counts: self.counts,
            accuracy: if self.frames == 0 {
                1.0
            } else {
                self.agreeing_frames as f64 / self.frames as f64
            },
        }
    }
}

/// Scores detected against reference passages.
///
/// Pointwise accuracy is measured over the frames spanned by the union of
/// both lists (frames outside every interval agree trivially).
pub fn pass_quality(reference: &[Interval], detected: &[Interval]) -> Result<PqReport> {
    let components = match_passages(reference, detected)?;
    let mut tally = PqTally::default();
    tally.add_components(&components);

    let span = reference
        .iter()
        .chain(detected)
        .fold(None, |acc: Option<(u64, u64)>, i| match acc {
            None => Some((i.start, i.end)),
            Some((lo, hi)) => Some((lo.min(i.start), hi.max(i.end))),
        });
    if let Some((lo, hi)) = span {
        let covered = |list: &[Interval]| list.iter().map(Interval::frame_count).sum::<u64>();
        let both: u64 = components
            .iter()
            .flat_map(|c| c.refs.iter().flat_map(move |r| c.dets.iter().map(move |d| (r, d))))
            .filter(|(r, d)| r.overlaps(d))
            .map(|(r, d)| r.end.min(d.end) - r.start.max(d.start) + 1)
            .sum();
        let disagree = covered(reference) + covered(detected) - 2 * both;
        tally.frames = hi - lo + 1;
        tally.agreeing_frames = tally.frames - disagree;
    }
    Ok(tally.report())
}

/// Fraction of frames where the two signals agree.
pub fn pointwise_accuracy(reference: &[bool], predicted: &[bool]) -> Result<f64> {
    if reference.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            actual: predicted.len(),
        });
    }
    if reference.is_empty() {
        return Ok(1.0);
    }
    let agree = reference.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / reference.len() as f64)
}
