//! Seeded synthetic checkpoint logs.
//!
//! Each file is built from latent passages on a dense timeline. Every sensor
//! channel is a corrupted copy of the passages (edge jitter, missed passages,
//! mid-passage off-blips, false blips while idle, bridged gaps) or, when
//! `replace_with_noise` is set, an independent on/off process. The basic
//! classifier output is a 2-of-3 majority vote of the sensors.
//!
//! A log only has rows where a sensor bit changes, so reference edges are
//! moved to the nearest sensor edge within `ref_snap_radius` frames; a
//! passage with no such edge, or one that would collapse or touch its
//! neighbour, is dropped from the reference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{densify, sparsify, write_dataset, Channel, EventLog, FrameSeries};
use crate::passage_metric::{extract_intervals, Interval};
use crate::seed;

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: u64,
    pub max: u64,
}

impl Span {
    pub const fn new(min: u64, max: u64) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.gen_range(self.min..=self.max)
    }

    fn check(&self, name: &str, min_allowed: u64) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!(
                "{name}: min {} exceeds max {}",
                self.min, self.max
            )));
        }
        if self.min < min_allowed {
            return Err(Error::Config(format!("{name}: min must be at least {min_allowed}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelNoise {
    /// Each passage edge moves by up to this many frames either way.
    pub edge_jitter: u64,
    /// Probability the sensor misses a passage entirely.
    pub dropout_prob: f64,
    /// Probability of one off-blip strictly inside a passage.
    pub flicker_prob: f64,
    /// Length of off-blips and false on-blips.
    pub blip_len: Span,
    /// Expected false on-blips per 1000 idle frames.
    pub false_activation_rate: f64,
    /// Probability a gap of at most `merge_max_gap` frames is bridged.
    pub merge_prob: f64,
    pub merge_max_gap: u64,
    /// Ignore the passages and emit an independent on/off process.
    pub replace_with_noise: bool,
}

impl Default for ChannelNoise {
    fn default() -> Self {
        Self {
            edge_jitter: 0,
            dropout_prob: 0.0,
            flicker_prob: 0.0,
            blip_len: Span::new(1, 3),
            false_activation_rate: 0.0,
            merge_prob: 0.0,
            merge_max_gap: 0,
            replace_with_noise: false,
        }
    }
}

impl ChannelNoise {
    pub fn is_noiseless(&self) -> bool {
        self.edge_jitter == 0
            && self.dropout_prob == 0.0
            && self.flicker_prob == 0.0
            && self.false_activation_rate == 0.0
            && self.merge_prob == 0.0
            && !self.replace_with_noise
    }

    fn validate(&self, channel: Channel) -> Result<()> {
        for (name, p) in [
            ("dropout_prob", self.dropout_prob),
            ("flicker_prob", self.flicker_prob),
            ("merge_prob", self.merge_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{channel}.{name} = {p} is not a probability")));
            }
        }
        if !(self.false_activation_rate >= 0.0 && self.false_activation_rate <= 1000.0) {
            return Err(Error::Config(format!(
                "{channel}.false_activation_rate must lie in [0, 1000]"
            )));
        }
        self.blip_len.check(&format!("{channel}.blip_len"), 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_files: usize,
    pub seed: u64,
    pub passages_per_file: Span,
    pub passage_len: Span,
    /// Idle frames before, between and after passages.
    pub gap_len: Span,
    /// Files start at a random frame in `0..=max_first_frame`.
    pub max_first_frame: u64,
    pub ref_snap_radius: u64,
    pub shield: ChannelNoise,
    #[serde(rename = "loop")]
    pub induction_loop: ChannelNoise,
    pub cor: ChannelNoise,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::paper_like(250, 0)
    }
}

impl SynthConfig {
    /// Every sensor equals the reference exactly.
    pub fn noiseless(n_files: usize, seed: u64) -> Self {
        Self {
            n_files,
            seed,
            passages_per_file: Span::new(1, 4),
            passage_len: Span::new(20, 80),
            gap_len: Span::new(10, 120),
            max_first_frame: 5000,
            ref_snap_radius: 0,
            shield: ChannelNoise::default(),
            induction_loop: ChannelNoise::default(),
            cor: ChannelNoise::default(),
        }
    }

    /// Moderate noise: the correlational detector flickers, the loop bridges
    /// short gaps between vehicles, the shield misses passages.
    pub fn paper_like(n_files: usize, seed: u64) -> Self {
        Self {
            ref_snap_radius: 3,
            shield: ChannelNoise {
                edge_jitter: 2,
                dropout_prob: 0.15,
                flicker_prob: 0.1,
                blip_len: Span::new(1, 3),
                false_activation_rate: 0.5,
                ..ChannelNoise::default()
            },
            induction_loop: ChannelNoise {
                edge_jitter: 3,
                dropout_prob: 0.03,
                flicker_prob: 0.05,
                blip_len: Span::new(1, 3),
                false_activation_rate: 0.3,
                merge_prob: 0.6,
                merge_max_gap: 25,
                replace_with_noise: false,
            },
            cor: ChannelNoise {
                edge_jitter: 2,
                dropout_prob: 0.03,
                flicker_prob: 0.5,
                blip_len: Span::new(2, 8),
                false_activation_rate: 2.0,
                ..ChannelNoise::default()
            },
            ..Self::noiseless(n_files, seed)
        }
    }

    /// `paper_like` with `channel` replaced by passage-independent noise.
    pub fn planted_noise(n_files: usize, seed: u64, channel: Channel) -> Result<Self> {
        let mut config = Self::paper_like(n_files, seed);
        config.noise_mut(channel)?.replace_with_noise = true;
        Ok(config)
    }

    pub fn noise(&self, channel: Channel) -> Result<&ChannelNoise> {
        match channel {
            Channel::Shield => Ok(&self.shield),
            Channel::Loop => Ok(&self.induction_loop),
            Channel::Cor => Ok(&self.cor),
            other => Err(Error::UnknownChannel(format!("{other} is not a sensor"))),
        }
    }

    pub fn noise_mut(&mut self, channel: Channel) -> Result<&mut ChannelNoise> {
        match channel {
            Channel::Shield => Ok(&mut self.shield),
            Channel::Loop => Ok(&mut self.induction_loop),
            Channel::Cor => Ok(&mut self.cor),
            other => Err(Error::UnknownChannel(format!("{other} is not a sensor"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_files == 0 {
            return Err(Error::Config("n_files must be positive".into()));
        }
        self.passages_per_file.check("passages_per_file", 0)?;
        self.passage_len.check("passage_len", 1)?;
        self.gap_len.check("gap_len", 1)?;
        for c in Channel::SENSORS {
            self.noise(c)?.validate(c)?;
        }
        if Channel::SENSORS
            .iter()
            .all(|&c| self.noise(c).is_ok_and(|n| n.replace_with_noise))
        {
            return Err(Error::Config("at least one sensor must follow the passages".into()));
        }
        Ok(())
    }
}

pub fn file_id(index: usize) -> String {
    format!("log_{index:05}")
}

/// Generates the corpus; file `i` depends only on `(config, i)`.
pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<EventLog>> {
    config.validate()?;
    (0..config.n_files)
        .into_par_iter()
        .map(|i| generate_file(config, i))
        .collect()
}

fn generate_file(config: &SynthConfig, index: usize) -> Result<EventLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[index as u64]));
    let first_frame = rng.gen_range(0..=config.max_first_frame);

    let n_passages = config.passages_per_file.sample(&mut rng) as usize;
    let mut passages = Vec::with_capacity(n_passages);
    let mut t = config.gap_len.sample(&mut rng) as usize;
    for _ in 0..n_passages {
        let len = config.passage_len.sample(&mut rng) as usize;
        passages.push((t, t + len - 1));
        t += len + config.gap_len.sample(&mut rng) as usize;
    }
    let n = t;

    let mut channels = BTreeMap::new();
    for c in Channel::SENSORS {
        let noise = config.noise(c)?;
        let signal = if noise.replace_with_noise {
            independent_process(config, n, &mut rng)
        } else {
            corrupt(&passages, n, noise, &mut rng)
        };
        channels.insert(c, signal);
    }
    let basic: Vec<bool> = (0..n)
        .map(|t| Channel::SENSORS.iter().filter(|c| channels[c][t]).count() >= 2)
        .collect();

    let anchors: Vec<&[bool]> = Channel::SENSORS
        .iter()
        .filter(|&&c| config.noise(c).is_ok_and(|nz| !nz.replace_with_noise))
        .map(|c| channels[c].as_slice())
        .collect();
    let reference = snap_reference(&passages, &anchors, n, config.ref_snap_radius);

    channels.insert(Channel::Basic, basic);
    channels.insert(Channel::Ref, reference);
    let series = FrameSeries::new(first_frame, channels)?;
    sparsify(&series, file_id(index))
}

fn fill(signal: &mut [bool], from: usize, to: usize, value: bool) {
    let to = to.min(signal.len() - 1);
    if from <= to {
        signal[from..=to].iter_mut().for_each(|b| *b = value);
    }
}

fn corrupt<R: Rng + ?Sized>(passages: &[(usize, usize)], n: usize, noise: &ChannelNoise, rng: &mut R) -> Vec<bool> {
    let mut signal = vec![false; n];
    let jitter = noise.edge_jitter as i64;
    let mut seen = Vec::with_capacity(passages.len());
    let shifted = |x: usize, rng: &mut R| -> usize {
        let d = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
        (x as i64 + d).clamp(0, n as i64 - 1) as usize
    };
    for &(s, e) in passages {
        let present = !rng.gen_bool(noise.dropout_prob);
        let s2 = shifted(s, rng);
        let e2 = shifted(e, rng).max(s2);
        seen.push(present);
        if present {
            fill(&mut signal, s2, e2, true);
        }
    }
    for i in 1..passages.len() {
        let gap = (passages[i].0 - passages[i - 1].1 - 1) as u64;
        let bridged = rng.gen_bool(noise.merge_prob);
        if bridged && gap <= noise.merge_max_gap && seen[i - 1] && seen[i] {
            fill(&mut signal, passages[i - 1].1, passages[i].0, true);
        }
    }
    if noise.false_activation_rate > 0.0 {
        let p = noise.false_activation_rate / 1000.0;
        let idle: Vec<bool> = {
            let mut busy = vec![false; n];
            for &(s, e) in passages {
                fill(&mut busy, s, e, true);
            }
            busy.into_iter().map(|b| !b).collect()
        };
        for t in 0..n {
            if idle[t] && rng.gen_bool(p) {
                let len = noise.blip_len.sample(rng) as usize;
                fill(&mut signal, t, t + len - 1, true);
            }
        }
    }
    for (&(s, e), &present) in passages.iter().zip(&seen) {
        if present && rng.gen_bool(noise.flicker_prob) {
            let len = noise.blip_len.sample(rng) as usize;
            // strictly inside: at least one on-frame on each side
            if e > s + len {
                let at = rng.gen_range(s + 1..=e - len);
                fill(&mut signal, at, at + len - 1, false);
            }
        }
    }
    signal
}

fn independent_process<R: Rng + ?Sized>(config: &SynthConfig, n: usize, rng: &mut R) -> Vec<bool> {
    let mut signal = vec![false; n];
    let mut t = config.gap_len.sample(rng) as usize;
    while t < n {
        let len = config.passage_len.sample(rng) as usize;
        fill(&mut signal, t, t + len - 1, true);
        t += len + config.gap_len.sample(rng) as usize;
    }
    signal
}

fn nearest_edge(edges: &[usize], target: usize, radius: u64) -> Option<usize> {
    let pos = edges.partition_point(|&e| e < target);
    let candidates = [pos.checked_sub(1).map(|i| edges[i]), edges.get(pos).copied()];
    candidates
        .into_iter()
        .flatten()
        .filter(|&e| e.abs_diff(target) as u64 <= radius)
        .min_by_key(|&e| (e.abs_diff(target), e))
}

/// Reference signal whose edges all coincide with anchor-channel edges.
fn snap_reference(passages: &[(usize, usize)], anchors: &[&[bool]], n: usize, radius: u64) -> Vec<bool> {
    let edges: Vec<usize> = (1..n).filter(|&t| anchors.iter().any(|a| a[t] != a[t - 1])).collect();
    let mut reference = vec![false; n];
    let mut last_off = 0;
    for &(s, e) in passages {
        let (Some(on), Some(off)) = (nearest_edge(&edges, s, radius), nearest_edge(&edges, e + 1, radius)) else {
            continue;
        };
        if on >= off || on <= last_off {
            continue;
        }
        fill(&mut reference, on, off - 1, true);
        last_off = off;
    }
    reference
}

/// Ground truth of one generated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub first_frame: u64,
    pub last_frame: u64,
    pub passages: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub files: Vec<ManifestEntry>,
}

pub fn manifest(config: &SynthConfig, logs: &[EventLog]) -> Result<Manifest> {
    let files = logs
        .iter()
        .map(|log| {
            let series = densify(log)?;
            Ok(ManifestEntry {
                id: log.source_id().to_string(),
                first_frame: series.first_frame(),
                last_frame: series.last_frame(),
                passages: extract_intervals(series.channel(Channel::Ref)?, series.first_frame()),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Manifest {
        config: config.clone(),
        files,
    })
}

/// Writes one CSV per log plus `manifest.json` into `dir`.
pub fn write_corpus(dir: &Path, config: &SynthConfig, logs: &[EventLog]) -> Result<()> {
    write_dataset(dir, logs)?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest(config, logs)?)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub runs: usize,
    pub on_frames: u64,
    /// run length → number of runs
    pub run_lengths: BTreeMap<u64, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub files: usize,
    pub frames: u64,
    pub passages: usize,
    pub channels: BTreeMap<Channel, ChannelStats>,
}

pub fn corpus_stats(logs: &[EventLog]) -> Result<CorpusStats> {
    let mut stats = CorpusStats::default();
    for log in logs {
        stats.files += 1;
        if log.is_empty() {
            continue;
        }
        let series = densify(log)?;
        stats.frames += series.len() as u64;
        for (&channel, signal) in series.channels() {
            let entry = stats.channels.entry(channel).or_default();
            for run in extract_intervals(signal, series.first_frame()) {
                entry.runs += 1;
                entry.on_frames += run.frame_count();
                *entry.run_lengths.entry(run.frame_count()).or_default() += 1;
            }
            if channel == Channel::Ref {
                stats.passages = entry.runs;
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_edge_prefers_earlier_on_tie() {
        let edges = [10, 14, 30];
        assert_eq!(nearest_edge(&edges, 12, 3), Some(10));
        assert_eq!(nearest_edge(&edges, 13, 3), Some(14));
        assert_eq!(nearest_edge(&edges, 20, 3), None);
        assert_eq!(nearest_edge(&edges, 30, 0), Some(30));
        assert_eq!(nearest_edge(&[], 3, 10), None);
    }

    #[test]
    fn flicker_stays_strictly_inside() {
        let noise = ChannelNoise {
            flicker_prob: 1.0,
            blip_len: Span::new(3, 3),
            ..ChannelNoise::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = corrupt(&[(5, 14)], 25, &noise, &mut rng);
            assert!(s[5] && s[14]);
            assert_eq!(s.iter().filter(|&&b| b).count(), 7);
            let runs = extract_intervals(&s, 0);
            assert_eq!(runs.len(), 2);
        }
    }

    #[test]
    fn short_passage_cannot_flicker() {
        let noise = ChannelNoise {
            flicker_prob: 1.0,
            blip_len: Span::new(3, 3),
            ..ChannelNoise::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = corrupt(&[(2, 5)], 8, &noise, &mut rng);
        assert_eq!(extract_intervals(&s, 0), vec![Interval::new(2, 5)]);
    }

    #[test]
    fn validation() {
        let mut c = SynthConfig::noiseless(3, 0);
        c.cor.dropout_prob = 1.5;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::noiseless(3, 0);
        c.passage_len = Span::new(5, 2);
        assert!(c.validate().is_err());
        let mut c = SynthConfig::noiseless(3, 0);
        c.gap_len = Span::new(0, 2);
        assert!(c.validate().is_err());
        assert!(SynthConfig::noiseless(0, 0).validate().is_err());
        assert!(SynthConfig::paper_like(3, 0).validate().is_ok());
    }

    #[test]
    fn config_json_uses_loop_key() {
        let json = serde_json::to_value(SynthConfig::paper_like(4, 1)).unwrap();
        assert!(json.get("loop").is_some());
        let back: SynthConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, SynthConfig::paper_like(4, 1));
        let partial: SynthConfig = serde_json::from_str(r#"{"n_files": 7}"#).unwrap();
        assert_eq!(partial.n_files, 7);
        assert_eq!(partial.cor, SynthConfig::default().cor);
    }
}
