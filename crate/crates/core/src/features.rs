//! Model inputs: sensor-subset selection and fixed-window history expansion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_log::{Channel, FrameSeries};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub channels: Vec<Channel>,
    #[serde(default)]
    pub window: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            channels: Channel::SENSORS.to_vec(),
            window: 0,
        }
    }
}

impl FeatureSpec {
    pub fn new(channels: Vec<Channel>, window: usize) -> Result<Self> {
        let spec = Self { channels, window };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("feature channel list is empty".into()));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if !c.is_sensor() {
                return Err(Error::Config(format!("{c} is not a sensor channel")));
            }
            if self.channels[..i].contains(c) {
                return Err(Error::Config(format!("channel {c} listed twice")));
            }
        }
        Ok(())
    }

    /// Length of each expanded input vector.
    pub fn input_dim(&self) -> usize {
        self.channels.len() * (self.window + 1)
    }
}

/// One vector per frame laid out `[X_t, X_{t-1}, …, X_{t-w}]`, each block
/// holding the selected channels in spec order. Frames before the start of
/// the series read as zero.
pub fn window_expand(series: &FrameSeries, spec: &FeatureSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let columns: Vec<&[bool]> = spec
        .channels
        .iter()
        .map(|&c| series.channel(c))
        .collect::<Result<_>>()?;
    let dim = spec.input_dim();
    Ok((0..series.len())
        .map(|t| {
            let mut v = Vec::with_capacity(dim);
            for lag in 0..=spec.window {
                for col in &columns {
                    let bit = t.checked_sub(lag).is_some_and(|s| col[s]);
                    v.push(if bit { 1.0 } else { 0.0 });
                }
            }
            v
        })
        .collect())
}

/// Restricts a series to `channels` plus the reference channel.
pub fn subset_series(series: &FrameSeries, channels: &[Channel]) -> Result<FrameSeries> {
    let mut kept = BTreeMap::new();
    for &c in channels.iter().chain(std::iter::once(&Channel::Ref)) {
        kept.insert(c, series.channel(c)?.to_vec());
    }
    FrameSeries::new(series.first_frame(), kept)
}

/// All non-empty sensor subsets: singletons, then pairs, then the full set,
/// each in canonical channel order.
pub fn sensor_subsets() -> Vec<Vec<Channel>> {
    let s = Channel::SENSORS;
    let mut out: Vec<Vec<Channel>> = Vec::with_capacity(7);
    for size in 1..=s.len() {
        for mask in 1u8..(1 << s.len()) {
            if mask.count_ones() as usize == size {
                out.push((0..s.len()).filter(|i| mask >> i & 1 == 1).map(|i| s[i]).collect());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{densify, parse_log, tests::TABLE_1};

    fn series(cols: &[(Channel, &str)]) -> FrameSeries {
        let map = cols
            .iter()
            .map(|(c, s)| (*c, s.chars().map(|ch| ch == '1').collect()))
            .collect();
        FrameSeries::new(0, map).unwrap()
    }

    #[test]
    fn window_zero_is_raw_sample() {
        let s = series(&[
            (Channel::Shield, "1100"),
            (Channel::Loop, "0110"),
            (Channel::Cor, "0011"),
            (Channel::Ref, "0110"),
        ]);
        let v = window_expand(&s, &FeatureSpec::default()).unwrap();
        assert_eq!(v[1], vec![1.0, 1.0, 0.0]);
        assert_eq!(v[3], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn window_two_layout() {
        let s = series(&[(Channel::Cor, "101"), (Channel::Ref, "000")]);
        let spec = FeatureSpec::new(vec![Channel::Cor], 2).unwrap();
        let v = window_expand(&s, &spec).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0]]);
    }

    #[test]
    fn missing_channel_is_error() {
        let s = series(&[(Channel::Cor, "101"), (Channel::Ref, "000")]);
        let spec = FeatureSpec::new(vec![Channel::Loop], 0).unwrap();
        assert!(matches!(
            window_expand(&s, &spec),
            Err(Error::MissingChannel(Channel::Loop))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(FeatureSpec::new(vec![], 0).is_err());
        assert!(FeatureSpec::new(vec![Channel::Ref], 0).is_err());
        assert!(FeatureSpec::new(vec![Channel::Cor, Channel::Cor], 0).is_err());
    }

    #[test]
    fn subsets_of_table_log() {
        let full = densify(&parse_log(TABLE_1, "t").unwrap()).unwrap();
        let sc = subset_series(&full, &[Channel::Shield, Channel::Cor]).unwrap();
        let names: Vec<_> = sc.channel_names().collect();
        assert_eq!(names, vec![Channel::Shield, Channel::Cor, Channel::Ref]);

        let only_loop = subset_series(&full, &[Channel::Loop]).unwrap();
        assert_eq!(
            only_loop.channel(Channel::Loop).unwrap(),
            full.channel(Channel::Loop).unwrap()
        );
        assert!(!only_loop.has_channel(Channel::Shield));

        let all = subset_series(&full, &Channel::SENSORS).unwrap();
        assert_eq!(all.channel_names().count(), 4);
        for c in Channel::SENSORS {
            assert_eq!(all.channel(c).unwrap(), full.channel(c).unwrap());
        }
    }

    #[test]
    fn seven_canonical_subsets() {
        use Channel::*;
        assert_eq!(
            sensor_subsets(),
            vec![
                vec![Shield],
                vec![Loop],
                vec![Cor],
                vec![Shield, Loop],
                vec![Shield, Cor],
                vec![Loop, Cor],
                vec![Shield, Loop, Cor],
            ]
        );
    }
}
