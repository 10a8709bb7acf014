//! Event-driven checkpoint logs.
//!
//! A log row is written only when one of the three sensor bits changes, so
//! every signal holds its last recorded value until the next row. The on-disk
//! form is a headed CSV:
//!
//! ```text
//! frame,shield,loop,cor,basic,ref
//! 196,1,0,0,0,0
//! 201,1,1,0,0,0
//! ```

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "frame,shield,loop,cor,basic,ref";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Shield,
    Loop,
    Cor,
    Basic,
    Ref,
}

impl Channel {
    /// The three binarized sensor inputs, in canonical order.
    pub const SENSORS: [Channel; 3] = [Channel::Shield, Channel::Loop, Channel::Cor];
    pub const ALL: [Channel; 5] = [
        Channel::Shield,
        Channel::Loop,
        Channel::Cor,
        Channel::Basic,
        Channel::Ref,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Shield => "shield",
            Channel::Loop => "loop",
            Channel::Cor => "cor",
            Channel::Basic => "basic",
            Channel::Ref => "ref",
        }
    }

    pub fn is_sensor(self) -> bool {
        Self::SENSORS.contains(&self)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shield" => Ok(Channel::Shield),
            "loop" => Ok(Channel::Loop),
            "cor" => Ok(Channel::Cor),
            "basic" | "basic_clf" => Ok(Channel::Basic),
            "ref" | "ref_pass" => Ok(Channel::Ref),
            other => Err(Error::UnknownChannel(other.to_string())),
        }
    }
}

/// One row of an event-driven log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventRecord {
    pub frame_no: u64,
    pub shield: bool,
    pub induction_loop: bool,
    pub cor: bool,
    pub basic_clf: bool,
    pub ref_pass: bool,
}

impl EventRecord {
    pub fn get(&self, channel: Channel) -> bool {
        match channel {
            Channel::Shield => self.shield,
            Channel::Loop => self.induction_loop,
            Channel::Cor => self.cor,
            Channel::Basic => self.basic_clf,
            Channel::Ref => self.ref_pass,
        }
    }

    pub fn set(&mut self, channel: Channel, value: bool) {
        match channel {
            Channel::Shield => self.shield = value,
            Channel::Loop => self.induction_loop = value,
            Channel::Cor => self.cor = value,
            Channel::Basic => self.basic_clf = value,
            Channel::Ref => self.ref_pass = value,
        }
    }

    fn sensors(&self) -> [bool; 3] {
        [self.shield, self.induction_loop, self.cor]
    }
}

/// An ordered, validated log for one vehicle file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    source_id: String,
    records: Vec<EventRecord>,
    /// Indices of records whose sensor bits repeat their predecessor's.
    repeated_sensor_rows: Vec<usize>,
}

impl EventLog {
    /// Builds a log, enforcing strictly increasing frame numbers.
    pub fn new(source_id: impl Into<String>, records: Vec<EventRecord>) -> Result<Self> {
        for (i, pair) in records.windows(2).enumerate() {
            if pair[1].frame_no <= pair[0].frame_no {
                return Err(Error::Ordering {
                    // header is line 1, record i+1 sits on line i+3
                    line: i as u64 + 3,
                    frame: pair[1].frame_no,
                    previous: pair[0].frame_no,
                });
            }
        }
        let repeated_sensor_rows = records
            .windows(2)
            .enumerate()
            .filter(|(_, pair)| pair[0].sensors() == pair[1].sensors())
            .map(|(i, _)| i + 1)
            .collect();
        Ok(Self {
            source_id: source_id.into(),
            records,
            repeated_sensor_rows,
        })
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// True when every consecutive pair differs in at least one sensor bit.
    pub fn is_event_driven(&self) -> bool {
        self.repeated_sensor_rows.is_empty()
    }

    pub fn repeated_sensor_rows(&self) -> &[usize] {
        &self.repeated_sensor_rows
    }
}

/// Dense per-frame signal covering `first_frame ..= first_frame + len - 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSeries {
    first_frame: u64,
    channels: BTreeMap<Channel, Vec<bool>>,
}

impl FrameSeries {
    pub fn new(first_frame: u64, channels: BTreeMap<Channel, Vec<bool>>) -> Result<Self> {
        let mut lengths = channels.values().map(Vec::len);
        let len = lengths
            .next()
            .ok_or(Error::EmptyInput("frame series has no channels"))?;
        if len == 0 {
            return Err(Error::EmptyInput("frame series has zero frames"));
        }
        if let Some(bad) = lengths.find(|&l| l != len) {
            return Err(Error::LengthMismatch {
                expected: len,
                actual: bad,
            });
        }
        Ok(Self { first_frame, channels })
    }

    pub fn first_frame(&self) -> u64 {
        self.first_frame
    }

    pub fn last_frame(&self) -> u64 {
        self.first_frame + self.len() as u64 - 1
    }

    pub fn len(&self) -> usize {
        self.channels.values().next().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, channel: Channel) -> Result<&[bool]> {
        self.channels
            .get(&channel)
            .map(Vec::as_slice)
            .ok_or(Error::MissingChannel(channel))
    }

    pub fn has_channel(&self, channel: Channel) -> bool {
        self.channels.contains_key(&channel)
    }

    pub fn channel_names(&self) -> impl Iterator<Item = Channel> + '_ {
        self.channels.keys().copied()
    }

    pub fn channels(&self) -> &BTreeMap<Channel, Vec<bool>> {
        &self.channels
    }

    /// Returns a copy with `channel` replaced; the channel must already exist.
    pub fn with_channel(&self, channel: Channel, values: Vec<bool>) -> Result<Self> {
        if !self.has_channel(channel) {
            return Err(Error::MissingChannel(channel));
        }
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        let mut channels = self.channels.clone();
        channels.insert(channel, values);
        Ok(Self {
            first_frame: self.first_frame,
            channels,
        })
    }
}

fn parse_bit(field: &str, name: &str, line: u64) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            message: format!("column `{name}` must be 0 or 1, got {other:?}"),
        }),
    }
}

/// Parses the CSV log format. Records keep file order; frame numbers must
/// strictly increase.
pub fn parse_log(text: &str, source_id: impl Into<String>) -> Result<EventLog> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = reader.records();

    let header = match rows.next() {
        Some(row) => row.map_err(|e| csv_error(e, 1))?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let header_fields: Vec<&str> = header.iter().collect();
    if header_fields.join(",") != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{HEADER}`"),
        });
    }

    let names = ["frame", "shield", "loop", "cor", "basic", "ref"];
    let mut records = Vec::new();
    let mut previous: Option<u64> = None;
    for row in rows {
        let row = row.map_err(|e| csv_error(e, 0))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != names.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, got {}", names.len(), row.len()),
            });
        }
        let frame_no: u64 = row[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("frame must be a non-negative integer, got {:?}", &row[0]),
        })?;
        if let Some(prev) = previous {
            if frame_no <= prev {
                return Err(Error::Ordering {
                    line,
                    frame: frame_no,
                    previous: prev,
                });
            }
        }
        previous = Some(frame_no);
        records.push(EventRecord {
            frame_no,
            shield: parse_bit(&row[1], names[1], line)?,
            induction_loop: parse_bit(&row[2], names[2], line)?,
            cor: parse_bit(&row[3], names[3], line)?,
            basic_clf: parse_bit(&row[4], names[4], line)?,
            ref_pass: parse_bit(&row[5], names[5], line)?,
        });
    }
    let log = EventLog::new(source_id, records)?;
    if !log.is_event_driven() {
        log::warn!(
            "{}: {} record(s) repeat the previous sensor state",
            log.source_id(),
            log.repeated_sensor_rows().len()
        );
    }
    Ok(log)
}

fn csv_error(err: csv::Error, fallback_line: u64) -> Error {
    let line = err.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

/// Serializes a log to the CSV format (LF endings, no quoting).
pub fn write_log(log: &EventLog) -> String {
    let mut out = String::with_capacity(HEADER.len() + 1 + log.len() * 16);
    out.push_str(HEADER);
    out.push('\n');
    for r in log.records() {
        let bit = |b: bool| if b { '1' } else { '0' };
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.frame_no,
            bit(r.shield),
            bit(r.induction_loop),
            bit(r.cor),
            bit(r.basic_clf),
            bit(r.ref_pass)
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Expands a log into one sample per frame using zero-order hold.
pub fn densify(log: &EventLog) -> Result<FrameSeries> {
    let records = log.records();
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f.frame_no, l.frame_no),
        _ => return Err(Error::EmptyInput("cannot densify an empty log")),
    };
    let len = (last - first + 1) as usize;
    let mut channels: BTreeMap<Channel, Vec<bool>> =
        Channel::ALL.iter().map(|&c| (c, Vec::with_capacity(len))).collect();
    for (i, rec) in records.iter().enumerate() {
        let until = records.get(i + 1).map_or(last + 1, |next| next.frame_no);
        let span = (until - rec.frame_no) as usize;
        for (&channel, values) in channels.iter_mut() {
            values.extend(std::iter::repeat_n(rec.get(channel), span));
        }
    }
    FrameSeries::new(first, channels)
}

/// Builds the minimal event-driven log reproducing the series' sensor
/// channels. The first frame is always emitted; `basic` and `ref` are sampled
/// at the emitted frames (and default to 0 when absent).
pub fn sparsify(series: &FrameSeries, source_id: impl Into<String>) -> Result<EventLog> {
    if series.is_empty() {
        return Err(Error::EmptyInput("cannot sparsify an empty series"));
    }
    let sensors: Vec<&[bool]> = Channel::SENSORS
        .iter()
        .map(|&c| series.channel(c))
        .collect::<Result<_>>()?;
    let basic = series.channel(Channel::Basic).ok();
    let reference = series.channel(Channel::Ref).ok();

    let mut records = Vec::new();
    for t in 0..series.len() {
        let changed = t == 0 || sensors.iter().any(|s| s[t] != s[t - 1]);
        if changed {
            records.push(EventRecord {
                frame_no: series.first_frame() + t as u64,
                shield: sensors[0][t],
                induction_loop: sensors[1][t],
                cor: sensors[2][t],
                basic_clf: basic.is_some_and(|b| b[t]),
                ref_pass: reference.is_some_and(|r| r[t]),
            });
        }
    }
    EventLog::new(source_id, records)
}

/// Reads every `*.csv` in `dir`, sorted by file name. The file stem becomes
/// the log's source id.
pub fn read_dataset(dir: &Path) -> Result<Vec<EventLog>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_log_file(p)).collect()
}

pub fn read_log_file(path: &Path) -> Result<EventLog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_log(&text, id).map_err(|e| Error::in_file(path, e))
}

/// Writes each log to `dir/<source_id>.csv`, creating `dir` if needed.
pub fn write_dataset(dir: &Path, logs: &[EventLog]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for log in logs {
        let path = dir.join(format!("{}.csv", log.source_id()));
        fs::write(&path, write_log(log)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const TABLE_1: &str = "frame,shield,loop,cor,basic,ref
196,1,0,0,0,0
201,1,1,0,0,0
202,0,1,1,1,0
208,1,1,1,1,1
246,0,1,1,1,1
266,1,1,1,1,0
268,1,1,0,1,0
269,1,0,0,0,0
270,0,0,0,0,0
";

    fn rec(frame_no: u64, bits: [u8; 5]) -> EventRecord {
        EventRecord {
            frame_no,
            shield: bits[0] == 1,
            induction_loop: bits[1] == 1,
            cor: bits[2] == 1,
            basic_clf: bits[3] == 1,
            ref_pass: bits[4] == 1,
        }
    }

    #[test]
    fn parses_table_row() {
        let log = parse_log(TABLE_1, "t1").unwrap();
        assert_eq!(log.len(), 9);
        assert_eq!(log.records()[3], rec(208, [1, 1, 1, 1, 1]));
        assert!(log.is_event_driven());
    }

    #[test]
    fn header_only_is_empty_log() {
        let log = parse_log("frame,shield,loop,cor,basic,ref\n", "e").unwrap();
        assert!(log.is_empty());
        assert_eq!(write_log(&log), "frame,shield,loop,cor,basic,ref\n");
    }

    #[test]
    fn repeated_frame_is_ordering_error() {
        let text = format!("{HEADER}\n10,1,0,0,0,0\n10,0,0,0,0,0\n");
        match parse_log(&text, "x") {
            Err(Error::Ordering { line, frame, previous }) => {
                assert_eq!((line, frame, previous), (3, 10, 10));
            }
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = format!("{HEADER}\n1,0,0,0,0,0\n2,0,1,0,0\n");
        assert!(matches!(parse_log(&text, "x"), Err(Error::Parse { line: 3, .. })));
        let text = format!("{HEADER}\n1,0,0,0,0,0\n2,0,2,0,0,0\n");
        assert!(matches!(parse_log(&text, "x"), Err(Error::Parse { line: 3, .. })));
        let text = format!("{HEADER}\n-1,0,0,0,0,0\n");
        assert!(matches!(parse_log(&text, "x"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(
            parse_log("frame,a,b\n", "x"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_log("", "x"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn repeated_sensor_state_is_flagged_not_rejected() {
        let text = format!("{HEADER}\n1,1,0,0,0,0\n5,1,0,0,0,1\n");
        let log = parse_log(&text, "x").unwrap();
        assert!(!log.is_event_driven());
        assert_eq!(log.repeated_sensor_rows(), &[1]);
    }

    #[test]
    fn table_round_trips_exactly() {
        let log = parse_log(TABLE_1, "t1").unwrap();
        assert_eq!(write_log(&log), TABLE_1);
    }

    #[test]
    fn densify_table_reference() {
        let series = densify(&parse_log(TABLE_1, "t1").unwrap()).unwrap();
        assert_eq!(series.first_frame(), 196);
        assert_eq!(series.len(), 270 - 196 + 1);
        let reference = series.channel(Channel::Ref).unwrap();
        for (t, &v) in reference.iter().enumerate() {
            let frame = 196 + t as u64;
            assert_eq!(v, (208..=265).contains(&frame), "frame {frame}");
        }
    }

    #[test]
    fn densify_single_record_and_hold() {
        let log = EventLog::new("one", vec![rec(5, [1, 0, 1, 0, 0])]).unwrap();
        let series = densify(&log).unwrap();
        assert_eq!(series.len(), 1);
        assert!(series.channels().values().all(|v| v.len() == 1));

        let log = EventLog::new("hold", vec![rec(0, [0, 1, 0, 0, 0]), rec(3, [0, 0, 0, 0, 0])]).unwrap();
        let series = densify(&log).unwrap();
        assert_eq!(series.channel(Channel::Loop).unwrap(), &[true, true, true, false]);
    }

    #[test]
    fn densify_empty_is_error() {
        let log = EventLog::new("e", vec![]).unwrap();
        assert!(matches!(densify(&log), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn constant_series_sparsifies_to_one_record() {
        let channels = Channel::ALL
            .iter()
            .map(|&c| (c, vec![c == Channel::Loop; 100]))
            .collect();
        let series = FrameSeries::new(40, channels).unwrap();
        let log = sparsify(&series, "c").unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.records()[0].frame_no, 40);
        assert_eq!(densify(&log).unwrap().len(), 1);
    }

    #[test]
    fn sparsify_of_densified_table_is_identity() {
        let log = parse_log(TABLE_1, "t1").unwrap();
        let back = sparsify(&densify(&log).unwrap(), "t1").unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn series_rejects_ragged_channels() {
        let mut channels = BTreeMap::new();
        channels.insert(Channel::Shield, vec![true; 3]);
        channels.insert(Channel::Loop, vec![true; 2]);
        assert!(matches!(
            FrameSeries::new(0, channels),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn channel_names_parse() {
        for c in Channel::ALL {
            assert_eq!(c.name().parse::<Channel>().unwrap(), c);
        }
        assert!(matches!("wheel".parse::<Channel>(), Err(Error::UnknownChannel(_))));
    }
}
