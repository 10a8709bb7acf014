//! Vehicle passage detection from event-driven checkpoint sensor logs.
//!
//! The crate covers the whole pipeline: parsing and densifying logs
//! ([`event_log`]), building model inputs ([`features`]), from-scratch
//! recurrent and feed-forward classifiers with exact gradients ([`nets`]),
//! training and threshold selection ([`training`]), morphological
//! post-filtering ([`morphology`]), the Pass Quality metric
//! ([`passage_metric`]), a seeded synthetic log generator ([`synth`]) and the
//! experiment harness that ties them together ([`harness`]).

pub mod config;
pub mod error;
pub mod event_log;
pub mod features;
pub mod harness;
pub mod morphology;
pub mod nets;
pub mod passage_metric;
pub(crate) mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use event_log::{Channel, EventLog, EventRecord, FrameSeries};
pub use passage_metric::{Interval, PqReport};
