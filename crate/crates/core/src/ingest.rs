//! Trial data model, trial CSV format and session handling.
//!
//! # Trial CSV format
//!
//! ```text
//! #channels,C3,Cz,C4
//! #trial,0,A01,T,1,250
//! 0.125,-1.5,3.25
//! ...                       one line per time sample
//! #trial,1,A01,T,,250       empty label = unlabeled trial
//! ...
//! ```
//!
//! The first line names the channels. Each trial starts with a header line
//! `#trial,<trial_index>,<subject_id>,<session_id>,<label-or-empty>,<sample_rate_hz>`
//! followed by its samples, one comma-separated row of channel values per
//! time sample. Numbers are written with the shortest representation that
//! parses back to the identical `f64`.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod synth;

pub use synth::{generate_synthetic_stream, SynthConfig, SYNTH_TEST_SESSION, SYNTH_TRAIN_SESSION};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid trial: {0}")]
    InvalidTrial(String),
    #[error("invalid trial set: {0}")]
    InvalidSet(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("session split: {0}")]
    Split(String),
}

/// Binary motor-imagery class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Class {
    One,
    Two,
}

impl Class {
    pub fn code(self) -> u8 {
        match self {
            Class::One => 1,
            Class::Two => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Class> {
        match code {
            1 => Some(Class::One),
            2 => Some(Class::Two),
            _ => None,
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::One => Class::Two,
            Class::Two => Class::One,
        }
    }

    /// Position in two-element per-class arrays.
    pub fn slot(self) -> usize {
        match self {
            Class::One => 0,
            Class::Two => 1,
        }
    }
}

impl From<Class> for u8 {
    fn from(c: Class) -> u8 {
        c.code()
    }
}

impl TryFrom<u8> for Class {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        Class::from_code(v).ok_or_else(|| format!("class label must be 1 or 2, got {v}"))
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// One EEG epoch: a channels × samples matrix plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: DMatrix<f64>,
    pub label: Option<Class>,
    pub sample_rate_hz: f64,
    pub subject_id: String,
    pub session_id: String,
    pub trial_index: usize,
    /// Pass band this trial was filtered to, if it came out of a filter bank.
    pub band_hz: Option<(f64, f64)>,
}

impl Trial {
    pub fn new(
        data: DMatrix<f64>,
        label: Option<Class>,
        sample_rate_hz: f64,
        subject_id: impl Into<String>,
        session_id: impl Into<String>,
        trial_index: usize,
    ) -> Result<Trial, IngestError> {
        let trial = Trial {
            data,
            label,
            sample_rate_hz,
            subject_id: subject_id.into(),
            session_id: session_id.into(),
            trial_index,
            band_hz: None,
        };
        trial.validate()?;
        Ok(trial)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.data.nrows() < 1 {
            return Err(IngestError::InvalidTrial(format!(
                "trial {} has no channels",
                self.trial_index
            )));
        }
        if self.data.ncols() < 2 {
            return Err(IngestError::InvalidTrial(format!(
                "trial {} has {} samples, need at least 2",
                self.trial_index,
                self.data.ncols()
            )));
        }
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(IngestError::InvalidTrial(format!(
                "trial {} sample rate {} is not positive",
                self.trial_index, self.sample_rate_hz
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::InvalidTrial(format!(
                "trial {} contains non-finite values",
                self.trial_index
            )));
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sample_rate_hz
    }

    /// Same metadata, new samples.
    pub fn with_data(&self, data: DMatrix<f64>) -> Trial {
        Trial {
            data,
            label: self.label,
            sample_rate_hz: self.sample_rate_hz,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            trial_index: self.trial_index,
            band_hz: self.band_hz,
        }
    }
}

/// An ordered collection of trials sharing channel layout and sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    trials: Vec<Trial>,
    channel_names: Vec<String>,
}

impl TrialSet {
    pub fn new(trials: Vec<Trial>, channel_names: Vec<String>) -> Result<TrialSet, IngestError> {
        if channel_names.is_empty() {
            return Err(IngestError::InvalidSet("no channel names".into()));
        }
        let mut seen = HashSet::with_capacity(trials.len());
        for t in &trials {
            t.validate()?;
            if t.n_channels() != channel_names.len() {
                return Err(IngestError::InvalidSet(format!(
                    "trial {} has {} channels, set has {}",
                    t.trial_index,
                    t.n_channels(),
                    channel_names.len()
                )));
            }
            if t.sample_rate_hz != trials[0].sample_rate_hz {
                return Err(IngestError::InvalidSet(format!(
                    "trial {} sample rate {} differs from {}",
                    t.trial_index, t.sample_rate_hz, trials[0].sample_rate_hz
                )));
            }
            if !seen.insert(t.trial_index) {
                return Err(IngestError::InvalidSet(format!(
                    "duplicate trial index {}",
                    t.trial_index
                )));
            }
        }
        Ok(TrialSet {
            trials,
            channel_names,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn sample_rate_hz(&self) -> Option<f64> {
        self.trials.first().map(|t| t.sample_rate_hz)
    }

    pub fn into_trials(self) -> Vec<Trial> {
        self.trials
    }

    /// Keeps trials matching `pred`, preserving order.
    pub fn filter<F: FnMut(&Trial) -> bool>(&self, mut pred: F) -> TrialSet {
        TrialSet {
            trials: self.trials.iter().filter(|t| pred(t)).cloned().collect(),
            channel_names: self.channel_names.clone(),
        }
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.trials {
            if !out.contains(&t.subject_id) {
                out.push(t.subject_id.clone());
            }
        }
        out
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> IngestError {
    IngestError::Parse {
        line,
        msg: msg.into(),
    }
}

fn check_id(kind: &str, id: &str) -> Result<(), IngestError> {
    if id.contains([',', '\n', '\r']) {
        return Err(IngestError::InvalidSet(format!(
            "{kind} {id:?} contains a comma or newline"
        )));
    }
    Ok(())
}

/// Writes `set` in the trial CSV format.
pub fn write_trials<W: Write>(set: &TrialSet, out: W) -> Result<(), IngestError> {
    let mut w = BufWriter::new(out);
    for name in set.channel_names() {
        check_id("channel name", name)?;
    }
    writeln!(w, "#channels,{}", set.channel_names().join(","))?;
    for t in set.trials() {
        check_id("subject id", &t.subject_id)?;
        check_id("session id", &t.session_id)?;
        let label = t.label.map(|c| c.to_string()).unwrap_or_default();
        writeln!(
            w,
            "#trial,{},{},{},{},{:?}",
            t.trial_index, t.subject_id, t.session_id, label, t.sample_rate_hz
        )?;
        let mut row = String::new();
        for s in 0..t.n_samples() {
            row.clear();
            for c in 0..t.n_channels() {
                if c > 0 {
                    row.push(',');
                }
                row.push_str(&format!("{:?}", t.data[(c, s)]));
            }
            writeln!(w, "{row}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_trials(set: &TrialSet, path: impl AsRef<Path>) -> Result<(), IngestError> {
    let file = File::create(path)?;
    write_trials(set, file)
}

struct PendingTrial {
    header_line: usize,
    trial_index: usize,
    subject_id: String,
    session_id: String,
    label: Option<Class>,
    rate: f64,
    samples: Vec<f64>,
    n_rows: usize,
}

impl PendingTrial {
    fn finish(self, n_channels: usize) -> Result<Trial, IngestError> {
        let data = DMatrix::from_column_slice(n_channels, self.n_rows, &self.samples);
        Trial::new(
            data,
            self.label,
            self.rate,
            self.subject_id,
            self.session_id,
            self.trial_index,
        )
        .map_err(|e| parse_err(self.header_line, e.to_string()))
    }
}

/// Parses the trial CSV format from a reader.
pub fn read_trials<R: BufRead>(
    input: R,
    expected_rate: Option<f64>,
) -> Result<TrialSet, IngestError> {
    let mut lines = input.lines().enumerate();
    let channel_names: Vec<String> = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let mut fields = line.trim_end().split(',');
            if fields.next() != Some("#channels") {
                return Err(parse_err(1, "expected '#channels,<names...>' header"));
            }
            let names: Vec<String> = fields.map(str::to_owned).collect();
            if names.is_empty() || names.iter().any(|n| n.is_empty()) {
                return Err(parse_err(1, "channel names must be non-empty"));
            }
            names
        }
        None => return Err(parse_err(1, "empty file")),
    };
    let n_channels = channel_names.len();

    let mut trials = Vec::new();
    let mut pending: Option<PendingTrial> = None;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#trial,") {
            if let Some(p) = pending.take() {
                trials.push(p.finish(n_channels)?);
            }
            let fields: Vec<&str> = rest.split(',').collect();
            if fields.len() != 5 {
                return Err(parse_err(
                    lineno,
                    format!(
                        "trial header needs 5 fields after '#trial', got {}",
                        fields.len()
                    ),
                ));
            }
            let trial_index: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad trial index {:?}", fields[0])))?;
            let label = match fields[3] {
                "" => None,
                s => Some(
                    s.parse::<u8>()
                        .ok()
                        .and_then(Class::from_code)
                        .ok_or_else(|| parse_err(lineno, format!("bad label {s:?}")))?,
                ),
            };
            let rate: f64 = fields[4]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad sample rate {:?}", fields[4])))?;
            if !(rate.is_finite() && rate > 0.0) {
                return Err(parse_err(
                    lineno,
                    format!("sample rate {rate} is not positive"),
                ));
            }
            if let Some(expected) = expected_rate {
                if (rate - expected).abs() > 1e-9 * expected {
                    return Err(parse_err(
                        lineno,
                        format!("sample rate {rate} does not match expected {expected}"),
                    ));
                }
            }
            pending = Some(PendingTrial {
                header_line: lineno,
                trial_index,
                subject_id: fields[1].to_owned(),
                session_id: fields[2].to_owned(),
                label,
                rate,
                samples: Vec::new(),
                n_rows: 0,
            });
            continue;
        }
        if line.starts_with('#') {
            return Err(parse_err(lineno, "unknown directive"));
        }
        let p = pending
            .as_mut()
            .ok_or_else(|| parse_err(lineno, "sample row before any '#trial' header"))?;
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value {field:?}")));
            }
            p.samples.push(v);
            count += 1;
        }
        if count != n_channels {
            return Err(parse_err(
                lineno,
                format!("ragged row: {count} values for {n_channels} channels"),
            ));
        }
        p.n_rows += 1;
    }
    if let Some(p) = pending.take() {
        trials.push(p.finish(n_channels)?);
    }
    TrialSet::new(trials, channel_names)
}

/// Loads a trial CSV file, preserving on-disk trial order.
pub fn load_trials(
    path: impl AsRef<Path>,
    expected_rate: Option<f64>,
) -> Result<TrialSet, IngestError> {
    let file = File::open(path)?;
    read_trials(BufReader::new(file), expected_rate)
}

/// Partitions `set` by session id into (train, test). Trials from sessions
/// in neither list are dropped; relative order is preserved.
pub fn split_sessions(
    set: &TrialSet,
    train_sessions: &[String],
    test_sessions: &[String],
) -> Result<(TrialSet, TrialSet), IngestError> {
    if let Some(s) = train_sessions.iter().find(|s| test_sessions.contains(s)) {
        return Err(IngestError::Split(format!(
            "session {s:?} listed for both train and test"
        )));
    }
    let train = set.filter(|t| train_sessions.contains(&t.session_id));
    let test = set.filter(|t| test_sessions.contains(&t.session_id));
    if train.is_empty() {
        return Err(IngestError::Split("no trials in the train sessions".into()));
    }
    if test.is_empty() {
        return Err(IngestError::Split("no trials in the test sessions".into()));
    }
    Ok((train, test))
}
