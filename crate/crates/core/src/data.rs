//! Observed trial records, dataset validation and the dataset CSV format.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::num::{format_sig6, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Control,
    Screening,
}

impl Arm {
    pub fn code(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Screening => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Arm::Control),
            1 => Some(Arm::Screening),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventType {
    Censored,
    CancerDeath,
    OtherDeath,
}

impl EventType {
    pub fn code(self) -> u8 {
        match self {
            EventType::Censored => 0,
            EventType::CancerDeath => 3,
            EventType::OtherDeath => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(EventType::Censored),
            3 => Some(EventType::CancerDeath),
            4 => Some(EventType::OtherDeath),
            _ => None,
        }
    }
}

/// One observed participant.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord<T> {
    pub id: u64,
    pub arm: Arm,
    /// Entry to the early-detected state. Never present in the control arm.
    pub detect_time: Option<T>,
    pub event_time: T,
    pub event_type: EventType,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("record {id}: detection at {detect} after terminal event at {event}")]
    DetectAfterEvent { id: u64, detect: f64, event: f64 },
    #[error("record {id}: detection time present in the control arm")]
    DetectInControlArm { id: u64 },
    #[error("record {id}: negative or non-finite time")]
    NegativeTime { id: u64 },
    #[error("record {id}: duplicate id")]
    DuplicateId { id: u64 },
    #[error("record {id}: event time {event} beyond censoring horizon {horizon}")]
    EventBeyondHorizon { id: u64, event: f64, horizon: f64 },
    #[error("censoring horizon must be finite and positive, got {0}")]
    BadHorizon(f64),
}

/// Validated collection of records with a common administrative censoring time.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialDataset<T> {
    records: Vec<SubjectRecord<T>>,
    censor_horizon: T,
}

fn check_record<T: Real>(r: &SubjectRecord<T>, horizon: T) -> Result<(), ValidationError> {
    let id = r.id;
    let bad = |t: T| !(t.is_finite() && t >= T::zero());
    if bad(r.event_time) || r.detect_time.is_some_and(bad) {
        return Err(ValidationError::NegativeTime { id });
    }
    if let Some(d) = r.detect_time {
        if r.arm == Arm::Control {
            return Err(ValidationError::DetectInControlArm { id });
        }
        if d > r.event_time {
            return Err(ValidationError::DetectAfterEvent { id, detect: d.as_f64(), event: r.event_time.as_f64() });
        }
    }
    if r.event_time > horizon {
        return Err(ValidationError::EventBeyondHorizon {
            id,
            event: r.event_time.as_f64(),
            horizon: horizon.as_f64(),
        });
    }
    Ok(())
}

/// Checks every record in order and returns the first violation found.
pub fn validate_dataset<T: Real>(
    records: Vec<SubjectRecord<T>>,
    censor_horizon: T,
) -> Result<TrialDataset<T>, ValidationError> {
    if !(censor_horizon.is_finite() && censor_horizon > T::zero()) {
        return Err(ValidationError::BadHorizon(censor_horizon.as_f64()));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in &records {
        check_record(r, censor_horizon)?;
        if !seen.insert(r.id) {
            return Err(ValidationError::DuplicateId { id: r.id });
        }
    }
    Ok(TrialDataset { records, censor_horizon })
}

impl<T: Real> TrialDataset<T> {
    pub fn new(records: Vec<SubjectRecord<T>>, censor_horizon: T) -> Result<Self, ValidationError> {
        validate_dataset(records, censor_horizon)
    }

    pub fn records(&self) -> &[SubjectRecord<T>] {
        &self.records
    }

    pub fn into_records(self) -> Vec<SubjectRecord<T>> {
        self.records
    }

    pub fn censor_horizon(&self) -> T {
        self.censor_horizon
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &SubjectRecord<T>> {
        self.records.iter().filter(move |r| r.arm == arm)
    }

    /// Records at `indices` (with repetition), renumbered 1..=k so ids stay unique.
    pub fn resample(&self, indices: &[usize]) -> Self {
        let records = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| SubjectRecord { id: k as u64 + 1, ..self.records[i].clone() })
            .collect();
        TrialDataset { records, censor_horizon: self.censor_horizon }
    }

    pub fn summary(&self) -> DatasetSummary {
        let mut s = DatasetSummary::default();
        for r in &self.records {
            let arm = &mut s.arms[r.arm.code() as usize];
            arm.n += 1;
            arm.detections += usize::from(r.detect_time.is_some());
            match r.event_type {
                EventType::CancerDeath => arm.cancer_deaths += 1,
                EventType::OtherDeath => arm.other_deaths += 1,
                EventType::Censored => arm.censored += 1,
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ArmSummary {
    pub n: usize,
    pub detections: usize,
    pub cancer_deaths: usize,
    pub other_deaths: usize,
    pub censored: usize,
}

/// Per-arm counts, indexed by arm code (0 control, 1 screening).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub arms: [ArmSummary; 2],
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, a) in [("control", &self.arms[0]), ("screening", &self.arms[1])] {
            writeln!(
                f,
                "{name:>9}: n={} detected={} cancer_deaths={} other_deaths={} censored={}",
                a.n, a.detections, a.cancer_deaths, a.other_deaths, a.censored
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: arm must be 0 or 1, got {value}")]
    BadArm { line: u64, value: u8 },
    #[error("line {line}: event_type must be 0, 3 or 4, got {value}")]
    BadEventType { line: u64, value: u8 },
    #[error("dataset has no records; a censoring horizon cannot be inferred")]
    Empty,
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
struct CsvRow<T> {
    id: u64,
    arm: u8,
    detect_time: Option<T>,
    event_time: T,
    event_type: u8,
}

/// Reads `id,arm,detect_time,event_time,event_type` rows.
///
/// Without an explicit horizon the largest event time in the file is used.
pub fn read_dataset_csv<T: Real, R: Read>(reader: R, censor_horizon: Option<T>) -> Result<TrialDataset<T>, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut records = Vec::new();
    for row in rdr.deserialize::<CsvRow<T>>() {
        let row = row?;
        let line = records.len() as u64 + 2;
        let arm = Arm::from_code(row.arm).ok_or(CsvError::BadArm { line, value: row.arm })?;
        let event_type =
            EventType::from_code(row.event_type).ok_or(CsvError::BadEventType { line, value: row.event_type })?;
        records.push(SubjectRecord {
            id: row.id,
            arm,
            detect_time: row.detect_time,
            event_time: row.event_time,
            event_type,
        });
    }
    let horizon = match censor_horizon {
        Some(h) => h,
        None => records
            .iter()
            .map(|r| r.event_time)
            .fold(None, |m: Option<T>, t| Some(m.map_or(t, |m| m.max(t))))
            .ok_or(CsvError::Empty)?,
    };
    Ok(validate_dataset(records, horizon)?)
}

/// Writes the dataset with times at six significant digits.
pub fn write_dataset_csv<T: Real, W: Write>(data: &TrialDataset<T>, writer: W) -> Result<(), CsvError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "arm", "detect_time", "event_time", "event_type"])?;
    for r in data.records() {
        w.write_record([
            r.id.to_string(),
            r.arm.code().to_string(),
            r.detect_time.map(format_sig6).unwrap_or_default(),
            format_sig6(r.event_time),
            r.event_type.code().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
