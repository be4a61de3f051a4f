//! Domain model and ingestion for longitudinal claims timelines.
//!
//! A [`Population`] is a set of patients, each carrying demographics and a
//! timeline of [`ClaimEvent`]s sorted by the total order
//! `(date, source, kind, code)`. The tie order makes every downstream
//! computation deterministic regardless of input row order.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::calendar::months_between;
use crate::error::{Error, Result};

/// Claim channel: prescription (`Rx`) or medical (`Dx`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Rx,
    Dx,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Rx => "Rx",
            Source::Dx => "Dx",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "Rx" => Some(Source::Rx),
            "Dx" => Some(Source::Dx),
            _ => None,
        }
    }
}

/// What a coded event records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    Procedure,
    Drug,
    SpecialtyVisit,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Diagnosis,
        EventKind::Procedure,
        EventKind::Drug,
        EventKind::SpecialtyVisit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "Diagnosis",
            EventKind::Procedure => "Procedure",
            EventKind::Drug => "Drug",
            EventKind::SpecialtyVisit => "SpecialtyVisit",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "Diagnosis" => Some(EventKind::Diagnosis),
            "Procedure" => Some(EventKind::Procedure),
            "Drug" => Some(EventKind::Drug),
            "SpecialtyVisit" => Some(EventKind::SpecialtyVisit),
            _ => None,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
            Sex::Unknown => "U",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "F" => Some(Sex::F),
            "M" => Some(Sex::M),
            "U" => Some(Sex::Unknown),
            _ => None,
        }
    }
}

/// One coded healthcare event on a date.
///
/// `kind = Drug` usually implies `source = Rx`, but claims data is messy so
/// that relationship is not enforced here.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClaimEvent {
    pub date: NaiveDate,
    pub source: Source,
    pub kind: EventKind,
    pub code: String,
}

impl ClaimEvent {
    /// The total order used for patient timelines.
    pub fn sort_key(&self) -> (NaiveDate, Source, EventKind, &str) {
        (self.date, self.source, self.kind, self.code.as_str())
    }
}

/// A patient's demographics plus their sorted event timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub birth_year: i32,
    pub sex: Sex,
    events: Vec<ClaimEvent>,
}

impl PatientRecord {
    pub fn new(patient_id: String, birth_year: i32, sex: Sex, mut events: Vec<ClaimEvent>) -> Self {
        events.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        PatientRecord {
            patient_id,
            birth_year,
            sex,
            events,
        }
    }

    pub fn events(&self) -> &[ClaimEvent] {
        &self.events
    }

    /// Age in whole years at `date`, at year resolution (`date.year - birth_year`).
    pub fn age_at(&self, date: NaiveDate) -> i32 {
        date.year() - self.birth_year
    }

    /// Whole calendar months between the earliest and latest event from
    /// `source`; 0 when fewer than two such events exist.
    pub fn observation_span_months(&self, source: Source) -> u32 {
        let mut iter = self.events.iter().filter(|e| e.source == source);
        let first = match iter.next() {
            Some(e) => e.date,
            None => return 0,
        };
        let last = match iter.last() {
            Some(e) => e.date,
            None => return 0,
        };
        months_between(first, last)
    }
}

/// Immutable collection of patients keyed by id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Population {
    patients: BTreeMap<String, PatientRecord>,
}

impl Population {
    pub fn new(records: Vec<PatientRecord>) -> Self {
        let patients = records
            .into_iter()
            .map(|r| (r.patient_id.clone(), r))
            .collect();
        Population { patients }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients.get(patient_id)
    }

    /// Patients in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &PatientRecord> {
        self.patients.values()
    }

    pub fn total_events(&self) -> usize {
        self.patients.values().map(|p| p.events.len()).sum()
    }
}

pub const CLAIMS_HEADER: &str = "patient_id,date,source,kind,code";
pub const DEMOGRAPHICS_HEADER: &str = "patient_id,birth_year,sex";

/// Parse the claims CSV plus its companion demographics CSV into a
/// [`Population`]. Events are grouped per patient and sorted by the total
/// order; re-parsing serialized output yields an equal `Population`.
pub fn parse_claims<C: Read, D: Read>(claims: C, demographics: D) -> Result<Population> {
    let mut demo_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(demographics);
    expect_header(&mut demo_reader, &["patient_id", "birth_year", "sex"])?;

    let mut patients: BTreeMap<String, (i32, Sex, Vec<ClaimEvent>)> = BTreeMap::new();
    for record in demo_reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 demographics fields, got {}", record.len()),
            });
        }
        let patient_id = record[0].to_string();
        if patient_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty patient_id".into(),
            });
        }
        let birth_year: i32 = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("malformed birth_year `{}`", &record[1]),
        })?;
        let sex = Sex::parse(&record[2]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown sex token `{}`", &record[2]),
        })?;
        if patients
            .insert(patient_id.clone(), (birth_year, sex, Vec::new()))
            .is_some()
        {
            return Err(Error::Parse {
                line,
                message: format!("duplicate patient_id `{patient_id}` in demographics"),
            });
        }
    }

    let mut claims_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(claims);
    expect_header(&mut claims_reader, &["patient_id", "date", "source", "kind", "code"])?;
    for record in claims_reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 claim fields, got {}", record.len()),
            });
        }
        let patient_id = &record[0];
        let date: NaiveDate = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("malformed date `{}`", &record[1]),
        })?;
        let source = Source::parse(&record[2]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown source token `{}`", &record[2]),
        })?;
        let kind = EventKind::parse(&record[3]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown kind token `{}`", &record[3]),
        })?;
        let code = record[4].to_string();
        if code.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty code".into(),
            });
        }
        let entry = patients.get_mut(patient_id).ok_or_else(|| Error::Parse {
            line,
            message: format!("event references patient `{patient_id}` absent from demographics"),
        })?;
        entry.2.push(ClaimEvent {
            date,
            source,
            kind,
            code,
        });
    }

    let records = patients
        .into_iter()
        .map(|(id, (birth_year, sex, events))| PatientRecord::new(id, birth_year, sex, events))
        .collect();
    Ok(Population::new(records))
}

/// Serialize a population back to the claims/demographics CSV formats.
/// Rows are emitted in the deterministic (patient_id, event order) order.
pub fn write_claims<W: Write>(population: &Population, mut claims: W, mut demographics: W) -> std::io::Result<()> {
    writeln!(claims, "{CLAIMS_HEADER}")?;
    writeln!(demographics, "{DEMOGRAPHICS_HEADER}")?;
    for patient in population.iter() {
        writeln!(
            demographics,
            "{},{},{}",
            patient.patient_id,
            patient.birth_year,
            patient.sex.as_str()
        )?;
        for event in patient.events() {
            writeln!(
                claims,
                "{},{},{},{},{}",
                patient.patient_id,
                event.date.format("%Y-%m-%d"),
                event.source.as_str(),
                event.kind,
                event.code
            )?;
        }
    }
    Ok(())
}

fn expect_header<R: Read>(reader: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(csv_error)?;
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header `{}`, got `{}`",
                expected.join(","),
                actual.join(",")
            ),
        });
    }
    Ok(())
}

fn csv_error(err: csv::Error) -> Error {
    let line = match err.position() {
        Some(pos) => pos.line(),
        None => 0,
    };
    Error::Parse {
        line,
        message: err.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn ev(date: &str, source: Source, kind: EventKind, code: &str) -> ClaimEvent {
        ClaimEvent {
            date: d(date),
            source,
            kind,
            code: code.into(),
        }
    }

    #[test]
    fn events_sorted_by_total_order() {
        let claims = "patient_id,date,source,kind,code\n\
                      P1,2018-05-01,Dx,Diagnosis,E11\n\
                      P1,2017-01-01,Rx,Drug,MET\n";
        let demo = "patient_id,birth_year,sex\nP1,1960,F\n";
        let pop = parse_claims(claims.as_bytes(), demo.as_bytes()).unwrap();
        let p1 = pop.get("P1").unwrap();
        assert_eq!(p1.events()[0].date, d("2017-01-01"));
        assert_eq!(p1.events()[1].date, d("2018-05-01"));
    }

    #[test]
    fn same_day_ties_resolved_by_source_kind_code() {
        let events = vec![
            ev("2018-01-01", Source::Dx, EventKind::Diagnosis, "B"),
            ev("2018-01-01", Source::Rx, EventKind::Drug, "Z"),
            ev("2018-01-01", Source::Dx, EventKind::Diagnosis, "A"),
            ev("2018-01-01", Source::Rx, EventKind::Diagnosis, "A"),
        ];
        let rec = PatientRecord::new("P".into(), 1980, Sex::M, events);
        let codes: Vec<(Source, EventKind, &str)> = rec
            .events()
            .iter()
            .map(|e| (e.source, e.kind, e.code.as_str()))
            .collect();
        assert_eq!(
            codes,
            vec![
                (Source::Rx, EventKind::Diagnosis, "A"),
                (Source::Rx, EventKind::Drug, "Z"),
                (Source::Dx, EventKind::Diagnosis, "A"),
                (Source::Dx, EventKind::Diagnosis, "B"),
            ]
        );
    }

    #[test]
    fn empty_body_yields_empty_population() {
        let pop = parse_claims(
            "patient_id,date,source,kind,code\n".as_bytes(),
            "patient_id,birth_year,sex\n".as_bytes(),
        )
        .unwrap();
        assert!(pop.is_empty());
    }

    #[test]
    fn malformed_date_names_line() {
        let claims = "patient_id,date,source,kind,code\nP1,2018-13-40,Dx,Diagnosis,E11\n";
        let demo = "patient_id,birth_year,sex\nP1,1960,F\n";
        let err = parse_claims(claims.as_bytes(), demo.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("malformed date"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_rejected() {
        let demo = "patient_id,birth_year,sex\nP1,1960,F\n";
        let claims = "patient_id,date,source,kind,code\nP1,2018-01-01,Fax,Diagnosis,E11\n";
        assert!(parse_claims(claims.as_bytes(), demo.as_bytes()).is_err());
        let claims = "patient_id,date,source,kind,code\nP1,2018-01-01,Dx,Wizardry,E11\n";
        assert!(parse_claims(claims.as_bytes(), demo.as_bytes()).is_err());
    }

    #[test]
    fn event_without_demographics_rejected() {
        let demo = "patient_id,birth_year,sex\nP1,1960,F\n";
        let claims = "patient_id,date,source,kind,code\nP2,2018-01-01,Dx,Diagnosis,E11\n";
        let err = parse_claims(claims.as_bytes(), demo.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("P2"));
    }

    #[test]
    fn age_at_year_resolution() {
        let rec = PatientRecord::new("P".into(), 1990, Sex::F, vec![]);
        assert_eq!(rec.age_at(d("2020-06-15")), 30);
        let rec = PatientRecord::new("P".into(), 2020, Sex::F, vec![]);
        assert_eq!(rec.age_at(d("2020-01-01")), 0);
        let rec = PatientRecord::new("P".into(), 1935, Sex::F, vec![]);
        assert_eq!(rec.age_at(d("2020-01-01")), 85);
    }

    #[test]
    fn observation_span() {
        let rec = PatientRecord::new(
            "P".into(),
            1960,
            Sex::M,
            vec![
                ev("2016-01-10", Source::Rx, EventKind::Drug, "A"),
                ev("2018-01-10", Source::Rx, EventKind::Drug, "A"),
                ev("2017-06-01", Source::Dx, EventKind::Diagnosis, "B"),
            ],
        );
        assert_eq!(rec.observation_span_months(Source::Rx), 24);
        assert_eq!(rec.observation_span_months(Source::Dx), 0);
    }

    #[test]
    fn round_trip_identity() {
        let claims = "patient_id,date,source,kind,code\n\
                      P1,2018-05-01,Dx,Diagnosis,E11\n\
                      P1,2017-01-01,Rx,Drug,MET\n\
                      P2,2019-11-30,Dx,Procedure,76700\n";
        let demo = "patient_id,birth_year,sex\nP1,1960,F\nP2,1975,M\nP3,2000,U\n";
        let pop = parse_claims(claims.as_bytes(), demo.as_bytes()).unwrap();
        let mut c = Vec::new();
        let mut g = Vec::new();
        write_claims(&pop, &mut c, &mut g).unwrap();
        let reparsed = parse_claims(c.as_slice(), g.as_slice()).unwrap();
        assert_eq!(pop, reparsed);
    }
}
