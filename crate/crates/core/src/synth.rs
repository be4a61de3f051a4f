//! Deterministic synthetic claims generator with a planted disease signal.
//!
//! Patients accrue background claims by per-code monthly draws. Disease
//! onset follows a discrete-time hazard that is logistic in code-presence
//! indicators, so a known subset of codes carries the signal a downstream
//! model should recover. After onset the diagnosis is recorded with a
//! configurable probability (to model underdiagnosis) and correlated codes
//! are emitted at elevated rates. Ground truth (onset dates) is returned
//! alongside the claims so every downstream stage can be checked against it.
//!
//! All randomness flows from one seed via per-patient substreams, so output
//! is bit-identical at any parallelism. Claims, onset, and post-onset
//! recording use separate substreams: raising a signal coefficient leaves
//! the background claims of every patient untouched and can only move onsets
//! earlier.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::add_months;
use crate::claims::{write_claims, ClaimEvent, EventKind, PatientRecord, Population, Sex, Source};
use crate::error::{Error, Result};
use crate::rcs::CrossSection;
use crate::seeding::seeded_rng;

const STREAM_DEMOGRAPHICS: u64 = 0xD3;
const STREAM_CLAIMS: u64 = 0xC1;
const STREAM_ONSET: u64 = 0x05;
const STREAM_RECORDING: u64 = 0x2E;

/// One catalog code: its claim kind, background emission rate, and an
/// optional elevated rate once the disease is present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSpec {
    pub code: String,
    pub kind: EventKind,
    /// Bernoulli probability of one claim per calendar month.
    pub monthly_rate: f64,
    /// Monthly rate after disease onset; defaults to `monthly_rate`.
    #[serde(default)]
    pub post_onset_monthly_rate: Option<f64>,
    /// Emitted only before the study period (legacy-era coding).
    #[serde(default)]
    pub pre_study_only: bool,
}

impl CodeSpec {
    fn source(&self) -> Source {
        match self.kind {
            EventKind::Drug => Source::Rx,
            _ => Source::Dx,
        }
    }
}

/// Logistic hazard over code-presence indicators.
///
/// The six-month disease hazard of a patient is
/// `sigmoid(intercept + sum of coefficients over codes present)`. A code is
/// present at month `m` when a background claim for it occurred strictly
/// before `m`, within `presence_window_months` when set (so the signal lives
/// in the same horizon a lookback window can see). When `intercept` is unset
/// it is derived as `logit(target_incidence)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalModel {
    #[serde(default)]
    pub intercept: Option<f64>,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
    #[serde(default)]
    pub presence_window_months: Option<u32>,
}

/// How a disease onset surfaces in claims.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseRecording {
    /// Diagnosis code emitted when the disease is recorded.
    pub dx_code: String,
    /// Probability that an onset is ever coded (models underdiagnosis).
    pub record_probability: f64,
    /// Monthly rate of follow-up diagnosis claims once recorded.
    pub dx_monthly_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemographicModel {
    pub birth_year_min: i32,
    pub birth_year_max: i32,
    pub female_fraction: f64,
    #[serde(default)]
    pub unknown_sex_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: u32,
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    /// Months of pre-study history to simulate (observation span, legacy codes).
    #[serde(default = "default_history_months")]
    pub history_months: u32,
    pub code_catalog: Vec<CodeSpec>,
    /// Catalog codes flagged as at-risk inclusion codes.
    pub risk_codes: Vec<String>,
    pub signal: SignalModel,
    pub target_incidence: f64,
    pub disease: DiseaseRecording,
    pub demographics: DemographicModel,
    pub seed: u64,
}

fn default_history_months() -> u32 {
    12
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be positive".into()));
        }
        if self.study_end <= add_months(self.study_start, 30) {
            return Err(Error::Config(
                "study period must exceed 30 months".into(),
            ));
        }
        if !(self.target_incidence > 0.0 && self.target_incidence < 1.0) {
            return Err(Error::Config("target_incidence must lie in (0,1)".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.code_catalog {
            if !(0.0..=1.0).contains(&spec.monthly_rate) {
                return Err(Error::Config(format!(
                    "monthly_rate for `{}` must lie in [0,1]",
                    spec.code
                )));
            }
            if let Some(rate) = spec.post_onset_monthly_rate {
                if !(0.0..=1.0).contains(&rate) {
                    return Err(Error::Config(format!(
                        "post_onset_monthly_rate for `{}` must lie in [0,1]",
                        spec.code
                    )));
                }
            }
            if !seen.insert((spec.kind, spec.code.clone())) {
                return Err(Error::Config(format!(
                    "duplicate catalog entry ({:?}, `{}`)",
                    spec.kind, spec.code
                )));
            }
        }
        let catalog_codes: BTreeSet<&str> =
            self.code_catalog.iter().map(|c| c.code.as_str()).collect();
        for code in &self.risk_codes {
            if !catalog_codes.contains(code.as_str()) {
                return Err(Error::Config(format!(
                    "risk code `{code}` not in catalog"
                )));
            }
        }
        for code in self.signal.coefficients.keys() {
            if !catalog_codes.contains(code.as_str()) {
                return Err(Error::Config(format!(
                    "signal coefficient for `{code}` not in catalog"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.disease.record_probability)
            || !(0.0..=1.0).contains(&self.disease.dx_monthly_rate)
        {
            return Err(Error::Config("disease recording rates must lie in [0,1]".into()));
        }
        if self.demographics.birth_year_min > self.demographics.birth_year_max {
            return Err(Error::Config("birth_year_min exceeds birth_year_max".into()));
        }
        let f = self.demographics.female_fraction;
        let u = self.demographics.unknown_sex_fraction;
        if !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&u) || f + u > 1.0 {
            return Err(Error::Config("sex fractions must form a distribution".into()));
        }
        Ok(())
    }

    fn intercept(&self) -> f64 {
        self.signal
            .intercept
            .unwrap_or_else(|| (self.target_incidence / (1.0 - self.target_incidence)).ln())
    }
}

/// Per-patient onset dates; `None` for never-diseased patients.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub onsets: BTreeMap<String, Option<NaiveDate>>,
}

impl GroundTruth {
    /// True label of a (patient, cross-section) pair: onset falls inside the
    /// outcome window.
    pub fn true_label(&self, patient_id: &str, cs: &CrossSection) -> bool {
        matches!(
            self.onsets.get(patient_id),
            Some(Some(date)) if cs.contains_in_outcome(*date)
        )
    }

    pub fn onset(&self, patient_id: &str) -> Option<NaiveDate> {
        self.onsets.get(patient_id).copied().flatten()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Simulation month grid: month `m` covers `[start(m), start(m+1))`.
struct MonthGrid {
    starts: Vec<NaiveDate>,
}

impl MonthGrid {
    fn new(sim_start: NaiveDate, end: NaiveDate) -> Self {
        let mut starts = Vec::new();
        let mut m = 0;
        loop {
            let s = add_months(sim_start, m);
            if s > end {
                break;
            }
            starts.push(s);
            m += 1;
        }
        // sentinel for the last month's length
        starts.push(add_months(sim_start, m));
        MonthGrid { starts }
    }

    fn n_months(&self) -> usize {
        self.starts.len() - 1
    }

    fn start(&self, m: usize) -> NaiveDate {
        self.starts[m]
    }

    fn days_in(&self, m: usize) -> u32 {
        (self.starts[m + 1] - self.starts[m]).num_days() as u32
    }

    fn day_in(&self, m: usize, rng: &mut impl Rng) -> NaiveDate {
        let offset = rng.gen_range(0..self.days_in(m)) as i64;
        self.starts[m] + chrono::Duration::days(offset)
    }
}

/// Generate a population and its ground truth. Same seed, same output,
/// independent of thread count.
pub fn generate(config: &SynthConfig) -> Result<(Population, GroundTruth)> {
    config.validate()?;
    let sim_start = add_months(config.study_start, -(config.history_months as i32));
    let grid = MonthGrid::new(sim_start, config.study_end);
    let intercept = config.intercept();

    let patients: Vec<(PatientRecord, Option<NaiveDate>)> = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, &grid, intercept, i))
        .collect();

    let mut onsets = BTreeMap::new();
    let mut records = Vec::with_capacity(patients.len());
    for (record, onset) in patients {
        onsets.insert(record.patient_id.clone(), onset);
        records.push(record);
    }
    Ok((Population::new(records), GroundTruth { onsets }))
}

fn generate_patient(
    config: &SynthConfig,
    grid: &MonthGrid,
    intercept: f64,
    index: u32,
) -> (PatientRecord, Option<NaiveDate>) {
    let patient_id = format!("P{index:07}");
    let seed = config.seed;
    let n_months = grid.n_months();

    let mut rng = seeded_rng(seed, STREAM_DEMOGRAPHICS, index as u64);
    let birth_year = rng.gen_range(config.demographics.birth_year_min..=config.demographics.birth_year_max);
    let u: f64 = rng.gen();
    let sex = if u < config.demographics.female_fraction {
        Sex::F
    } else if u < config.demographics.female_fraction + config.demographics.unknown_sex_fraction {
        Sex::Unknown
    } else {
        Sex::M
    };

    // Background claims, independent of disease state.
    let mut rng = seeded_rng(seed, STREAM_CLAIMS, index as u64);
    let mut events: Vec<ClaimEvent> = Vec::new();
    let mut claim_months: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for m in 0..n_months {
        let in_study = grid.start(m) >= config.study_start;
        for spec in &config.code_catalog {
            if spec.pre_study_only && in_study {
                continue;
            }
            if rng.gen::<f64>() < spec.monthly_rate {
                let date = grid.day_in(m, &mut rng);
                events.push(ClaimEvent {
                    date,
                    source: spec.source(),
                    kind: spec.kind,
                    code: spec.code.clone(),
                });
                claim_months.entry(spec.code.as_str()).or_default().push(m);
            }
        }
    }

    // Onset: discrete-time hazard, logistic in codes present strictly before
    // the month under consideration. Converted from a six-month hazard to a
    // monthly one so the intercept keeps its six-month interpretation.
    let mut rng = seeded_rng(seed, STREAM_ONSET, index as u64);
    let window = config.signal.presence_window_months;
    let present_at = |code: &str, m: usize| -> bool {
        match claim_months.get(code) {
            None => false,
            Some(months) => months.iter().any(|&c| {
                c < m && window.map_or(true, |w| m - c <= w as usize)
            }),
        }
    };
    let mut onset: Option<(usize, NaiveDate)> = None;
    for m in 0..n_months {
        if grid.start(m) < config.study_start {
            continue;
        }
        let mut margin = intercept;
        for (code, beta) in &config.signal.coefficients {
            if present_at(code, m) {
                margin += beta;
            }
        }
        let six_month = sigmoid(margin);
        let monthly = 1.0 - (1.0 - six_month).powf(1.0 / 6.0);
        if rng.gen::<f64>() < monthly {
            let date = grid.day_in(m, &mut rng);
            onset = Some((m, date));
            break;
        }
    }

    // Post-onset recording and correlated-code elevation.
    if let Some((onset_month, onset_date)) = onset {
        let mut rng = seeded_rng(seed, STREAM_RECORDING, index as u64);
        let recorded = rng.gen::<f64>() < config.disease.record_probability;
        if recorded {
            events.push(ClaimEvent {
                date: onset_date,
                source: Source::Dx,
                kind: EventKind::Diagnosis,
                code: config.disease.dx_code.clone(),
            });
            for m in (onset_month + 1)..n_months {
                if rng.gen::<f64>() < config.disease.dx_monthly_rate {
                    let date = grid.day_in(m, &mut rng);
                    events.push(ClaimEvent {
                        date,
                        source: Source::Dx,
                        kind: EventKind::Diagnosis,
                        code: config.disease.dx_code.clone(),
                    });
                }
            }
        }
        for spec in &config.code_catalog {
            let post = spec.post_onset_monthly_rate.unwrap_or(spec.monthly_rate);
            let extra = (post - spec.monthly_rate).max(0.0);
            if extra == 0.0 || spec.pre_study_only {
                continue;
            }
            for m in (onset_month + 1)..n_months {
                if rng.gen::<f64>() < extra {
                    let date = grid.day_in(m, &mut rng);
                    events.push(ClaimEvent {
                        date,
                        source: spec.source(),
                        kind: spec.kind,
                        code: spec.code.clone(),
                    });
                }
            }
        }
    }

    let record = PatientRecord::new(patient_id, birth_year, sex, events);
    (record, onset.map(|(_, date)| date))
}

pub const GROUND_TRUTH_HEADER: &str = "patient_id,onset_date";

/// Write claims, demographics, and ground-truth CSVs into `directory`.
pub fn emit_fixture(
    population: &Population,
    ground_truth: &GroundTruth,
    directory: &Path,
) -> Result<()> {
    std::fs::create_dir_all(directory).map_err(|e| Error::io(directory.display().to_string(), e))?;
    let claims_path = directory.join("claims.csv");
    let demo_path = directory.join("demographics.csv");
    let gt_path = directory.join("ground_truth.csv");

    let claims = BufWriter::new(
        File::create(&claims_path).map_err(|e| Error::io(claims_path.display().to_string(), e))?,
    );
    let demo = BufWriter::new(
        File::create(&demo_path).map_err(|e| Error::io(demo_path.display().to_string(), e))?,
    );
    write_claims(population, claims, demo)
        .map_err(|e| Error::io(claims_path.display().to_string(), e))?;

    let mut gt = BufWriter::new(
        File::create(&gt_path).map_err(|e| Error::io(gt_path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(gt_path.display().to_string(), e);
    writeln!(gt, "{GROUND_TRUTH_HEADER}").map_err(io_err)?;
    for (patient_id, onset) in &ground_truth.onsets {
        match onset {
            Some(date) => writeln!(gt, "{patient_id},{}", date.format("%Y-%m-%d")).map_err(io_err)?,
            None => writeln!(gt, "{patient_id},").map_err(io_err)?,
        }
    }
    Ok(())
}

/// Parse a ground-truth CSV written by [`emit_fixture`].
pub fn parse_ground_truth(content: &str) -> Result<GroundTruth> {
    let mut onsets = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            if line != GROUND_TRUTH_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{GROUND_TRUTH_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (patient_id, rest) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: i as u64 + 1,
            message: "expected `patient_id,onset_date`".into(),
        })?;
        let onset = if rest.is_empty() {
            None
        } else {
            Some(rest.parse().map_err(|_| Error::Parse {
                line: i as u64 + 1,
                message: format!("malformed date `{rest}`"),
            })?)
        };
        onsets.insert(patient_id.to_string(), onset);
    }
    Ok(GroundTruth { onsets })
}
