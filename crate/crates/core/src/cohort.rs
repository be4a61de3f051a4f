//! Cohort construction: eligibility stratification, outcome-window labeling,
//! and the downsampled at-risk control pool.
//!
//! A patient can contribute one row per cross-section. Rows are labeled
//! positive by an explicit disease diagnosis in the outcome window, or by a
//! proxy cluster (a fibrosis/cirrhosis claim near a precursor claim with no
//! competing liver diagnosis). Eligible patients with no evidence during or
//! before the outcome window form the control pool, which is downsampled per
//! cross-section to a fixed ratio; the pre-downsampling count is kept because
//! precision rescaling needs it.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calendar::add_months;
use crate::claims::{ClaimEvent, EventKind, PatientRecord, Population, Sex};
use crate::error::{Error, Result};
use crate::rcs::CrossSection;
use crate::seeding::seeded_rng;
use chrono::NaiveDate;

const STREAM_DOWNSAMPLE: u64 = 0xD5;

/// Minimum observation span, in months, required in each claim channel.
pub const MIN_OBSERVATION_MONTHS: u32 = 24;
pub const MIN_AGE: i32 = 18;
pub const MAX_AGE: i32 = 85;

/// Months before a fibrosis/cirrhosis claim in which a precursor diagnosis
/// qualifies the proxy rule, and months after it.
pub const PROXY_PRECEDING_MONTHS: i32 = 24;
pub const PROXY_SUBSEQUENT_MONTHS: i32 = 6;

/// A set of (kind, code) pairs.
pub type CodeSet = Vec<(EventKind, String)>;

fn set_contains(set: &CodeSet, event: &ClaimEvent) -> bool {
    set.iter()
        .any(|(kind, code)| *kind == event.kind && code == &event.code)
}

/// Named code sets driving stratification, labeling, and benchmark screens.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSetConfig {
    /// Named inclusion sets (obesity, t2dm, metabolic disorder, nafl, ...);
    /// a patient qualifies with a lookback claim from any of them.
    pub at_risk_inclusion: BTreeMap<String, CodeSet>,
    /// Disqualifying liver complications.
    pub exclusion: CodeSet,
    /// Explicit disease diagnosis codes.
    pub nash_dx: CodeSet,
    /// Fibrosis / sclerosis / cirrhosis codes anchoring the proxy rule.
    pub fibrosis_cirrhosis: CodeSet,
    /// Precursor (fatty liver) codes.
    pub nafl: CodeSet,
    /// Competing liver diagnoses that veto the proxy rule.
    pub other_liver_dx: CodeSet,
    /// Legacy-era disease codes; any occurrence before the study start
    /// excludes the patient entirely.
    pub legacy_nash_dx: CodeSet,
    /// Benchmark screen rules (may be empty if benchmarks are not run).
    #[serde(default)]
    pub nafl_screen: CodeSet,
    #[serde(default)]
    pub t2dm_screen: CodeSet,
}

impl CodeSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.at_risk_inclusion.is_empty()
            || self.at_risk_inclusion.values().any(|s| s.is_empty())
        {
            return Err(Error::Config(
                "at_risk_inclusion must contain non-empty named sets".into(),
            ));
        }
        for (name, set) in [
            ("exclusion", &self.exclusion),
            ("nash_dx", &self.nash_dx),
            ("fibrosis_cirrhosis", &self.fibrosis_cirrhosis),
            ("nafl", &self.nafl),
            ("other_liver_dx", &self.other_liver_dx),
            ("legacy_nash_dx", &self.legacy_nash_dx),
        ] {
            if set.is_empty() {
                return Err(Error::Config(format!("code set `{name}` must be non-empty")));
            }
        }
        for pair in &self.nash_dx {
            if self.nafl.contains(pair) {
                return Err(Error::Config(format!(
                    "nash_dx and nafl overlap on ({:?}, `{}`)",
                    pair.0, pair.1
                )));
            }
        }
        Ok(())
    }

    pub fn screen_rule(&self, name: &str) -> Result<&CodeSet> {
        let set = match name {
            "nafl_screen" => &self.nafl_screen,
            "t2dm_screen" => &self.t2dm_screen,
            _ => {
                return Err(Error::Config(format!("unknown benchmark rule set `{name}`")));
            }
        };
        if set.is_empty() {
            return Err(Error::Config(format!("benchmark rule set `{name}` is empty")));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NashDx,
    NashProxy,
    Control,
}

impl Label {
    pub fn is_positive(self) -> bool {
        matches!(self, Label::NashDx | Label::NashProxy)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NashDx => "NashDx",
            Label::NashProxy => "NashProxy",
            Label::Control => "Control",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "NashDx" => Some(Label::NashDx),
            "NashProxy" => Some(Label::NashProxy),
            "Control" => Some(Label::Control),
            _ => None,
        }
    }
}

/// Labeling outcome for an eligible (patient, cross-section) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelOutcome {
    Labeled(Label),
    /// Evidence exists before the window; the row is excluded from both
    /// classes to keep the control pool clean.
    NotLabelable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CohortMode {
    NaflInclusive,
    NonNafl,
}

impl CohortMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CohortMode::NaflInclusive => "nafl_inclusive",
            CohortMode::NonNafl => "non_nafl",
        }
    }
}

/// One labeled patient x cross-section row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledCrossSection {
    pub patient_id: String,
    pub cs_id: u32,
    pub label: Label,
    pub nafl_in_lookback: bool,
}

/// Per-cross-section bookkeeping, including the pre-downsampling control
/// count that feeds precision rescaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionStats {
    pub cs_id: u32,
    pub positives_dx: usize,
    pub positives_proxy: usize,
    pub controls_before_downsampling: usize,
    pub controls_retained: usize,
    /// False when the pool was smaller than ratio x positives and every
    /// control was kept.
    pub ratio_satisfied: bool,
}

impl CrossSectionStats {
    pub fn positives(&self) -> usize {
        self.positives_dx + self.positives_proxy
    }

    /// Pre-downsampling incidence: positives / (positives + full control pool).
    pub fn incidence(&self) -> f64 {
        let p = self.positives();
        p as f64 / (p + self.controls_before_downsampling) as f64
    }

    /// Downsampling factor k = full control pool / retained controls.
    pub fn downsampling_factor(&self) -> f64 {
        if self.controls_retained == 0 {
            1.0
        } else {
            self.controls_before_downsampling as f64 / self.controls_retained as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortBuild {
    pub mode: CohortMode,
    pub rows: Vec<LabeledCrossSection>,
    pub stats: Vec<CrossSectionStats>,
}

/// Eligibility of a patient for one cross-section.
pub fn eligible(
    patient: &PatientRecord,
    cs: &CrossSection,
    config: &CodeSetConfig,
    study_start: NaiveDate,
) -> bool {
    if !matches!(patient.sex, Sex::F | Sex::M) {
        return false;
    }
    let age = patient.age_at(cs.index_date);
    if !(MIN_AGE..=MAX_AGE).contains(&age) {
        return false;
    }
    if patient.observation_span_months(crate::claims::Source::Rx) < MIN_OBSERVATION_MONTHS
        || patient.observation_span_months(crate::claims::Source::Dx) < MIN_OBSERVATION_MONTHS
    {
        return false;
    }
    let mut any_inclusion = false;
    for event in patient.events() {
        if event.date < study_start && set_contains(&config.legacy_nash_dx, event) {
            return false;
        }
        if cs.contains_in_lookback(event.date) {
            if set_contains(&config.exclusion, event) {
                return false;
            }
            if !any_inclusion
                && config
                    .at_risk_inclusion
                    .values()
                    .any(|set| set_contains(set, event))
            {
                any_inclusion = true;
            }
        }
    }
    any_inclusion
}

/// Does a fibrosis/cirrhosis claim at `anchor` have a precursor claim within
/// the qualifying proximity window?
fn nafl_near(patient: &PatientRecord, config: &CodeSetConfig, anchor: NaiveDate) -> bool {
    let lo = add_months(anchor, -PROXY_PRECEDING_MONTHS);
    let hi = add_months(anchor, PROXY_SUBSEQUENT_MONTHS);
    patient
        .events()
        .iter()
        .any(|e| e.date >= lo && e.date <= hi && set_contains(&config.nafl, e))
}

/// Label an eligible (patient, cross-section) pair.
///
/// Labels follow the earliest occurrence of evidence: a patient with
/// evidence on or before the index date (an explicit diagnosis, or a
/// fibrosis claim with a qualifying precursor) is excluded from the
/// cross-section entirely; their labeling windows came earlier. Within the
/// outcome window, an explicit diagnosis wins over the proxy rule.
pub fn label(patient: &PatientRecord, cs: &CrossSection, config: &CodeSetConfig) -> LabelOutcome {
    let events = patient.events();

    // Prior evidence: an explicit diagnosis on or before the index date, or a
    // fibrosis claim on or before it with a qualifying precursor.
    let prior_evidence = events.iter().any(|e| {
        e.date <= cs.index_date
            && (set_contains(&config.nash_dx, e)
                || (set_contains(&config.fibrosis_cirrhosis, e)
                    && nafl_near(patient, config, e.date)))
    });
    if prior_evidence {
        return LabelOutcome::NotLabelable;
    }

    if events
        .iter()
        .any(|e| cs.contains_in_outcome(e.date) && set_contains(&config.nash_dx, e))
    {
        return LabelOutcome::Labeled(Label::NashDx);
    }

    let other_liver_in_outcome = events
        .iter()
        .any(|e| cs.contains_in_outcome(e.date) && set_contains(&config.other_liver_dx, e));
    if !other_liver_in_outcome {
        let proxy = events
            .iter()
            .filter(|e| {
                cs.contains_in_outcome(e.date) && set_contains(&config.fibrosis_cirrhosis, e)
            })
            .any(|e| nafl_near(patient, config, e.date));
        if proxy {
            return LabelOutcome::Labeled(Label::NashProxy);
        }
    }

    LabelOutcome::Labeled(Label::Control)
}

/// Build the labeled cohort across all cross-sections.
///
/// Positives are never dropped. Controls are downsampled uniformly at random
/// without replacement to `control_ratio` x positives per cross-section,
/// seeded and ordered by patient id so the retained set is reproducible.
pub fn build_cohort(
    population: &Population,
    cross_sections: &[CrossSection],
    config: &CodeSetConfig,
    mode: CohortMode,
    control_ratio: u32,
    study_start: NaiveDate,
    seed: u64,
) -> Result<CohortBuild> {
    if control_ratio < 1 {
        return Err(Error::Config("control_ratio must be at least 1".into()));
    }
    config.validate()?;
    let patients: Vec<&PatientRecord> = population.iter().collect();

    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for cs in cross_sections {
        let labeled: Vec<(usize, Label, bool)> = patients
            .par_iter()
            .enumerate()
            .filter_map(|(idx, patient)| {
                if !eligible(patient, cs, config, study_start) {
                    return None;
                }
                let outcome = match label(patient, cs, config) {
                    LabelOutcome::Labeled(l) => l,
                    LabelOutcome::NotLabelable => return None,
                };
                let nafl_in_lookback = patient
                    .events()
                    .iter()
                    .any(|e| cs.contains_in_lookback(e.date) && set_contains(&config.nafl, e));
                if mode == CohortMode::NonNafl && nafl_in_lookback {
                    return None;
                }
                Some((idx, outcome, nafl_in_lookback))
            })
            .collect();

        let mut positives_dx = 0usize;
        let mut positives_proxy = 0usize;
        let mut controls: Vec<(usize, bool)> = Vec::new();
        let mut cs_rows: Vec<LabeledCrossSection> = Vec::new();
        for (idx, l, nafl_flag) in labeled {
            match l {
                Label::NashDx | Label::NashProxy => {
                    if l == Label::NashDx {
                        positives_dx += 1;
                    } else {
                        positives_proxy += 1;
                    }
                    cs_rows.push(LabeledCrossSection {
                        patient_id: patients[idx].patient_id.clone(),
                        cs_id: cs.id,
                        label: l,
                        nafl_in_lookback: nafl_flag,
                    });
                }
                Label::Control => controls.push((idx, nafl_flag)),
            }
        }

        // Controls are already in ascending patient id order because the
        // population iterates sorted.
        let controls_before = controls.len();
        let target = (control_ratio as usize).saturating_mul(positives_dx + positives_proxy);
        let retained: Vec<(usize, bool)> = if controls_before <= target {
            controls
        } else {
            let mut rng = seeded_rng(seed, STREAM_DOWNSAMPLE, cs.id as u64);
            let mut picks: Vec<usize> = sample(&mut rng, controls_before, target).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| controls[i]).collect()
        };
        let stats_row = CrossSectionStats {
            cs_id: cs.id,
            positives_dx,
            positives_proxy,
            controls_before_downsampling: controls_before,
            controls_retained: retained.len(),
            ratio_satisfied: controls_before >= target,
        };
        for (idx, nafl_flag) in retained {
            cs_rows.push(LabeledCrossSection {
                patient_id: patients[idx].patient_id.clone(),
                cs_id: cs.id,
                label: Label::Control,
                nafl_in_lookback: nafl_flag,
            });
        }
        cs_rows.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        rows.extend(cs_rows);
        stats.push(stats_row);
    }
    Ok(CohortBuild { mode, rows, stats })
}

pub const COHORT_HEADER: &str = "patient_id,cs_id,label,nafl_in_lookback";

pub fn write_cohort_csv<W: std::io::Write>(rows: &[LabeledCrossSection], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{COHORT_HEADER}")?;
    for row in rows {
        writeln!(
            w,
            "{},{},{},{}",
            row.patient_id,
            row.cs_id,
            row.label.as_str(),
            row.nafl_in_lookback
        )?;
    }
    Ok(())
}

pub fn parse_cohort_csv(content: &str) -> Result<Vec<LabeledCrossSection>> {
    let mut rows = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 {
            if line != COHORT_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected header `{COHORT_HEADER}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let err = |message: String| Error::Parse {
            line: i as u64 + 1,
            message,
        };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        rows.push(LabeledCrossSection {
            patient_id: fields[0].to_string(),
            cs_id: fields[1]
                .parse()
                .map_err(|_| err(format!("malformed cs_id `{}`", fields[1])))?,
            label: Label::parse(fields[2])
                .ok_or_else(|| err(format!("unknown label `{}`", fields[2])))?,
            nafl_in_lookback: fields[3]
                .parse()
                .map_err(|_| err(format!("malformed flag `{}`", fields[3])))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::Source;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn ev(date: &str, kind: EventKind, code: &str) -> ClaimEvent {
        ClaimEvent {
            date: d(date),
            source: if kind == EventKind::Drug { Source::Rx } else { Source::Dx },
            kind,
            code: code.into(),
        }
    }

    fn dx(date: &str, code: &str) -> ClaimEvent {
        ev(date, EventKind::Diagnosis, code)
    }

    pub(crate) fn test_config() -> CodeSetConfig {
        let dx_set = |codes: &[&str]| -> CodeSet {
            codes
                .iter()
                .map(|c| (EventKind::Diagnosis, c.to_string()))
                .collect()
        };
        CodeSetConfig {
            at_risk_inclusion: BTreeMap::from([
                ("t2dm".to_string(), dx_set(&["E11"])),
                ("obesity".to_string(), dx_set(&["E66"])),
                ("nafl".to_string(), dx_set(&["K76.0"])),
            ]),
            exclusion: dx_set(&["K70", "C22.0"]),
            nash_dx: dx_set(&["K75.81"]),
            fibrosis_cirrhosis: dx_set(&["K74.0", "K74.6"]),
            nafl: dx_set(&["K76.0"]),
            other_liver_dx: dx_set(&["B18"]),
            legacy_nash_dx: dx_set(&["571.8"]),
            nafl_screen: dx_set(&["K76.0"]),
            t2dm_screen: dx_set(&["E11"]),
        }
    }

    fn test_cs() -> CrossSection {
        CrossSection {
            id: 1,
            index_date: d("2017-10-01"),
            lookback_start: d("2015-10-01"),
            outcome_end: d("2018-04-01"),
        }
    }

    const STUDY_START: &str = "2015-10-01";

    /// Spanning events in both channels so span criteria hold.
    fn span_events() -> Vec<ClaimEvent> {
        vec![
            ev("2015-10-01", EventKind::Drug, "MET"),
            ev("2017-10-01", EventKind::Drug, "MET"),
            dx("2015-10-01", "I10"),
            dx("2017-10-01", "I10"),
        ]
    }

    fn patient(birth_year: i32, sex: Sex, mut extra: Vec<ClaimEvent>) -> PatientRecord {
        let mut events = span_events();
        events.append(&mut extra);
        PatientRecord::new("P1".into(), birth_year, sex, events)
    }

    #[test]
    fn eligibility_criteria() {
        let config = test_config();
        let cs = test_cs();
        let start = d(STUDY_START);
        let ok = patient(1960, Sex::F, vec![dx("2016-05-01", "E11")]);
        assert!(eligible(&ok, &cs, &config, start));

        // age 17 at index
        let minor = patient(2000, Sex::F, vec![dx("2016-05-01", "E11")]);
        assert!(!eligible(&minor, &cs, &config, start));

        // exclusion code in lookback
        let excluded = patient(1960, Sex::F, vec![dx("2016-05-01", "E11"), dx("2017-01-01", "K70")]);
        assert!(!eligible(&excluded, &cs, &config, start));

        // no inclusion code
        let no_inclusion = patient(1960, Sex::F, vec![]);
        assert!(!eligible(&no_inclusion, &cs, &config, start));

        // unknown sex
        let unk = patient(1960, Sex::Unknown, vec![dx("2016-05-01", "E11")]);
        assert!(!eligible(&unk, &cs, &config, start));

        // legacy code before study start
        let legacy = patient(
            1960,
            Sex::F,
            vec![dx("2016-05-01", "E11"), dx("2015-03-01", "571.8")],
        );
        assert!(!eligible(&legacy, &cs, &config, start));

        // same legacy code after study start does not trip the rule
        let late_legacy = patient(
            1960,
            Sex::F,
            vec![dx("2016-05-01", "E11"), dx("2016-03-01", "571.8")],
        );
        assert!(eligible(&late_legacy, &cs, &config, start));

        // insufficient Dx span
        let short = vec![
            ev("2015-10-01", EventKind::Drug, "MET"),
            ev("2017-10-01", EventKind::Drug, "MET"),
            dx("2017-06-01", "I10"),
            dx("2017-09-01", "I10"),
            dx("2016-05-01", "E11"),
        ];
        let short = PatientRecord::new("P1".into(), 1960, Sex::F, short);
        assert!(!eligible(&short, &cs, &config, start));
    }

    #[test]
    fn label_nash_dx_in_outcome() {
        let config = test_config();
        let cs = test_cs();
        let p = patient(1960, Sex::F, vec![dx("2018-01-01", "K75.81")]);
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::NashDx));
    }

    #[test]
    fn label_proxy_cluster() {
        let config = test_config();
        let cs = test_cs();
        // cirrhosis at index + 2 months, precursor at index - 10 months
        let p = patient(
            1960,
            Sex::F,
            vec![dx("2017-12-01", "K74.6"), dx("2016-12-01", "K76.0")],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::NashProxy));
    }

    #[test]
    fn proxy_vetoed_by_other_liver_dx() {
        let config = test_config();
        let cs = test_cs();
        let p = patient(
            1960,
            Sex::F,
            vec![
                dx("2017-12-01", "K74.6"),
                dx("2016-12-01", "K76.0"),
                dx("2018-02-01", "B18"),
            ],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::Control));
    }

    #[test]
    fn proxy_requires_nafl_proximity() {
        let config = test_config();
        let cs = test_cs();
        // precursor 30 months before the fibrosis claim: outside the window
        let p = patient(
            1960,
            Sex::F,
            vec![dx("2017-12-01", "K74.6"), dx("2015-06-01", "K76.0")],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::Control));
    }

    #[test]
    fn dx_takes_priority_over_proxy() {
        let config = test_config();
        let cs = test_cs();
        let p = patient(
            1960,
            Sex::F,
            vec![
                dx("2018-01-01", "K75.81"),
                dx("2017-12-01", "K74.6"),
                dx("2016-12-01", "K76.0"),
            ],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::NashDx));
    }

    #[test]
    fn prior_evidence_excludes_row() {
        let config = test_config();
        let cs = test_cs();
        // diagnosis during the lookback, none in the outcome window
        let p = patient(1960, Sex::F, vec![dx("2016-08-01", "K75.81")]);
        assert_eq!(label(&p, &cs, &config), LabelOutcome::NotLabelable);
        // qualifying proxy cluster before the index date
        let p = patient(
            1960,
            Sex::F,
            vec![dx("2017-05-01", "K74.0"), dx("2017-03-01", "K76.0")],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::NotLabelable);
    }

    #[test]
    fn already_diagnosed_patients_do_not_relabel() {
        let config = test_config();
        let cs = test_cs();
        // diagnosis during lookback and follow-up claims in the outcome
        // window: the labeling window came earlier, so the row is excluded
        let p = patient(
            1960,
            Sex::F,
            vec![dx("2017-05-01", "K75.81"), dx("2018-01-01", "K75.81")],
        );
        assert_eq!(label(&p, &cs, &config), LabelOutcome::NotLabelable);
    }

    #[test]
    fn clean_patient_is_control() {
        let config = test_config();
        let cs = test_cs();
        let p = patient(1960, Sex::F, vec![dx("2016-05-01", "E11")]);
        assert_eq!(label(&p, &cs, &config), LabelOutcome::Labeled(Label::Control));
    }

    fn build_population(n_controls: usize, n_positives: usize) -> Population {
        let mut records = Vec::new();
        for i in 0..n_controls {
            let mut events = span_events();
            events.push(dx("2016-05-01", "E11"));
            records.push(PatientRecord::new(
                format!("C{i:04}"),
                1960,
                Sex::F,
                events,
            ));
        }
        for i in 0..n_positives {
            let mut events = span_events();
            events.push(dx("2016-05-01", "E11"));
            events.push(dx("2018-01-01", "K75.81"));
            records.push(PatientRecord::new(
                format!("N{i:04}"),
                1955,
                Sex::M,
                events,
            ));
        }
        Population::new(records)
    }

    #[test]
    fn downsampling_ratio_and_bookkeeping() {
        let config = test_config();
        let cs = vec![test_cs()];
        let pop = build_population(200, 10);
        let build = build_cohort(
            &pop,
            &cs,
            &config,
            CohortMode::NaflInclusive,
            5,
            d(STUDY_START),
            42,
        )
        .unwrap();
        let stats = &build.stats[0];
        assert_eq!(stats.positives(), 10);
        assert_eq!(stats.controls_before_downsampling, 200);
        assert_eq!(stats.controls_retained, 50);
        assert!(stats.ratio_satisfied);
        assert_eq!(build.rows.len(), 60);
        assert!((stats.downsampling_factor() - 4.0).abs() < 1e-12);
        assert!((stats.incidence() - 10.0 / 210.0).abs() < 1e-12);

        // determinism
        let again = build_cohort(
            &pop,
            &cs,
            &config,
            CohortMode::NaflInclusive,
            5,
            d(STUDY_START),
            42,
        )
        .unwrap();
        assert_eq!(build, again);
    }

    #[test]
    fn small_pool_keeps_all_controls() {
        let config = test_config();
        let cs = vec![test_cs()];
        let pop = build_population(3, 10);
        let build = build_cohort(
            &pop,
            &cs,
            &config,
            CohortMode::NaflInclusive,
            5,
            d(STUDY_START),
            42,
        )
        .unwrap();
        let stats = &build.stats[0];
        assert_eq!(stats.controls_retained, 3);
        assert!(!stats.ratio_satisfied);
    }

    #[test]
    fn non_nafl_mode_drops_rows_with_nafl_in_lookback() {
        let config = test_config();
        let cs = vec![test_cs()];
        let mut records = Vec::new();
        // positive with a precursor claim in lookback
        let mut events = span_events();
        events.push(dx("2016-05-01", "K76.0"));
        events.push(dx("2018-01-01", "K75.81"));
        records.push(PatientRecord::new("N0001".into(), 1955, Sex::M, events));
        // positive without
        let mut events = span_events();
        events.push(dx("2016-05-01", "E11"));
        events.push(dx("2018-01-01", "K75.81"));
        records.push(PatientRecord::new("N0002".into(), 1955, Sex::M, events));
        let pop = Population::new(records);

        let build = build_cohort(
            &pop,
            &cs,
            &config,
            CohortMode::NonNafl,
            5,
            d(STUDY_START),
            42,
        )
        .unwrap();
        assert_eq!(build.rows.len(), 1);
        assert_eq!(build.rows[0].patient_id, "N0002");
        assert!(build.rows.iter().all(|r| !r.nafl_in_lookback));
    }

    #[test]
    fn patients_contribute_multiple_cross_sections() {
        let config = test_config();
        let cs1 = test_cs();
        let cs2 = CrossSection {
            id: 2,
            index_date: d("2018-01-01"),
            lookback_start: d("2016-01-01"),
            outcome_end: d("2018-07-01"),
        };
        let mut events = span_events();
        events.push(dx("2016-05-01", "E11"));
        events.push(dx("2018-06-15", "I10"));
        let control = PatientRecord::new("C1".into(), 1960, Sex::F, events);
        let mut events = span_events();
        events.push(dx("2016-05-01", "E11"));
        // one diagnosis claim inside both outcome windows
        events.push(dx("2018-02-01", "K75.81"));
        let positive = PatientRecord::new("N1".into(), 1955, Sex::M, events);
        let pop = Population::new(vec![control, positive]);
        let build = build_cohort(
            &pop,
            &[cs1, cs2],
            &config,
            CohortMode::NaflInclusive,
            5,
            d(STUDY_START),
            42,
        )
        .unwrap();
        // both patients contribute a row to both cross-sections
        assert_eq!(build.rows.len(), 4);
        for (patient_id, cs_id, label) in [
            ("C1", 1, Label::Control),
            ("N1", 1, Label::NashDx),
            ("C1", 2, Label::Control),
            ("N1", 2, Label::NashDx),
        ] {
            assert!(build
                .rows
                .iter()
                .any(|r| r.patient_id == patient_id && r.cs_id == cs_id && r.label == label));
        }
    }

    #[test]
    fn cohort_csv_round_trip() {
        let rows = vec![
            LabeledCrossSection {
                patient_id: "P1".into(),
                cs_id: 1,
                label: Label::NashDx,
                nafl_in_lookback: true,
            },
            LabeledCrossSection {
                patient_id: "P2".into(),
                cs_id: 3,
                label: Label::Control,
                nafl_in_lookback: false,
            },
        ];
        let mut buf = Vec::new();
        write_cohort_csv(&rows, &mut buf).unwrap();
        let parsed = parse_cohort_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(rows, parsed);
    }
}
