//! Rolling cross-section engine.
//!
//! A cross-section pairs a fixed-length lookback window with a following
//! outcome window, anchored at an index date. Cross-sections slide over the
//! study period in fixed month increments; later ones are reserved for
//! holdout and scoring so that no training outcome window overlaps them.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::add_months;
use crate::claims::{ClaimEvent, PatientRecord};
use crate::error::{Error, Result};

/// Window geometry over a study period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub study_start: NaiveDate,
    pub study_end: NaiveDate,
    #[serde(default = "default_lookback")]
    pub lookback_months: u32,
    #[serde(default = "default_outcome")]
    pub outcome_months: u32,
    #[serde(default = "default_shift")]
    pub shift_months: u32,
}

fn default_lookback() -> u32 {
    24
}
fn default_outcome() -> u32 {
    6
}
fn default_shift() -> u32 {
    3
}

impl WindowSpec {
    pub fn new(study_start: NaiveDate, study_end: NaiveDate) -> Self {
        WindowSpec {
            study_start,
            study_end,
            lookback_months: default_lookback(),
            outcome_months: default_outcome(),
            shift_months: default_shift(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback_months == 0 || self.outcome_months == 0 || self.shift_months == 0 {
            return Err(Error::Config(
                "lookback, outcome and shift month counts must be positive".into(),
            ));
        }
        if self.study_end <= self.study_start {
            return Err(Error::Config("study_end must be after study_start".into()));
        }
        Ok(())
    }
}

/// One (lookback, outcome) window pair anchored at an index date.
///
/// The lookback is the closed interval `[lookback_start, index_date]`; the
/// outcome is the half-open-below interval `(index_date, outcome_end]`. The
/// index date is the final day of the lookback and excluded from the outcome,
/// so the two windows are disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSection {
    pub id: u32,
    pub index_date: NaiveDate,
    pub lookback_start: NaiveDate,
    pub outcome_end: NaiveDate,
}

impl CrossSection {
    pub fn contains_in_lookback(&self, date: NaiveDate) -> bool {
        date >= self.lookback_start && date <= self.index_date
    }

    pub fn contains_in_outcome(&self, date: NaiveDate) -> bool {
        date > self.index_date && date <= self.outcome_end
    }
}

/// Enumerate cross-sections over the study period.
///
/// Cross-section `k` (1-based) has index date
/// `study_start + lookback_months + (k-1) * shift_months`; it is included
/// while its nominal outcome end is at most `study_end` plus one day of
/// calendar-clamping tolerance. A study period too short for even one
/// cross-section yields an empty list.
pub fn enumerate_cross_sections(spec: &WindowSpec) -> Vec<CrossSection> {
    let mut out = Vec::new();
    let fit_limit = spec
        .study_end
        .succ_opt()
        .expect("study_end out of range");
    let mut k = 1u32;
    loop {
        let offset = spec.lookback_months + (k - 1) * spec.shift_months;
        let index_date = add_months(spec.study_start, offset as i32);
        let outcome_end = add_months(index_date, spec.outcome_months as i32);
        if outcome_end > fit_limit {
            break;
        }
        out.push(CrossSection {
            id: k,
            index_date,
            lookback_start: add_months(index_date, -(spec.lookback_months as i32)),
            outcome_end,
        });
        k += 1;
    }
    out
}

/// Partition a patient's events into (lookback, outcome) slices for one
/// cross-section. Events outside both windows are dropped; no event lands in
/// both.
pub fn slice<'a>(
    patient: &'a PatientRecord,
    cs: &CrossSection,
) -> (Vec<&'a ClaimEvent>, Vec<&'a ClaimEvent>) {
    let mut lookback = Vec::new();
    let mut outcome = Vec::new();
    for event in patient.events() {
        if cs.contains_in_lookback(event.date) {
            lookback.push(event);
        } else if cs.contains_in_outcome(event.date) {
            outcome.push(event);
        }
    }
    (lookback, outcome)
}

/// Train/holdout/scoring assignment over enumerated cross-sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<u32>,
    pub holdout_id: u32,
    pub scoring_id: u32,
}

impl SplitAssignment {
    pub fn is_train(&self, cs_id: u32) -> bool {
        self.train_ids.contains(&cs_id)
    }
}

/// Default split rule.
///
/// With at least 10 cross-sections: train on 1..=6, hold out 8, score on 10.
/// For smaller counts the rule scales to train 1..=n-4, holdout n-2, scoring
/// n, preserving the two-shift offset between the last training outcome
/// window and the holdout index. Below 5 no leakage-free split exists.
pub fn default_splits(n_cross_sections: u32) -> Result<SplitAssignment> {
    if n_cross_sections < 5 {
        return Err(Error::Config(format!(
            "need at least 5 cross-sections for a leakage-free split, got {n_cross_sections}"
        )));
    }
    let (train_max, holdout_id, scoring_id) = if n_cross_sections >= 10 {
        (6, 8, 10)
    } else {
        (
            n_cross_sections - 4,
            n_cross_sections - 2,
            n_cross_sections,
        )
    };
    Ok(SplitAssignment {
        train_ids: (1..=train_max).collect(),
        holdout_id,
        scoring_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{EventKind, Sex, Source};

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn spec(start: &str, end: &str) -> WindowSpec {
        WindowSpec::new(d(start), d(end))
    }

    #[test]
    fn enumerates_ten_cross_sections_over_default_study() {
        let cs = enumerate_cross_sections(&spec("2015-10-01", "2020-06-30"));
        assert_eq!(cs.len(), 10);
        assert_eq!(cs[0].id, 1);
        assert_eq!(cs[0].index_date, d("2017-10-01"));
        assert_eq!(cs[0].lookback_start, d("2015-10-01"));
        assert_eq!(cs[9].id, 10);
        assert_eq!(cs[9].index_date, d("2020-01-01"));
        // nominal outcome end one day past study end, admitted by the clamp tolerance
        assert_eq!(cs[9].outcome_end, d("2020-07-01"));
    }

    #[test]
    fn thirty_month_study_fits_exactly_one() {
        let cs = enumerate_cross_sections(&spec("2015-01-01", "2017-07-01"));
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].index_date, d("2017-01-01"));
    }

    #[test]
    fn twenty_nine_month_study_fits_none() {
        let cs = enumerate_cross_sections(&spec("2015-01-01", "2017-06-01"));
        assert!(cs.is_empty());
    }

    #[test]
    fn consecutive_index_dates_differ_by_shift() {
        let spec = spec("2015-10-01", "2020-06-30");
        let cs = enumerate_cross_sections(&spec);
        for pair in cs.windows(2) {
            assert_eq!(
                add_months(pair[0].index_date, spec.shift_months as i32),
                pair[1].index_date
            );
        }
    }

    fn patient_with_dates(dates: &[&str]) -> PatientRecord {
        let events = dates
            .iter()
            .map(|s| ClaimEvent {
                date: d(s),
                source: Source::Dx,
                kind: EventKind::Diagnosis,
                code: "X".into(),
            })
            .collect();
        PatientRecord::new("P".into(), 1970, Sex::F, events)
    }

    #[test]
    fn slice_boundaries() {
        let cs = CrossSection {
            id: 1,
            index_date: d("2017-10-01"),
            lookback_start: d("2015-10-01"),
            outcome_end: d("2018-04-01"),
        };
        // exactly on the index date -> lookback only
        let p = patient_with_dates(&["2017-10-01"]);
        let (lb, oc) = slice(&p, &cs);
        assert_eq!(lb.len(), 1);
        assert!(oc.is_empty());
        // one day later -> outcome only
        let p = patient_with_dates(&["2017-10-02"]);
        let (lb, oc) = slice(&p, &cs);
        assert!(lb.is_empty());
        assert_eq!(oc.len(), 1);
        // outside both
        let p = patient_with_dates(&["2015-09-30", "2018-04-02"]);
        let (lb, oc) = slice(&p, &cs);
        assert!(lb.is_empty() && oc.is_empty());
    }

    #[test]
    fn default_split_matches_published_regime() {
        let s = default_splits(10).unwrap();
        assert_eq!(s.train_ids, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(s.holdout_id, 8);
        assert_eq!(s.scoring_id, 10);
        // fixed regime even when more cross-sections exist
        assert_eq!(default_splits(12).unwrap(), s);
    }

    #[test]
    fn scaled_split_preserves_offset() {
        let s = default_splits(7).unwrap();
        assert_eq!(s.train_ids, vec![1, 2, 3]);
        assert_eq!(s.holdout_id, 5);
        assert_eq!(s.scoring_id, 7);
    }

    #[test]
    fn too_few_cross_sections_is_an_error() {
        assert!(default_splits(4).is_err());
        assert!(default_splits(5).is_ok());
    }
}
