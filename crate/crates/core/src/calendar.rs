//! Clamped calendar-month arithmetic.
//!
//! Month addition clamps the day-of-month to the target month's last day
//! (Jan 31 + 1 month = Feb 28/29). The month difference between two dates is
//! the number of whole clamped months; partial months truncate. Every window
//! boundary in the pipeline is derived through these two functions so that
//! results are deterministic across platforms.

use chrono::{Datelike, Months, NaiveDate};

/// Add (or subtract, for negative `n`) calendar months with day clamping.
pub fn add_months(date: NaiveDate, n: i32) -> NaiveDate {
    if n >= 0 {
        date.checked_add_months(Months::new(n as u32))
            .expect("date out of range")
    } else {
        date.checked_sub_months(Months::new((-n) as u32))
            .expect("date out of range")
    }
}

/// Number of whole clamped months from `from` to `to`.
///
/// Returns the largest `n >= 0` such that `add_months(from, n) <= to`,
/// or 0 when `to < from`.
pub fn months_between(from: NaiveDate, to: NaiveDate) -> u32 {
    if to < from {
        return 0;
    }
    let raw = (to.year() - from.year()) * 12 + to.month() as i32 - from.month() as i32;
    let mut n = raw.max(0) as u32;
    while add_months(from, n as i32) > to {
        n -= 1;
    }
    while add_months(from, n as i32 + 1) <= to {
        n += 1;
    }
    n
}
