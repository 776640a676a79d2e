//! Day arithmetic. Dates are whole days since 1970-01-01; calendar dates only
//! appear when reading or writing files.

use std::fmt;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

/// Days since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Day(pub i32);

const EPOCH_CE_DAYS: i32 = 719_163;

impl Day {
    pub const MIN: Day = Day(i32::MIN / 2);
    pub const MAX: Day = Day(i32::MAX / 2);

    pub fn from_date(date: NaiveDate) -> Day {
        Day(date.num_days_from_ce() - EPOCH_CE_DAYS)
    }

    pub fn to_date(self) -> NaiveDate {
        NaiveDate::from_num_days_from_ce_opt(self.0 + EPOCH_CE_DAYS)
            .expect("day within chrono's supported range")
    }

    /// Parses `YYYY-MM-DD`.
    pub fn parse(text: &str) -> Option<Day> {
        NaiveDate::parse_from_str(text.trim(), "%Y-%m-%d")
            .ok()
            .map(Day::from_date)
    }

    pub fn offset(self, days: i64) -> Day {
        let shifted = (self.0 as i64 + days).clamp(Day::MIN.0 as i64, Day::MAX.0 as i64);
        Day(shifted as i32)
    }

    /// Whole years elapsed from `birth` to `self`, floored.
    pub fn years_since(self, birth: Day) -> i32 {
        let (b, d) = (birth.to_date(), self.to_date());
        let mut years = d.year() - b.year();
        if (d.month(), d.day()) < (b.month(), b.day()) {
            years -= 1;
        }
        years
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_date().format("%Y-%m-%d"))
    }
}

/// Closed interval `[start, end]` of days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DayInterval {
    pub start: Day,
    pub end: Day,
}

impl DayInterval {
    pub fn new(start: Day, end: Day) -> Self {
        Self { start, end }
    }

    pub fn unbounded() -> Self {
        Self { start: Day::MIN, end: Day::MAX }
    }

    pub fn contains(&self, day: Day) -> bool {
        self.start <= day && day <= self.end
    }
}
