//! Day-of-year helpers. Day 1 is January 1st.

use crate::error::{Error, Result};

const CUMULATIVE_DAYS: [u16; 12] = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334];

pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

fn days_in_month(year: i32, month: u8) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap_year(year) => 29,
        _ => 28,
    }
}

/// Day of year of a calendar date, using the calendar of `year`.
pub fn day_of_year(year: i32, month: u8, day: u8) -> Result<u16> {
    if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
        return Err(Error::InvalidArgument(alloc::format!(
            "invalid calendar date {year:04}-{month:02}-{day:02}"
        )));
    }
    let leap = u16::from(month > 2 && is_leap_year(year));
    Ok(CUMULATIVE_DAYS[usize::from(month - 1)] + leap + u16::from(day))
}

/// Inverse of [`day_of_year`].
pub fn month_day(year: i32, doy: u16) -> Result<(u8, u8)> {
    let len = if is_leap_year(year) { 366 } else { 365 };
    if doy == 0 || doy > len {
        return Err(Error::DateOutOfRange { doy: i64::from(doy) });
    }
    let mut rest = doy;
    for month in 1..=12u8 {
        let n = u16::from(days_in_month(year, month));
        if rest <= n {
            return Ok((month, rest as u8));
        }
        rest -= n;
    }
    unreachable!("doy bounded by year length")
}

/// Parses a `DD-MM` string into a day of year. The year is dropped, so a
/// non-leap calendar is used (29-02 is rejected).
pub fn parse_day_month(text: &str) -> Result<u16> {
    let bad = || Error::InvalidArgument(alloc::format!("expected DD-MM, got {text:?}"));
    let (d, m) = text.trim().split_once('-').ok_or_else(bad)?;
    let day: u8 = d.parse().map_err(|_| bad())?;
    let month: u8 = m.parse().map_err(|_| bad())?;
    day_of_year(2023, month, day)
}

/// First and last day of the May–October acquisition window. Leap years
/// shift the window by one day, so the union over both calendars is used
/// when the year is unknown.
pub const SEASON_FIRST_DOY: u16 = 121;
pub const SEASON_LAST_DOY: u16 = 305;

pub fn in_season(year: i32, doy: u16) -> bool {
    let leap = u16::from(is_leap_year(year));
    (SEASON_FIRST_DOY + leap..=SEASON_LAST_DOY - 1 + leap).contains(&doy)
}

/// Day of year of July 1st in a non-leap calendar.
pub const JULY_FIRST_DOY: u16 = 182;
