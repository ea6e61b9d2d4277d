//! Conversions between millisecond timestamps and their text forms.

use chrono::{DateTime, Datelike, SecondsFormat, TimeZone, Utc};
use fleetopt_core::Millis;

pub fn parse_rfc3339(s: &str) -> Result<Millis, chrono::ParseError> {
    Ok(DateTime::parse_from_rfc3339(s.trim())?.with_timezone(&Utc).timestamp_millis())
}

pub fn format_rfc3339(at: Millis) -> String {
    match Utc.timestamp_millis_opt(at).single() {
        Some(t) => t.to_rfc3339_opts(SecondsFormat::Secs, true),
        None => at.to_string(),
    }
}

/// ISO week of `at`, e.g. `2024-W31`.
pub fn iso_week_id(at: Millis) -> String {
    let t = Utc.timestamp_millis_opt(at).single().unwrap_or_default();
    let w = t.iso_week();
    format!("{}-W{:02}", w.year(), w.week())
}
