//! Millisecond UTC timestamps and the durations used throughout the engine.

/// Milliseconds since the Unix epoch, UTC.
pub type Millis = i64;

pub const SECOND_MS: Millis = 1_000;
pub const MINUTE_MS: Millis = 60 * SECOND_MS;
pub const HOUR_MS: Millis = 60 * MINUTE_MS;
pub const DAY_MS: Millis = 24 * HOUR_MS;
pub const WEEK_MS: Millis = 7 * DAY_MS;

/// Default telemetry sampling period.
pub const DEFAULT_SAMPLING_MS: Millis = 5 * MINUTE_MS;

/// Number of whole sampling periods in `duration`.
pub fn samples_in(duration: Millis, period: Millis) -> usize {
    if period <= 0 || duration <= 0 {
        return 0;
    }
    (duration / period) as usize
}
