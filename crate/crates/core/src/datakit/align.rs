use crate::error::{Error, Result};

/// Maps a third-person timestamp onto the first-person timeline by stretching
/// the first-person stream to the third-person duration.
pub fn align_timestamp(t_third: f64, dur_third: f64, dur_first: f64) -> Result<f64> {
    if !(dur_third.is_finite() && dur_third > 0.0) || !(dur_first.is_finite() && dur_first > 0.0) {
        return Err(Error::Domain(format!(
            "durations must be positive (third={dur_third}, first={dur_first})"
        )));
    }
    if !t_third.is_finite() {
        return Err(Error::Domain(format!("timestamp {t_third} is not finite")));
    }
    Ok((t_third * dur_first / dur_third).clamp(0.0, dur_first))
}

/// Number of frames a stream yields when sampled once per second starting at 0.
pub fn frames_at_one_fps(duration: f64) -> usize {
    (duration.ceil() as usize).max(1)
}
