//! Station record preprocessing: wind decomposition and interpolation of
//! irregular report times to full hours.

use chrono::{DateTime, Duration, DurationRound, Utc};

use crate::error::{Result, SdaError};
use crate::field::ChannelSpec;

/// One raw station report. Missing measurements are explicit.
#[derive(Debug, Clone, PartialEq)]
pub struct StationRecord {
    pub station_id: String,
    pub timestamp: DateTime<Utc>,
    /// Wind speed in m/s, >= 0.
    pub wind_speed: Option<f64>,
    /// Meteorological direction in degrees [0, 360): the bearing the wind
    /// blows FROM.
    pub wind_dir_deg: Option<f64>,
    /// Precipitation accumulation in mm, >= 0.
    pub precip_mm: Option<f64>,
    /// Nearest grid indices.
    pub row: usize,
    pub col: usize,
}

/// Hourly interpolated values for one station, in model-friendly components:
/// zonal/meridional wind and transformed precipitation.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyRecord {
    pub station_id: String,
    pub timestamp: DateTime<Utc>,
    pub u: Option<f64>,
    pub v: Option<f64>,
    /// Precipitation in transformed (log) space.
    pub precip_transformed: Option<f64>,
    pub row: usize,
    pub col: usize,
}

/// Meteorological convention (direction = bearing the wind blows FROM):
/// u = -speed*sin(theta), v = -speed*cos(theta). Preserves speed exactly.
pub fn decompose_wind(speed: f64, direction_deg: f64) -> Result<(f64, f64)> {
    if !(speed >= 0.0) {
        return Err(SdaError::domain(format!("wind speed must be >= 0, got {speed}")));
    }
    if !(0.0..360.0).contains(&direction_deg) {
        return Err(SdaError::Parse {
            line: 0,
            msg: format!("wind direction must be in [0, 360), got {direction_deg}"),
        });
    }
    let theta = direction_deg.to_radians();
    Ok((-speed * theta.sin(), -speed * theta.cos()))
}

#[derive(Clone, Copy)]
struct Sample {
    t: DateTime<Utc>,
    u: Option<f64>,
    v: Option<f64>,
    p: Option<f64>,
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

fn interp_field(
    prev: &Sample,
    next: &Sample,
    pick: fn(&Sample) -> Option<f64>,
    w: f64,
) -> Option<f64> {
    match (pick(prev), pick(next)) {
        (Some(a), Some(b)) => Some(lerp(a, b, w)),
        _ => None,
    }
}

/// Linearly interpolate each station's series to every top-of-hour bracketed
/// by two reports no further than `max_gap` apart. Winds are decomposed
/// before interpolation; precipitation is interpolated in transformed (log)
/// space per `precip_spec`. Duplicate timestamps keep the last report.
pub fn interpolate_to_hours(
    records: &[StationRecord],
    max_gap: Duration,
    precip_spec: &ChannelSpec,
) -> Result<Vec<HourlyRecord>> {
    if max_gap <= Duration::zero() {
        return Err(SdaError::config("max gap must be positive".to_string()));
    }
    // Group per station preserving input order within a station.
    let mut stations: Vec<(String, (usize, usize), Vec<Sample>)> = Vec::new();
    for rec in records {
        if let Some(s) = rec.wind_speed {
            if s < 0.0 {
                return Err(SdaError::domain("negative wind speed".to_string()));
            }
        }
        let (u, v) = match (rec.wind_speed, rec.wind_dir_deg) {
            (Some(s), Some(d)) => {
                let (u, v) = decompose_wind(s, d)?;
                (Some(u), Some(v))
            }
            _ => (None, None),
        };
        let p = match rec.precip_mm {
            Some(mm) => Some(precip_spec.transform_value(mm)?),
            None => None,
        };
        let sample = Sample {
            t: rec.timestamp,
            u,
            v,
            p,
        };
        match stations.iter_mut().find(|(id, _, _)| id == &rec.station_id) {
            Some((_, _, v)) => v.push(sample),
            None => stations.push((rec.station_id.clone(), (rec.row, rec.col), vec![sample])),
        }
    }

    let mut out = Vec::new();
    for (id, (row, col), mut samples) in stations {
        samples.sort_by_key(|s| s.t);
        // Keep the last report of any duplicated timestamp.
        let mut dedup: Vec<Sample> = Vec::with_capacity(samples.len());
        for s in samples {
            match dedup.last_mut() {
                Some(last) if last.t == s.t => {
                    log::warn!("station {id}: duplicate report at {}, keeping last", s.t);
                    *last = s;
                }
                _ => dedup.push(s),
            }
        }
        if dedup.is_empty() {
            continue;
        }
        let t0 = dedup.first().unwrap().t;
        let trunc = t0
            .duration_trunc(Duration::hours(1))
            .map_err(|e| SdaError::numerical(format!("time rounding failed: {e}")))?;
        let first_hour = if trunc == t0 {
            t0
        } else {
            trunc + Duration::hours(1)
        };
        let last = dedup.last().unwrap().t;
        let mut hour = first_hour;
        let mut cursor = 0usize;
        while hour <= last {
            while cursor + 1 < dedup.len() && dedup[cursor + 1].t <= hour {
                cursor += 1;
            }
            // dedup[cursor].t <= hour (after the first advance) or the series
            // starts past this hour.
            if dedup[cursor].t == hour {
                let s = &dedup[cursor];
                out.push(HourlyRecord {
                    station_id: id.clone(),
                    timestamp: hour,
                    u: s.u,
                    v: s.v,
                    precip_transformed: s.p,
                    row,
                    col,
                });
            } else if dedup[cursor].t < hour && cursor + 1 < dedup.len() {
                let (prev, next) = (&dedup[cursor], &dedup[cursor + 1]);
                if next.t - prev.t <= max_gap {
                    let w = (hour - prev.t).num_seconds() as f64
                        / (next.t - prev.t).num_seconds() as f64;
                    out.push(HourlyRecord {
                        station_id: id.clone(),
                        timestamp: hour,
                        u: interp_field(prev, next, |s| s.u, w),
                        v: interp_field(prev, next, |s| s.v, w),
                        precip_transformed: interp_field(prev, next, |s| s.p, w),
                        row,
                        col,
                    });
                } else {
                    out.push(HourlyRecord {
                        station_id: id.clone(),
                        timestamp: hour,
                        u: None,
                        v: None,
                        precip_transformed: None,
                        row,
                        col,
                    });
                }
            }
            hour += Duration::hours(1);
        }
    }
    Ok(out)
}
