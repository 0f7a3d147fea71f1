//! Observation CSV: `time,station_id,row,col,channel,value[,sigma]`.
//!
//! Values are stored in physical units and converted to model space
//! (transformed, then normalized) at load. The optional sigma column is in
//! transformed units and is scaled by the channel std; when the column is
//! absent, the default noise std applies directly in normalized units.

use std::io::{Read, Write};

use crate::error::{Result, SdaError};
use crate::field::{ChannelSpec, NormStats};
use crate::obs::{Observation, ObservationSet};

/// Observations grouped by their time key, in order of first appearance.
#[derive(Debug, Clone)]
pub struct TimedObservations {
    pub time: String,
    pub set: ObservationSet,
}

/// Parse an observation CSV against the model's channel layout. Unknown
/// channel names, out-of-domain values, and malformed rows are rejected with
/// their 1-based line number.
pub fn read_observation_csv<R: Read>(
    reader: R,
    channels: &[ChannelSpec],
    norm: &NormStats,
    default_sigma_normalized: f64,
) -> Result<Vec<TimedObservations>> {
    if !(default_sigma_normalized > 0.0) {
        return Err(SdaError::config("default sigma must be > 0".to_string()));
    }
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader
        .headers()
        .map_err(|e| SdaError::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["time", "station_id", "row", "col", "channel", "value"];
    let mut cols = Vec::new();
    for name in required {
        cols.push(col(name).ok_or_else(|| SdaError::Parse {
            line: 1,
            msg: format!("missing required column '{name}'"),
        })?);
    }
    let sigma_col = col("sigma");

    let mut groups: Vec<(String, Vec<Observation>)> = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let line = i + 2; // header is line 1
        let record = record.map_err(|e| SdaError::Parse {
            line,
            msg: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            record.get(c).ok_or(SdaError::Parse {
                line,
                msg: format!("missing column {c}"),
            })
        };
        let time = field(cols[0])?.to_string();
        let row: usize = field(cols[2])?.parse().map_err(|e| SdaError::Parse {
            line,
            msg: format!("bad row index: {e}"),
        })?;
        let col_idx: usize = field(cols[3])?.parse().map_err(|e| SdaError::Parse {
            line,
            msg: format!("bad col index: {e}"),
        })?;
        let channel_name = field(cols[4])?;
        let channel = channels
            .iter()
            .position(|c| c.name == channel_name)
            .ok_or_else(|| SdaError::Parse {
                line,
                msg: format!("unknown channel '{channel_name}'"),
            })?;
        let value_physical: f64 = field(cols[5])?.parse().map_err(|e| SdaError::Parse {
            line,
            msg: format!("bad value: {e}"),
        })?;
        let transformed = channels[channel]
            .transform_value(value_physical)
            .map_err(|e| SdaError::Parse {
                line,
                msg: e.to_string(),
            })?;
        let value = (transformed - norm.mean[channel]) / norm.std[channel];
        let sigma = match sigma_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("");
                if raw.is_empty() {
                    default_sigma_normalized
                } else {
                    let s: f64 = raw.parse().map_err(|e| SdaError::Parse {
                        line,
                        msg: format!("bad sigma: {e}"),
                    })?;
                    if !(s > 0.0) {
                        return Err(SdaError::Parse {
                            line,
                            msg: format!("sigma must be > 0, got {s}"),
                        });
                    }
                    s / norm.std[channel]
                }
            }
            None => default_sigma_normalized,
        };
        let obs = Observation {
            channel,
            row,
            col: col_idx,
            value,
            sigma,
        };
        match groups.iter_mut().find(|(t, _)| t == &time) {
            Some((_, v)) => v.push(obs),
            None => groups.push((time, vec![obs])),
        }
    }
    groups
        .into_iter()
        .map(|(time, v)| {
            Ok(TimedObservations {
                time,
                set: ObservationSet::new(v)?,
            })
        })
        .collect()
}

/// Write observations in model space back to CSV in physical units.
/// `station_ids[i]` labels observation i (pass e.g. synthetic ids).
pub fn write_observation_csv<W: Write>(
    writer: W,
    groups: &[TimedObservations],
    station_ids: &[Vec<String>],
    channels: &[ChannelSpec],
    norm: &NormStats,
) -> Result<()> {
    if groups.len() != station_ids.len() {
        return Err(SdaError::shape(format!(
            "{} groups but {} id lists",
            groups.len(),
            station_ids.len()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "station_id", "row", "col", "channel", "value", "sigma"])
        .map_err(io_err)?;
    for (group, ids) in groups.iter().zip(station_ids) {
        if ids.len() != group.set.len() {
            return Err(SdaError::shape(format!(
                "time '{}': {} ids for {} observations",
                group.time,
                ids.len(),
                group.set.len()
            )));
        }
        for (obs, id) in group.set.observations().iter().zip(ids) {
            let spec = &channels[obs.channel];
            let transformed = obs.value * norm.std[obs.channel] + norm.mean[obs.channel];
            let physical = spec.inverse_transform_value(transformed);
            let sigma_transformed = obs.sigma * norm.std[obs.channel];
            w.write_record([
                group.time.as_str(),
                id.as_str(),
                &obs.row.to_string(),
                &obs.col.to_string(),
                spec.name.as_str(),
                &format!("{physical}"),
                &format!("{sigma_transformed}"),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: csv::Error) -> SdaError {
    SdaError::Format(format!("csv write error: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn channels() -> Vec<ChannelSpec> {
        vec![
            ChannelSpec::identity("u10", "m/s"),
            ChannelSpec::precip("tp", "mm/h"),
        ]
    }

    fn norm() -> NormStats {
        NormStats::new(vec![1.0, -9.0], vec![2.0, 1.5]).unwrap()
    }

    #[test]
    fn parse_basic_rows() {
        let csv_text = "time,station_id,row,col,channel,value,sigma\n\
                        2017-05-28T03:00,KOKC,10,12,u10,3.0,0.2\n\
                        2017-05-28T03:00,KOKC,10,12,tp,0.0,\n";
        let groups = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap();
        assert_eq!(groups.len(), 1);
        let set = &groups[0].set;
        assert_eq!(set.len(), 2);
        // u10: (3.0 - 1.0)/2.0 = 1.0, sigma 0.2/2.0 = 0.1
        assert_relative_eq!(set.observations()[0].value, 1.0);
        assert_relative_eq!(set.observations()[0].sigma, 0.1);
        // tp: (ln(1e-4) - (-9))/1.5, empty sigma -> default 0.1
        let expect = ((1e-4f64).ln() + 9.0) / 1.5;
        assert_relative_eq!(set.observations()[1].value, expect, max_relative = 1e-12);
        assert_relative_eq!(set.observations()[1].sigma, 0.1);
    }

    #[test]
    fn missing_sigma_column_defaults() {
        let csv_text = "time,station_id,row,col,channel,value\n\
                        t0,A,0,0,u10,1.0\n";
        let groups = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap();
        assert_relative_eq!(groups[0].set.observations()[0].sigma, 0.1);
    }

    #[test]
    fn negative_precip_rejected_with_line() {
        let csv_text = "time,station_id,row,col,channel,value\n\
                        t0,A,0,0,u10,1.0\n\
                        t0,A,0,1,tp,-0.5\n";
        let err = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap_err();
        match err {
            SdaError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_channel_rejected() {
        let csv_text = "time,station_id,row,col,channel,value\n\
                        t0,A,0,0,t2m,1.0\n";
        let err = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap_err();
        assert!(matches!(err, SdaError::Parse { line: 2, .. }));
    }

    #[test]
    fn groups_by_time_in_first_appearance_order() {
        let csv_text = "time,station_id,row,col,channel,value\n\
                        t1,A,0,0,u10,1.0\n\
                        t0,B,0,1,u10,2.0\n\
                        t1,C,0,2,u10,3.0\n";
        let groups = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].time, "t1");
        assert_eq!(groups[0].set.len(), 2);
        assert_eq!(groups[1].time, "t0");
    }

    #[test]
    fn write_read_round_trip() {
        let csv_text = "time,station_id,row,col,channel,value,sigma\n\
                        t0,A,1,2,u10,3.5,0.4\n\
                        t0,B,4,5,tp,1.25,0.3\n";
        let groups = read_observation_csv(csv_text.as_bytes(), &channels(), &norm(), 0.1).unwrap();
        let mut out = Vec::new();
        write_observation_csv(
            &mut out,
            &groups,
            &[vec!["A".to_string(), "B".to_string()]],
            &channels(),
            &norm(),
        )
        .unwrap();
        let back = read_observation_csv(out.as_slice(), &channels(), &norm(), 0.1).unwrap();
        for (a, b) in groups[0]
            .set
            .observations()
            .iter()
            .zip(back[0].set.observations())
        {
            assert_relative_eq!(a.value, b.value, max_relative = 1e-12);
            assert_relative_eq!(a.sigma, b.sigma, max_relative = 1e-12);
            assert_eq!((a.channel, a.row, a.col), (b.channel, b.row, b.col));
        }
    }
}
