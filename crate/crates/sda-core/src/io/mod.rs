//! Data ingestion and synthesis: grid/checkpoint/observation file formats,
//! station preprocessing, and the synthetic Gaussian-random-field dataset
//! generator that stands in for analysis data at desk scale.

mod checkpoint;
mod grid_file;
mod obs_csv;
mod station;
mod synth;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use grid_file::{read_grid, read_grid_file, write_grid, write_grid_file};
pub use obs_csv::{read_observation_csv, write_observation_csv, TimedObservations};
pub use station::{decompose_wind, interpolate_to_hours, HourlyRecord, StationRecord};
pub use synth::{
    covariance_from_spec, generate_grf_dataset, read_dataset, write_grf_dataset, DatasetManifest,
    SyntheticDatasetSpec,
};
