//! Synthetic data, file formats, the toy trainer and the command line.

pub mod cli;
pub mod config;
pub mod io;
pub mod run;
pub mod selftest;
pub mod synth;
pub mod train;

pub use config::{read_tracker_config, tracker_config_to_kv};
pub use io::{
    load_weights, read_mot_csv, read_sequence, rle_decode, rle_encode, save_weights, write_mot_csv,
    write_sequence, MotRecord, RleMask, SequenceData,
};
pub use run::{evaluate, track_sequence, ResultSet};
pub use selftest::{run_selftest, Check};
pub use synth::{
    generate_sequence, GtObject, ObjectInit, Occlusion, SequenceSpec, ShapeKind, SyntheticSequence,
};
pub use train::{
    default_train_set, default_train_specs, train_set, train_toy, TraceEntry, TrainHyper,
    TrainOutcome,
};
