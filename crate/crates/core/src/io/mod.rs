pub mod bench;
pub mod commands;
pub mod config;
pub mod container;
pub mod metrics;
pub mod pattern;

pub use bench::{bench_latency, BenchConfig, BenchReport};
pub use commands::{prune_command, train_command};
pub use config::{load_objective, prepare_data, DataConfig, ModelConfig, PreparedData, RunConfig};
pub use container::{load_model, save_model, Checkpoint, HistorySummary, FORMAT_VERSION};
pub use metrics::metrics_csv;
pub use pattern::{pattern_between, pattern_csv, pattern_of, pattern_svg, PatternRow};
