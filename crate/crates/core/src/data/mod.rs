//! Toy analysis systems, archives, normalization and training windows.

pub mod archive;
pub mod layout;
pub mod norms;
pub mod state;
pub mod system;
pub mod window;

pub use archive::AnalysisArchive;
pub use layout::{Channel, Layout, LevelSet, VarKind, Variable};
pub use norms::{compare_norm_stats, compute_normalization, denormalize, normalize, NormComparisonRow, NormalizationStats};
pub use state::{FieldState, Space};
pub use system::{generate_archive, LevelDynamics, ShiftSpec, SystemSpec, VariableSpec};
pub use window::{sample_window, TrainingWindow};
