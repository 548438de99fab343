pub mod analysis;
pub mod calibration;
pub mod error;
pub mod hadamard;
pub mod init;
pub mod matrix;
pub mod quantizer;
pub mod sparse_adapter;
pub mod synth;
pub mod tensor_io;
pub mod transforms;

pub use calibration::{CalibrationFactor, GramAccumulator};
pub use error::{Error, ErrorKind, Result};
pub use init::{AllocConfig, ChannelSolve, InitOptions, InitReport, Strategy};
pub use matrix::Matrix;
pub use quantizer::{QuantConfig, QuantizedLayer};
pub use sparse_adapter::SparseAdapter;
pub use transforms::{build_plan, cached_plan, fast_wht_inplace, Side, TransformKind, TransformPlan};
