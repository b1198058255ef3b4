//! Single-process simulator for communication-efficient federated training:
//! local training with control variates and communication skipping, pluggable
//! Top-K / quantization compressors, FedAvg and Scaffold baselines, and exact
//! accounting of the bits each run communicates.

pub mod compressors;
pub mod data;
pub mod error;
pub mod fed;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod vector;

pub use compressors::{CompressorKind, CompressorSpec};
pub use data::{Dataset, FederatedDataset, Partition, PartitionSpec, SplitDataset, SynthSpec};
pub use error::{Error, Result};
pub use fed::{Algorithm, ClientState, FedConfig, RunOutput, Variant};
pub use metrics::{BitLedger, EvalRow, RunRecord, Summary};
pub use models::{Batch, ModelKind, ModelSpec};
pub use rng::{derive_stream, RngStream};
pub use vector::ParamVector;
