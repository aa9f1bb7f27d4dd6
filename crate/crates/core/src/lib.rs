//! Mixed-precision quantization planning for small neural networks.
//!
//! The crate trains and evaluates linear-chain models (dense, conv2d, relu,
//! maxpool2d, flatten, softmax), quantizes weights onto symmetric
//! per-channel grids and activations onto percentile-clipped asymmetric
//! grids, and searches for a per-layer bitwidth assignment that holds an
//! accuracy floor while meeting a size or bit-operations budget. The search
//! runs in two phases: sigma clustering with a size-penalized objective,
//! then KL-sensitivity-guided single-layer refinement. A shift-add hardware
//! model prices the result in cycles, bytes, bit-ops, and energy.
//!
//! Everything is deterministic: fixed batch order, seeded generators, and
//! byte-stable serialization, so identical inputs reproduce identical plans,
//! traces, and reports.

pub mod cluster;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod hw;
pub mod io;
pub mod model;
pub mod plan;
pub mod planner;
pub mod quant;
pub mod stats;
pub mod tensor;

pub use cluster::{adaptive_kmeans, assign_bitwidths, ClusterAssignment};
pub use dataset::{gen_synthetic, Dataset};
pub use engine::{
    calibrate, evaluate_accuracy, forward, init_mlp, qat_epochs, ste_grad, train_float,
    EvalReport, Loss, TrainConfig,
};
pub use error::{Error, Result};
pub use hw::{
    bops, hw_report, int8_size_bytes, model_size_bytes, multiplier_cycles, shift_add_mac,
    HwCostTable, HwReport, Q17,
};
pub use io::{load_idx_dataset, load_model, save_model, write_atomic, MODEL_SCHEMA_VERSION};
pub use model::{LayerOp, LayerRecord, ModelGraph};
pub use plan::{
    classify_zone, estimate_search_cost, parse_trace_csv, render_trace_csv, Action, BitPlan,
    LayerPlan, Phase, PlanFile, PlanStatus, PlanTrace, SearchBudget, TargetMetric, Targets,
    TraceRecord, Zone,
};
pub use planner::{run_sigmaquant, verify_trace, PlanDatasets, PlanOutcome};
pub use quant::{
    fake_quant_acts, fake_quant_weights, per_channel_qparams, weight_qparams, ActObserver,
    ActQuantParams, ChannelQuantParams, QuantMode, QuantParams, BIT_CHOICES,
};
pub use stats::{
    build_histogram, kl_divergence, layer_kl_at_bits, layer_sigma, normalized_kl,
    sensitivity_scores, Histogram, SensitivityRecord,
};
pub use tensor::Tensor;
