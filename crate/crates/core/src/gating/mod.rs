//! Channel gating: grouping, gates and the gated convolution block.

pub mod block;
pub mod config;
pub mod gate;
pub mod grouping;

pub use block::{BlockOutput, CgBlock, LayerCounters};
pub use config::{CgLayerConfig, GateKind, DEFAULT_EPSILON};
pub use gate::{
    channel_gate, decide_normalized, gate_forward, heaviside, merged_gate, normalized_gate, pruning_ratio,
    DecisionMap, GateState, MergedGate, Thresholds, CLOSED_DELTA, OPEN_DELTA,
};
pub use grouping::{
    assemble_weights, base_channels, base_weights, conditional_channels, inverse_permutation, permute_channels,
    shuffle_permutation, split_grouped, split_weights, GroupSplit,
};
