//! Differentiable architecture search over graph neural network
//! aggregators: a softmax-relaxed supernet over node, skip and layer
//! aggregation operations, trained by alternating first-order updates of
//! architecture and network weights, then discretized by argmax and
//! retrained from scratch.

pub mod aggregators;
pub mod baselines;
pub mod autodiff;
pub mod checkpoint;
pub mod graph;
pub mod metrics;
pub mod search;
pub mod supernet;
pub mod trainer;
