//! Shortest-path-tree pruned in-network learning.
//!
//! * [`graph`]: candidate topology, link costs, reverse-Dijkstra tree, exchange accounting.
//! * [`nn`]: dense layers, Gaussian rate gate, loss, Adam, empirical mutual information.
//! * [`engine`]: per-node modules trained with forward/backward waves over active edges.
//! * [`task`]: seeded synthetic distributed classification task.
//! * [`harness`]: multi-seed experiments, summaries, rate sweeps and CSV output.

pub mod config;
pub mod engine;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod task;
