//! Desk-scale workbench for learning to uncover an occluded target object by
//! continuous pushing: a deterministic 2D tabletop simulator, procedural heap
//! datasets, scripted teacher policies, a from-scratch neural training stack,
//! and an evaluation harness.

pub mod eval;
pub mod geom;
pub mod heapgen;
pub mod metrics;
pub mod nn;
pub mod observe;
pub mod rl;
pub mod rng;
pub mod teachers;
pub mod world;
