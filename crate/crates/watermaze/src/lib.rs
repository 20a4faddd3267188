//! Transformer-based deep Q-learning in a circular water-maze simulator.
//!
//! The crate is organized bottom-up:
//!
//! - [`env`] — the 2D maze simulator: ray-cast observations, rewards,
//!   episode lifecycle.
//! - [`autograd`] — a small dense-tensor core with reverse-mode
//!   differentiation and an Adam optimizer.
//! - [`model`] — the decoder-only transformer Q-network (GPT-2 style
//!   pre-LN blocks, causal masking) plus checkpoint I/O.
//! - [`trainer`] — replay buffer, epsilon-greedy policy, sequence-batch
//!   Bellman loss against a target network, and the episode loop.
//! - [`harness`] — run orchestration: config files, metrics CSV export,
//!   evaluation with trajectory logging, smoothed training curves.

pub mod autograd;
pub mod env;
pub mod harness;
pub mod model;
pub mod seeding;
pub mod trainer;
