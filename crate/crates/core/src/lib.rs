//! MARS: multimodal LoRA rank search guided by dual scaling laws.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`telemetry`] ingests fine-tuning logs (JSONL/CSV), detects per-module
//!    convergence with a patience criterion, and flattens runs into a
//!    calibration dataset (checkpoints become smaller effective dataset sizes).
//! 2. [`laws`] fits the two power laws on that dataset with a Huber objective
//!    and a multi-start bounded quasi-Newton optimizer ([`optim`]):
//!    Law-P maps (r_ve, r_llm, D) to final perplexity, Law-C maps a module's
//!    rank and D to its convergence step count.
//! 3. [`search`] prunes the rank grid to convergence-balanced pairs via the
//!    closed-form balance solution and picks the predicted-loss argmin.
//! 4. [`sim`] generates synthetic training telemetry whose ground truth follows
//!    the same laws, providing a brute-force oracle to verify the whole chain.

pub mod error;
pub mod laws;
pub mod optim;
pub mod rng;
pub mod search;
pub mod sim;
pub mod telemetry;
pub mod types;

pub use error::MarsError;
