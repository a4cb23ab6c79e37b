//! Desk-scale laboratory for natural-gradient training of small feedforward
//! networks. Implements KFAC and a family of two-level (coarse-corrected)
//! KFAC preconditioners, with diagnostics measuring how much the coarse
//! correction closes the distance to the exact natural-gradient increment.

pub mod fisher;
pub mod harness;
pub mod kfac;
pub mod linalg;
pub mod network;
pub mod optim;
pub mod rng;
pub mod twolevel;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is singular (jitter retries exhausted)")]
    Singular,
    #[error("empty batch")]
    EmptyBatch,
    #[error("explicit Fisher guard exceeded: p = {p} > {guard}")]
    SizeGuard { p: usize, guard: usize },
    #[error("zero seed vector for Krylov coarse space (layer {layer})")]
    ZeroSeed { layer: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no grid-search configuration produced a finite loss")]
    NoViableConfig,
    #[error("bad magic number {got:#010x} in IDX file")]
    BadMagic { got: u32 },
    #[error("truncated IDX file: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("run failed: {0}")]
    RunFailed(String),
    #[error("layer chain mismatch at layer {layer}: {detail}")]
    LayerChain { layer: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
