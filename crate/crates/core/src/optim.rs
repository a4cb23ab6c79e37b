//! Optimizer steps (SGD, Adam, KFAC, exact NGD, and the two-level KFAC
//! variants), the training loop with early stopping, and grid search over
//! learning rate and damping.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::fisher::FisherOracle;
use crate::kfac::{build_blocks, kfac_apply_inverse};
use crate::linalg::{solve_spd, DenseMatrix, DenseVector};
use crate::network::{backward, batch_loss, forward, sample_targets, LayerSpec, LossKind, Network};
use crate::rng::{stream_rng, STREAM_INIT, STREAM_SHUFFLE, STREAM_TARGETS};
use crate::twolevel::{
    apply_correction, beta_star, beta_tko, build_full_space_debug, build_krylov,
    build_nicolaides, build_residuals, build_spectral, build_taylor, coarse_operator, gap,
    nicolaides_seeds, residual_seeds, CoarseKind, CoarseSpace,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sgd,
    SgdMomentum,
    Adam,
    Kfac,
    ExactNgd,
    Nico,
    Spectral,
    Residu,
    KryNico,
    KryResidu,
    Previous,
    Taylor,
    FullDebug,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::SgdMomentum => "sgd-momentum",
            Method::Adam => "adam",
            Method::Kfac => "kfac",
            Method::ExactNgd => "exact-ngd",
            Method::Nico => "nico",
            Method::Spectral => "spectral",
            Method::Residu => "residu",
            Method::KryNico => "kry-nico",
            Method::KryResidu => "kry-residu",
            Method::Previous => "previous",
            Method::Taylor => "taylor",
            Method::FullDebug => "full-debug",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        for m in Method::ALL {
            if m.tag() == s {
                return Ok(m);
            }
        }
        Err(Error::BadConfig(format!("unknown method `{s}`")))
    }

    pub const ALL: [Method; 13] = [
        Method::Sgd,
        Method::SgdMomentum,
        Method::Adam,
        Method::Kfac,
        Method::ExactNgd,
        Method::Nico,
        Method::Spectral,
        Method::Residu,
        Method::KryNico,
        Method::KryResidu,
        Method::Previous,
        Method::Taylor,
        Method::FullDebug,
    ];

    /// Methods that apply a coarse correction on top of the KFAC increment.
    pub fn is_two_level(&self) -> bool {
        matches!(
            self,
            Method::Nico
                | Method::Spectral
                | Method::Residu
                | Method::KryNico
                | Method::KryResidu
                | Method::Previous
                | Method::Taylor
                | Method::FullDebug
        )
    }

    /// Methods whose update depends on the damping parameter.
    pub fn uses_lambda(&self) -> bool {
        !matches!(self, Method::Sgd | Method::SgdMomentum | Method::Adam)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-3;
pub const DEFAULT_PATIENCE: usize = 10;
pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// The full grid searched by default: {1e-4, ..., 1e4}.
pub fn full_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub alpha: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    /// Order of the Taylor coarse space; ignored by other methods.
    pub taylor_order: usize,
}

impl OptimizerConfig {
    pub fn new(method: Method, alpha: f64, lambda: f64) -> OptimizerConfig {
        OptimizerConfig {
            method,
            alpha,
            lambda,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            taylor_order: 2,
        }
    }
}

/// Mutable state carried across steps by the stateful baselines.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    velocity: Option<DenseVector>,
    adam_m: Option<DenseVector>,
    adam_v: Option<DenseVector>,
    adam_t: u64,
}

/// Diagnostics from a single optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    /// Mini-batch loss under true targets, before the update.
    pub loss: f64,
    /// Gap diagnostic of the coarse correction (two-level methods only).
    pub gap: Option<f64>,
    /// Norm of the KFAC residual (two-level methods only).
    pub residual_norm: Option<f64>,
}

fn check_finite(theta: &DenseVector) -> bool {
    theta.iter().all(|v| v.is_finite())
}

fn softmax_columns(z: &DenseMatrix) -> DenseMatrix {
    let mut s = z.clone();
    for mut col in s.column_iter_mut() {
        let m = col.max();
        let mut total = 0.0;
        for v in col.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        col /= total;
    }
    s
}

/// Exact (analytically integrated) regularized Fisher of the model's
/// predictive distribution, assembled from one backward pass per output
/// coordinate. For squared error this is the Gauss-Newton matrix; for
/// cross-entropy the per-output terms are weighted by the softmax
/// probabilities. Unlike the single-draw Monte-Carlo estimate used by the
/// KFAC-family methods, this carries no sampling noise.
pub fn exact_fim(
    net: &Network,
    cache: &mut crate::network::BatchCache,
    lambda: f64,
) -> Result<DenseMatrix> {
    let p = net.layout.p;
    if p > crate::fisher::EXPLICIT_FIM_GUARD {
        return Err(Error::SizeGuard { p, guard: crate::fisher::EXPLICIT_FIM_GUARD });
    }
    let outputs = cache.outputs.clone();
    let loss = cache.loss;
    let (d_out, batch) = (outputs.nrows(), outputs.ncols());
    let probs = match loss {
        LossKind::SquaredError => None,
        LossKind::CrossEntropy => Some(softmax_columns(&outputs)),
    };
    let mut f = DenseMatrix::zeros(p, p);
    for j in 0..d_out {
        let targets = match loss {
            // t = z - e_j makes dL/dz = e_j for every sample.
            LossKind::SquaredError => {
                let mut t = outputs.clone();
                for b in 0..batch {
                    t[(j, b)] -= 1.0;
                }
                t
            }
            // One-hot e_j makes dL/dz = softmax(z) - e_j.
            LossKind::CrossEntropy => {
                let mut t = DenseMatrix::zeros(d_out, batch);
                for b in 0..batch {
                    t[(j, b)] = 1.0;
                }
                t
            }
        };
        let bp = backward(net, cache, &targets)?;
        for b in 0..batch {
            let w = probs.as_ref().map_or(1.0, |s| s[(j, b)]);
            f.ger(w / batch as f64, &bp.per_sample[b], &bp.per_sample[b], 1.0);
        }
    }
    for i in 0..p {
        f[(i, i)] += lambda;
    }
    Ok(f)
}

/// One step of a first-order baseline: plain SGD, SGD with momentum, or Adam.
pub fn step_first_order(
    net: &mut Network,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    loss: LossKind,
    config: &OptimizerConfig,
    state: &mut OptimizerState,
) -> Result<StepDiagnostics> {
    if inputs.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut cache = forward(net, inputs, loss)?;
    let batch_l = batch_loss(&cache.outputs, targets, loss);
    let bp = backward(net, &mut cache, targets)?;
    let grad = &bp.mean + &net.theta * config.weight_decay;
    match config.method {
        Method::Sgd => {
            net.theta -= &grad * config.alpha;
        }
        Method::SgdMomentum => {
            let v = state
                .velocity
                .get_or_insert_with(|| DenseVector::zeros(net.layout.p));
            *v = &*v * SGD_MOMENTUM + &grad;
            net.theta -= &*v * config.alpha;
        }
        Method::Adam => {
            let p = net.layout.p;
            let m = state.adam_m.get_or_insert_with(|| DenseVector::zeros(p));
            *m = &*m * ADAM_BETA1 + &grad * (1.0 - ADAM_BETA1);
            let m = state.adam_m.clone().unwrap();
            let v = state.adam_v.get_or_insert_with(|| DenseVector::zeros(p));
            *v = &*v * ADAM_BETA2 + grad.component_mul(&grad) * (1.0 - ADAM_BETA2);
            let v = state.adam_v.clone().unwrap();
            state.adam_t += 1;
            let t = state.adam_t as i32;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            let update = m_hat.zip_map(&v_hat, |mi, vi| mi / (vi.sqrt() + ADAM_EPS));
            net.theta -= update * config.alpha;
        }
        _ => return Err(Error::BadConfig("not a first-order method".into())),
    }
    Ok(StepDiagnostics { loss: batch_l, gap: None, residual_norm: None })
}

/// One step of a curvature method: gradient with true targets, Fisher and
/// KFAC factors estimated on the same forward pass with sampled targets,
/// KFAC increment, optional coarse correction, parameter update. Weight
/// decay is folded into the raw gradient before preconditioning.
pub fn step_kfac2l(
    net: &mut Network,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    loss: LossKind,
    config: &OptimizerConfig,
    target_rng: &mut ChaCha8Rng,
) -> Result<StepDiagnostics> {
    if inputs.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    let cache0 = forward(net, inputs, loss)?;
    let batch_l = batch_loss(&cache0.outputs, targets, loss);

    let mut grad_cache = cache0.clone();
    let bp = backward(net, &mut grad_cache, targets)?;
    let grad = &bp.mean + &net.theta * config.weight_decay;

    let sampled = sample_targets(&cache0.outputs, loss, target_rng);
    let mut fisher_cache = cache0;
    backward(net, &mut fisher_cache, &sampled)?;

    let layout = &net.layout;
    let (delta, diag_gap, diag_res) = match config.method {
        Method::ExactNgd => {
            let f = exact_fim(net, &mut fisher_cache, config.lambda)?;
            (solve_spd(&f, &grad, 0.0)?, None, None)
        }
        Method::Kfac => {
            let blocks = build_blocks(&fisher_cache, layout, config.lambda)?;
            (kfac_apply_inverse(&blocks, layout, &grad)?, None, None)
        }
        m if m.is_two_level() => {
            let blocks = build_blocks(&fisher_cache, layout, config.lambda)?;
            let oracle = FisherOracle::new(&fisher_cache, layout, config.lambda);
            let delta_kfac = kfac_apply_inverse(&blocks, layout, &grad)?;
            let r = oracle.residual(&grad, &delta_kfac)?;
            let space: CoarseSpace = match m {
                Method::Nico | Method::Previous => build_nicolaides(layout),
                Method::Spectral => build_spectral(&blocks),
                Method::Residu => build_residuals(&blocks, layout, &r),
                Method::KryNico => build_krylov(
                    CoarseKind::KrylovNico,
                    &blocks,
                    layout,
                    &nicolaides_seeds(layout),
                )?,
                Method::KryResidu => build_krylov(
                    CoarseKind::KrylovResidu,
                    &blocks,
                    layout,
                    &residual_seeds(layout, &r),
                )?,
                Method::Taylor => build_taylor(&blocks, &oracle, &r, config.taylor_order.max(1))?,
                Method::FullDebug => build_full_space_debug(layout),
                _ => unreachable!(),
            };
            let op = coarse_operator(&oracle, &space)?;
            let beta = if m == Method::Previous {
                beta_tko(&op, &space, layout, &grad)?
            } else {
                beta_star(&op, &space, layout, &r)?
            };
            let g = gap(&op, &space, layout, &beta, &r);
            let delta = apply_correction(&delta_kfac, &space, layout, &beta);
            (delta, Some(g), Some(r.r.norm()))
        }
        _ => return Err(Error::BadConfig("not a curvature method".into())),
    };

    net.theta -= delta * config.alpha;
    Ok(StepDiagnostics { loss: batch_l, gap: diag_gap, residual_norm: diag_res })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Early stopping: stop iff the running best has not strictly decreased for
/// `patience` consecutive epochs.
pub fn early_stopping(history: &[f64], patience: usize) -> Control {
    assert!(!history.is_empty(), "early_stopping needs at least one epoch");
    let mut best = history[0];
    let mut since_best = 0usize;
    for &h in &history[1..] {
        if h < best {
            best = h;
            since_best = 0;
        } else {
            since_best += 1;
        }
    }
    if since_best >= patience {
        Control::Stop
    } else {
        Control::Continue
    }
}

/// Per-step log entry of a training run.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub gap: Option<f64>,
    pub residual_norm: Option<f64>,
    pub seconds: Option<f64>,
}

/// Outcome of a training run. `epoch_losses[e]` is the full-dataset loss
/// measured before epoch `e`'s updates, so epoch 0 records the loss at
/// initialization and is identical across methods sharing a seed.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: OptimizerConfig,
    pub epoch_losses: Vec<f64>,
    pub steps: Vec<StepLog>,
    /// Epoch at which early stopping fired, if it did.
    pub stopped_at: Option<usize>,
}

impl RunRecord {
    /// Running-best training loss: the grid-search score.
    pub fn best_loss(&self) -> f64 {
        self.epoch_losses.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Loss recorded at the last completed epoch.
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Early-stopping patience; None disables early stopping.
    pub patience: Option<usize>,
    /// Record wall-clock per step. Off by default so logs are reproducible.
    pub record_timings: bool,
}

impl TrainSettings {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> TrainSettings {
        TrainSettings {
            epochs,
            batch_size,
            seed,
            patience: Some(DEFAULT_PATIENCE),
            record_timings: false,
        }
    }
}

/// Trains a freshly initialized network on (inputs, targets). All randomness
/// derives from `settings.seed`: initialization, target sampling, and epoch
/// shuffling each consume their own stream.
pub fn train(
    layers: &[LayerSpec],
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    loss: LossKind,
    config: &OptimizerConfig,
    settings: &TrainSettings,
) -> Result<RunRecord> {
    let n = inputs.ncols();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if settings.batch_size == 0 || settings.batch_size > n {
        return Err(Error::BadConfig(format!(
            "batch size {} out of range for {n} samples",
            settings.batch_size
        )));
    }
    let mut init_rng = stream_rng(settings.seed, STREAM_INIT);
    let mut net = Network::init(layers.to_vec(), &mut init_rng)?;
    let mut target_rng = stream_rng(settings.seed, STREAM_TARGETS);
    let mut shuffle_rng = stream_rng(settings.seed, STREAM_SHUFFLE);
    let mut state = OptimizerState::default();

    let mut record = RunRecord {
        config: *config,
        epoch_losses: Vec::with_capacity(settings.epochs),
        steps: Vec::new(),
        stopped_at: None,
    };
    let mut indices: Vec<usize> = (0..n).collect();
    let mut step_count = 0usize;

    for epoch in 0..settings.epochs {
        let full = forward(&net, inputs, loss)?;
        let epoch_loss = batch_loss(&full.outputs, targets, loss);
        if !epoch_loss.is_finite() || !check_finite(&net.theta) {
            return Err(Error::Diverged { epoch });
        }
        record.epoch_losses.push(epoch_loss);
        if let Some(patience) = settings.patience {
            if early_stopping(&record.epoch_losses, patience) == Control::Stop {
                record.stopped_at = Some(epoch);
                break;
            }
        }

        indices.shuffle(&mut shuffle_rng);
        for chunk in indices.chunks(settings.batch_size) {
            let bx = inputs.select_columns(chunk);
            let by = targets.select_columns(chunk);
            let t0 = settings.record_timings.then(std::time::Instant::now);
            let diag = if config.method.uses_lambda() {
                step_kfac2l(&mut net, &bx, &by, loss, config, &mut target_rng)?
            } else {
                step_first_order(&mut net, &bx, &by, loss, config, &mut state)?
            };
            if !diag.loss.is_finite() || !check_finite(&net.theta) {
                return Err(Error::Diverged { epoch });
            }
            step_count += 1;
            record.steps.push(StepLog {
                epoch,
                step: step_count,
                loss: diag.loss,
                gap: diag.gap,
                residual_norm: diag.residual_norm,
                seconds: t0.map(|t| t.elapsed().as_secs_f64()),
            });
        }
    }
    Ok(record)
}

/// Grid search over learning rate (and damping, for curvature methods) with
/// a shared seed and epoch budget. The score is the running-best training
/// loss; ties keep the smaller alpha, then the smaller lambda. Diverged or
/// singular cells are skipped; if every cell fails, NoViableConfig.
pub fn grid_search(
    layers: &[LayerSpec],
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    loss: LossKind,
    method: Method,
    alphas: &[f64],
    lambdas: &[f64],
    settings: &TrainSettings,
) -> Result<(OptimizerConfig, RunRecord)> {
    let mut alphas: Vec<f64> = alphas.to_vec();
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lambdas: Vec<f64> = if method.uses_lambda() {
        lambdas.to_vec()
    } else {
        vec![0.0]
    };
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut best: Option<(OptimizerConfig, RunRecord)> = None;
    for &alpha in &alphas {
        for &lambda in &lambdas {
            let config = OptimizerConfig::new(method, alpha, lambda);
            match train(layers, inputs, targets, loss, &config, settings) {
                Ok(record) => {
                    let score = record.best_loss();
                    let better = match &best {
                        None => score.is_finite(),
                        Some((_, b)) => score < b.best_loss(),
                    };
                    if better {
                        best = Some((config, record));
                    }
                }
                Err(Error::Diverged { .. }) | Err(Error::Singular) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    best.ok_or(Error::NoViableConfig)
}
