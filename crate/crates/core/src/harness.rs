//! Experiment front end: TOML configs, shipped presets, run orchestration
//! with atomic CSV logging, and loss/gap plot assembly.

pub mod data;
pub mod plot;
pub mod selftest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::linalg::DenseMatrix;
use crate::network::{Activation, ConvSpec, LayerSpec, LossKind, Network};
use crate::optim::{
    grid_search, train, Method, OptimizerConfig, RunRecord, TrainSettings, DEFAULT_WEIGHT_DECAY,
};
use crate::{Error, Result};
use data::{load_dataset, DataSource, Dataset};
use plot::{render_svg, Series, YScale};

pub const CSV_HEADER: &str = "run_id,method,epoch,step,loss,gap,residual_norm,seconds";

/// A full experiment: model, data, optimizers to compare, and search grid.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: String,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub grid: GridSpec,
    #[serde(rename = "optimizer")]
    pub optimizers: Vec<OptimizerEntry>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub loss: LossKind,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    pub batch_size: usize,
    /// Keep only the first `subset` samples when set.
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// One optimizer to run. Without an explicit `alpha` the harness grid
/// searches it first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerEntry {
    pub method: Method,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub weight_decay: Option<f64>,
    pub taylor_order: Option<usize>,
}

impl OptimizerEntry {
    pub fn fixed(method: Method, alpha: f64, lambda: f64) -> OptimizerEntry {
        OptimizerEntry {
            method,
            alpha: Some(alpha),
            lambda: Some(lambda),
            weight_decay: None,
            taylor_order: None,
        }
    }

    pub fn searched(method: Method) -> OptimizerEntry {
        OptimizerEntry { method, alpha: None, lambda: None, weight_decay: None, taylor_order: None }
    }

    fn config(&self, alpha: f64, lambda: f64) -> OptimizerConfig {
        let mut c = OptimizerConfig::new(self.method, alpha, lambda);
        c.weight_decay = self.weight_decay.unwrap_or(DEFAULT_WEIGHT_DECAY);
        c.taylor_order = self.taylor_order.unwrap_or(2);
        c
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::BadConfig(e.to_string()))?;
    validate_config(&config)?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

pub fn serialize_config(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::BadConfig(e.to_string()))
}

fn validate_config(config: &ExperimentConfig) -> Result<()> {
    if config.optimizers.is_empty() {
        return Err(Error::BadConfig("no optimizers listed".into()));
    }
    if config.dataset.batch_size == 0 {
        return Err(Error::BadConfig("batch size must be positive".into()));
    }
    // Validates the layer chain without initializing parameters.
    Network::init(
        config.model.layers.clone(),
        &mut crate::rng::stream_rng(0, crate::rng::STREAM_INIT),
    )?;
    match &config.dataset.source {
        DataSource::Idx { images, labels } => {
            for path in std::iter::once(images).chain(labels.iter()) {
                if !Path::new(path).exists() {
                    return Err(Error::BadConfig(format!("missing dataset file `{path}`")));
                }
            }
        }
        DataSource::Csv { path } => {
            if !Path::new(path).exists() {
                return Err(Error::BadConfig(format!("missing dataset file `{path}`")));
            }
        }
        _ => {}
    }
    Ok(())
}

/// Serializes a float with 17 significant digits, enough to round-trip f64.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(csv_float).unwrap_or_default()
}

/// Renders the per-epoch rows of a run: one row per recorded epoch, with the
/// step counter, gap, and residual norm taken from the epoch's last step.
pub fn run_csv(run_id: &str, method: Method, record: &RunRecord) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (epoch, &loss) in record.epoch_losses.iter().enumerate() {
        let last = record.steps.iter().rev().find(|s| s.epoch == epoch);
        let step = last.map_or(0, |s| s.step);
        let seconds: Option<f64> = {
            let epoch_steps: Vec<f64> = record
                .steps
                .iter()
                .filter(|s| s.epoch == epoch)
                .filter_map(|s| s.seconds)
                .collect();
            if epoch_steps.is_empty() {
                None
            } else {
                Some(epoch_steps.iter().sum())
            }
        };
        out.push_str(&format!(
            "{run_id},{},{epoch},{step},{},{},{},{}\n",
            method.tag(),
            csv_float(loss),
            opt_float(last.and_then(|s| s.gap)),
            opt_float(last.and_then(|s| s.residual_norm)),
            opt_float(seconds),
        ));
    }
    out
}

/// Renders the per-step trace (batch loss, gap, residual) of a run.
pub fn steps_csv(run_id: &str, method: Method, record: &RunRecord) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in &record.steps {
        out.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{}\n",
            method.tag(),
            s.epoch,
            s.step,
            csv_float(s.loss),
            opt_float(s.gap),
            opt_float(s.residual_norm),
            opt_float(s.seconds),
        ));
    }
    out
}

/// Writes `contents` atomically: a temp file in the same directory is
/// renamed over the target.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub threads: usize,
    /// Record wall-clock columns (makes logs nondeterministic).
    pub timings: bool,
    /// Grid search every optimizer even when alpha is pinned.
    pub force_grid: bool,
    /// Replace the config's grid with the full {1e-4..1e4} x {1e-4..1e4}.
    pub full_grid: bool,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            seed: None,
            epochs: None,
            threads: 1,
            timings: false,
            force_grid: false,
            full_grid: false,
        }
    }
}

/// A finished (or failed) run of one optimizer entry.
#[derive(Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub csv_path: PathBuf,
    pub result: Result<RunRecord>,
}

fn prepared_dataset(config: &ExperimentConfig, seed: u64) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut dataset: Dataset = load_dataset(&config.dataset.source, seed)?;
    if let Some(n) = config.dataset.subset {
        dataset.truncate(n);
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if config.dataset.batch_size > dataset.len() {
        return Err(Error::BadConfig(format!(
            "batch size {} exceeds dataset size {}",
            config.dataset.batch_size,
            dataset.len()
        )));
    }
    let out_dim = config.model.layers.last().unwrap().output_len();
    let targets = dataset.one_hot_targets(out_dim)?;
    if targets.nrows() != out_dim {
        return Err(Error::DimMismatch { expected: out_dim, got: targets.nrows() });
    }
    let in_dim = config.model.layers[0].input_len();
    if dataset.inputs.nrows() != in_dim {
        return Err(Error::DimMismatch { expected: in_dim, got: dataset.inputs.nrows() });
    }
    Ok((dataset.inputs, targets))
}

fn run_one(
    config: &ExperimentConfig,
    entry: &OptimizerEntry,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
    opts: &RunOptions,
    seed: u64,
    epochs: usize,
) -> Result<RunRecord> {
    let settings = TrainSettings {
        epochs,
        batch_size: config.dataset.batch_size,
        seed,
        patience: Some(crate::optim::DEFAULT_PATIENCE),
        record_timings: opts.timings,
    };
    let needs_grid = opts.force_grid || entry.alpha.is_none();
    if needs_grid {
        let (alphas, lambdas) = if opts.full_grid {
            (crate::optim::full_grid(), crate::optim::full_grid())
        } else {
            (config.grid.alphas.clone(), config.grid.lambdas.clone())
        };
        let (best, _) = grid_search(
            &config.model.layers,
            inputs,
            targets,
            config.model.loss,
            entry.method,
            &alphas,
            &lambdas,
            &settings,
        )?;
        let final_config = entry.config(best.alpha, best.lambda);
        train(&config.model.layers, inputs, targets, config.model.loss, &final_config, &settings)
    } else {
        let c = entry.config(entry.alpha.unwrap(), entry.lambda.unwrap_or(0.0));
        train(&config.model.layers, inputs, targets, config.model.loss, &c, &settings)
    }
}

/// Runs every optimizer in the config, writing one per-epoch CSV per run
/// (plus a per-step trace for two-level methods). Failed runs leave a
/// header-only CSV next to a `.failed` marker describing the error. The
/// first failure is reported after all runs finish.
pub fn run_experiment(config: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<RunOutcome>> {
    let seed = opts.seed.unwrap_or(config.seed);
    let epochs = opts.epochs.unwrap_or(config.epochs);
    let (inputs, targets) = prepared_dataset(config, seed)?;
    let out_dir = PathBuf::from(&config.output_dir);
    fs::create_dir_all(&out_dir)?;

    let results: Vec<Result<RunRecord>> = if opts.threads > 1 {
        let mut slots: Vec<Option<Result<RunRecord>>> =
            (0..config.optimizers.len()).map(|_| None).collect();
        let chunk = opts.threads.max(1);
        for batch in (0..config.optimizers.len()).collect::<Vec<_>>().chunks(chunk) {
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for &i in batch {
                    let entry = &config.optimizers[i];
                    let inputs = &inputs;
                    let targets = &targets;
                    handles.push((
                        i,
                        scope.spawn(move || {
                            run_one(config, entry, inputs, targets, opts, seed, epochs)
                        }),
                    ));
                }
                for (i, h) in handles {
                    slots[i] = Some(h.join().expect("run thread panicked"));
                }
            });
        }
        slots.into_iter().map(|s| s.unwrap()).collect()
    } else {
        config
            .optimizers
            .iter()
            .map(|entry| run_one(config, entry, &inputs, &targets, opts, seed, epochs))
            .collect()
    };

    let mut outcomes = Vec::new();
    let mut first_error: Option<Error> = None;
    for (entry, result) in config.optimizers.iter().zip(results) {
        let run_id = format!("{}-{}-s{}", config.name, entry.method.tag(), seed);
        let csv_path = out_dir.join(format!("{run_id}.csv"));
        match &result {
            Ok(record) => {
                write_atomic(&csv_path, &run_csv(&run_id, entry.method, record))?;
                let marker = csv_path.with_extension("csv.failed");
                if marker.exists() {
                    fs::remove_file(&marker)?;
                }
                if entry.method.is_two_level() {
                    let steps_path = out_dir.join(format!("{run_id}.steps.csv"));
                    write_atomic(&steps_path, &steps_csv(&run_id, entry.method, record))?;
                }
            }
            Err(e) => {
                write_atomic(&csv_path, &format!("{CSV_HEADER}\n"))?;
                write_atomic(&csv_path.with_extension("csv.failed"), &format!("{e}\n"))?;
                if first_error.is_none() {
                    first_error =
                        Some(Error::RunFailed(format!("{}: {e}", entry.method.tag())));
                }
            }
        }
        outcomes.push(RunOutcome { method: entry.method, csv_path, result });
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}

/// A parsed CSV log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub run_id: String,
    pub method: String,
    /// (epoch, step, loss, gap) rows.
    pub rows: Vec<(usize, usize, f64, Option<f64>)>,
}

pub fn parse_run_log(text: &str) -> Result<RunLog> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err(Error::BadConfig("unrecognized log header".into())),
    }
    let mut log = RunLog { run_id: String::new(), method: String::new(), rows: Vec::new() };
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::BadConfig(format!("bad log row `{line}`")));
        }
        log.run_id = fields[0].to_string();
        log.method = fields[1].to_string();
        let epoch = fields[2].parse().map_err(|_| Error::BadConfig("bad epoch".into()))?;
        let step = fields[3].parse().map_err(|_| Error::BadConfig("bad step".into()))?;
        let loss = fields[4].parse().map_err(|_| Error::BadConfig("bad loss".into()))?;
        let gap = if fields[5].is_empty() {
            None
        } else {
            Some(fields[5].parse().map_err(|_| Error::BadConfig("bad gap".into()))?)
        };
        log.rows.push((epoch, step, loss, gap));
    }
    Ok(log)
}

/// Builds a loss plot (log y over epochs) or gap plot (linear y over steps)
/// from CSV logs and writes it to `out`.
pub fn plot_logs(paths: &[PathBuf], out: &Path, gap_plot: bool) -> Result<()> {
    if paths.is_empty() {
        return Err(Error::BadConfig("no logs to plot".into()));
    }
    let mut series = Vec::new();
    for path in paths {
        let log = parse_run_log(&fs::read_to_string(path)?)?;
        let points: Vec<(f64, f64)> = if gap_plot {
            log.rows
                .iter()
                .filter_map(|&(_, step, _, gap)| gap.map(|g| (step as f64, g)))
                .collect()
        } else {
            log.rows.iter().map(|&(epoch, _, loss, _)| (epoch as f64, loss)).collect()
        };
        series.push(Series { label: log.run_id.clone(), points });
    }
    let svg = if gap_plot {
        render_svg(&series, YScale::Linear, "step", "gap")?
    } else {
        render_svg(&series, YScale::Log, "epoch", "loss")?
    };
    write_atomic(out, &svg)
}

fn dense(d_in: usize, d_out: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Dense { d_in, d_out, activation }
}

/// Bottlenecked 16-8-4-8-16 tanh autoencoder on low-rank synthetic data.
pub fn preset_tiny_autoencoder() -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny-autoencoder".into(),
        seed: 1,
        epochs: 30,
        output_dir: "runs/tiny-autoencoder".into(),
        model: ModelSpec {
            loss: LossKind::SquaredError,
            layers: vec![
                dense(16, 8, Activation::Tanh),
                dense(8, 4, Activation::Tanh),
                dense(4, 8, Activation::Tanh),
                dense(8, 16, Activation::Identity),
            ],
        },
        dataset: DatasetSpec {
            source: DataSource::SyntheticAutoencoder { dim: 16, latent: 4, samples: 256 },
            batch_size: 32,
            subset: None,
        },
        grid: GridSpec {
            alphas: vec![1e-2, 1e-1, 1.0],
            lambdas: vec![1e-3, 1e-2, 1e-1],
        },
        optimizers: vec![
            OptimizerEntry::searched(Method::Kfac),
            OptimizerEntry::searched(Method::Nico),
            OptimizerEntry::searched(Method::Spectral),
            OptimizerEntry::searched(Method::Residu),
            OptimizerEntry::searched(Method::KryNico),
            OptimizerEntry::searched(Method::KryResidu),
        ],
    }
}

/// Three small convolution layers feeding one dense layer, on synthetic
/// 6x6 images.
pub fn preset_tiny_conv() -> ExperimentConfig {
    let conv = |spec: ConvSpec, activation| LayerSpec::Conv { spec, activation };
    ExperimentConfig {
        name: "tiny-conv".into(),
        seed: 1,
        epochs: 20,
        output_dir: "runs/tiny-conv".into(),
        model: ModelSpec {
            loss: LossKind::SquaredError,
            layers: vec![
                conv(
                    ConvSpec {
                        in_channels: 1,
                        out_channels: 3,
                        in_h: 6,
                        in_w: 6,
                        k_h: 3,
                        k_w: 3,
                        stride: 1,
                        pad: 1,
                    },
                    Activation::Tanh,
                ),
                conv(
                    ConvSpec {
                        in_channels: 3,
                        out_channels: 3,
                        in_h: 6,
                        in_w: 6,
                        k_h: 3,
                        k_w: 3,
                        stride: 2,
                        pad: 1,
                    },
                    Activation::Tanh,
                ),
                conv(
                    ConvSpec {
                        in_channels: 3,
                        out_channels: 2,
                        in_h: 3,
                        in_w: 3,
                        k_h: 2,
                        k_w: 2,
                        stride: 1,
                        pad: 0,
                    },
                    Activation::Tanh,
                ),
                dense(8, 4, Activation::Identity),
            ],
        },
        dataset: DatasetSpec {
            source: DataSource::SyntheticRegression { dim: 36, out_dim: 4, samples: 192 },
            batch_size: 32,
            subset: None,
        },
        grid: GridSpec {
            alphas: vec![1e-2, 1e-1, 1.0],
            lambdas: vec![1e-3, 1e-2, 1e-1],
        },
        optimizers: vec![
            OptimizerEntry::searched(Method::Kfac),
            OptimizerEntry::searched(Method::Nico),
            OptimizerEntry::searched(Method::Spectral),
            OptimizerEntry::searched(Method::Residu),
        ],
    }
}

/// Twelve-layer deep linear network (identity activations throughout).
pub fn preset_deep_linear() -> ExperimentConfig {
    let dims = [20, 18, 16, 14, 12, 10, 10, 10, 10, 10, 10, 10, 10];
    let layers: Vec<LayerSpec> = dims
        .windows(2)
        .map(|w| dense(w[0], w[1], Activation::Identity))
        .collect();
    assert_eq!(layers.len(), 12);
    ExperimentConfig {
        name: "deep-linear".into(),
        seed: 1,
        epochs: 30,
        output_dir: "runs/deep-linear".into(),
        model: ModelSpec { loss: LossKind::SquaredError, layers },
        dataset: DatasetSpec {
            source: DataSource::SyntheticRegression { dim: 20, out_dim: 10, samples: 256 },
            batch_size: 32,
            subset: None,
        },
        grid: GridSpec {
            alphas: vec![1e-2, 1e-1, 1.0],
            lambdas: vec![1e-3, 1e-2, 1e-1],
        },
        optimizers: vec![
            OptimizerEntry::searched(Method::Kfac),
            OptimizerEntry::searched(Method::Nico),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::StepLog;

    fn quick_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            name: "quick".into(),
            seed: 3,
            epochs: 2,
            output_dir: dir.to_str().unwrap().into(),
            model: ModelSpec {
                loss: LossKind::SquaredError,
                layers: vec![
                    dense(4, 3, Activation::Tanh),
                    dense(3, 4, Activation::Identity),
                ],
            },
            dataset: DatasetSpec {
                source: DataSource::SyntheticAutoencoder { dim: 4, latent: 2, samples: 16 },
                batch_size: 8,
                subset: None,
            },
            grid: GridSpec { alphas: vec![1e-1], lambdas: vec![1e-2] },
            optimizers: vec![
                OptimizerEntry::fixed(Method::Sgd, 0.1, 0.0),
                OptimizerEntry::fixed(Method::Nico, 0.1, 1e-2),
            ],
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        for config in [
            preset_tiny_autoencoder(),
            preset_tiny_conv(),
            preset_deep_linear(),
        ] {
            let text = serialize_config(&config).unwrap();
            let back = parse_config(&text).unwrap();
            assert_eq!(back, config);
        }
    }

    #[test]
    fn shipped_configs_match_presets() {
        // Set REGEN_CONFIGS=1 to rewrite the shipped files from the presets.
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, preset) in [
            ("tiny-autoencoder.toml", preset_tiny_autoencoder()),
            ("tiny-conv.toml", preset_tiny_conv()),
            ("deep-linear.toml", preset_deep_linear()),
        ] {
            let path = root.join(file);
            if std::env::var_os("REGEN_CONFIGS").is_some() {
                write_atomic(&path, &serialize_config(&preset).unwrap()).unwrap();
            }
            let shipped = load_config(&path).unwrap_or_else(|e| panic!("{file}: {e}"));
            assert_eq!(shipped, preset, "{file} drifted from its preset");
        }
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.optimizers.clear();
        assert!(matches!(
            parse_config(&serialize_config(&config).unwrap()),
            Err(Error::BadConfig(_))
        ));
        let mut config = quick_config(dir.path());
        config.dataset.source = DataSource::Csv { path: "/nonexistent/x.csv".into() };
        assert!(parse_config(&serialize_config(&config).unwrap()).is_err());
        // Mismatched layer chain.
        let mut config = quick_config(dir.path());
        config.model.layers = vec![dense(4, 3, Activation::Tanh), dense(5, 4, Activation::Tanh)];
        assert!(parse_config(&serialize_config(&config).unwrap()).is_err());
    }

    #[test]
    fn csv_float_has_17_significant_digits() {
        let s = csv_float(std::f64::consts::PI);
        assert_eq!(s, "3.1415926535897931e0");
        assert_eq!(s.parse::<f64>().unwrap(), std::f64::consts::PI);
    }

    #[test]
    fn run_csv_rows_match_epochs_and_parse_back() {
        let record = RunRecord {
            config: OptimizerConfig::new(Method::Nico, 0.1, 0.01),
            epoch_losses: vec![1.0, 0.5, 0.25],
            steps: vec![
                StepLog { epoch: 0, step: 1, loss: 0.9, gap: Some(-0.1), residual_norm: Some(2.0), seconds: None },
                StepLog { epoch: 0, step: 2, loss: 0.8, gap: Some(-0.2), residual_norm: Some(1.5), seconds: None },
                StepLog { epoch: 1, step: 3, loss: 0.6, gap: Some(-0.3), residual_norm: Some(1.0), seconds: None },
                StepLog { epoch: 2, step: 4, loss: 0.4, gap: Some(-0.4), residual_norm: Some(0.5), seconds: None },
            ],
            stopped_at: None,
        };
        let text = run_csv("rid", Method::Nico, &record);
        assert_eq!(text.lines().count(), 4); // header + 3 epochs
        let log = parse_run_log(&text).unwrap();
        assert_eq!(log.run_id, "rid");
        assert_eq!(log.method, "nico");
        assert_eq!(log.rows[0], (0, 2, 1.0, Some(-0.2)));
        assert_eq!(log.rows[2], (2, 4, 0.25, Some(-0.4)));
        let steps = steps_csv("rid", Method::Nico, &record);
        assert_eq!(steps.lines().count(), 5);
    }

    #[test]
    fn epochs_zero_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.epochs = 0;
        let outcomes = run_experiment(&config, &RunOptions::default()).unwrap();
        for o in &outcomes {
            let text = fs::read_to_string(&o.csv_path).unwrap();
            assert_eq!(text, format!("{CSV_HEADER}\n"));
        }
    }

    #[test]
    fn experiment_writes_logs_with_shared_epoch_zero_loss() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let outcomes = run_experiment(&config, &RunOptions::default()).unwrap();
        assert_eq!(outcomes.len(), 2);
        let mut first_losses = Vec::new();
        for o in &outcomes {
            let log = parse_run_log(&fs::read_to_string(&o.csv_path).unwrap()).unwrap();
            assert_eq!(log.rows.len(), 2);
            first_losses.push(log.rows[0].2);
        }
        assert_eq!(first_losses[0], first_losses[1]);
        // The two-level run also produced a step trace with gaps.
        let steps_path = dir.path().join("quick-nico-s3.steps.csv");
        let steps = parse_run_log(&fs::read_to_string(&steps_path).unwrap()).unwrap();
        assert!(!steps.rows.is_empty());
        assert!(steps.rows.iter().all(|r| r.3.is_some()));
        assert!(!dir.path().join("quick-sgd-s3.steps.csv").exists());
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        run_experiment(&config, &RunOptions::default()).unwrap();
        let a: Vec<String> = config
            .optimizers
            .iter()
            .map(|e| {
                fs::read_to_string(dir.path().join(format!("quick-{}-s3.csv", e.method.tag())))
                    .unwrap()
            })
            .collect();
        run_experiment(&config, &RunOptions::default()).unwrap();
        for (i, e) in config.optimizers.iter().enumerate() {
            let b = fs::read_to_string(dir.path().join(format!("quick-{}-s3.csv", e.method.tag())))
                .unwrap();
            assert_eq!(a[i], b);
        }
    }

    #[test]
    fn concurrent_runs_match_sequential() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config_a = quick_config(dir_a.path());
        let config_b = quick_config(dir_b.path());
        run_experiment(&config_a, &RunOptions::default()).unwrap();
        run_experiment(&config_b, &RunOptions { threads: 2, ..Default::default() }).unwrap();
        for e in &config_a.optimizers {
            let name = format!("quick-{}-s3.csv", e.method.tag());
            let a = fs::read_to_string(dir_a.path().join(&name)).unwrap();
            let b = fs::read_to_string(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn failed_run_leaves_marker_and_header_only_log() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.epochs = 80;
        config.optimizers = vec![OptimizerEntry::fixed(Method::Sgd, 1e8, 0.0)];
        let err = run_experiment(&config, &RunOptions::default());
        assert!(err.is_err());
        let csv = dir.path().join("quick-sgd-s3.csv");
        assert_eq!(fs::read_to_string(&csv).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(dir.path().join("quick-sgd-s3.csv.failed").exists());
    }

    #[test]
    fn grid_searched_run_uses_best_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config(dir.path());
        config.grid = GridSpec { alphas: vec![1e-4, 1e-1], lambdas: vec![1e-2] };
        config.optimizers = vec![OptimizerEntry::searched(Method::Kfac)];
        config.epochs = 4;
        let outcomes = run_experiment(&config, &RunOptions::default()).unwrap();
        let record = outcomes[0].result.as_ref().unwrap();
        assert_eq!(record.config.lambda, 1e-2);
        assert!(record.config.alpha == 1e-4 || record.config.alpha == 1e-1);
    }

    #[test]
    fn seed_override_changes_run_id() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let opts = RunOptions { seed: Some(9), ..Default::default() };
        let outcomes = run_experiment(&config, &opts).unwrap();
        assert!(outcomes[0].csv_path.ends_with("quick-sgd-s9.csv"));
    }

    #[test]
    fn plot_logs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config(dir.path());
        let outcomes = run_experiment(&config, &RunOptions::default()).unwrap();
        let paths: Vec<PathBuf> = outcomes.iter().map(|o| o.csv_path.clone()).collect();
        let out = dir.path().join("loss.svg");
        plot_logs(&paths, &out, false).unwrap();
        let svg = fs::read_to_string(&out).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        // Gap plot from the step trace.
        let gap_out = dir.path().join("gap.svg");
        plot_logs(&[dir.path().join("quick-nico-s3.steps.csv")], &gap_out, true).unwrap();
        assert!(fs::read_to_string(&gap_out).unwrap().contains("<polyline"));
    }
}
