//! Built-in oracle checks: random small networks whose matrix-free products
//! and Kronecker solves are compared against explicit dense recomputations.
//! `kfac2l selftest` runs these from the command line.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::fisher::FisherOracle;
use crate::kfac::{build_blocks, kfac_apply_inverse};
use crate::linalg::{solve_spd, DenseMatrix, DenseVector};
use crate::network::{
    backward, forward, sample_targets, Activation, ConvSpec, LayerSpec, LossKind, Network,
};
use crate::rng::{stream_rng, STREAM_INIT, STREAM_TARGETS};
use crate::twolevel::{build_nicolaides, build_spectral, coarse_operator};
use crate::{Error, Result};

const ACTIVATIONS: [Activation; 4] =
    [Activation::Tanh, Activation::Sigmoid, Activation::Relu, Activation::Identity];

/// Draws a random small architecture (1-3 layers, mixed dense/conv) with a
/// modest parameter count.
pub fn random_layers(rng: &mut ChaCha8Rng) -> Vec<LayerSpec> {
    let act = |rng: &mut ChaCha8Rng| ACTIVATIONS[rng.gen_range(0..ACTIVATIONS.len())];
    let mut layers = Vec::new();
    let mut width;
    if rng.gen_bool(0.5) {
        // Convolutional front end on a small square image.
        let side = rng.gen_range(3..=5);
        let k = rng.gen_range(2..=3.min(side));
        let pad = rng.gen_range(0..=1);
        let stride = rng.gen_range(1..=2);
        let spec = ConvSpec {
            in_channels: rng.gen_range(1..=2),
            out_channels: rng.gen_range(1..=3),
            in_h: side,
            in_w: side,
            k_h: k,
            k_w: k,
            stride,
            pad,
        };
        width = spec.out_channels * spec.t_out();
        layers.push(LayerSpec::Conv { spec, activation: act(rng) });
    } else {
        width = rng.gen_range(2..=6);
        let d_in = rng.gen_range(2..=6);
        layers.push(LayerSpec::Dense { d_in, d_out: width, activation: act(rng) });
    }
    for _ in 0..rng.gen_range(0..=2) {
        let d_out = rng.gen_range(2..=6);
        layers.push(LayerSpec::Dense { d_in: width, d_out, activation: act(rng) });
        width = d_out;
    }
    layers
}

/// A random network with a sampled-target cache, ready for Fisher products.
pub struct RandomProblem {
    pub net: Network,
    pub cache: crate::network::BatchCache,
    pub loss: LossKind,
}

pub fn random_problem(seed: u64) -> Result<RandomProblem> {
    let mut rng = stream_rng(seed, STREAM_INIT);
    let layers = random_layers(&mut rng);
    let net = Network::init(layers, &mut rng)?;
    let loss = if rng.gen_bool(0.5) { LossKind::SquaredError } else { LossKind::CrossEntropy };
    let batch = rng.gen_range(2..=6);
    let d_in = net.layers[0].input_len();
    let inputs = DenseMatrix::from_fn(d_in, batch, |_, _| rng.gen_range(-1.0..1.0));
    let mut cache = forward(&net, &inputs, loss)?;
    let mut trng = stream_rng(seed, STREAM_TARGETS);
    let sampled = sample_targets(&cache.outputs, loss, &mut trng);
    backward(&net, &mut cache, &sampled)?;
    Ok(RandomProblem { net, cache, loss })
}

/// Largest relative errors observed over the random instances.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelftestReport {
    pub matvec_err: f64,
    pub kfac_err: f64,
    pub coarse_err: f64,
    pub instances: usize,
}

pub const MATVEC_TOL: f64 = 1e-9;
pub const KFAC_TOL: f64 = 1e-8;
pub const COARSE_TOL: f64 = 1e-9;

/// Checks `instances` random problems against explicit oracles. Errors with
/// BadConfig naming the first failing check when a tolerance is exceeded.
pub fn run(instances: usize, base_seed: u64) -> Result<SelftestReport> {
    let mut report = SelftestReport::default();
    let lambda = 1e-2;
    for i in 0..instances {
        let problem = random_problem(base_seed + i as u64)?;
        let layout = &problem.net.layout;
        let oracle = FisherOracle::new(&problem.cache, layout, lambda);
        let f = oracle.explicit_fim_regularized()?;
        let mut rng = stream_rng(base_seed + i as u64, 7);
        let u = DenseVector::from_fn(layout.p, |_, _| rng.gen_range(-1.0..1.0));

        let fast = oracle.fisher_matvec(&u)?;
        let slow = &f * &u;
        let err = (&fast - &slow).norm() / slow.norm().max(1e-300);
        report.matvec_err = report.matvec_err.max(err);
        if err > MATVEC_TOL {
            return Err(Error::BadConfig(format!(
                "selftest instance {i}: fisher_matvec error {err:e}"
            )));
        }

        let blocks = build_blocks(&problem.cache, layout, lambda)?;
        let fast = kfac_apply_inverse(&blocks, layout, &u)?;
        let mut slow = DenseVector::zeros(layout.p);
        for (li, b) in blocks.iter().enumerate() {
            let seg = layout.segments[li];
            let sol = solve_spd(
                &b.damped_block(),
                &u.rows(seg.offset, seg.len()).clone_owned(),
                0.0,
            )?;
            slow.rows_mut(seg.offset, seg.len()).copy_from(&sol);
        }
        let err = (&fast - &slow).norm() / slow.norm().max(1e-300);
        report.kfac_err = report.kfac_err.max(err);
        if err > KFAC_TOL {
            return Err(Error::BadConfig(format!(
                "selftest instance {i}: kfac_apply_inverse error {err:e}"
            )));
        }

        for space in [build_nicolaides(layout), build_spectral(&blocks)] {
            let op = coarse_operator(&oracle, &space)?;
            // Explicit R0 (F + lambda I) R0^T.
            let m = space.total_width();
            let offs = space.offsets();
            let mut r0t = DenseMatrix::zeros(layout.p, m);
            for (li, v) in space.blocks.iter().enumerate() {
                let seg = layout.segments[li];
                r0t.view_mut((seg.offset, offs[li]), (seg.len(), v.ncols())).copy_from(v);
            }
            let slow = r0t.transpose() * &f * &r0t;
            let err = (&op.matrix - &slow).norm() / slow.norm().max(1e-300);
            report.coarse_err = report.coarse_err.max(err);
            if err > COARSE_TOL {
                return Err(Error::BadConfig(format!(
                    "selftest instance {i}: coarse_operator error {err:e}"
                )));
            }
        }
        report.instances += 1;
    }
    Ok(report)
}
