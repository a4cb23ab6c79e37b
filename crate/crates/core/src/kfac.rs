//! Per-layer Kronecker factor estimation, heuristic damping, and application
//! of the block-diagonal KFAC inverse. Each layer block approximates the
//! Fisher diagonal block as A_i ⊗ G_i with A_i the activation second moment
//! and G_i the pre-activation-derivative second moment; damping regularizes
//! each factor separately to preserve the Kronecker structure.

use crate::linalg::{kron, sym_eig, DenseMatrix, DenseVector, SymEig};
use crate::network::{BatchCache, LayerCache, Layout};
use crate::{Error, Result};

/// One layer's Kronecker-factored curvature block with its damped
/// eigendecompositions cached, so inversion and the spectral coarse space
/// share the same factorization work.
#[derive(Debug, Clone)]
pub struct KfacBlock {
    pub layer: usize,
    pub a: DenseMatrix,
    pub g: DenseMatrix,
    pub pi: f64,
    pub lambda: f64,
    /// Eigendecomposition of A_i + pi * sqrt(lambda) * I.
    pub eig_a: SymEig,
    /// Eigendecomposition of G_i + (1/pi) * sqrt(lambda) * I.
    pub eig_g: SymEig,
}

/// Second-moment Kronecker factors of layer `i` estimated on the batch.
/// Dense: A = (1/B) sum_b abar abar^T, G = (1/B) sum_b g g^T.
/// Conv: A sums over spatial locations, G additionally divides by T_i.
pub fn estimate_factors(cache: &BatchCache, i: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let batch = cache.batch;
    if batch == 0 {
        return Err(Error::EmptyBatch);
    }
    match &cache.layers[i] {
        LayerCache::Dense { abar, g, .. } => {
            let g = g.as_ref().expect("backward pass populated g");
            let a_factor = abar * abar.transpose() / batch as f64;
            let g_factor = g * g.transpose() / batch as f64;
            Ok((a_factor, g_factor))
        }
        LayerCache::Conv { patches, g, .. } => {
            let g = g.as_ref().expect("backward pass populated g");
            let t = patches[0].ncols();
            let rows_a = patches[0].nrows();
            let rows_g = g[0].nrows();
            let mut a_factor = DenseMatrix::zeros(rows_a, rows_a);
            let mut g_factor = DenseMatrix::zeros(rows_g, rows_g);
            for b in 0..batch {
                a_factor += &patches[b] * patches[b].transpose();
                g_factor += &g[b] * g[b].transpose();
            }
            a_factor /= batch as f64;
            g_factor /= (batch * t) as f64;
            Ok((a_factor, g_factor))
        }
    }
}

/// Trace-ratio damping balance pi = sqrt((tr(A)/dim_A) / (tr(G)/dim_G)),
/// computed from the undamped factors. Falls back to 1 when tr(G) vanishes
/// (dead layer).
pub fn damping_pi(a: &DenseMatrix, g: &DenseMatrix) -> f64 {
    let tr_g = g.trace();
    if tr_g <= 0.0 {
        return 1.0;
    }
    let num = a.trace() / a.nrows() as f64;
    let den = tr_g / g.nrows() as f64;
    (num / den).sqrt()
}

impl KfacBlock {
    /// Estimates factors on the batch, applies heuristic damping, and caches
    /// the damped eigendecompositions.
    pub fn build(cache: &BatchCache, i: usize, lambda: f64) -> Result<KfacBlock> {
        let (a, g) = estimate_factors(cache, i)?;
        KfacBlock::from_factors(i, a, g, lambda)
    }

    pub fn from_factors(layer: usize, a: DenseMatrix, g: DenseMatrix, lambda: f64) -> Result<KfacBlock> {
        let pi = damping_pi(&a, &g);
        let sqrt_lambda = lambda.sqrt();
        let mut a_damped = a.clone();
        for i in 0..a_damped.nrows() {
            a_damped[(i, i)] += pi * sqrt_lambda;
        }
        let mut g_damped = g.clone();
        for i in 0..g_damped.nrows() {
            g_damped[(i, i)] += sqrt_lambda / pi;
        }
        let eig_a = sym_eig(&a_damped)?;
        let eig_g = sym_eig(&g_damped)?;
        if lambda > 0.0 && (eig_a.values[0] <= 0.0 || eig_g.values[0] <= 0.0) {
            return Err(Error::Singular);
        }
        Ok(KfacBlock { layer, a, g, pi, lambda, eig_a, eig_g })
    }

    /// Damped block matrix (A + pi sqrt(lambda) I) ⊗ (G + sqrt(lambda)/pi I),
    /// materialized. Test oracle and small-p diagnostics only.
    pub fn damped_block(&self) -> DenseMatrix {
        kron(&self.eig_a.reconstruct(), &self.eig_g.reconstruct())
    }

    /// Applies the damped block inverse to one layer segment:
    /// vec(G_damped^-1 MAT(u) A_damped^-1) via the cached eigendecompositions.
    pub fn inv_apply_segment(&self, u_seg: &DenseVector, rows: usize, cols: usize) -> DenseVector {
        let m = DenseMatrix::from_column_slice(rows, cols, u_seg.as_slice());
        // G side acts on rows, A side on columns.
        let mut mid = self.eig_g.vectors.transpose() * m * &self.eig_a.vectors;
        for c in 0..cols {
            for r in 0..rows {
                mid[(r, c)] /= self.eig_g.values[r] * self.eig_a.values[c];
            }
        }
        let out = &self.eig_g.vectors * mid * self.eig_a.vectors.transpose();
        DenseVector::from_column_slice(out.as_slice())
    }

    /// Unit-norm eigenvector of the smallest eigenvalue of the damped block:
    /// the Kronecker product of the factors' smallest-eigenvalue eigenvectors
    /// (A side ⊗ G side), sign-normalized.
    pub fn smallest_eigvec(&self) -> DenseVector {
        let va = self.eig_a.vectors.column(0).clone_owned();
        let vg = self.eig_g.vectors.column(0).clone_owned();
        let na = va.len();
        let ng = vg.len();
        let mut out = DenseVector::zeros(na * ng);
        for i in 0..na {
            for j in 0..ng {
                out[i * ng + j] = va[i] * vg[j];
            }
        }
        crate::linalg::sign_normalize(&mut out);
        out
    }

    /// Smallest eigenvalue of the damped block.
    pub fn smallest_eigval(&self) -> f64 {
        self.eig_a.values[0] * self.eig_g.values[0]
    }
}

/// Builds the per-layer blocks for a whole cache.
pub fn build_blocks(cache: &BatchCache, layout: &Layout, lambda: f64) -> Result<Vec<KfacBlock>> {
    (0..layout.num_layers())
        .map(|i| KfacBlock::build(cache, i, lambda))
        .collect()
}

/// Applies the block-diagonal damped KFAC inverse to a flat gradient:
/// segment i of the result is vec(G_i_damped^-1 MAT(grad[i]) A_i_damped^-1).
pub fn kfac_apply_inverse(
    blocks: &[KfacBlock],
    layout: &Layout,
    grad: &DenseVector,
) -> Result<DenseVector> {
    if grad.len() != layout.p {
        return Err(Error::DimMismatch { expected: layout.p, got: grad.len() });
    }
    let mut out = DenseVector::zeros(layout.p);
    for (i, block) in blocks.iter().enumerate() {
        let seg = layout.segments[i];
        let result =
            block.inv_apply_segment(&layout.segment(grad, i).clone_owned(), seg.rows, seg.cols);
        out.rows_mut(seg.offset, seg.len()).copy_from(&result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::tests::{sampled_cache, tiny_conv, tiny_mlp};
    use crate::fisher::FisherOracle;
    use crate::linalg::solve_spd;
    use crate::network::{Activation, LayerSpec, LossKind};
    use crate::rng::stream_rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn single_sample_dense_factors_are_rank_one() {
        let (net, cache) = sampled_cache(tiny_mlp(), 1, LossKind::SquaredError, 20);
        let _ = &net;
        let (a, g) = estimate_factors(&cache, 0).unwrap();
        let (abar, gm) = match &cache.layers[0] {
            LayerCache::Dense { abar, g, .. } => (abar, g.as_ref().unwrap()),
            _ => unreachable!(),
        };
        assert_relative_eq!(a, abar.column(0) * abar.column(0).transpose(), epsilon = 1e-13);
        assert_relative_eq!(g, gm.column(0) * gm.column(0).transpose(), epsilon = 1e-13);
    }

    #[test]
    fn zero_inputs_leave_only_bias_in_a_factor() {
        use crate::network::{backward, forward, Network};
        let mut rng = stream_rng(21, 1);
        let net = Network::init(
            vec![LayerSpec::Dense { d_in: 3, d_out: 2, activation: Activation::Identity }],
            &mut rng,
        )
        .unwrap();
        let x = DenseMatrix::zeros(3, 4);
        let mut cache = forward(&net, &x, LossKind::SquaredError).unwrap();
        let y = DenseMatrix::from_element(2, 4, 1.0);
        backward(&net, &mut cache, &y).unwrap();
        let (a, _) = estimate_factors(&cache, 0).unwrap();
        let mut expected = DenseMatrix::zeros(4, 4);
        expected[(3, 3)] = 1.0;
        assert_relative_eq!(a, expected, epsilon = 1e-14);
    }

    #[test]
    fn conv_factors_match_brute_force_sum() {
        let (net, cache) = sampled_cache(tiny_conv(), 2, LossKind::SquaredError, 22);
        let _ = &net;
        let (a, g) = estimate_factors(&cache, 0).unwrap();
        let (patches, gm) = match &cache.layers[0] {
            LayerCache::Conv { patches, g, .. } => (patches, g.as_ref().unwrap()),
            _ => unreachable!(),
        };
        let t = patches[0].ncols();
        assert_eq!(t, 4);
        let mut a_ref = DenseMatrix::zeros(a.nrows(), a.ncols());
        let mut g_ref = DenseMatrix::zeros(g.nrows(), g.ncols());
        for b in 0..2 {
            for tt in 0..t {
                a_ref += patches[b].column(tt) * patches[b].column(tt).transpose();
                g_ref += gm[b].column(tt) * gm[b].column(tt).transpose();
            }
        }
        a_ref /= 2.0;
        g_ref /= (2 * t) as f64;
        assert_relative_eq!(a, a_ref, epsilon = 1e-12);
        assert_relative_eq!(g, g_ref, epsilon = 1e-12);
    }

    #[test]
    fn damping_pi_trace_formula() {
        let a = DenseMatrix::identity(3, 3) * 2.0;
        let g = DenseMatrix::identity(2, 2) * 8.0;
        assert_relative_eq!(damping_pi(&a, &g), 0.5, epsilon = 1e-14);
        let i3 = DenseMatrix::identity(3, 3);
        assert_relative_eq!(damping_pi(&i3, &i3), 1.0, epsilon = 1e-14);
        assert_eq!(damping_pi(&a, &DenseMatrix::zeros(2, 2)), 1.0);
    }

    #[test]
    fn damping_pi_scale_invariant() {
        let mut rng = stream_rng(23, 1);
        let m = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose();
        let n = DenseMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let g = &n * n.transpose();
        let pi = damping_pi(&a, &g);
        let pi_scaled = damping_pi(&(&a * 7.5), &(&g * 7.5));
        assert_relative_eq!(pi, pi_scaled, epsilon = 1e-12);
    }

    #[test]
    fn identity_factors_zero_damping_is_identity_preconditioner() {
        let block = KfacBlock::from_factors(
            0,
            DenseMatrix::identity(3, 3),
            DenseMatrix::identity(2, 2),
            0.0,
        )
        .unwrap();
        let mut rng = stream_rng(24, 1);
        let u = DenseVector::from_fn(6, |_, _| rng.gen_range(-1.0..1.0));
        let out = block.inv_apply_segment(&u, 2, 3);
        assert_relative_eq!(out, u, epsilon = 1e-12);
    }

    #[test]
    fn inverse_matches_explicit_kron_solve() {
        // Single dense layer, B = 1, lambda > 0: the damped block solve.
        let layers = vec![LayerSpec::Dense { d_in: 2, d_out: 2, activation: Activation::Identity }];
        let (net, cache) = sampled_cache(layers, 1, LossKind::SquaredError, 25);
        let lambda = 0.3;
        let blocks = build_blocks(&cache, &net.layout, lambda).unwrap();
        let mut rng = stream_rng(25, 9);
        let grad = DenseVector::from_fn(net.layout.p, |_, _| rng.gen_range(-1.0..1.0));
        let fast = kfac_apply_inverse(&blocks, &net.layout, &grad).unwrap();
        let explicit = blocks[0].damped_block();
        let slow = solve_spd(&explicit, &grad, 0.0).unwrap();
        let rel = (&fast - &slow).norm() / slow.norm();
        assert!(rel < 1e-8, "rel {rel}");
    }

    #[test]
    fn zero_gradient_stays_zero() {
        let (net, cache) = sampled_cache(tiny_mlp(), 2, LossKind::SquaredError, 26);
        let blocks = build_blocks(&cache, &net.layout, 0.1).unwrap();
        let out = kfac_apply_inverse(&blocks, &net.layout, &DenseVector::zeros(net.layout.p)).unwrap();
        assert_eq!(out, DenseVector::zeros(net.layout.p));
    }

    #[test]
    fn smallest_eigvec_identity_tie_rule() {
        let block = KfacBlock::from_factors(
            0,
            DenseMatrix::identity(2, 2),
            DenseMatrix::identity(2, 2),
            0.0,
        )
        .unwrap();
        let v = block.smallest_eigvec();
        let mut e = DenseVector::zeros(4);
        e[0] = 1.0;
        assert_relative_eq!(v, e, epsilon = 1e-12);
    }

    #[test]
    fn smallest_eigvec_diagonal_factors() {
        let a = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![1.0, 10.0]));
        let g = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![5.0, 2.0]));
        let block = KfacBlock::from_factors(0, a, g, 0.0).unwrap();
        let v = block.smallest_eigvec();
        // kron(e_1 of A, e_2 of G): index 0*2 + 1 = 1.
        let mut expected = DenseVector::zeros(4);
        expected[1] = 1.0;
        assert!((v.clone() - &expected).norm() < 1e-12 || (v + expected).norm() < 1e-12);
    }

    #[test]
    fn smallest_eigvec_is_block_eigenvector() {
        let mut rng = stream_rng(27, 1);
        let m = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose() + DenseMatrix::identity(3, 3) * 0.1;
        let n = DenseMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let g = &n * n.transpose() + DenseMatrix::identity(2, 2) * 0.1;
        let block = KfacBlock::from_factors(0, a, g, 0.2).unwrap();
        let v = block.smallest_eigvec();
        let explicit = block.damped_block();
        let sigma = block.smallest_eigval();
        assert!((explicit * &v - &v * sigma).norm() <= 1e-8);
    }

    #[test]
    fn undamped_single_layer_block_equals_fim() {
        // Single dense layer, B = 1: A ⊗ G equals the explicit FIM exactly.
        let layers = vec![LayerSpec::Dense { d_in: 2, d_out: 2, activation: Activation::Identity }];
        let (net, cache) = sampled_cache(layers, 1, LossKind::SquaredError, 28);
        let (a, g) = estimate_factors(&cache, 0).unwrap();
        let oracle = FisherOracle::new(&cache, &net.layout, 0.0);
        let f = oracle.explicit_fim().unwrap();
        assert_relative_eq!(kron(&a, &g), f, epsilon = 1e-12);
    }

    #[test]
    fn inverse_round_trip_per_layer() {
        let (net, cache) = sampled_cache(tiny_conv(), 3, LossKind::SquaredError, 29);
        let blocks = build_blocks(&cache, &net.layout, 0.2).unwrap();
        let mut rng = stream_rng(29, 9);
        let grad = DenseVector::from_fn(net.layout.p, |_, _| rng.gen_range(-1.0..1.0));
        let inv = kfac_apply_inverse(&blocks, &net.layout, &grad).unwrap();
        for (i, block) in blocks.iter().enumerate() {
            let seg = net.layout.segments[i];
            let explicit = block.damped_block();
            let back = explicit * inv.rows(seg.offset, seg.len()).clone_owned();
            let gseg = net.layout.segment(&grad, i).clone_owned();
            let rel = (back - &gseg).norm() / gseg.norm();
            assert!(rel < 1e-8, "layer {i} rel {rel}");
        }
    }

    #[test]
    fn damped_block_spectrum_is_eigenvalue_products() {
        let mut rng = stream_rng(30, 1);
        let m = DenseMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let a = &m * m.transpose();
        let n = DenseMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        let g = &n * n.transpose();
        let block = KfacBlock::from_factors(0, a, g, 0.4).unwrap();
        let explicit = block.damped_block();
        let eig = sym_eig(&explicit).unwrap();
        let mut products: Vec<f64> = block
            .eig_a
            .values
            .iter()
            .flat_map(|sa| block.eig_g.values.iter().map(move |sg| sa * sg))
            .collect();
        products.sort_by(|x, y| x.partial_cmp(y).unwrap());
        for (computed, expected) in eig.values.iter().zip(&products) {
            assert_relative_eq!(computed, expected, epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}
