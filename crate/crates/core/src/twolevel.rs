//! Two-level coarse corrections to KFAC: block-structured coarse spaces
//! (Nicolaides, spectral, Krylov, residuals, Taylor), matrix-free assembly of
//! the coarse operator R0 F_bullet R0^T, the optimal coefficients beta*, the
//! additive corrector of the prior method, and the F_bullet-norm gap
//! diagnostic E(beta*) - E(0).

use crate::fisher::{FisherOracle, Residual};
use crate::kfac::KfacBlock;
use crate::linalg::{mgs_orthonormalize, solve_spd, DenseMatrix, DenseVector};
use crate::network::Layout;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseKind {
    Nicolaides,
    Spectral,
    KrylovNico,
    KrylovResidu,
    Residuals,
    Taylor(usize),
    /// V_i = I for every layer: the coarse space is the whole parameter
    /// space. Debug/oracle use only.
    FullSpaceDebug,
}

/// Block-structured coarse space: R0^T is block-diagonal with per-layer
/// column blocks V_i (p_i x m_i), all orthonormalized.
#[derive(Debug, Clone)]
pub struct CoarseSpace {
    pub kind: CoarseKind,
    pub blocks: Vec<DenseMatrix>,
}

impl CoarseSpace {
    pub fn total_width(&self) -> usize {
        self.blocks.iter().map(|v| v.ncols()).sum()
    }

    /// Column offsets of each layer block inside beta.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for v in &self.blocks {
            offs.push(acc);
            acc += v.ncols();
        }
        offs
    }

    /// R0 x: per-layer restrictions V_i^T x[i], stacked.
    pub fn restrict(&self, layout: &Layout, x: &DenseVector) -> DenseVector {
        let mut out = DenseVector::zeros(self.total_width());
        let offs = self.offsets();
        for (i, v) in self.blocks.iter().enumerate() {
            let seg = layout.segments[i];
            let xi = x.rows(seg.offset, seg.len());
            out.rows_mut(offs[i], v.ncols())
                .copy_from(&(v.transpose() * xi));
        }
        out
    }

    /// R0^T beta: segment i receives V_i beta[block i].
    pub fn prolong(&self, layout: &Layout, beta: &DenseVector) -> DenseVector {
        let mut out = DenseVector::zeros(layout.p);
        let offs = self.offsets();
        for (i, v) in self.blocks.iter().enumerate() {
            let seg = layout.segments[i];
            let bi = beta.rows(offs[i], v.ncols());
            out.rows_mut(seg.offset, seg.len()).copy_from(&(v * bi));
        }
        out
    }
}

fn ones_column(p: usize) -> DenseMatrix {
    DenseMatrix::from_element(p, 1, 1.0 / (p as f64).sqrt())
}

fn columns_to_block(cols: Vec<DenseVector>, p: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(p, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Nicolaides coarse space: one normalized all-ones column per layer.
pub fn build_nicolaides(layout: &Layout) -> CoarseSpace {
    CoarseSpace {
        kind: CoarseKind::Nicolaides,
        blocks: layout.segments.iter().map(|s| ones_column(s.len())).collect(),
    }
}

/// Spectral coarse space: per layer, the eigenvector of the smallest
/// eigenvalue of the damped KFAC block.
pub fn build_spectral(blocks: &[KfacBlock]) -> CoarseSpace {
    CoarseSpace {
        kind: CoarseKind::Spectral,
        blocks: blocks
            .iter()
            .map(|b| {
                let v = b.smallest_eigvec();
                let p = v.len();
                columns_to_block(vec![v], p)
            })
            .collect(),
    }
}

/// Krylov coarse space: per layer, the orthonormalized span of the seed and
/// one inverse-power iterate of the damped KFAC block. If the two columns
/// are collinear within 1e-10 the layer keeps a single column.
pub fn build_krylov(
    kind: CoarseKind,
    blocks: &[KfacBlock],
    layout: &Layout,
    seeds: &[DenseVector],
) -> Result<CoarseSpace> {
    let mut out = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let seg = layout.segments[i];
        let seed = &seeds[i];
        if seed.norm() == 0.0 {
            return Err(Error::ZeroSeed { layer: i });
        }
        let iterate = block.inv_apply_segment(seed, seg.rows, seg.cols);
        let basis = mgs_orthonormalize(&[seed.clone(), iterate]);
        out.push(columns_to_block(basis, seg.len()));
    }
    Ok(CoarseSpace { kind, blocks: out })
}

/// Per-layer Nicolaides seeds (unnormalized ones work too; the normalized
/// form keeps the spans identical).
pub fn nicolaides_seeds(layout: &Layout) -> Vec<DenseVector> {
    layout
        .segments
        .iter()
        .map(|s| DenseVector::from_element(s.len(), 1.0 / (s.len() as f64).sqrt()))
        .collect()
}

/// Residual seeds: the raw per-layer residual segments, with an all-ones
/// fallback for layers where the residual vanishes.
pub fn residual_seeds(layout: &Layout, r: &Residual) -> Vec<DenseVector> {
    layout
        .segments
        .iter()
        .map(|s| {
            let seg = r.r.rows(s.offset, s.len()).clone_owned();
            if seg.norm() > 0.0 {
                seg
            } else {
                DenseVector::from_element(s.len(), 1.0 / (s.len() as f64).sqrt())
            }
        })
        .collect()
}

/// Residuals coarse space: V_i = normalize([F_KFAC]_ii_damped^-1 r[i]);
/// layers with a vanishing residual segment fall back to Nicolaides columns.
pub fn build_residuals(blocks: &[KfacBlock], layout: &Layout, r: &Residual) -> CoarseSpace {
    let mut out = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let seg = layout.segments[i];
        let ri = r.r.rows(seg.offset, seg.len()).clone_owned();
        if ri.norm() == 0.0 {
            out.push(ones_column(seg.len()));
            continue;
        }
        let pre = block.inv_apply_segment(&ri, seg.rows, seg.cols);
        let n = pre.norm();
        if n == 0.0 {
            out.push(ones_column(seg.len()));
        } else {
            out.push(columns_to_block(vec![pre / n], seg.len()));
        }
    }
    CoarseSpace { kind: CoarseKind::Residuals, blocks: out }
}

/// Taylor coarse space of order q: per layer, the orthonormalized segments of
/// w_1 = F_KFAC_damped^-1 r and w_{j+1} = F_KFAC_damped^-1 F_bullet w_j.
/// Order 1 reproduces the residuals spans.
pub fn build_taylor(
    blocks: &[KfacBlock],
    oracle: &FisherOracle,
    r: &Residual,
    q: usize,
) -> Result<CoarseSpace> {
    let layout = oracle.layout;
    if r.r.norm() == 0.0 {
        let mut space = build_residuals(blocks, layout, r);
        space.kind = CoarseKind::Taylor(q);
        return Ok(space);
    }
    let mut iterates = Vec::with_capacity(q);
    let mut w = crate::kfac::kfac_apply_inverse(blocks, layout, &r.r)?;
    iterates.push(w.clone());
    for _ in 1..q {
        let fw = oracle.fisher_matvec(&w)?;
        w = crate::kfac::kfac_apply_inverse(blocks, layout, &fw)?;
        iterates.push(w.clone());
    }
    let mut out = Vec::with_capacity(layout.num_layers());
    for seg in &layout.segments {
        let cols: Vec<DenseVector> = iterates
            .iter()
            .map(|wj| wj.rows(seg.offset, seg.len()).clone_owned())
            .collect();
        let basis = mgs_orthonormalize(&cols);
        if basis.is_empty() {
            out.push(ones_column(seg.len()));
        } else {
            out.push(columns_to_block(basis, seg.len()));
        }
    }
    Ok(CoarseSpace { kind: CoarseKind::Taylor(q), blocks: out })
}

/// Full-space debug coarse space: V_i = I_{p_i}.
pub fn build_full_space_debug(layout: &Layout) -> CoarseSpace {
    CoarseSpace {
        kind: CoarseKind::FullSpaceDebug,
        blocks: layout
            .segments
            .iter()
            .map(|s| DenseMatrix::identity(s.len(), s.len()))
            .collect(),
    }
}

/// The m x m coarse operator R0 F_bullet R0^T.
#[derive(Debug, Clone)]
pub struct CoarseOperator {
    pub matrix: DenseMatrix,
    pub lambda: f64,
}

/// Assembles the coarse operator matrix-free: block (i, j) is
/// (1/B) (J_i^T V_i)^T (J_j^T V_j), with lambda V_i^T V_i added on the
/// diagonal blocks only. The result is symmetrized.
pub fn coarse_operator(oracle: &FisherOracle, space: &CoarseSpace) -> Result<CoarseOperator> {
    let m = space.total_width();
    let batch = oracle.batch() as f64;
    let offs = space.offsets();

    // Per-layer restricted Jacobian products Y_i = J_i^T V_i in R^{B x m_i}.
    let mut y: Vec<DenseMatrix> = Vec::with_capacity(space.blocks.len());
    for (i, v) in space.blocks.iter().enumerate() {
        let mut yi = DenseMatrix::zeros(oracle.batch(), v.ncols());
        for c in 0..v.ncols() {
            yi.set_column(c, &oracle.jt_apply_layer(i, &v.column(c).clone_owned()));
        }
        y.push(yi);
    }

    let mut fc = DenseMatrix::zeros(m, m);
    for i in 0..space.blocks.len() {
        for j in 0..space.blocks.len() {
            let block = y[i].transpose() * &y[j] / batch;
            fc.view_mut((offs[i], offs[j]), (y[i].ncols(), y[j].ncols()))
                .copy_from(&block);
        }
        let vtv = space.blocks[i].transpose() * &space.blocks[i];
        let mut diag = fc.view_mut((offs[i], offs[i]), (y[i].ncols(), y[i].ncols()));
        diag += vtv * oracle.lambda;
    }
    let sym = (&fc + fc.transpose()) * 0.5;
    Ok(CoarseOperator { matrix: sym, lambda: oracle.lambda })
}

/// Optimal coarse coefficients beta* = (R0 F_bullet R0^T)^-1 R0 r, the
/// minimizer of the F_bullet-norm error of the corrected increment.
pub fn beta_star(
    op: &CoarseOperator,
    space: &CoarseSpace,
    layout: &Layout,
    r: &Residual,
) -> Result<DenseVector> {
    let rhs = space.restrict(layout, &r.r);
    solve_spd(&op.matrix, &rhs, 0.0)
}

/// Additive-corrector coefficients of the prior method: the gradient takes
/// the place of the residual.
pub fn beta_tko(
    op: &CoarseOperator,
    space: &CoarseSpace,
    layout: &Layout,
    grad: &DenseVector,
) -> Result<DenseVector> {
    let rhs = space.restrict(layout, grad);
    solve_spd(&op.matrix, &rhs, 0.0)
}

/// delta_2L = delta_kfac + R0^T beta.
pub fn apply_correction(
    delta_kfac: &DenseVector,
    space: &CoarseSpace,
    layout: &Layout,
    beta: &DenseVector,
) -> DenseVector {
    delta_kfac + space.prolong(layout, beta)
}

/// Gap diagnostic E(beta) - E(0) = <R0 F R0^T beta, beta> - 2 <R0^T beta, r>,
/// the change in squared F_bullet-distance to the exact NGD increment. For
/// the optimal beta* this is never positive. The two-term form is computed
/// as stated so it also serves the additive corrector's coefficients.
pub fn gap(
    op: &CoarseOperator,
    space: &CoarseSpace,
    layout: &Layout,
    beta: &DenseVector,
    r: &Residual,
) -> f64 {
    let quad = (&op.matrix * beta).dot(beta);
    let cross = space.restrict(layout, &r.r).dot(beta);
    quad - 2.0 * cross
}
