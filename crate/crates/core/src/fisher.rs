//! Exact and matrix-free regularized Fisher operators built from the
//! factored per-sample Jacobian captured in a `BatchCache`. With J the
//! p x B matrix of per-sample gradients, F = (1/B) J J^T and the regularized
//! operator is F + lambda I, applied without ever forming J.

use crate::linalg::{DenseMatrix, DenseVector};
use crate::network::{BatchCache, LayerCache, Layout};
use crate::{Error, Result};

/// Size guard for materializing the explicit Fisher matrix.
pub const EXPLICIT_FIM_GUARD: usize = 5000;

/// Matrix-free handle on the regularized Fisher operator of one mini-batch.
/// The cache must hold pre-activation derivatives from a backward pass with
/// targets sampled from the model predictive distribution.
pub struct FisherOracle<'a> {
    pub cache: &'a BatchCache,
    pub layout: &'a Layout,
    pub lambda: f64,
}

/// Residual r = grad - F_bullet * delta of an approximate solve.
#[derive(Debug, Clone)]
pub struct Residual {
    pub r: DenseVector,
}

impl<'a> FisherOracle<'a> {
    pub fn new(cache: &'a BatchCache, layout: &'a Layout, lambda: f64) -> FisherOracle<'a> {
        FisherOracle { cache, layout, lambda }
    }

    pub fn batch(&self) -> usize {
        self.cache.batch
    }

    fn g_dense(layer: &LayerCache) -> (&DenseMatrix, &DenseMatrix) {
        match layer {
            LayerCache::Dense { abar, g, .. } => {
                (abar, g.as_ref().expect("backward pass populated g"))
            }
            _ => unreachable!(),
        }
    }

    fn g_conv(layer: &LayerCache) -> (&Vec<DenseMatrix>, &Vec<DenseMatrix>) {
        match layer {
            LayerCache::Conv { patches, g, .. } => {
                (patches, g.as_ref().expect("backward pass populated g"))
            }
            _ => unreachable!(),
        }
    }

    /// Contribution of layer `i` to `J^T u`: for each sample b the term
    /// `<vec(DW_i^(b)), u[i]>`, computed as `g^T MAT(u[i]) abar` without
    /// forming J.
    pub fn jt_apply_layer(&self, i: usize, u_seg: &DenseVector) -> DenseVector {
        let seg = self.layout.segments[i];
        let m = DenseMatrix::from_column_slice(seg.rows, seg.cols, u_seg.as_slice());
        let batch = self.batch();
        let mut v = DenseVector::zeros(batch);
        match &self.cache.layers[i] {
            layer @ LayerCache::Dense { .. } => {
                let (abar, g) = Self::g_dense(layer);
                let tmp = &m * abar; // d_out x B
                for b in 0..batch {
                    v[b] = g.column(b).dot(&tmp.column(b));
                }
            }
            layer @ LayerCache::Conv { .. } => {
                let (patches, g) = Self::g_conv(layer);
                for b in 0..batch {
                    let tmp = &m * &patches[b]; // c_out x T
                    v[b] = g[b].iter().zip(tmp.iter()).map(|(a, b)| a * b).sum();
                }
            }
        }
        v
    }

    /// `J^T u` in R^B, summed over layers.
    pub fn jt_apply(&self, u: &DenseVector) -> Result<DenseVector> {
        if u.len() != self.layout.p {
            return Err(Error::DimMismatch { expected: self.layout.p, got: u.len() });
        }
        let mut v = DenseVector::zeros(self.batch());
        for i in 0..self.layout.num_layers() {
            v += self.jt_apply_layer(i, &self.layout.segment(u, i).clone_owned());
        }
        Ok(v)
    }

    /// Layer-`i` segment of `J v`: the weighted sum of per-sample gradients,
    /// `[(1 v^T) ⊙ G] Abar^T` for dense layers and the duplicated-weights
    /// variant for conv layers.
    pub fn j_apply_layer(&self, i: usize, v: &DenseVector) -> DenseVector {
        let seg = self.layout.segments[i];
        let batch = self.batch();
        match &self.cache.layers[i] {
            layer @ LayerCache::Dense { .. } => {
                let (abar, g) = Self::g_dense(layer);
                let mut weighted = g.clone();
                for b in 0..batch {
                    weighted.column_mut(b).scale_mut(v[b]);
                }
                let m = weighted * abar.transpose();
                DenseVector::from_column_slice(m.as_slice())
            }
            layer @ LayerCache::Conv { .. } => {
                let (patches, g) = Self::g_conv(layer);
                let mut m = DenseMatrix::zeros(seg.rows, seg.cols);
                for b in 0..batch {
                    m += (&g[b] * patches[b].transpose()) * v[b];
                }
                DenseVector::from_column_slice(m.as_slice())
            }
        }
    }

    /// `J v` in R^p.
    pub fn j_apply(&self, v: &DenseVector) -> Result<DenseVector> {
        if v.len() != self.batch() {
            return Err(Error::DimMismatch { expected: self.batch(), got: v.len() });
        }
        let mut out = DenseVector::zeros(self.layout.p);
        for i in 0..self.layout.num_layers() {
            let seg = self.layout.segments[i];
            out.rows_mut(seg.offset, seg.len())
                .copy_from(&self.j_apply_layer(i, v));
        }
        Ok(out)
    }

    /// `F_bullet u = (1/B) J J^T u + lambda u`.
    pub fn fisher_matvec(&self, u: &DenseVector) -> Result<DenseVector> {
        let v = self.jt_apply(u)?;
        let mut out = self.j_apply(&v)?;
        out /= self.batch() as f64;
        out += u * self.lambda;
        Ok(out)
    }

    /// Per-sample flat gradient `Dtheta^(b)` reconstructed from the cache.
    pub fn per_sample_grad(&self, b: usize) -> DenseVector {
        let mut out = DenseVector::zeros(self.layout.p);
        for i in 0..self.layout.num_layers() {
            let seg = self.layout.segments[i];
            let dw = match &self.cache.layers[i] {
                layer @ LayerCache::Dense { .. } => {
                    let (abar, g) = Self::g_dense(layer);
                    g.column(b) * abar.column(b).transpose()
                }
                layer @ LayerCache::Conv { .. } => {
                    let (patches, g) = Self::g_conv(layer);
                    &g[b] * patches[b].transpose()
                }
            };
            out.rows_mut(seg.offset, seg.len()).copy_from_slice(dw.as_slice());
        }
        out
    }

    /// Materializes the unregularized Monte-Carlo Fisher estimate
    /// F = (1/B) sum_b Dtheta^(b) (Dtheta^(b))^T. Guarded; intended for
    /// test oracles and desk-scale exact NGD only.
    pub fn explicit_fim(&self) -> Result<DenseMatrix> {
        let p = self.layout.p;
        if p > EXPLICIT_FIM_GUARD {
            return Err(Error::SizeGuard { p, guard: EXPLICIT_FIM_GUARD });
        }
        let mut f = DenseMatrix::zeros(p, p);
        for b in 0..self.batch() {
            let d = self.per_sample_grad(b);
            f.syger(1.0 / self.batch() as f64, &d, &d, 1.0);
        }
        // syger fills the lower triangle; mirror it.
        for i in 0..p {
            for j in (i + 1)..p {
                f[(i, j)] = f[(j, i)];
            }
        }
        Ok(f)
    }

    /// Explicit regularized Fisher F + lambda I (same guard).
    pub fn explicit_fim_regularized(&self) -> Result<DenseMatrix> {
        let mut f = self.explicit_fim()?;
        for i in 0..self.layout.p {
            f[(i, i)] += self.lambda;
        }
        Ok(f)
    }

    /// r = grad - F_bullet * delta.
    pub fn residual(&self, grad: &DenseVector, delta: &DenseVector) -> Result<Residual> {
        Ok(Residual { r: grad - self.fisher_matvec(delta)? })
    }
}
