//! Convolution by unrolling (im2col): the input image is rearranged into a
//! patch matrix so the layer becomes a single matrix product, and col2im
//! scatters gradients back for the backward pass.

use crate::linalg::DenseMatrix;

/// Geometry of an unrolled convolution layer. The weight matrix has shape
/// `out_channels x (in_channels * k_h * k_w + 1)`, each row a flattened
/// filter plus a bias entry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k_w) / self.stride + 1
    }

    /// Number of input spatial locations.
    pub fn t_in(&self) -> usize {
        self.in_h * self.in_w
    }

    /// Number of output spatial locations.
    pub fn t_out(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Patch length without the bias entry: in_channels * k_h * k_w.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.k_h * self.k_w
    }
}

/// Extracts the patch matrix from an input map `a` of shape
/// `in_channels x t_in`. Column `t` is the flattened receptive field around
/// output location `t` with a trailing 1 for the bias. Spatial locations are
/// indexed row-major (`t = y * w + x`); within a patch, entries are ordered
/// channel-major then kernel-row-major.
pub fn im2col(a: &DenseMatrix, spec: &ConvSpec) -> DenseMatrix {
    let delta = spec.k_h * spec.k_w;
    let rows = spec.patch_len() + 1;
    let (out_h, out_w) = (spec.out_h(), spec.out_w());
    let mut p = DenseMatrix::zeros(rows, out_h * out_w);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let t = oy * out_w + ox;
            for dy in 0..spec.k_h {
                for dx in 0..spec.k_w {
                    let iy = (oy * spec.stride + dy) as isize - spec.pad as isize;
                    let ix = (ox * spec.stride + dx) as isize - spec.pad as isize;
                    if iy < 0 || ix < 0 || iy >= spec.in_h as isize || ix >= spec.in_w as isize {
                        continue;
                    }
                    let t_in = iy as usize * spec.in_w + ix as usize;
                    for ch in 0..spec.in_channels {
                        p[(ch * delta + dy * spec.k_w + dx, t)] = a[(ch, t_in)];
                    }
                }
            }
            p[(rows - 1, t)] = 1.0;
        }
    }
    p
}

/// Adjoint of the patch extraction (bias row excluded): scatters a
/// `patch_len x t_out` matrix of patch-space values back onto the
/// `in_channels x t_in` input map, accumulating over overlaps.
pub fn col2im(d: &DenseMatrix, spec: &ConvSpec) -> DenseMatrix {
    let delta = spec.k_h * spec.k_w;
    let (out_h, out_w) = (spec.out_h(), spec.out_w());
    let mut a = DenseMatrix::zeros(spec.in_channels, spec.t_in());
    for oy in 0..out_h {
        for ox in 0..out_w {
            let t = oy * out_w + ox;
            for dy in 0..spec.k_h {
                for dx in 0..spec.k_w {
                    let iy = (oy * spec.stride + dy) as isize - spec.pad as isize;
                    let ix = (ox * spec.stride + dx) as isize - spec.pad as isize;
                    if iy < 0 || ix < 0 || iy >= spec.in_h as isize || ix >= spec.in_w as isize {
                        continue;
                    }
                    let t_in = iy as usize * spec.in_w + ix as usize;
                    for ch in 0..spec.in_channels {
                        a[(ch, t_in)] += d[(ch * delta + dy * spec.k_w + dx, t)];
                    }
                }
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn im2col_shapes_and_bias_row() {
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            in_h: 4,
            in_w: 4,
            k_h: 3,
            k_w: 3,
            stride: 1,
            pad: 1,
        };
        let a = DenseMatrix::from_fn(2, 16, |r, c| (r * 16 + c) as f64);
        let p = im2col(&a, &spec);
        assert_eq!(p.shape(), (2 * 9 + 1, 16));
        for t in 0..16 {
            assert_eq!(p[(18, t)], 1.0);
        }
    }

    #[test]
    fn padding_zeroes_outside_entries() {
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            in_h: 2,
            in_w: 2,
            k_h: 3,
            k_w: 3,
            stride: 1,
            pad: 1,
        };
        let a = DenseMatrix::from_element(1, 4, 1.0);
        let p = im2col(&a, &spec);
        // Top-left output location: corner patch entries fall outside.
        assert_eq!(p[(0, 0)], 0.0);
        assert_eq!(p[(4, 0)], 1.0); // center of the kernel hits (0,0)
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(a), d> = <a, col2im(d)> for the bias-free rows.
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 1,
            in_h: 3,
            in_w: 4,
            k_h: 2,
            k_w: 2,
            stride: 1,
            pad: 1,
        };
        let mut rng = StdRng::seed_from_u64(4);
        let a = DenseMatrix::from_fn(2, 12, |_, _| rng.gen_range(-1.0..1.0));
        let d = DenseMatrix::from_fn(spec.patch_len(), spec.t_out(), |_, _| rng.gen_range(-1.0..1.0));
        let p = im2col(&a, &spec);
        let p_nobias = p.rows(0, spec.patch_len()).clone_owned();
        let lhs = DVector::from_column_slice(p_nobias.as_slice())
            .dot(&DVector::from_column_slice(d.as_slice()));
        let rhs = DVector::from_column_slice(a.as_slice())
            .dot(&DVector::from_column_slice(col2im(&d, &spec).as_slice()));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
