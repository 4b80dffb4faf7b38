//! Dense row-major tensors in double precision.
//!
//! This is the universal numeric carrier for the whole crate: matrices of
//! queries/keys/values, feature maps `C×h×w`, attention maps `n×n`. Storage
//! is a flat `Vec<f64>` in row-major order; no stride tricks, no views. All
//! verification paths run in `f64` — the equivalence tolerances downstream
//! (1e-9 and tighter) need the headroom.
//!
//! Values are checked finite at construction and after the operations whose
//! contracts demand it; NaN/Inf is an error, never silently propagated.

use crate::error::{Error, Result};

/// Dense multi-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and flat row-major data.
    ///
    /// Fails if the element count disagrees with the shape, any extent is
    /// zero, or any value is non-finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, data has {}",
                data.len()
            )));
        }
        let t = Tensor { shape: shape.to_vec(), data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0), "bad shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// 2-D tensor from row slices (test convenience).
    pub fn from_rows(rows: &[&[f64]]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Shape("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("from_rows: ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert_eq!(self.rank(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        debug_assert!(y < h && x < w);
        self.data[(c * h + y) * w + x] = v;
    }

    /// Row `i` of a 2-D tensor as a slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// Channel plane `c` of a 3-D tensor as a slice of length `h*w`.
    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 3);
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{ctx}: element {pos} = {}", self.data[pos])));
        }
        Ok(())
    }

    /// Matrix product of two 2-D tensors, `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::Shape("matmul: operands must be 2-D".into()));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner extents {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (l, &a) in arow.iter().enumerate() {
                let brow = &other.data[l * n..(l + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out.ensure_finite("matmul output")?;
        Ok(out)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape("transpose: tensor must be 2-D".into()));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }

    /// Rescale every row of a 2-D tensor to unit Euclidean norm.
    /// Zero rows map to zero rows.
    pub fn normalize_rows(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "normalize_rows: tensor must be 2-D");
        let mut out = self.clone();
        let cols = self.shape[1];
        for i in 0..self.shape[0] {
            let row = &mut out.data[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }

    /// Number of singular values above `tol` times the largest one.
    pub fn rank_estimate(&self, tol: f64) -> Result<usize> {
        if !(tol > 0.0) {
            return Err(Error::Config(format!("rank_estimate: tol must be > 0, got {tol}")));
        }
        self.ensure_finite("rank_estimate input")?;
        if self.rank() != 2 {
            return Err(Error::Shape("rank_estimate: tensor must be 2-D".into()));
        }
        let sv = crate::svd::singular_values(self)?;
        let largest = sv.first().copied().unwrap_or(0.0);
        if largest == 0.0 {
            return Ok(0);
        }
        Ok(sv.iter().filter(|&&s| s > tol * largest).count())
    }

    /// Bilinear interpolation of channel `channel` at real coordinates
    /// `(y, x)`. Points outside the grid contribute zero (zero padding);
    /// integer coordinates return the stored value exactly.
    pub fn bilinear_sample(&self, y: f64, x: f64, channel: usize) -> Result<f64> {
        if self.rank() != 3 {
            return Err(Error::Shape("bilinear_sample: tensor must be 3-D".into()));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if channel >= c {
            return Err(Error::Guard(format!("bilinear_sample: channel {channel} >= {c}")));
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let fetch = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
                0.0
            } else {
                self.at3(channel, yy as usize, xx as usize)
            }
        };
        let v00 = fetch(y0, x0);
        let v01 = fetch(y0, x0 + 1.0);
        let v10 = fetch(y0 + 1.0, x0);
        let v11 = fetch(y0 + 1.0, x0 + 1.0);
        Ok(v00 * (1.0 - fy) * (1.0 - fx)
            + v01 * (1.0 - fy) * fx
            + v10 * fy * (1.0 - fx)
            + v11 * fy * fx)
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("add: {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("sub: {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Every element multiplied by `factor`.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// Frobenius norm over all elements.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Euclidean norm of a slice.
#[inline]
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product of two equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn new_rejects_shape_mismatch_and_nonfinite() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
        let id = Tensor::identity(3);
        assert_eq!(id.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&id).unwrap(), a);

        let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let z = Tensor::zeros(&[2, 1]);
        let prod = b.matmul(&z).unwrap();
        assert_eq!(prod, Tensor::zeros(&[2, 1]));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        let mut rng = Rng::new(11);
        let a = rng.normal_tensor(&[8, 4]);
        let b = rng.normal_tensor(&[4, 8]);
        let fast = a.matmul(&b).unwrap();
        // independent i-j-l reference
        let mut reference = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0;
                for l in 0..4 {
                    acc += a.at2(i, l) * b.at2(l, j);
                }
                reference.set2(i, j, acc);
            }
        }
        assert!(fast.max_abs_diff(&reference).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_is_associative_numerically() {
        // This re-association is what buys the linear-time attention path.
        let mut rng = Rng::new(5);
        let a = rng.normal_tensor(&[32, 16]);
        let b = rng.normal_tensor(&[16, 16]);
        let c = rng.normal_tensor(&[16, 32]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() < 1e-10);
    }

    #[test]
    fn normalize_rows_basic_and_zero_row() {
        let x = Tensor::from_rows(&[&[3.0, 4.0], &[0.0, 0.0]]).unwrap();
        let n = x.normalize_rows();
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn normalize_rows_unit_norm_and_idempotent() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor(&[6, 5]);
        let n = x.normalize_rows();
        for i in 0..6 {
            assert!((norm(n.row(i)) - 1.0).abs() < 1e-12);
        }
        let twice = n.normalize_rows();
        assert!(n.max_abs_diff(&twice).unwrap() < 1e-12);
    }

    #[test]
    fn rank_estimate_outer_product_and_identity() {
        let u = Tensor::from_rows(&[&[1.0], &[2.0], &[-1.0]]).unwrap();
        let v = Tensor::from_rows(&[&[0.5, 1.5, 2.5, -3.0]]).unwrap();
        let m = u.matmul(&v).unwrap();
        assert_eq!(m.rank_estimate(1e-8).unwrap(), 1);
        assert_eq!(Tensor::identity(5).rank_estimate(1e-8).unwrap(), 5);
        assert!(Tensor::zeros(&[4, 4]).rank_estimate(1e-8).unwrap() == 0);
        assert!(Tensor::identity(2).rank_estimate(0.0).is_err());
    }

    #[test]
    fn rank_estimate_one_plus_qkt_bound() {
        // ones + Q·Kᵀ has rank at most 1 + min(rank Q, rank K).
        let mut rng = Rng::new(7);
        let q = rng.normal_tensor(&[32, 4]);
        let k = rng.normal_tensor(&[32, 4]);
        let qkt = q.matmul(&k.transpose().unwrap()).unwrap();
        let m = Tensor::filled(&[32, 32], 1.0).add(&qkt).unwrap();
        assert!(m.rank_estimate(1e-8).unwrap() <= 5);
    }

    #[test]
    fn rank_estimate_invariant_under_row_permutation() {
        let mut rng = Rng::new(19);
        let q = rng.normal_tensor(&[12, 3]);
        let k = rng.normal_tensor(&[12, 3]);
        let m = q.matmul(&k.transpose().unwrap()).unwrap();
        let base = m.rank_estimate(1e-8).unwrap();
        // reverse the rows
        let rows: Vec<&[f64]> = (0..12).rev().map(|i| m.row(i)).collect();
        let perm = Tensor::from_rows(&rows).unwrap();
        assert_eq!(perm.rank_estimate(1e-8).unwrap(), base);
    }

    #[test]
    fn bilinear_sample_integer_and_midpoint() {
        let mut f = Tensor::zeros(&[2, 3, 3]);
        for y in 0..3 {
            for x in 0..3 {
                f.set3(0, y, x, (y * 3 + x) as f64);
                f.set3(1, y, x, 7.0);
            }
        }
        assert_eq!(f.bilinear_sample(1.0, 2.0, 0).unwrap(), 5.0);
        // constant region: midpoint of equal neighbors is that value
        assert_eq!(f.bilinear_sample(0.5, 1.0, 1).unwrap(), 7.0);
        // ramp image: (1.5, 1.5) averages the four neighbors 4,5,7,8
        assert!((f.bilinear_sample(1.5, 1.5, 0).unwrap() - 6.0).abs() < 1e-15);
        // zero padding outside the grid
        assert_eq!(f.bilinear_sample(-1.0, 0.0, 0).unwrap(), 0.0);
        assert_eq!(f.bilinear_sample(0.0, 2.5, 1).unwrap(), 7.0 * 0.5);
        assert!(f.bilinear_sample(0.0, 0.0, 2).is_err());
    }

    #[test]
    fn bilinear_sample_closed_form_interior() {
        let mut f = Tensor::zeros(&[1, 4, 4]);
        for y in 0..4 {
            for x in 0..4 {
                f.set3(0, y, x, 2.0 * y as f64 + 3.0 * x as f64);
            }
        }
        // linear ramp is reproduced exactly by bilinear interpolation
        let got = f.bilinear_sample(1.5, 2.5, 0).unwrap();
        assert!((got - (2.0 * 1.5 + 3.0 * 2.5)).abs() < 1e-14);
    }
}
