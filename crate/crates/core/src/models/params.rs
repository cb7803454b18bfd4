//! Layered parameter containers exchanged between server and clients.

use std::io::{Read, Write};

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Ordered list of dense layers. One layer is designated as the "first layer",
/// the one the server re-weights after aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Array2<f64>>,
    first_layer_index: usize,
}

impl ParamSet {
    pub fn new(layers: Vec<Array2<f64>>, first_layer_index: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("parameter set needs at least one layer".into()));
        }
        if first_layer_index >= layers.len() {
            return Err(Error::InvalidArgument(format!(
                "first layer index {first_layer_index} out of range for {} layers",
                layers.len()
            )));
        }
        Ok(Self { layers, first_layer_index })
    }

    /// Single-layer set holding a flat vector as a column.
    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        let layer = Array2::from_shape_vec((n, 1), values).expect("column shape");
        Self { layers: vec![layer], first_layer_index: 0 }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            layers: other.layers.iter().map(|l| Array2::zeros(l.raw_dim())).collect(),
            first_layer_index: other.first_layer_index,
        }
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &Array2<f64> {
        &self.layers[i]
    }

    pub fn first_layer_index(&self) -> usize {
        self.first_layer_index
    }

    pub fn first_layer(&self) -> &Array2<f64> {
        &self.layers[self.first_layer_index]
    }

    pub fn first_layer_mut(&mut self) -> &mut Array2<f64> {
        &mut self.layers[self.first_layer_index]
    }

    pub fn shape_signature(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.dim()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn check_same_shape(&self, other: &ParamSet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape_signature(), other.shape_signature())))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|v| v.is_finite()))
    }

    /// Flattened copy of every entry, layer by layer in row-major order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.iter().copied());
        }
        out
    }

    /// Inverse of [`ParamSet::to_flat`] against this set's shape.
    pub fn with_flat(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat length {} vs {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut it = flat.iter();
        for l in out.layers.iter_mut() {
            for v in l.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(out)
    }

    /// In place `self += scale * src`.
    pub fn axpy_assign(&mut self, scale: f64, src: &ParamSet) -> Result<()> {
        self.check_same_shape(src)?;
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            d.scaled_add(scale, s);
        }
        Ok(())
    }

    /// In place `self = a * self + b * src`.
    pub fn lincomb_assign(&mut self, a: f64, b: f64, src: &ParamSet) -> Result<()> {
        self.check_same_shape(src)?;
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            Zip::from(d).and(s).for_each(|d, &s| *d = a * *d + b * s);
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, scale: f64) {
        for l in self.layers.iter_mut() {
            l.mapv_inplace(|v| v * scale);
        }
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        axpy(self, -1.0, other)
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Zip::from(a).and(b).fold(0.0, |acc, &x, &y| acc + x * y))
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Zip::from(a).and(b).fold(0.0f64, |m, &x, &y| m.max((x - y).abs())))
            .fold(0.0, f64::max))
    }

    /// Snapshot encoding: `u32` layer count, `u32` rows and cols per layer,
    /// then every entry as a little-endian `f64`, layer by layer, row-major.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            let (r, c) = l.dim();
            w.write_all(&(r as u32).to_le_bytes())?;
            w.write_all(&(c as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 8 * self.layers.len() + 8 * self.num_params());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes a snapshot. The first layer index is not part of the encoding
    /// and is set to 0.
    pub fn read_from<R: Read>(mut r: R) -> Result<ParamSet> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        if count == 0 {
            return Err(Error::Format("snapshot declares zero layers".into()));
        }
        let mut dims = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            dims.push((rows, cols));
        }
        let mut layers = Vec::with_capacity(count);
        let mut f64buf = [0u8; 8];
        for (rows, cols) in dims {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut f64buf)?;
                data.push(f64::from_le_bytes(f64buf));
            }
            layers.push(Array2::from_shape_vec((rows, cols), data).expect("sized above"));
        }
        ParamSet::new(layers, 0)
    }
}

/// Elementwise `dst + scale * src`.
pub fn axpy(dst: &ParamSet, scale: f64, src: &ParamSet) -> Result<ParamSet> {
    let mut out = dst.clone();
    out.axpy_assign(scale, src)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn two_layer() -> ParamSet {
        ParamSet::new(vec![array![[1.0, -2.0], [0.5, 3.0]], array![[4.0, 5.0]]], 0).unwrap()
    }

    #[test]
    fn axpy_zero_scale_is_identity() {
        let w = two_layer();
        let g = ParamSet::new(vec![array![[9.0, 9.0], [9.0, 9.0]], array![[9.0, 9.0]]], 0).unwrap();
        assert_eq!(axpy(&w, 0.0, &g).unwrap(), w);
    }

    #[test]
    fn axpy_additive_inverse_is_zero() {
        let w = two_layer();
        let mut neg = w.clone();
        neg.scale_assign(-1.0);
        let z = axpy(&w, 1.0, &neg).unwrap();
        assert!(z.layers().iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn axpy_direct_substitution() {
        let out = axpy(&ParamSet::from_vec(vec![1.0]), 0.5, &ParamSet::from_vec(vec![2.0])).unwrap();
        assert_eq!(out.to_flat(), vec![2.0]);
    }

    #[test]
    fn axpy_rejects_shape_mismatch() {
        let a = ParamSet::from_vec(vec![1.0, 2.0]);
        let b = ParamSet::from_vec(vec![1.0]);
        assert!(matches!(axpy(&a, 1.0, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn snapshot_header_layout() {
        let bytes = two_layer().to_bytes();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 6 * 8);
    }

    #[test]
    fn truncated_snapshot_is_io_error() {
        let bytes = two_layer().to_bytes();
        assert!(matches!(ParamSet::read_from(&bytes[..bytes.len() - 3]), Err(Error::Io(_))));
    }

    proptest! {
        #[test]
        fn snapshot_roundtrip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1e3..1e3));
            let b = Array2::from_shape_fn((1, cols), |_| rng.gen::<f64>());
            let p = ParamSet::new(vec![a, b], 0).unwrap();
            let back = ParamSet::read_from(p.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
