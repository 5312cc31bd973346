//! Batched variable-length frame sequences.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView2, Axis};

/// A batch of variable-length sequences of real-valued frame vectors.
///
/// Items are padded to a common `time` axis; frames at or beyond an item's
/// length are always zero. The frame rate records how many frames correspond
/// to one second of the underlying signal.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    data: Array3<f64>,
    lengths: Vec<usize>,
    frame_rate_hz: f64,
}

impl FeatureSequence {
    /// Builds a batch from padded data, zeroing any frame beyond its item's
    /// length so the padding invariant holds by construction.
    pub fn new(mut data: Array3<f64>, lengths: Vec<usize>, frame_rate_hz: f64) -> Result<Self> {
        let (batch, time, _dim) = data.dim();
        if lengths.len() != batch {
            return Err(Error::Shape(format!(
                "batch {} but {} lengths",
                batch,
                lengths.len()
            )));
        }
        if frame_rate_hz <= 0.0 {
            return Err(Error::Config(format!(
                "frame_rate_hz must be positive, got {frame_rate_hz}"
            )));
        }
        for (b, &len) in lengths.iter().enumerate() {
            if len > time {
                return Err(Error::Shape(format!(
                    "item {b} length {len} exceeds time axis {time}"
                )));
            }
            data.index_axis_mut(Axis(0), b)
                .slice_mut(ndarray::s![len.., ..])
                .fill(0.0);
        }
        Ok(Self {
            data,
            lengths,
            frame_rate_hz,
        })
    }

    /// Builds a batch from per-item matrices (frames x dim), padding to the
    /// longest item.
    pub fn from_items(items: &[Array2<f64>], frame_rate_hz: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let dim = items[0].ncols();
        for (b, it) in items.iter().enumerate() {
            if it.ncols() != dim {
                return Err(Error::Shape(format!(
                    "item {b} has dim {}, expected {dim}",
                    it.ncols()
                )));
            }
        }
        let time = items.iter().map(|it| it.nrows()).max().unwrap_or(0);
        let mut data = Array3::zeros((items.len(), time, dim));
        let mut lengths = Vec::with_capacity(items.len());
        for (b, it) in items.iter().enumerate() {
            data.slice_mut(ndarray::s![b, ..it.nrows(), ..]).assign(it);
            lengths.push(it.nrows());
        }
        Self::new(data, lengths, frame_rate_hz)
    }

    /// Single-item batch.
    pub fn single(item: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        Self::from_items(std::slice::from_ref(&item), frame_rate_hz)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn time(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// View of one item's valid frames (length x dim, padding excluded).
    pub fn item(&self, b: usize) -> ArrayView2<'_, f64> {
        self.data
            .index_axis(Axis(0), b)
            .split_at(Axis(0), self.lengths[b])
            .0
    }

    /// Owned copy of one item's valid frames.
    pub fn item_owned(&self, b: usize) -> Array2<f64> {
        self.item(b).to_owned()
    }
}

/// Records the valid length of each item in a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddingMask {
    lengths: Vec<usize>,
}

impl PaddingMask {
    pub fn from_lengths(lengths: Vec<usize>) -> Self {
        Self { lengths }
    }

    pub fn of(seq: &FeatureSequence) -> Self {
        Self {
            lengths: seq.lengths().to_vec(),
        }
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Errors unless the mask matches the batch's lengths exactly.
    pub fn check(&self, seq: &FeatureSequence) -> Result<()> {
        if self.lengths != seq.lengths() {
            return Err(Error::Shape(format!(
                "mask lengths {:?} do not match batch lengths {:?}",
                self.lengths,
                seq.lengths()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn padding_is_zeroed_on_construction() {
        let mut data = Array3::from_elem((2, 4, 3), 7.0);
        data[[0, 0, 0]] = 1.0;
        let seq = FeatureSequence::new(data, vec![2, 4], 50.0).unwrap();
        assert_eq!(seq.data()[[0, 3, 1]], 0.0);
        assert_eq!(seq.data()[[0, 2, 2]], 0.0);
        assert_eq!(seq.data()[[1, 3, 1]], 7.0);
        assert_eq!(seq.item(0).nrows(), 2);
    }

    #[test]
    fn rejects_bad_lengths_and_rates() {
        let data = Array3::zeros((1, 3, 2));
        assert!(FeatureSequence::new(data.clone(), vec![4], 50.0).is_err());
        assert!(FeatureSequence::new(data.clone(), vec![3], 0.0).is_err());
        assert!(FeatureSequence::new(data, vec![1, 2], 50.0).is_err());
    }

    #[test]
    fn from_items_pads_to_longest() {
        let a = Array2::from_elem((3, 2), 1.0);
        let b = Array2::from_elem((5, 2), 2.0);
        let seq = FeatureSequence::from_items(&[a, b], 6.25).unwrap();
        assert_eq!(seq.time(), 5);
        assert_eq!(seq.lengths(), &[3, 5]);
        assert_eq!(seq.data()[[0, 4, 0]], 0.0);
    }

    #[test]
    fn mask_check_detects_mismatch() {
        let seq = FeatureSequence::new(Array3::zeros((1, 3, 2)), vec![2], 50.0).unwrap();
        assert!(PaddingMask::of(&seq).check(&seq).is_ok());
        assert!(PaddingMask::from_lengths(vec![3]).check(&seq).is_err());
    }
}
